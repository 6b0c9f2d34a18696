use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use gazenlu::corpus::synthetic::{task_spec, SuiteConfig, TASK_NAMES};
use gazenlu::corpus::{
    load_dataset, load_gaze_corpus, make_synthetic_suite, DatasetSpec, GazeRecord, TextInstance,
};
use gazenlu::textenc::Vocab;
use serde_json::{json, Value};

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Task name; built-in synthetic tasks: keyword, pair, count, random.
    #[arg(long, default_value = "keyword")]
    pub task: String,
    /// Directory with `<task>.train.tsv`, `<task>.test.tsv` and `gaze.tsv`.
    /// Without it the synthetic suite is generated in memory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Dataset description (JSON) for tasks that are not built in.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Seed of the in-memory synthetic suite.
    #[arg(long, default_value_t = 42)]
    pub suite_seed: u64,
    /// Existing vocabulary file; built from the gaze and training texts
    /// otherwise.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub vocab_size: usize,
}

pub struct TaskData {
    pub spec: DatasetSpec,
    pub train: Vec<TextInstance>,
    pub test: Vec<TextInstance>,
    pub gaze: Vec<GazeRecord>,
    pub vocab: Vocab,
}

impl DataArgs {
    pub fn echo(&self) -> Value {
        json!({
            "task": self.task,
            "data_dir": self.data_dir,
            "spec": self.spec,
            "suite_seed": self.suite_seed,
            "vocab": self.vocab,
            "vocab_size": self.vocab_size,
        })
    }

    fn spec(&self) -> Result<DatasetSpec> {
        if let Some(p) = &self.spec {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            return serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()));
        }
        if !TASK_NAMES.contains(&self.task.as_str()) {
            bail!(
                "unknown task {:?} (built in: {}); pass --spec for custom data",
                self.task,
                TASK_NAMES.join(", ")
            );
        }
        Ok(task_spec(&self.task)?)
    }

    pub fn load(&self) -> Result<TaskData> {
        let spec = self.spec()?;
        let (train, test, gaze) = match &self.data_dir {
            Some(dir) => {
                let f = |name: String| dir.join(name);
                let gaze_path = f("gaze.tsv".into());
                let gaze = if gaze_path.exists() {
                    load_gaze_corpus(&gaze_path)?
                } else {
                    Vec::new()
                };
                (
                    load_dataset(&f(format!("{}.train.tsv", self.task)), &spec)?,
                    load_dataset(&f(format!("{}.test.tsv", self.task)), &spec)?,
                    gaze,
                )
            }
            None => {
                let suite = make_synthetic_suite(&SuiteConfig {
                    seed: self.suite_seed,
                    ..SuiteConfig::default()
                })?;
                let t = suite.task(&self.task)?;
                (t.train.clone(), t.test.clone(), suite.gaze)
            }
        };
        let vocab = match &self.vocab {
            Some(p) => Vocab::load(p)?,
            None => build_vocab(&gaze, &train, self.vocab_size)?,
        };
        Ok(TaskData {
            spec,
            train,
            test,
            gaze,
            vocab,
        })
    }
}

pub fn build_vocab(gaze: &[GazeRecord], train: &[TextInstance], size: usize) -> Result<Vocab> {
    let texts = gaze.iter().map(|r| r.text.as_str()).chain(
        train
            .iter()
            .flat_map(|t| std::iter::once(t.text1.as_str()).chain(t.text2.as_deref())),
    );
    Ok(Vocab::build(texts, size)?)
}

/// Lines of text from plain files, or the text columns of TSV files with a
/// `text`, `sentence1` or `sentence2` header.
pub fn read_texts(path: &Path) -> Result<Vec<String>> {
    let raw =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = raw.lines().filter(|l| !l.trim().is_empty());
    let Some(first) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Vec<&str> = first.split('\t').collect();
    let cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| matches!(h.trim(), "text" | "sentence1" | "sentence2"))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Ok(raw
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect());
    }
    Ok(lines
        .flat_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            cols.iter()
                .filter_map(move |&c| f.get(c).map(|s| s.to_string()))
                .collect::<Vec<_>>()
        })
        .collect())
}
