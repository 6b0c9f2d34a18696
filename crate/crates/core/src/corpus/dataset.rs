use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tsv::{check_field, Table};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    F1,
    Matthews,
    Spearman,
    Auc,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "accuracy",
            Self::F1 => "f1",
            Self::Matthews => "matthews",
            Self::Spearman => "spearman",
            Self::Auc => "auc",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "accuracy" => Self::Accuracy,
            "f1" => Self::F1,
            "matthews" => Self::Matthews,
            "spearman" => Self::Spearman,
            "auc" => Self::Auc,
            _ => return Err(Error::Config(format!("unknown metric {s:?}"))),
        })
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Classes(usize),
    Range { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Real(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Self::Class(c) => Some(c),
            Self::Real(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Self::Class(c) => c as f64,
            Self::Real(v) => v,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Class(c) => write!(f, "{c}"),
            Self::Real(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub pair: bool,
    pub labels: LabelKind,
    pub metric: MetricKind,
}

impl DatasetSpec {
    pub fn n_outputs(&self) -> usize {
        match self.labels {
            LabelKind::Classes(n) => n,
            LabelKind::Range { .. } => 1,
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.labels, LabelKind::Range { .. })
    }

    pub fn parse_label(&self, s: &str) -> Result<Label> {
        let s = s.trim();
        match self.labels {
            LabelKind::Classes(n) => {
                let c: usize = s
                    .parse()
                    .map_err(|_| Error::Label(format!("{s:?} is not a class id")))?;
                if c >= n {
                    return Err(Error::Label(format!("class {c} for a {n}-class task")));
                }
                Ok(Label::Class(c))
            }
            LabelKind::Range { lo, hi } => {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::Label(format!("{s:?} is not numeric")))?;
                if !(lo..=hi).contains(&v) {
                    return Err(Error::Label(format!("{v} outside [{lo}, {hi}]")));
                }
                Ok(Label::Real(v))
            }
        }
    }

    pub fn check_label(&self, l: Label) -> Result<()> {
        match (self.labels, l) {
            (LabelKind::Classes(n), Label::Class(c)) if c < n => Ok(()),
            (LabelKind::Range { lo, hi }, Label::Real(v)) if (lo..=hi).contains(&v) => Ok(()),
            _ => Err(Error::Label(format!("{l} does not fit task {}", self.name))),
        }
    }

    /// Regression targets rescaled to `[0, 1]`.
    pub fn normalize(&self, v: f64) -> f64 {
        match self.labels {
            LabelKind::Range { lo, hi } => (v - lo) / (hi - lo),
            LabelKind::Classes(_) => v,
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        match self.labels {
            LabelKind::Range { lo, hi } => lo + v * (hi - lo),
            LabelKind::Classes(_) => v,
        }
    }
}

/// One labelled example; `text2` is set for sentence-pair tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub id: String,
    pub text1: String,
    pub text2: Option<String>,
    pub label: Label,
}

/// TSV with header `[id] sentence1 [sentence2] label`.
pub fn parse_dataset(path: &str, text: &str, spec: &DatasetSpec) -> Result<Vec<TextInstance>> {
    let t = Table::parse(path, text)?;
    let id = t.column("id");
    let s1 = t.require("sentence1")?;
    let s2 = if spec.pair {
        Some(t.require("sentence2")?)
    } else {
        None
    };
    let lab = t.require("label")?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (n, (line, f)) in t.rows.iter().enumerate() {
        let label = spec
            .parse_label(&f[lab])
            .map_err(|e| t.err(*line, e.to_string()))?;
        let text1 = f[s1].clone();
        if text1.trim().is_empty() {
            return Err(t.err(*line, "empty sentence1"));
        }
        let text2 = s2.map(|c| f[c].clone());
        if text2.as_deref().is_some_and(|s| s.trim().is_empty()) {
            return Err(t.err(*line, "empty sentence2"));
        }
        out.push(TextInstance {
            id: id.map_or_else(|| format!("{}-{n}", spec.name), |c| f[c].clone()),
            text1,
            text2,
            label,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, spec: &DatasetSpec) -> Result<Vec<TextInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&path.display().to_string(), &text, spec)
}

pub fn dataset_to_string(spec: &DatasetSpec, items: &[TextInstance]) -> Result<String> {
    let mut s = String::from(if spec.pair {
        "id\tsentence1\tsentence2\tlabel\n"
    } else {
        "id\tsentence1\tlabel\n"
    });
    for it in items {
        spec.check_label(it.label)?;
        check_field(&it.id, "id")?;
        check_field(&it.text1, "sentence1")?;
        match (&it.text2, spec.pair) {
            (Some(t2), true) => {
                check_field(t2, "sentence2")?;
                writeln!(s, "{}\t{}\t{}\t{}", it.id, it.text1, t2, it.label).unwrap();
            }
            (None, false) => writeln!(s, "{}\t{}\t{}", it.id, it.text1, it.label).unwrap(),
            _ => {
                return Err(Error::Config(format!(
                    "instance {} does not match the pair setting of {}",
                    it.id, spec.name
                )))
            }
        }
    }
    Ok(s)
}

pub fn write_dataset(path: &Path, spec: &DatasetSpec, items: &[TextInstance]) -> Result<()> {
    std::fs::write(path, dataset_to_string(spec, items)?).map_err(|e| Error::io(path, e))
}
