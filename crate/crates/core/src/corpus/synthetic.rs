//! Synthetic stand-ins: a Markov-saccade gaze corpus with a known
//! generating distribution, and small text tasks with planted signals.

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSpec, Label, LabelKind, MetricKind, TextInstance};
use super::gaze::GazeRecord;
use crate::error::{Error, Result};
use crate::rng::{RngState, Stream};

/// Planted token of the keyword task. Built from letters the lexicon never
/// uses, so it cannot occur by chance.
pub const KEYWORD: &str = "wow";
pub const PAIR_MARKERS: [&str; 5] = ["xa", "xe", "xi", "xo", "xu"];
pub const COUNT_TOKEN: &str = "yip";
pub const MAX_COUNT: usize = 4;

const CONSONANTS: &[u8] = b"bdfgklmnprstv";
const VOWELS: &[u8] = b"aeiou";
const PATH_CAP: usize = 64;

/// Saccade model: from word `p`, move to `p+1`, `p+2`, or `p-1`. A
/// regression from the first word is a refixation; a move past the last
/// word ends the path. Every path starts on word 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovGaze {
    pub p_forward: f64,
    pub p_regress: f64,
    pub p_skip: f64,
}

impl Default for MarkovGaze {
    fn default() -> Self {
        Self {
            p_forward: 0.6,
            p_regress: 0.25,
            p_skip: 0.15,
        }
    }
}

/// Outcome of one step: a word index or `None` for the end of the path.
pub type Move = Option<usize>;

impl MarkovGaze {
    pub fn validate(&self) -> Result<()> {
        let p = [self.p_forward, self.p_regress, self.p_skip];
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x))
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "saccade probabilities {p:?} must sum to 1"
            )));
        }
        Ok(())
    }

    /// Entropy of the move distribution, in nats.
    pub fn entropy(&self) -> f64 {
        [self.p_forward, self.p_regress, self.p_skip]
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// Aggregated next-step distribution from `pos` (`None` = before the
    /// first fixation) in a sentence of `n_words` words.
    pub fn transitions(&self, pos: Option<usize>, n_words: usize) -> Vec<(Move, f64)> {
        let Some(p) = pos else {
            return vec![(Some(0), 1.0)];
        };
        let land = |t: usize| (t < n_words).then_some(t);
        let moves = [
            (land(p + 1), self.p_forward),
            (Some(p.saturating_sub(1)), self.p_regress),
            (land(p + 2), self.p_skip),
        ];
        let mut out: Vec<(Move, f64)> = Vec::new();
        for (m, pr) in moves {
            if pr == 0.0 {
                continue;
            }
            match out.iter_mut().find(|(x, _)| *x == m) {
                Some(e) => e.1 += pr,
                None => out.push((m, pr)),
            }
        }
        out
    }

    fn step(&self, pos: usize, n_words: usize, s: &mut Stream) -> Move {
        match s.categorical(&[self.p_forward, self.p_regress, self.p_skip]) {
            0 => (pos + 1 < n_words).then_some(pos + 1),
            1 => Some(pos.saturating_sub(1)),
            _ => (pos + 2 < n_words).then_some(pos + 2),
        }
    }

    /// Sample one complete path. Paths reaching the internal length cap are
    /// redrawn, so every returned path ends with a natural stop.
    pub fn sample_path(&self, n_words: usize, s: &mut Stream) -> Vec<usize> {
        loop {
            let mut path = vec![0];
            while path.len() < PATH_CAP {
                match self.step(*path.last().unwrap(), n_words, s) {
                    Some(t) => path.push(t),
                    None => return path,
                }
            }
        }
    }

    /// Negative log-likelihood of `path` followed by the end of the path,
    /// and the number of scored steps.
    pub fn path_nll(&self, path: &[usize], n_words: usize) -> (f64, usize) {
        let mut pos = None;
        let mut nll = 0.0;
        for target in path.iter().map(|&f| Some(f)).chain(std::iter::once(None)) {
            let p = self
                .transitions(pos, n_words)
                .into_iter()
                .find(|(m, _)| *m == target)
                .map_or(0.0, |(_, p)| p);
            nll -= p.ln();
            pos = target;
        }
        (nll, path.len() + 1)
    }

    /// Mean per-step NLL of the generating model over `records`.
    pub fn mean_step_nll(&self, records: &[GazeRecord]) -> f64 {
        let (mut total, mut steps) = (0.0, 0usize);
        for r in records {
            let (n, s) = self.path_nll(&r.fixations, r.n_words());
            total += n;
            steps += s;
        }
        total / steps as f64
    }
}

/// Deterministic pseudo-word lexicon of two-syllable words.
pub fn lexicon(size: usize, seed: u64) -> Vec<String> {
    let mut all = Vec::new();
    for &c1 in CONSONANTS {
        for &v1 in VOWELS {
            for &c2 in CONSONANTS {
                for &v2 in VOWELS {
                    all.push(String::from_utf8(vec![c1, v1, c2, v2]).unwrap());
                }
            }
        }
    }
    RngState::new(seed, 0x6c6578).rng().shuffle(&mut all);
    all.truncate(size.min(all.len()));
    all
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub gaze_sentences: usize,
    pub readers: usize,
    pub train: usize,
    pub test: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub lexicon: usize,
    pub markov: MarkovGaze,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            gaze_sentences: 400,
            readers: 2,
            train: 2000,
            test: 500,
            min_words: 5,
            max_words: 10,
            lexicon: 300,
            markov: MarkovGaze::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: DatasetSpec,
    pub train: Vec<TextInstance>,
    pub test: Vec<TextInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub config: SuiteConfig,
    pub gaze: Vec<GazeRecord>,
    pub tasks: Vec<SyntheticTask>,
}

impl SyntheticSuite {
    pub fn task(&self, name: &str) -> Result<&SyntheticTask> {
        self.tasks
            .iter()
            .find(|t| t.spec.name == name)
            .ok_or_else(|| Error::Config(format!("no synthetic task named {name:?}")))
    }

    /// Every text in the suite, for vocabulary building.
    pub fn texts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.gaze.iter().map(|r| r.text.as_str()).collect();
        for t in &self.tasks {
            for i in t.train.iter().chain(&t.test) {
                out.push(&i.text1);
                if let Some(t2) = &i.text2 {
                    out.push(t2);
                }
            }
        }
        out
    }
}

pub const TASK_NAMES: [&str; 4] = ["keyword", "pair", "count", "random"];

pub fn task_spec(name: &str) -> Result<DatasetSpec> {
    let (pair, labels, metric) = match name {
        "keyword" => (false, LabelKind::Classes(2), MetricKind::Accuracy),
        "pair" => (true, LabelKind::Classes(2), MetricKind::F1),
        "count" => (
            false,
            LabelKind::Range {
                lo: 0.0,
                hi: MAX_COUNT as f64,
            },
            MetricKind::Spearman,
        ),
        "random" => (false, LabelKind::Classes(2), MetricKind::Accuracy),
        _ => return Err(Error::Config(format!("unknown synthetic task {name:?}"))),
    };
    Ok(DatasetSpec {
        name: name.into(),
        pair,
        labels,
        metric,
    })
}

struct Gen<'a> {
    cfg: &'a SuiteConfig,
    lex: &'a [String],
    s: Stream,
}

impl Gen<'_> {
    fn sentence(&mut self) -> Vec<String> {
        let span = self.cfg.max_words - self.cfg.min_words + 1;
        let n = self.cfg.min_words + self.s.below(span);
        (0..n)
            .map(|_| self.lex[self.s.below(self.lex.len())].clone())
            .collect()
    }

    fn plant(&mut self, words: &mut [String], token: &str) {
        let i = self.s.below(words.len());
        words[i] = token.to_string();
    }

    /// Balanced binary labels in random order.
    fn balanced(&mut self, n: usize) -> Vec<usize> {
        let mut l: Vec<usize> = (0..n).map(|i| i % 2).collect();
        self.s.shuffle(&mut l);
        l
    }

    fn keyword(&mut self, n: usize, tag: &str) -> Vec<TextInstance> {
        let labels = self.balanced(n);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, y)| {
                let mut w = self.sentence();
                if y == 1 {
                    self.plant(&mut w, KEYWORD);
                }
                TextInstance {
                    id: format!("{tag}{i}"),
                    text1: w.join(" "),
                    text2: None,
                    label: Label::Class(y),
                }
            })
            .collect()
    }

    fn pair(&mut self, n: usize, tag: &str) -> Vec<TextInstance> {
        let labels = self.balanced(n);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, y)| {
                let m1 = self.s.below(PAIR_MARKERS.len());
                let m2 = if y == 1 {
                    m1
                } else {
                    (m1 + 1 + self.s.below(PAIR_MARKERS.len() - 1)) % PAIR_MARKERS.len()
                };
                let mut a = self.sentence();
                self.plant(&mut a, PAIR_MARKERS[m1]);
                let mut b = self.sentence();
                self.plant(&mut b, PAIR_MARKERS[m2]);
                TextInstance {
                    id: format!("{tag}{i}"),
                    text1: a.join(" "),
                    text2: Some(b.join(" ")),
                    label: Label::Class(y),
                }
            })
            .collect()
    }

    fn count(&mut self, n: usize, tag: &str) -> Vec<TextInstance> {
        (0..n)
            .map(|i| {
                let mut w = self.sentence();
                let c = self.s.below(MAX_COUNT + 1).min(w.len());
                let mut slots: Vec<usize> = (0..w.len()).collect();
                self.s.shuffle(&mut slots);
                for &j in &slots[..c] {
                    w[j] = COUNT_TOKEN.to_string();
                }
                TextInstance {
                    id: format!("{tag}{i}"),
                    text1: w.join(" "),
                    text2: None,
                    label: Label::Real(c as f64),
                }
            })
            .collect()
    }

    fn random(&mut self, n: usize, tag: &str) -> Vec<TextInstance> {
        let mut items = self.keyword(n, tag);
        let labels = self.balanced(n);
        for (it, y) in items.iter_mut().zip(labels) {
            it.label = Label::Class(y);
        }
        items
    }
}

pub fn make_gaze_corpus(cfg: &SuiteConfig, lex: &[String]) -> Result<Vec<GazeRecord>> {
    cfg.markov.validate()?;
    let mut g = Gen {
        cfg,
        lex,
        s: RngState::new(cfg.seed, 0x67617a65).rng(),
    };
    let mut out = Vec::with_capacity(cfg.gaze_sentences * cfg.readers);
    for i in 0..cfg.gaze_sentences {
        let text = g.sentence().join(" ");
        let n = text.split(' ').count();
        for r in 0..cfg.readers {
            out.push(GazeRecord {
                sentence_id: format!("g{i}"),
                reader_id: format!("r{r}"),
                text: text.clone(),
                fixations: cfg.markov.sample_path(n, &mut g.s),
            });
        }
    }
    Ok(out)
}

pub fn make_task(cfg: &SuiteConfig, lex: &[String], name: &str) -> Result<SyntheticTask> {
    let spec = task_spec(name)?;
    let stream = TASK_NAMES.iter().position(|&t| t == name).unwrap() as u64;
    let mut g = Gen {
        cfg,
        lex,
        s: RngState::new(cfg.seed, 0x7461736b).derive(&[stream]).rng(),
    };
    let mut build = |n: usize, tag: &str| match name {
        "keyword" => g.keyword(n, tag),
        "pair" => g.pair(n, tag),
        "count" => g.count(n, tag),
        _ => g.random(n, tag),
    };
    let train = build(cfg.train, &format!("{name}-train-"));
    let test = build(cfg.test, &format!("{name}-test-"));
    Ok(SyntheticTask { spec, train, test })
}

pub fn make_synthetic_suite(cfg: &SuiteConfig) -> Result<SyntheticSuite> {
    if cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::Config(format!(
            "bad sentence length range {}..={}",
            cfg.min_words, cfg.max_words
        )));
    }
    let lex = lexicon(cfg.lexicon, cfg.seed);
    if lex.is_empty() {
        return Err(Error::Config("lexicon size must be positive".into()));
    }
    let gaze = make_gaze_corpus(cfg, &lex)?;
    let tasks = TASK_NAMES
        .iter()
        .map(|n| make_task(cfg, &lex, n))
        .collect::<Result<_>>()?;
    Ok(SyntheticSuite {
        config: cfg.clone(),
        gaze,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig {
            gaze_sentences: 50,
            train: 1000,
            test: 100,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn entropy_of_default_model() {
        let h = MarkovGaze::default().entropy();
        let expect = -(0.6f64 * 0.6f64.ln() + 0.25 * 0.25f64.ln() + 0.15 * 0.15f64.ln());
        assert!((h - expect).abs() < 1e-12);
        assert!((h - 0.93764).abs() < 1e-5);
    }

    #[test]
    fn pure_forward_model_reads_left_to_right() {
        let cfg = SuiteConfig {
            markov: MarkovGaze {
                p_forward: 1.0,
                p_regress: 0.0,
                p_skip: 0.0,
            },
            ..small()
        };
        let suite = make_synthetic_suite(&cfg).unwrap();
        for r in &suite.gaze {
            let expect: Vec<usize> = (0..r.n_words()).collect();
            assert_eq!(r.fixations, expect);
            assert_eq!(cfg.markov.path_nll(&r.fixations, r.n_words()).0, 0.0);
        }
    }

    #[test]
    fn transitions_are_distributions() {
        let m = MarkovGaze::default();
        for w in 1..6 {
            for p in 0..w {
                let t = m.transitions(Some(p), w);
                assert!((t.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(
            m.transitions(Some(0), 1),
            vec![(None, 0.75), (Some(0), 0.25)]
        );
    }

    #[test]
    fn sampled_paths_have_positive_likelihood() {
        let suite = make_synthetic_suite(&small()).unwrap();
        for r in &suite.gaze {
            r.validate().unwrap();
            assert!(suite
                .config
                .markov
                .path_nll(&r.fixations, r.n_words())
                .0
                .is_finite());
        }
        // boundary steps are less uncertain than interior ones
        let nll = suite.config.markov.mean_step_nll(&suite.gaze);
        assert!(nll < suite.config.markov.entropy());
    }

    #[test]
    fn keyword_task_is_balanced_and_planted() {
        let suite = make_synthetic_suite(&small()).unwrap();
        let t = suite.task("keyword").unwrap();
        let pos = t
            .train
            .iter()
            .filter(|i| i.label == Label::Class(1))
            .count();
        assert!((450..=550).contains(&pos));
        for i in &t.train {
            let has = i.text1.split(' ').any(|w| w == KEYWORD);
            assert_eq!(has, i.label == Label::Class(1));
        }
    }

    #[test]
    fn pair_labels_follow_markers() {
        let suite = make_synthetic_suite(&small()).unwrap();
        let marker = |s: &str| {
            s.split(' ')
                .find(|w| PAIR_MARKERS.contains(w))
                .map(String::from)
        };
        for i in &suite.task("pair").unwrap().train {
            let same = marker(&i.text1) == marker(i.text2.as_deref().unwrap());
            assert_eq!(same, i.label == Label::Class(1));
        }
    }

    #[test]
    fn count_labels_match_occurrences() {
        let suite = make_synthetic_suite(&small()).unwrap();
        for i in &suite.task("count").unwrap().train {
            let c = i.text1.split(' ').filter(|w| *w == COUNT_TOKEN).count();
            assert_eq!(Label::Real(c as f64), i.label);
        }
    }

    #[test]
    fn suite_is_deterministic() {
        assert_eq!(
            make_synthetic_suite(&small()).unwrap(),
            make_synthetic_suite(&small()).unwrap()
        );
        let other = SuiteConfig { seed: 7, ..small() };
        assert_ne!(
            make_synthetic_suite(&other).unwrap().gaze,
            make_synthetic_suite(&small()).unwrap().gaze
        );
    }
}
