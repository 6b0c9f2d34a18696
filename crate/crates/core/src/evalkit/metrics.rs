use crate::corpus::{Label, MetricKind};
use crate::error::{Error, Result};

/// Binary confusion counts with label 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_pairs(pred: &[usize], gold: &[usize]) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`; 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    /// Matthews correlation; 0 when any margin is empty.
    pub fn matthews(&self) -> f64 {
        let (tp, fp, fn_, tn) = (
            self.tp as f64,
            self.fp as f64,
            self.fn_ as f64,
            self.tn as f64,
        );
        let d = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if d == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / d.sqrt()
        }
    }
}

fn check_len(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("{a} predictions for {b} labels")));
    }
    if a < min {
        return Err(Error::Metric(format!("need at least {min} items, got {a}")));
    }
    Ok(())
}

fn check_binary(gold: &[usize]) -> Result<()> {
    match gold.iter().find(|&&g| g > 1) {
        Some(g) => Err(Error::Metric(format!("binary metric given label {g}"))),
        None => Ok(()),
    }
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_len(pred.len(), gold.len(), 1)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

pub fn f1(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_len(pred.len(), gold.len(), 1)?;
    check_binary(gold)?;
    Ok(Confusion::from_pairs(pred, gold).f1())
}

pub fn matthews(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_len(pred.len(), gold.len(), 2)?;
    check_binary(gold)?;
    Ok(Confusion::from_pairs(pred, gold).matthews())
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Pearson correlation of average ranks. A constant input gives 0.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_len(pred.len(), gold.len(), 2)?;
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite value".into()));
    }
    Ok(pearson(&average_ranks(pred), &average_ranks(gold)))
}

/// Normalized Mann-Whitney U with half credit for tied scores. Errors when
/// only one class is present.
pub fn auc(scores: &[f64], gold: &[usize]) -> Result<f64> {
    check_len(scores.len(), gold.len(), 2)?;
    check_binary(gold)?;
    let pos = gold.iter().filter(|&&g| g == 1).count();
    let neg = gold.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(
            "AUC is undefined when only one class is present".into(),
        ));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(gold)
        .filter(|(_, &g)| g == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Score head outputs against gold labels. Classes are the argmax of the
/// averaged logits; AUC uses the positive-class logit; Spearman uses the
/// single regression output.
pub fn score(kind: MetricKind, outputs: &[Vec<f64>], gold: &[Label]) -> Result<f64> {
    let classes = || -> Result<Vec<usize>> {
        gold.iter()
            .map(|l| {
                l.class()
                    .ok_or_else(|| Error::Metric(format!("{kind} needs class labels")))
            })
            .collect()
    };
    let pred = || outputs.iter().map(|o| argmax(o)).collect::<Vec<_>>();
    match kind {
        MetricKind::Accuracy => accuracy(&pred(), &classes()?),
        MetricKind::F1 => f1(&pred(), &classes()?),
        MetricKind::Matthews => matthews(&pred(), &classes()?),
        MetricKind::Auc => {
            let s: Vec<f64> = outputs
                .iter()
                .map(|o| {
                    o.get(1)
                        .copied()
                        .ok_or_else(|| Error::Metric("AUC needs two outputs".into()))
                })
                .collect::<Result<_>>()?;
            auc(&s, &classes()?)
        }
        MetricKind::Spearman => {
            let p: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            let g: Vec<f64> = gold.iter().map(|l| l.value()).collect();
            spearman(&p, &g)
        }
    }
}
