use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;
use crate::textenc::EncodedText;

/// Provenance of one row of a reordered sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRow {
    pub step: usize,
    pub word: usize,
    pub token: usize,
}

/// Token rows visited by `fixations`, word pieces left to right.
pub fn reorder_sources(enc: &EncodedText, fixations: &[usize]) -> Result<Vec<SourceRow>> {
    let w = enc.n_words();
    let mut out = Vec::new();
    for (step, &word) in fixations.iter().enumerate() {
        let &(s, e) = enc
            .word_spans
            .get(word)
            .ok_or_else(|| Error::FixationOutOfRange {
                index: word,
                words: w,
                context: format!("reorder step {step}"),
            })?;
        out.extend((s..e).map(|token| SourceRow { step, word, token }));
    }
    Ok(out)
}

/// Hard reordering: a direct row gather from the `T x d` token matrix.
pub fn reorder_gather<F: Real>(
    g: &mut Graph<'_, F>,
    tokens: Var,
    enc: &EncodedText,
    fixations: &[usize],
) -> Result<Var> {
    let src = reorder_sources(enc, fixations)?;
    if src.is_empty() {
        return Err(Error::Empty("scanpath has no fixations".into()));
    }
    let idx: Vec<usize> = src.iter().map(|r| r.token).collect();
    Ok(g.gather_rows(tokens, &idx))
}

/// Reordering through per-step word weights (`1 x W` each). Piece `k` of
/// the fixated word is `weights[t] x P_k`, where row `j` of `P_k` is piece
/// `min(k, width_j - 1)` of word `j`. For one-hot weights this equals
/// [`reorder_gather`] exactly, and gradients reach the weights.
pub fn reorder_mixture<F: Real>(
    g: &mut Graph<'_, F>,
    tokens: Var,
    enc: &EncodedText,
    fixations: &[usize],
    weights: &[Var],
) -> Result<Var> {
    if weights.len() != fixations.len() {
        return Err(Error::Config(format!(
            "{} weight rows for {} fixations",
            weights.len(),
            fixations.len()
        )));
    }
    let src = reorder_sources(enc, fixations)?;
    if src.is_empty() {
        return Err(Error::Empty("scanpath has no fixations".into()));
    }
    let n = fixations.len();
    let depth = fixations.iter().map(|&w| enc.span_width(w)).max().unwrap();
    let s = g.concat_rows(weights);
    let mut pieces = Vec::with_capacity(depth);
    for k in 0..depth {
        let idx: Vec<usize> = enc
            .word_spans
            .iter()
            .map(|&(a, b)| a + k.min(b - a - 1))
            .collect();
        let p = g.gather_rows(tokens, &idx);
        pieces.push(g.matmul(s, p));
    }
    let stacked = if depth == 1 {
        pieces[0]
    } else {
        g.concat_rows(&pieces)
    };
    let mut k_of_step = vec![0usize; n];
    let order: Vec<usize> = src
        .iter()
        .map(|r| {
            let k = k_of_step[r.step];
            k_of_step[r.step] += 1;
            k * n + r.step
        })
        .collect();
    Ok(g.gather_rows(stacked, &order))
}

/// Soft reordering: one row per step, `weights[t] x words`.
pub fn reorder_soft<F: Real>(g: &mut Graph<'_, F>, words: Var, weights: &[Var]) -> Result<Var> {
    if weights.is_empty() {
        return Err(Error::Empty("scanpath has no fixations".into()));
    }
    let s = g.concat_rows(weights);
    Ok(g.matmul(s, words))
}
