//! Scanpath generator: word encoder, fixation-history encoder, cross
//! attention, and a decoder over saccade offsets, with hard and
//! Gumbel-softmax sampling.

mod model;
mod offsets;
mod sampling;

use serde::{Deserialize, Serialize};

pub use model::{
    argmax, default_max_fixations, shift_bank, soft_convolution_step, start_shift, Generator,
    GeneratorConfig, GumbelPath, HistoryState, WordContext, GEN_PREFIX,
};
pub use offsets::{gold_classes, gold_masks, OffsetSpace, SaccadeStep, Walker, VIRTUAL_START};
pub use sampling::{
    draw_gumbels, gumbel_argmax, gumbel_bridge, relaxed_sample, sample_class, BridgeMode,
    GumbelConfig,
};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// A fixation sequence over the words of one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scanpath {
    pub sentence_id: String,
    pub fixations: Vec<usize>,
    /// `false` when the path hit the fixation cap.
    pub stopped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_weights: Option<Vec<Vec<f64>>>,
}

impl Scanpath {
    pub fn hard(sentence_id: impl Into<String>, fixations: Vec<usize>, stopped: bool) -> Self {
        Self {
            sentence_id: sentence_id.into(),
            fixations,
            stopped,
            soft_weights: None,
        }
    }

    pub fn validate(&self, n_words: usize) -> Result<()> {
        if self.fixations.is_empty() {
            return Err(Error::Empty(format!(
                "scanpath {} has no fixations",
                self.sentence_id
            )));
        }
        if let Some(&f) = self.fixations.iter().find(|&&f| f >= n_words) {
            return Err(Error::FixationOutOfRange {
                index: f,
                words: n_words,
                context: format!("scanpath {}", self.sentence_id),
            });
        }
        if let Some(rows) = &self.soft_weights {
            for (i, r) in rows.iter().enumerate() {
                let s: f64 = r.iter().sum();
                if r.len() != n_words || r.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "scanpath {} soft row {i} is not a distribution over {n_words} words",
                        self.sentence_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Hard sampling driven by an arbitrary logits source; `logits_for` sees the
/// walker state before each decision.
pub fn sample_with_logits(
    space: OffsetSpace,
    n_words: usize,
    max_fixations: usize,
    rng: RngState,
    mut logits_for: impl FnMut(&Walker) -> Vec<f64>,
) -> Result<(Vec<usize>, bool)> {
    if max_fixations == 0 {
        return Err(Error::Config("max_fixations must be >= 1".into()));
    }
    let mut stream = rng.rng();
    let mut walker = Walker::new(space, n_words, max_fixations);
    while !walker.done() {
        let logits = logits_for(&walker);
        let class = sample_class(&logits, &walker.valid(), &mut stream);
        walker.apply(class)?;
    }
    Ok((walker.fixations, walker.stopped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_forcing_logits_trace() {
        let space = OffsetSpace::new(4).unwrap();
        let (path, stopped) = sample_with_logits(space, 3, 6, RngState::new(3, 3), |_| {
            let mut l = vec![0.0; space.n_classes()];
            l[space.class_of(1).unwrap()] = 100.0;
            l[space.stop()] = 50.0;
            l
        })
        .unwrap();
        assert_eq!(path, vec![0, 1, 2]);
        assert!(stopped);
    }

    #[test]
    fn cap_bounds_any_parameterization() {
        let space = OffsetSpace::new(3).unwrap();
        // never stop voluntarily
        let (path, stopped) = sample_with_logits(space, 4, 5, RngState::new(1, 1), |_| {
            let mut l = vec![0.0; space.n_classes()];
            l[space.stop()] = -1e6;
            l
        })
        .unwrap();
        assert_eq!(path.len(), 5);
        assert!(!stopped);
    }

    #[test]
    fn scanpath_validation_and_json() {
        let sp = Scanpath::hard("s1", vec![0, 2, 1], true);
        sp.validate(3).unwrap();
        assert!(sp.validate(2).is_err());
        let j = serde_json::to_string(&sp).unwrap();
        assert_eq!(
            j,
            r#"{"sentence_id":"s1","fixations":[0,2,1],"stopped":true}"#
        );
        let mut soft = sp.clone();
        soft.soft_weights = Some(vec![vec![0.5, 0.4, 0.0]; 3]);
        assert!(soft.validate(3).is_err());
    }

    #[test]
    fn default_cap() {
        assert_eq!(default_max_fixations(3), 6);
        assert_eq!(default_max_fixations(40), 64);
    }
}
