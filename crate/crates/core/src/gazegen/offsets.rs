use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, MASK_NEG};

/// Saccade classes: offsets `-(L_max-1) ..= L_max-1` followed by `STOP`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetSpace {
    l_max: usize,
}

/// Position of the reader before the first fixation.
pub const VIRTUAL_START: i64 = -1;

fn origin(pos: Option<usize>) -> i64 {
    pos.map_or(VIRTUAL_START, |p| p as i64)
}

impl OffsetSpace {
    pub fn new(l_max: usize) -> Result<Self> {
        if l_max < 2 {
            return Err(Error::Config(format!("l_max must be >= 2, got {l_max}")));
        }
        Ok(Self { l_max })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn n_offsets(&self) -> usize {
        2 * self.l_max - 1
    }

    pub fn n_classes(&self) -> usize {
        2 * self.l_max
    }

    pub fn stop(&self) -> usize {
        2 * self.l_max - 1
    }

    pub fn class_of(&self, offset: i64) -> Option<usize> {
        let r = self.l_max as i64 - 1;
        (offset.abs() <= r).then(|| (offset + r) as usize)
    }

    /// `None` for `STOP`.
    pub fn offset_of(&self, class: usize) -> Option<i64> {
        (class < self.n_offsets()).then(|| class as i64 - (self.l_max as i64 - 1))
    }

    /// Word reached by `class` from `pos`, if it lies inside the sentence.
    pub fn landing(&self, pos: Option<usize>, class: usize, n_words: usize) -> Option<usize> {
        let t = origin(pos) + self.offset_of(class)?;
        (0..n_words as i64).contains(&t).then_some(t as usize)
    }

    /// Validity per class. From the virtual start only entries into the
    /// sentence are allowed; afterwards `STOP` is always valid.
    pub fn valid_mask(&self, pos: Option<usize>, n_words: usize) -> Vec<bool> {
        let mut m: Vec<bool> = (0..self.n_offsets())
            .map(|c| self.landing(pos, c, n_words).is_some())
            .collect();
        m.push(pos.is_some());
        m
    }

    /// For each word, the class that lands on it from `pos`.
    pub fn word_classes(&self, pos: Option<usize>, n_words: usize) -> Vec<Option<usize>> {
        (0..n_words)
            .map(|j| self.class_of(j as i64 - origin(pos)))
            .collect()
    }
}

/// One decoding step: logits over all classes plus their validity.
#[derive(Clone, Debug, PartialEq)]
pub struct SaccadeStep {
    pub logits: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl SaccadeStep {
    pub fn new(logits: Vec<f64>, valid_mask: Vec<bool>) -> Self {
        assert_eq!(
            logits.len(),
            valid_mask.len(),
            "logits and mask lengths differ"
        );
        Self { logits, valid_mask }
    }

    /// Masked softmax using the additive mask surrogate.
    pub fn probs(&self) -> Vec<f64> {
        let mut z: Vec<f64> = self
            .logits
            .iter()
            .zip(&self.valid_mask)
            .map(|(&l, &v)| if v { l } else { l + MASK_NEG })
            .collect();
        softmax_in_place(&mut z);
        z
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// Position bookkeeping shared by every sampler.
#[derive(Clone, Debug)]
pub struct Walker {
    pub space: OffsetSpace,
    pub n_words: usize,
    pub max_fixations: usize,
    pub pos: Option<usize>,
    pub fixations: Vec<usize>,
    pub stopped: bool,
}

impl Walker {
    pub fn new(space: OffsetSpace, n_words: usize, max_fixations: usize) -> Self {
        Self {
            space,
            n_words,
            max_fixations,
            pos: None,
            fixations: Vec::new(),
            stopped: false,
        }
    }

    pub fn done(&self) -> bool {
        self.stopped || self.fixations.len() >= self.max_fixations
    }

    pub fn valid(&self) -> Vec<bool> {
        self.space.valid_mask(self.pos, self.n_words)
    }

    /// Take `class`; returns the landed word, or `None` on `STOP`.
    pub fn apply(&mut self, class: usize) -> Result<Option<usize>> {
        if class == self.space.stop() {
            if self.pos.is_none() {
                return Err(Error::Config(
                    "STOP is invalid before the first fixation".into(),
                ));
            }
            self.stopped = true;
            return Ok(None);
        }
        let step = self.fixations.len();
        let w =
            self.space
                .landing(self.pos, class, self.n_words)
                .ok_or(Error::OffsetOutOfRange {
                    step,
                    offset: self.space.offset_of(class).unwrap_or(i64::MAX),
                })?;
        self.place(w);
        Ok(Some(w))
    }

    /// Record a fixation on `word` directly.
    pub fn place(&mut self, word: usize) {
        self.pos = Some(word);
        self.fixations.push(word);
    }
}

/// Class sequence scoring `fixations` then `STOP`.
pub fn gold_classes(
    space: &OffsetSpace,
    fixations: &[usize],
    n_words: usize,
) -> Result<Vec<usize>> {
    if fixations.is_empty() {
        return Err(Error::Empty("gold scanpath has no fixations".into()));
    }
    let mut out = Vec::with_capacity(fixations.len() + 1);
    let mut prev = VIRTUAL_START;
    for (step, &f) in fixations.iter().enumerate() {
        if f >= n_words {
            return Err(Error::FixationOutOfRange {
                index: f,
                words: n_words,
                context: format!("gold step {step}"),
            });
        }
        let offset = f as i64 - prev;
        out.push(
            space
                .class_of(offset)
                .ok_or(Error::OffsetOutOfRange { step, offset })?,
        );
        prev = f as i64;
    }
    out.push(space.stop());
    Ok(out)
}

/// Per-step masks along a gold path (positions before each decision).
pub fn gold_masks(space: &OffsetSpace, fixations: &[usize], n_words: usize) -> Vec<Vec<bool>> {
    std::iter::once(None)
        .chain(fixations.iter().map(|&f| Some(f)))
        .map(|p| space.valid_mask(p, n_words))
        .collect()
}
