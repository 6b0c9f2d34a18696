use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, Var, MASK_NEG};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// How a sampled fixation is passed downstream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    /// Hard one-hot forward, relaxed-sample gradient backward.
    #[default]
    StraightThrough,
    /// Soft position distribution propagated by offset convolution.
    SoftConvolution,
    /// Relaxed sample in both passes. Used to check the surrogate gradient
    /// with finite differences.
    Relaxed,
}

impl std::str::FromStr for BridgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight_through" => Ok(Self::StraightThrough),
            "soft_convolution" => Ok(Self::SoftConvolution),
            "relaxed" => Ok(Self::Relaxed),
            _ => Err(Error::Config(format!("unknown gumbel mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub mode: BridgeMode,
    /// Evaluate with plain categorical sampling instead of the bridge.
    pub hard_eval: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            mode: BridgeMode::StraightThrough,
            hard_eval: true,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "gumbel temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One Gumbel(0, 1) draw per class, in class order.
pub fn draw_gumbels(stream: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| stream.gumbel()).collect()
}

/// `argmax(logits + g)` over valid classes; ties go to the lower index.
pub fn gumbel_argmax(logits: &[f64], valid: &[bool], g: &[f64]) -> usize {
    let mut best = None;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..logits.len() {
        if !valid[c] {
            continue;
        }
        let v = logits[c] + g[c];
        if best.is_none() || v > best_v {
            best = Some(c);
            best_v = v;
        }
    }
    best.expect("no valid class")
}

/// `softmax((logits + g) / tau)` restricted to valid classes.
pub fn relaxed_sample(logits: &[f64], valid: &[bool], g: &[f64], tau: f64) -> Vec<f64> {
    let mut z: Vec<f64> = (0..logits.len())
        .map(|c| {
            let v = (logits[c] + g[c]) / tau;
            if valid[c] {
                v
            } else {
                v + MASK_NEG
            }
        })
        .collect();
    softmax_in_place(&mut z);
    z
}

/// Gumbel-max categorical sample from `logits` over valid classes.
pub fn sample_class(logits: &[f64], valid: &[bool], stream: &mut Stream) -> usize {
    let g = draw_gumbels(stream, logits.len());
    gumbel_argmax(logits, valid, &g)
}

pub(crate) fn noise_and_mask<F: Real>(valid: &[bool], g: &[f64]) -> Tensor<F> {
    Tensor::row(
        valid
            .iter()
            .zip(g)
            .map(|(&v, &gi)| F::lit(if v { gi } else { gi + MASK_NEG }))
            .collect(),
    )
}

/// Relaxed sample `y = softmax((logits + g + mask) / tau)` on the graph,
/// plus the hard class `argmax(logits + g)`. In straight-through form the
/// returned `Var` is `one_hot(hard)` in the forward pass.
pub fn gumbel_bridge<F: Real>(
    g: &mut Graph<'_, F>,
    logits: Var,
    valid: &[bool],
    draws: &[f64],
    tau: f64,
    straight_through: bool,
) -> (Var, usize) {
    let values = g.value(logits).to_f64_vec();
    let hard = gumbel_argmax(&values, valid, draws);
    let z = g.add_const(logits, &noise_and_mask(valid, draws));
    let z = g.scale(z, 1.0 / tau);
    let y = g.softmax(z);
    if !straight_through {
        return (y, hard);
    }
    let mut one_hot = Tensor::zeros(&[1, valid.len()]);
    one_hot.data[hard] = F::one();
    (g.straight_through(y, one_hot), hard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn zero_temperature_rejected() {
        let mut c = GumbelConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c.temperature = -1.0;
        assert!(c.validate().is_err());
        assert!(GumbelConfig::default().validate().is_ok());
    }

    #[test]
    fn mode_parses() {
        assert_eq!(
            "soft_convolution".parse::<BridgeMode>().unwrap(),
            BridgeMode::SoftConvolution
        );
        assert!("gumbel".parse::<BridgeMode>().is_err());
    }

    #[test]
    fn high_temperature_flattens() {
        let logits = [0.0; 4];
        let valid = [true, true, true, false];
        let mut s = RngState::new(1, 2).rng();
        let mut mean = [0.0; 3];
        let n = 1000;
        for _ in 0..n {
            let g = draw_gumbels(&mut s, 4);
            let y = relaxed_sample(&logits, &valid, &g, 1e4);
            for c in 0..3 {
                mean[c] += y[c] / n as f64;
            }
            assert!(y[3] < 1e-20);
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.05, "{mean:?}");
        }
    }

    #[test]
    fn empirical_frequencies_match_softmax() {
        let logits = [0.5, -1.0, 1.5, 0.0, 9.0];
        let valid = [true, true, true, true, false];
        let p = crate::gazegen::SaccadeStep::new(logits.to_vec(), valid.to_vec()).probs();
        let mut counts = [0usize; 5];
        let mut s = RngState::new(7, 0).rng();
        let n = 10_000;
        for _ in 0..n {
            counts[sample_class(&logits, &valid, &mut s)] += 1;
        }
        for c in 0..5 {
            assert!(
                (counts[c] as f64 / n as f64 - p[c]).abs() < 0.02,
                "{counts:?} {p:?}"
            );
        }
        assert_eq!(counts[4], 0);
    }

    #[test]
    fn straight_through_forward_is_one_hot_of_gumbel_max() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::row(vec![2.0, 0.0, -1.0]), true);
        let draws = [0.1, 2.5, 0.3];
        let (y, hard) = gumbel_bridge(&mut g, l, &[true; 3], &draws, 0.5, true);
        assert_eq!(hard, 1);
        assert_eq!(g.value(y).data, vec![0.0, 1.0, 0.0]);
        let sel = g.gather_cols(y, &[Some(1)]);
        let loss = g.sum(sel);
        let grads = g.backward(loss).unwrap();
        let gl = grads.wrt(l).unwrap();
        assert!(gl.data.iter().any(|&v| v != 0.0));
        // d y_1 / d l_1 = y_1 (1 - y_1) / tau on the relaxed sample
        let soft = relaxed_sample(&[2.0, 0.0, -1.0], &[true; 3], &draws, 0.5);
        assert!((gl.data[1] - soft[1] * (1.0 - soft[1]) / 0.5).abs() < 1e-12);
    }
}
