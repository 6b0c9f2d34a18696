use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

/// AdamW with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
///
/// Only parameters with `requires_grad` are touched; a trainable parameter
/// that received no gradient this step is treated as having a zero gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: Vec::new(),
        }
    }

    /// `grads[i]` is the gradient of parameter `i`, or `None`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[Option<Vec<f32>>],
        lr: f64,
    ) -> Result<usize> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {}",
                        store.get(ParamId(i)).name
                    )));
                }
            }
        }
        self.state.resize(store.len(), None);
        let (b1, b2) = (self.beta1, self.beta2);
        let mut updated = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let entry = store.get_mut(id);
            if !entry.requires_grad {
                continue;
            }
            updated += 1;
            let n = entry.tensor.data.len();
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            let g = grads.get(id.0).and_then(|g| g.as_deref());
            for j in 0..n {
                let gj = g.map_or(0.0, |g| g[j] as f64);
                let m = b1 * st.m[j] as f64 + (1.0 - b1) * gj;
                let v = b2 * st.v[j] as f64 + (1.0 - b2) * gj * gj;
                st.m[j] = m as f32;
                st.v[j] = v as f32;
                let p = entry.tensor.data[j] as f64;
                let upd = (m / c1) / ((v / c2).sqrt() + self.eps) + self.weight_decay * p;
                entry.tensor.data[j] = (p - lr * upd) as f32;
            }
        }
        Ok(updated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping. An epoch counts as an improvement only if
/// it beats the best value so far by more than `1e-6`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub goal: Goal,
    best: Option<(usize, f64)>,
    stale: usize,
}

pub const IMPROVEMENT_TOL: f64 = 1e-6;

impl EarlyStopping {
    pub fn new(patience: usize, goal: Goal) -> Self {
        Self {
            patience,
            goal,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        let score = match self.goal {
            Goal::Maximize => value,
            Goal::Minimize => -value,
        };
        let better = match self.best {
            None => !score.is_nan(),
            Some((_, b)) => score > b + IMPROVEMENT_TOL,
        };
        if better {
            self.best = Some((epoch, score));
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    /// `(epoch, value)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|(e, s)| {
            (
                e,
                match self.goal {
                    Goal::Maximize => s,
                    Goal::Minimize => -s,
                },
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::{Init, Tensor};

    fn scalar_store(p: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p));
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = ParamStore::new();
        s.add("w", &[3, 4], Init::Normal(1.0), RngState::new(0, 0));
        let before = s.clone();
        let mut opt = AdamW::new(0.0);
        opt.step(&mut s, &[Some(vec![0.0; 12])], 0.1).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut s = scalar_store(1.0);
        AdamW::new(0.0)
            .step(&mut s, &[Some(vec![1.0])], 0.1)
            .unwrap();
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((s.tensor(ParamId(0)).data[0] as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay() {
        let mut s = scalar_store(1.0);
        AdamW::new(0.01)
            .step(&mut s, &[Some(vec![0.0])], 0.1)
            .unwrap();
        assert!((s.tensor(ParamId(0)).data[0] - 0.999).abs() < 1e-7);
    }

    #[test]
    fn frozen_params_untouched_and_nan_rejected() {
        let mut s = scalar_store(1.0);
        s.insert("q", Tensor::scalar(2.0));
        s.get_mut(ParamId(1)).requires_grad = false;
        let mut opt = AdamW::new(0.01);
        let n = opt
            .step(&mut s, &[Some(vec![1.0]), Some(vec![5.0])], 0.1)
            .unwrap();
        assert_eq!(n, 1);
        assert_eq!(s.tensor(ParamId(1)).data[0], 2.0);
        let err = opt
            .step(&mut s, &[Some(vec![f32::NAN]), None], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("gradient of p"));
    }

    #[test]
    fn patience_arithmetic() {
        let mut es = EarlyStopping::new(3, Goal::Maximize);
        let v: Vec<Verdict> = [0.6, 0.7, 0.7, 0.7, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &m)| es.observe(i + 1, m))
            .collect();
        use Verdict::*;
        assert_eq!(v, [Improved, Improved, Continue, Continue, Stop]);
        assert_eq!(es.best(), Some((2, 0.7)));
    }

    #[test]
    fn tiny_gains_do_not_count() {
        let mut es = EarlyStopping::new(1, Goal::Minimize);
        assert_eq!(es.observe(1, 1.0), Verdict::Improved);
        assert_eq!(es.observe(2, 1.0 - 1e-7), Verdict::Stop);
        assert_eq!(es.best(), Some((1, 1.0)));
    }
}
