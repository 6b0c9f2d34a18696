//! Parameterized layers built from [`Graph`] ops.

use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::{Init, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: RngState,
    ) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), &[d_in, d_out], Init::Xavier, rng),
            b: store.add(&format!("{name}.b"), &[1, d_out], Init::Zeros, rng),
            d_in,
            d_out,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize, rng: RngState) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), &[1, d], Init::Ones, rng),
            beta: store.add(&format!("{name}.beta"), &[1, d], Init::Zeros, rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Single-layer GRU with gate layout `[reset | update | candidate]`:
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: RngState,
    ) -> Self {
        let std = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(
                &format!("{name}.w_ih"),
                &[d_in, 3 * hidden],
                Init::Xavier,
                rng,
            ),
            w_hh: store.add(
                &format!("{name}.w_hh"),
                &[hidden, 3 * hidden],
                Init::Normal(std * 0.5),
                rng,
            ),
            b_ih: store.add(&format!("{name}.b_ih"), &[1, 3 * hidden], Init::Zeros, rng),
            b_hh: store.add(&format!("{name}.b_hh"), &[1, 3 * hidden], Init::Zeros, rng),
            d_in,
            hidden,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }

    pub fn zero_state<F: Real>(&self, g: &mut Graph<'_, F>) -> Var {
        g.constant(Tensor::zeros(&[1, self.hidden]))
    }

    /// Input projections `x W_ih + b_ih` for every row of `xs`.
    pub fn project_inputs<F: Real>(&self, g: &mut Graph<'_, F>, xs: Var) -> Var {
        let w = g.param(self.w_ih);
        let b = g.param(self.b_ih);
        let p = g.matmul(xs, w);
        g.add_row(p, b)
    }

    /// One recurrence step from a precomputed input projection (`1 x 3h`).
    pub fn step_projected<F: Real>(&self, g: &mut Graph<'_, F>, xp: Var, h: Var) -> Var {
        let hd = self.hidden;
        let w = g.param(self.w_hh);
        let b = g.param(self.b_hh);
        let hp = g.matmul(h, w);
        let hp = g.add_row(hp, b);
        let rz_x = g.slice_cols(xp, 0, 2 * hd);
        let rz_h = g.slice_cols(hp, 0, 2 * hd);
        let rz = g.add(rz_x, rz_h);
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hd);
        let z = g.slice_cols(rz, hd, hd);
        let n_x = g.slice_cols(xp, 2 * hd, hd);
        let n_h = g.slice_cols(hp, 2 * hd, hd);
        let rn = g.mul(r, n_h);
        let n = g.add(n_x, rn);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }

    pub fn step<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, h: Var) -> Var {
        let xp = self.project_inputs(g, x);
        self.step_projected(g, xp, h)
    }

    /// Run over the rows of `xs` from `h0`; returns the hidden state after
    /// each step.
    pub fn run<F: Real>(&self, g: &mut Graph<'_, F>, xs: Var, h0: Var) -> Vec<Var> {
        let steps = g.shape(xs).0;
        let xp = self.project_inputs(g, xs);
        let mut h = h0;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = g.row(xp, t);
            h = self.step_projected(g, row, h);
            out.push(h);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_params, GradcheckOptions};

    #[test]
    fn gru_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let rng = RngState::new(9, 0);
        let gru = Gru::new(&mut store, "gru", 5, 4, rng);
        // non-zero biases so every path is exercised
        for id in [gru.b_ih, gru.b_hh] {
            *store.tensor_mut(id) = Tensor::randn(&[1, 12], 0.3, rng.derive(&[id.0 as u64]));
        }
        let xs = Tensor::<f64>::randn(&[3, 5], 1.0, rng.derive(&[77]));
        let r = gradcheck_params(
            &store,
            |g| {
                let x = g.constant(xs.clone());
                let h0 = g.constant(Tensor::from_f64(&[1, 4], &[0.1, -0.2, 0.3, 0.0]));
                let hs = gru.run(g, x, h0);
                let last = *hs.last().unwrap();
                let sq = g.mul(last, last);
                g.sum(sq)
            },
            GradcheckOptions::default(),
        );
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut store = ParamStore::<f32>::new();
        let gru = Gru::new(&mut store, "gru", 3, 2, RngState::new(1, 1));
        for p in gru.params() {
            let t = store.tensor_mut(p);
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::matrix(4, 3, vec![1.0; 12]));
        let h0 = gru.zero_state(&mut g);
        let hs = gru.run(&mut g, x, h0);
        for h in hs {
            assert!(g.value(h).data.iter().all(|&v| v == 0.0));
        }
    }
}
