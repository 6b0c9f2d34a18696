//! Central finite-difference verification of analytic gradients.

use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// gradients are judged on absolute error.
    pub floor: f64,
    /// Check at most this many entries per input (chosen at random).
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Evaluate in train mode with dropout masks from this stream. Every
    /// evaluation restarts the stream, so all of them see the same masks.
    pub train: Option<RngState>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-5,
            floor: 1e-4,
            max_entries: None,
            seed: 0,
            train: None,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn sampled(mut self, n: usize, seed: u64) -> Self {
        self.max_entries = Some(n);
        self.seed = seed;
        self
    }

    pub fn train_mode(mut self, rng: RngState) -> Self {
        self.train = Some(rng);
        self
    }

    fn graph<'s>(&self, g: Graph<'s, f64>) -> Graph<'s, f64> {
        match self.train {
            Some(rng) => g.train(rng),
            None => g,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Set when a non-finite value was seen; the check then fails.
    pub non_finite: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&InputCheck> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn pick_entries(n: usize, opts: &GradcheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_entries {
        Some(k) if k < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            RngState::new(opts.seed, salt).rng().shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Check `f` with respect to free input tensors. `f` must return a scalar.
pub fn gradcheck<Fun>(f: Fun, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> GradcheckReport
where
    Fun: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let mut g = opts.graph(Graph::new());
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = opts.graph(Graph::new().no_grad());
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let o = f(&mut g, &vs);
        g.value(o).data[0]
    };
    let mut report = GradcheckReport {
        inputs: Vec::new(),
        max_rel_err: 0.0,
        tol: opts.tol,
        non_finite: None,
    };
    if !g.value(out).all_finite() {
        report.non_finite = Some("forward output".into());
        return report;
    }
    let grads = match g.backward(out) {
        Ok(gr) => gr,
        Err(e) => {
            report.non_finite = Some(e.to_string());
            return report;
        }
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .unwrap_or_else(|| Tensor::zeros(&inputs[k].shape));
        let check = compare_entries(
            &format!("input {k}"),
            &analytic.data,
            &pick_entries(inputs[k].numel(), &opts, k as u64),
            &opts,
            |i, delta| {
                let orig = work[k].data[i];
                work[k].data[i] = orig + delta;
                let y = eval(&work);
                work[k].data[i] = orig;
                y
            },
        );
        absorb(&mut report, check);
    }
    report
}

/// Check `f` with respect to every `requires_grad` entry of `store`.
pub fn gradcheck_params<Fun>(
    store: &ParamStore<f64>,
    f: Fun,
    opts: GradcheckOptions,
) -> GradcheckReport
where
    Fun: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut report = GradcheckReport {
        inputs: Vec::new(),
        max_rel_err: 0.0,
        tol: opts.tol,
        non_finite: None,
    };
    let analytic: Vec<(crate::tensor::ParamId, Vec<f64>)> = {
        let mut g = opts.graph(Graph::with_params(store));
        let out = f(&mut g);
        if !g.value(out).all_finite() {
            report.non_finite = Some("forward output".into());
            return report;
        }
        match g.backward(out) {
            Ok(gr) => gr.params().map(|(p, s)| (p, s.to_vec())).collect(),
            Err(e) => {
                report.non_finite = Some(e.to_string());
                return report;
            }
        }
    };
    let mut work = store.clone();
    for id in store.ids() {
        let entry = store.get(id);
        if !entry.requires_grad {
            continue;
        }
        let n = entry.tensor.numel();
        let a = analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let check = compare_entries(
            &entry.name,
            &a,
            &pick_entries(n, &opts, id.0 as u64),
            &opts,
            |i, delta| {
                let orig = work.tensor(id).data[i];
                work.tensor_mut(id).data[i] = orig + delta;
                let y = {
                    let mut g = opts.graph(Graph::with_params(&work).no_grad());
                    let o = f(&mut g);
                    g.value(o).data[0]
                };
                work.tensor_mut(id).data[i] = orig;
                y
            },
        );
        absorb(&mut report, check);
    }
    report
}

fn compare_entries(
    name: &str,
    analytic: &[f64],
    entries: &[usize],
    opts: &GradcheckOptions,
    mut eval_shifted: impl FnMut(usize, f64) -> f64,
) -> Result<InputCheck, String> {
    let mut check = InputCheck {
        name: name.to_string(),
        checked: entries.len(),
        max_rel_err: 0.0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in entries {
        let plus = eval_shifted(i, opts.h);
        let minus = eval_shifted(i, -opts.h);
        let numeric = (plus - minus) / (2.0 * opts.h);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(format!("{name}[{i}]: analytic {a}, numeric {numeric}"));
        }
        let e = rel_err(a, numeric, opts.floor);
        if e > check.max_rel_err {
            check.max_rel_err = e;
            check.worst_entry = i;
            check.analytic = a;
            check.numeric = numeric;
        }
    }
    Ok(check)
}

fn absorb(report: &mut GradcheckReport, check: Result<InputCheck, String>) {
    match check {
        Ok(c) => {
            report.max_rel_err = report.max_rel_err.max(c.max_rel_err);
            report.inputs.push(c);
        }
        Err(loc) => {
            if report.non_finite.is_none() {
                report.non_finite = Some(loc);
            }
        }
    }
}

/// One graph operation under test: input shapes and a scalar-valued probe.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [[usize; 2]],
    /// Needs a train-mode graph (dropout).
    pub train: bool,
    pub f: fn(&mut Graph<'_, f64>, &[Var]) -> Var,
}

/// Fixed random weights so that reductions like `sum(softmax(x))` still
/// carry a gradient.
fn probe(g: &mut Graph<'_, f64>, y: Var) -> Var {
    let (r, c) = g.shape(y);
    let w = Tensor::randn(
        &[r, c],
        1.0,
        RngState::new(0x70_72_6f_62, (r * 97 + c) as u64),
    );
    let w = g.constant(w);
    let y = g.mul(y, w);
    g.sum(y)
}

fn fixed(shape: &[usize], salt: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, RngState::new(0x66_69_78, salt))
}

/// Every differentiable graph operation. `straight_through` is absent on
/// purpose: its gradient disagrees with finite differences by design.
pub fn op_cases() -> Vec<OpCase> {
    macro_rules! case {
        ($name:expr, $shapes:expr, |$g:ident, $v:ident| $body:expr) => {
            OpCase {
                name: $name,
                shapes: &$shapes,
                train: false,
                f: |$g, $v| {
                    let y = $body;
                    probe($g, y)
                },
            }
        };
    }
    vec![
        case!("matmul", [[3, 4], [4, 5]], |g, v| g.matmul(v[0], v[1])),
        case!("transpose", [[3, 4]], |g, v| g.transpose(v[0])),
        case!("reshape", [[3, 4]], |g, v| g.reshape(v[0], 2, 6)),
        case!("add", [[3, 4], [3, 4]], |g, v| g.add(v[0], v[1])),
        case!("sub", [[3, 4], [3, 4]], |g, v| g.sub(v[0], v[1])),
        case!("mul", [[3, 4], [3, 4]], |g, v| g.mul(v[0], v[1])),
        case!("add_row", [[3, 4], [1, 4]], |g, v| g.add_row(v[0], v[1])),
        case!("add_const", [[3, 4]], |g, v| g
            .add_const(v[0], &fixed(&[1, 4], 1))),
        case!("affine", [[3, 4]], |g, v| g.affine(v[0], 1.7, -0.3)),
        case!("scale", [[3, 4]], |g, v| g.scale(v[0], -2.5)),
        case!("tanh", [[3, 4]], |g, v| g.tanh(v[0])),
        case!("sigmoid", [[3, 4]], |g, v| g.sigmoid(v[0])),
        case!("relu", [[3, 4]], |g, v| g.relu(v[0])),
        case!("softmax", [[3, 5]], |g, v| g.softmax(v[0])),
        case!("masked_softmax", [[3, 5]], |g, v| {
            g.masked_softmax(
                v[0],
                &crate::graph::mask_row(&[true, false, true, true, false]),
            )
        }),
        case!("layer_norm", [[3, 6], [1, 6], [1, 6]], |g, v| g
            .layer_norm(v[0], v[1], v[2])),
        case!("gather_rows", [[5, 4]], |g, v| g
            .gather_rows(v[0], &[0, 3, 3, 1])),
        case!("gather_cols", [[3, 5]], |g, v| g
            .gather_cols(v[0], &[Some(4), None, Some(0), Some(4)])),
        case!("concat_cols", [[3, 2], [3, 4]], |g, v| g
            .concat_cols(&[v[0], v[1]])),
        case!("concat_rows", [[2, 3], [4, 3]], |g, v| g
            .concat_rows(&[v[0], v[1]])),
        case!("slice_cols", [[3, 6]], |g, v| g.slice_cols(v[0], 2, 3)),
        case!("slice_rows", [[5, 3]], |g, v| g.slice_rows(v[0], 1, 3)),
        case!("row", [[4, 3]], |g, v| g.row(v[0], 2)),
        OpCase {
            name: "dropout",
            shapes: &[[4, 5]],
            train: true,
            f: |g, v| {
                let y = g.dropout(v[0], 0.3);
                probe(g, y)
            },
        },
        OpCase {
            name: "sum",
            shapes: &[[3, 4]],
            train: false,
            f: |g, v| g.sum(v[0]),
        },
        OpCase {
            name: "mean",
            shapes: &[[3, 4]],
            train: false,
            f: |g, v| g.mean(v[0]),
        },
        OpCase {
            name: "cross_entropy",
            shapes: &[[4, 5]],
            train: false,
            f: |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]),
        },
        OpCase {
            name: "mse",
            shapes: &[[3, 4]],
            train: false,
            f: |g, v| g.mse(v[0], &fixed(&[3, 4], 2)),
        },
    ]
}

/// Gradcheck every case of [`op_cases`] on inputs drawn from `seed`.
pub fn check_ops(seed: u64, opts: GradcheckOptions) -> Vec<(&'static str, GradcheckReport)> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(k, case)| {
            let rng = RngState::new(seed, k as u64);
            let inputs: Vec<Tensor<f64>> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| Tensor::randn(s, 1.0, rng.derive(&[i as u64])))
                .collect();
            let o = if case.train {
                opts.train_mode(rng.derive(&[99]))
            } else {
                opts
            };
            (case.name, gradcheck(case.f, &inputs, o))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, RngState::new(seed, 0))
    }

    #[test]
    fn linear_layer_passes() {
        let r = gradcheck(
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                let y = g.add_row(y, v[2]);
                let y = g.tanh(y);
                g.sum(y)
            },
            &[rand(&[3, 5], 1), rand(&[5, 4], 2), rand(&[1, 4], 3)],
            GradcheckOptions::default(),
        );
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn softmax_cross_entropy_chain_passes() {
        let r = gradcheck(
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                g.cross_entropy(y, &[0, 2, 1, 3])
            },
            &[rand(&[4, 6], 4), rand(&[6, 5], 5)],
            GradcheckOptions::default(),
        );
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn every_op_passes() {
        for seed in 0..5 {
            for (name, r) in check_ops(seed, GradcheckOptions::default()) {
                assert!(r.passed(), "{name} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn train_mode_masks_are_shared_across_evaluations() {
        let opts = GradcheckOptions::default().train_mode(RngState::new(3, 3));
        let r = gradcheck(
            |g, v| {
                let y = g.dropout(v[0], 0.5);
                g.sum(y)
            },
            &[rand(&[4, 4], 7)],
            opts,
        );
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // straight_through forwards a constant but routes the gradient to its
        // input, so the analytic gradient is deliberately wrong here.
        let r = gradcheck(
            |g, v| {
                let hard = Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]);
                let y = g.straight_through(v[0], hard);
                let y = g.mul(y, y);
                g.sum(y)
            },
            &[rand(&[1, 3], 6)],
            GradcheckOptions::default(),
        );
        assert!(!r.passed());
        assert!(r.max_rel_err > 0.5);
    }

    #[test]
    fn non_finite_is_reported_with_location() {
        let r = gradcheck(
            |g, v| {
                let y = g.scale(v[0], 1e308);
                let y = g.scale(y, 1e308);
                g.sum(y)
            },
            &[Tensor::from_f64(&[1, 2], &[1.0, 1.0])],
            GradcheckOptions::default(),
        );
        assert!(!r.passed());
        assert!(r.non_finite.is_some());
    }
}
