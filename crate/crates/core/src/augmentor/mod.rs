//! Scanpath-augmented classifier: token embeddings reordered by fixation
//! order, a GRU over the reordered sequence started from `[CLS]`, and a task
//! head. [`JointModel`] bundles it with the generator.

mod reorder;

use serde::{Deserialize, Serialize};

pub use reorder::{reorder_gather, reorder_mixture, reorder_soft, reorder_sources, SourceRow};

use crate::corpus::{DatasetSpec, Label};
use crate::error::{Error, Result};
use crate::gazegen::{
    default_max_fixations, BridgeMode, Generator, GeneratorConfig, GumbelConfig, WordContext,
};
use crate::graph::{Graph, Var};
use crate::nn::{Gru, Linear};
use crate::rng::RngState;
use crate::tensor::{ParamStore, Real, Tensor};
use crate::textenc::{EncodedText, EncodedVars, TextEncoder, TextEncoderConfig};

pub const LM_PREFIX: &str = "lm";
pub const SCAN_PREFIX: &str = "aug";
pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification(usize),
    Regression,
}

impl HeadKind {
    pub fn for_spec(spec: &DatasetSpec) -> Self {
        if spec.is_regression() {
            Self::Regression
        } else {
            Self::Classification(spec.n_outputs())
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            Self::Classification(n) => n,
            Self::Regression => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub linear: Linear,
}

impl TaskHead {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        kind: HeadKind,
        hidden: usize,
        rng: RngState,
    ) -> Self {
        Self {
            kind,
            linear: Linear::new(store, HEAD_PREFIX, hidden, kind.outputs(), rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, h: Var) -> Var {
        self.linear.forward(g, h)
    }

    /// Cross-entropy for classes; MSE against the `[0, 1]`-rescaled target
    /// for regression.
    pub fn loss<F: Real>(&self, g: &mut Graph<'_, F>, out: Var, target: f64) -> Result<Var> {
        match self.kind {
            HeadKind::Classification(n) => {
                let c = target as usize;
                if target < 0.0 || target.fract() != 0.0 || c >= n {
                    return Err(Error::Label(format!("class {target} for a {n}-class head")));
                }
                Ok(g.cross_entropy(out, &[c]))
            }
            HeadKind::Regression => Ok(g.mse(out, &Tensor::scalar(F::lit(target)))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub text: TextEncoderConfig,
    pub generator: GeneratorConfig,
    /// Scanpath-encoder width.
    pub hidden: usize,
    pub scan_dropout: f64,
    pub head: HeadKind,
    pub gumbel: GumbelConfig,
    /// Text-only control: the scanpath is the identity word order.
    pub baseline: bool,
}

impl JointConfig {
    pub fn new(vocab_size: usize, d_model: usize, head: HeadKind) -> Self {
        let text = TextEncoderConfig::new(vocab_size, d_model);
        Self {
            generator: GeneratorConfig::new(text.clone()),
            hidden: d_model,
            text,
            scan_dropout: 0.1,
            head,
            gumbel: GumbelConfig::default(),
            baseline: false,
        }
    }
}

/// How the per-pair scanpath is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathMode {
    /// Plain categorical sampling, gather reordering.
    Hard,
    /// Gumbel-softmax bridge in the configured mode.
    Bridge,
}

#[derive(Clone, Debug)]
pub struct PairOutput {
    /// `1 x outputs` head output.
    pub output: Var,
    pub fixations: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct JointModel {
    pub cfg: JointConfig,
    pub text: TextEncoder,
    pub generator: Generator,
    pub gru: Gru,
    cls_proj: Option<Linear>,
    pub head: TaskHead,
}

impl JointModel {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        cfg: JointConfig,
        rng: RngState,
    ) -> Result<Self> {
        cfg.gumbel.validate()?;
        let d = cfg.text.d_model;
        let text = TextEncoder::new(store, LM_PREFIX, cfg.text.clone(), rng);
        let mut gcfg = cfg.generator.clone();
        if gcfg.share_text_encoder {
            gcfg.text = cfg.text.clone();
        }
        let generator = Generator::new(store, gcfg, rng)?;
        let gru = Gru::new(store, &format!("{SCAN_PREFIX}.gru"), d, cfg.hidden, rng);
        let cls_proj = (cfg.hidden != d).then(|| {
            Linear::new(
                store,
                &format!("{SCAN_PREFIX}.cls_proj"),
                d,
                cfg.hidden,
                rng,
            )
        });
        let head = TaskHead::new(store, cfg.head, cfg.hidden, rng);
        Ok(Self {
            cfg,
            text,
            generator,
            gru,
            cls_proj,
            head,
        })
    }

    /// GRU over the reordered rows, started from the projected `[CLS]`
    /// vector; returns the last hidden state.
    pub fn scanpath_encode<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        seq: Var,
        cls: Var,
    ) -> Result<Var> {
        if g.shape(seq).0 == 0 {
            return Err(Error::Empty("reordered sequence has no rows".into()));
        }
        let x = g.dropout(seq, self.cfg.scan_dropout);
        let h0 = match &self.cls_proj {
            Some(p) => p.forward(g, cls),
            None => cls,
        };
        Ok(*self.gru.run(g, x, h0).last().unwrap())
    }

    pub fn encode_text<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncodedText,
    ) -> Result<(EncodedVars, Option<WordContext>)> {
        let lm = self.text.encode(g, enc)?;
        let ctx = if self.cfg.baseline {
            None
        } else {
            Some(self.generator.context(g, enc, Some(&lm))?)
        };
        Ok((lm, ctx))
    }

    /// Head output for one sampled scanpath. `forced` fixes the hard
    /// decisions of the bridge.
    #[allow(clippy::too_many_arguments)]
    pub fn path_output<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncodedText,
        lm: &EncodedVars,
        ctx: Option<&WordContext>,
        rng: RngState,
        mode: PathMode,
        forced: Option<&[usize]>,
    ) -> Result<PairOutput> {
        let (seq, fixations) = match ctx {
            None => {
                let path: Vec<usize> = (0..enc.n_words()).collect();
                (reorder_gather(g, lm.tokens, enc, &path)?, path)
            }
            Some(ctx) => {
                let cap = default_max_fixations(ctx.n_words);
                match mode {
                    PathMode::Hard => {
                        let (path, _) = self.generator.sample_hard(g, ctx, rng, cap)?;
                        (reorder_gather(g, lm.tokens, enc, &path)?, path)
                    }
                    PathMode::Bridge => {
                        let p = self.generator.sample_gumbel(
                            g,
                            ctx,
                            rng,
                            &self.cfg.gumbel,
                            cap,
                            forced,
                        )?;
                        let seq = match p.mode {
                            BridgeMode::SoftConvolution => reorder_soft(g, lm.words, &p.weights)?,
                            _ => reorder_mixture(g, lm.tokens, enc, &p.fixations, &p.weights)?,
                        };
                        (seq, p.fixations)
                    }
                }
            }
        };
        let h = self.scanpath_encode(g, seq, lm.cls)?;
        Ok(PairOutput {
            output: self.head.forward(g, h),
            fixations,
        })
    }

    /// Loss of one (instance, sampled scanpath) pair.
    pub fn pair_loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncodedText,
        target: f64,
        rng: RngState,
        forced: Option<&[usize]>,
    ) -> Result<Var> {
        let (lm, ctx) = self.encode_text(g, enc)?;
        let out = self.path_output(g, enc, &lm, ctx.as_ref(), rng, PathMode::Bridge, forced)?;
        self.head.loss(g, out.output, target)
    }

    /// Mean loss over `n` sampled scanpaths of one instance.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncodedText,
        target: f64,
        n: usize,
        rng: RngState,
    ) -> Result<Var> {
        if n == 0 {
            return Err(Error::Config("n_scanpaths must be >= 1".into()));
        }
        let (lm, ctx) = self.encode_text(g, enc)?;
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let out = self.path_output(
                g,
                enc,
                &lm,
                ctx.as_ref(),
                rng.derive(&[i as u64]),
                PathMode::Bridge,
                None,
            )?;
            terms.push(self.head.loss(g, out.output, target)?);
        }
        let all = g.concat_cols(&terms);
        Ok(g.mean(all))
    }

    /// Per-path head outputs in eval mode.
    pub fn path_outputs<F: Real>(
        &self,
        store: &ParamStore<F>,
        enc: &EncodedText,
        n: usize,
        rng: RngState,
    ) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::Config("n_scanpaths must be >= 1".into()));
        }
        let mut g = Graph::with_params(store).no_grad();
        let (lm, ctx) = self.encode_text(&mut g, enc)?;
        let mode = if self.cfg.gumbel.hard_eval {
            PathMode::Hard
        } else {
            PathMode::Bridge
        };
        (0..n)
            .map(|i| {
                let o = self.path_output(
                    &mut g,
                    enc,
                    &lm,
                    ctx.as_ref(),
                    rng.derive(&[i as u64]),
                    mode,
                    None,
                )?;
                Ok(g.value(o.output).to_f64_vec())
            })
            .collect()
    }

    /// Head outputs averaged over `n` sampled scanpaths.
    pub fn predict<F: Real>(
        &self,
        store: &ParamStore<F>,
        enc: &EncodedText,
        n: usize,
        rng: RngState,
    ) -> Result<Vec<f64>> {
        Ok(average_logits(&self.path_outputs(store, enc, n, rng)?))
    }
}

/// Training target of `label` for `head`.
pub fn target_of(spec: &DatasetSpec, label: Label) -> Result<f64> {
    spec.check_label(label)?;
    Ok(match label {
        Label::Class(c) => c as f64,
        Label::Real(v) => spec.normalize(v),
    })
}

/// Element-wise mean as `x_0 + sum_i (x_i - x_0) / n`, which returns `x_0`
/// exactly when all inputs are equal.
pub fn average_logits(outs: &[Vec<f64>]) -> Vec<f64> {
    assert!(!outs.is_empty(), "nothing to average");
    let n = outs.len() as f64;
    let base = &outs[0];
    (0..base.len())
        .map(|j| {
            let shift: f64 = outs[1..].iter().map(|o| o[j] - base[j]).sum();
            base[j] + shift / n
        })
        .collect()
}
