use serde::{Deserialize, Serialize};

use super::offsets::{gold_classes, gold_masks, OffsetSpace, SaccadeStep, Walker};
use super::sampling::{
    draw_gumbels, gumbel_argmax, gumbel_bridge, noise_and_mask, BridgeMode, GumbelConfig,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, MASK_NEG};
use crate::nn::{Gru, Linear};
use crate::rng::RngState;
use crate::tensor::{Init, ParamId, ParamStore, Real, Tensor};
use crate::textenc::{EncodedText, EncodedVars, TextEncoder, TextEncoderConfig};

/// Parameter-name prefix of every generator tensor.
pub const GEN_PREFIX: &str = "gen.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub text: TextEncoderConfig,
    /// Width of word and history states; must be even.
    pub hidden: usize,
    pub l_max: usize,
    /// Read word embeddings from the task encoder instead of a private one.
    pub share_text_encoder: bool,
}

impl GeneratorConfig {
    pub fn new(text: TextEncoderConfig) -> Self {
        Self {
            hidden: text.d_model,
            text,
            l_max: 8,
            share_text_encoder: false,
        }
    }

    pub fn max_words(&self) -> usize {
        self.text.max_len
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "generator hidden must be even, got {}",
                self.hidden
            )));
        }
        OffsetSpace::new(self.l_max).map(|_| ())
    }
}

/// Default fixation cap for a sentence of `n_words` words.
pub fn default_max_fixations(n_words: usize) -> usize {
    (2 * n_words).clamp(1, 64)
}

/// Per-sentence tensors reused by every decoding step.
#[derive(Clone, Copy, Debug)]
pub struct WordContext {
    /// `W x h` word states.
    pub states: Var,
    keys_t: Var,
    /// `W x h` fixation-position embeddings of the sentence's words.
    pub fix_pos: Var,
    pub n_words: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HistoryState {
    hidden: Var,
    /// Decoder input for the next step (`1 x h`).
    pub state: Var,
}

/// A differentiable sampled path: hard fixations plus one `1 x W` weight row
/// per fixation (one-hot forward in straight-through mode, a position
/// distribution in soft-convolution mode).
#[derive(Clone, Debug)]
pub struct GumbelPath {
    pub fixations: Vec<usize>,
    pub stopped: bool,
    pub weights: Vec<Var>,
    pub mode: BridgeMode,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub space: OffsetSpace,
    text: Option<TextEncoder>,
    word_pos: ParamId,
    fwd: Gru,
    bwd: Gru,
    word_proj: Linear,
    fix_pos: ParamId,
    hist: Gru,
    hist_proj: Linear,
    start: ParamId,
    query: Linear,
    out: Linear,
}

impl Generator {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        cfg: GeneratorConfig,
        rng: RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.text.d_model;
        let h = cfg.hidden;
        let n = |s: &str| format!("{GEN_PREFIX}{s}");
        let space = OffsetSpace::new(cfg.l_max)?;
        let text = (!cfg.share_text_encoder)
            .then(|| TextEncoder::new(store, &n("text"), cfg.text.clone(), rng));
        let word_pos = store.add(
            &n("word_pos"),
            &[cfg.max_words(), d],
            Init::Normal(0.1),
            rng,
        );
        let fwd = Gru::new(store, &n("words.fwd"), d, h / 2, rng);
        let bwd = Gru::new(store, &n("words.bwd"), d, h / 2, rng);
        let word_proj = Linear::new(store, &n("words.proj"), d, h, rng);
        let fix_pos = store.add(&n("fix_pos"), &[cfg.max_words(), h], Init::Normal(0.1), rng);
        let hist = Gru::new(store, &n("hist.gru"), 2 * h, h, rng);
        let hist_proj = Linear::new(store, &n("hist.proj"), 2 * h, h, rng);
        let start = store.add(&n("hist.start"), &[1, h], Init::Normal(0.1), rng);
        let query = Linear::new(store, &n("dec.query"), h, h, rng);
        let out = Linear::new(store, &n("dec.out"), 2 * h, space.n_classes(), rng);
        Ok(Self {
            cfg,
            space,
            text,
            word_pos,
            fwd,
            bwd,
            word_proj,
            fix_pos,
            hist,
            hist_proj,
            start,
            query,
            out,
        })
    }

    pub fn word_grus(&self) -> (&Gru, &Gru) {
        (&self.fwd, &self.bwd)
    }

    /// Encode a sentence. `shared` supplies word embeddings when the text
    /// encoder is shared with the task model.
    pub fn context<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncodedText,
        shared: Option<&EncodedVars>,
    ) -> Result<WordContext> {
        let words = match (&self.text, shared) {
            (Some(te), _) => te.encode(g, enc)?.words,
            (None, Some(v)) => v.words,
            (None, None) => {
                return Err(Error::Config(
                    "generator shares the text encoder but no encoder output was given".into(),
                ))
            }
        };
        self.context_from_words(g, words)
    }

    pub fn context_from_words<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        words: Var,
    ) -> Result<WordContext> {
        let n_words = g.shape(words).0;
        let states = self.encode_words(g, words)?;
        let table = g.param(self.fix_pos);
        let idx: Vec<usize> = (0..n_words).collect();
        let fix_pos = g.gather_rows(table, &idx);
        let keys_t = g.transpose(states);
        Ok(WordContext {
            states,
            keys_t,
            fix_pos,
            n_words,
        })
    }

    /// Bidirectional GRU over word embeddings plus positions, wrapped in a
    /// projected residual.
    pub fn encode_words<F: Real>(&self, g: &mut Graph<'_, F>, words: Var) -> Result<Var> {
        let (w, d) = g.shape(words);
        if w == 0 {
            return Err(Error::Empty("sentence has no words".into()));
        }
        if w > self.cfg.max_words() {
            return Err(Error::Config(format!(
                "{w} words exceed generator capacity {}",
                self.cfg.max_words()
            )));
        }
        assert_eq!(d, self.cfg.text.d_model, "word embedding width");
        let table = g.param(self.word_pos);
        let idx: Vec<usize> = (0..w).collect();
        let pos = g.gather_rows(table, &idx);
        let x = g.add(words, pos);

        let h0 = self.fwd.zero_state(g);
        let f = self.fwd.run(g, x, h0);
        let rev: Vec<usize> = (0..w).rev().collect();
        let xr = g.gather_rows(x, &rev);
        let h0 = self.bwd.zero_state(g);
        let mut b = self.bwd.run(g, xr, h0);
        b.reverse();
        let f = g.concat_rows(&f);
        let b = g.concat_rows(&b);
        let rnn = g.concat_cols(&[f, b]);
        let res = self.word_proj.forward(g, x);
        Ok(g.add(res, rnn))
    }

    pub fn start_state<F: Real>(&self, g: &mut Graph<'_, F>) -> HistoryState {
        HistoryState {
            hidden: self.hist.zero_state(g),
            state: g.param(self.start),
        }
    }

    /// History-encoder input for a hard fixation on `word`.
    pub fn hard_input<F: Real>(&self, g: &mut Graph<'_, F>, ctx: &WordContext, word: usize) -> Var {
        let s = g.row(ctx.states, word);
        let p = g.row(ctx.fix_pos, word);
        g.concat_cols(&[s, p])
    }

    /// History-encoder input for position weights `weights` (`1 x W`).
    pub fn mixture_input<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &WordContext,
        weights: Var,
    ) -> Var {
        let s = g.matmul(weights, ctx.states);
        let p = g.matmul(weights, ctx.fix_pos);
        g.concat_cols(&[s, p])
    }

    pub fn advance<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        st: &HistoryState,
        input: Var,
    ) -> HistoryState {
        let hidden = self.hist.step(g, input, st.hidden);
        let r = self.hist_proj.forward(g, input);
        HistoryState {
            hidden,
            state: g.add(r, hidden),
        }
    }

    /// Decoder states before each step of `prefix`, plus the one after it:
    /// `(len + 1) x h`, row 0 being the learned start vector.
    pub fn history_states<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &WordContext,
        prefix: &[usize],
    ) -> Result<Var> {
        if let Some((step, &f)) = prefix.iter().enumerate().find(|(_, &f)| f >= ctx.n_words) {
            return Err(Error::FixationOutOfRange {
                index: f,
                words: ctx.n_words,
                context: format!("history step {step}"),
            });
        }
        let start = g.param(self.start);
        if prefix.is_empty() {
            return Ok(start);
        }
        let ws = g.gather_rows(ctx.states, prefix);
        let ps = g.gather_rows(ctx.fix_pos, prefix);
        let x = g.concat_cols(&[ws, ps]);
        let h0 = self.hist.zero_state(g);
        let hs = self.hist.run(g, x, h0);
        let hs = g.concat_rows(&hs);
        let r = self.hist_proj.forward(g, x);
        let st = g.add(r, hs);
        Ok(g.concat_rows(&[start, st]))
    }

    /// Decoder state after `prefix` (`1 x h`).
    pub fn encode_history<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &WordContext,
        prefix: &[usize],
    ) -> Result<Var> {
        let all = self.history_states(g, ctx, prefix)?;
        Ok(g.row(all, prefix.len()))
    }

    /// Unmasked class logits for each row of `states`.
    pub fn decode<F: Real>(&self, g: &mut Graph<'_, F>, ctx: &WordContext, states: Var) -> Var {
        let q = self.query.forward(g, states);
        let s = g.matmul(q, ctx.keys_t);
        let s = g.scale(s, 1.0 / (self.cfg.hidden as f64).sqrt());
        let a = g.softmax(s);
        let c = g.matmul(a, ctx.states);
        let cat = g.concat_cols(&[c, states]);
        self.out.forward(g, cat)
    }

    pub fn decode_step<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &WordContext,
        state: Var,
        pos: Option<usize>,
    ) -> (Var, SaccadeStep) {
        let logits = self.decode(g, ctx, state);
        let step = SaccadeStep::new(
            g.value(logits).to_f64_vec(),
            self.space.valid_mask(pos, ctx.n_words),
        );
        (logits, step)
    }

    /// Mean cross-entropy of the gold classes (every fixation plus the final
    /// `STOP`) under masked softmax.
    pub fn nll_teacher_forced<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &WordContext,
        gold: &[usize],
    ) -> Result<Var> {
        let targets = gold_classes(&self.space, gold, ctx.n_words)?;
        let states = self.history_states(g, ctx, gold)?;
        let logits = self.decode(g, ctx, states);
        let c = self.space.n_classes();
        let mask: Vec<F> = gold_masks(&self.space, gold, ctx.n_words)
            .into_iter()
            .flatten()
            .map(|v| if v { F::zero() } else { F::lit(MASK_NEG) })
            .collect();
        let z = g.add_const(logits, &Tensor::matrix(targets.len(), c, mask));
        Ok(g.cross_entropy(z, &targets))
    }

    /// Autoregressive Gumbel-max sampling until `STOP` or the cap.
    pub fn sample_hard<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &WordContext,
        rng: RngState,
        max_fixations: usize,
    ) -> Result<(Vec<usize>, bool)> {
        if max_fixations == 0 {
            return Err(Error::Config("max_fixations must be >= 1".into()));
        }
        let mut stream = rng.rng();
        let mut walker = Walker::new(self.space, ctx.n_words, max_fixations);
        let mut st = self.start_state(g);
        while !walker.done() {
            let valid = walker.valid();
            let logits = self.decode(g, ctx, st.state);
            let draws = draw_gumbels(&mut stream, self.space.n_classes());
            let class = gumbel_argmax(&g.value(logits).to_f64_vec(), &valid, &draws);
            if let Some(w) = walker.apply(class)? {
                if !walker.done() {
                    let x = self.hard_input(g, ctx, w);
                    st = self.advance(g, &st, x);
                }
            }
        }
        Ok((walker.fixations, walker.stopped))
    }

    /// Differentiable sampling. With `forced`, the hard decisions follow
    /// that path (then `STOP`) while draws and relaxed samples are computed
    /// as usual.
    pub fn sample_gumbel<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &WordContext,
        rng: RngState,
        cfg: &GumbelConfig,
        max_fixations: usize,
        forced: Option<&[usize]>,
    ) -> Result<GumbelPath> {
        cfg.validate()?;
        if max_fixations == 0 {
            return Err(Error::Config("max_fixations must be >= 1".into()));
        }
        let forced = forced
            .map(|f| gold_classes(&self.space, f, ctx.n_words))
            .transpose()?;
        let n_classes = self.space.n_classes();
        let k = self.space.n_offsets();
        let mut stream = rng.rng();
        let mut walker = Walker::new(self.space, ctx.n_words, max_fixations);
        let mut st = self.start_state(g);
        let mut weights = Vec::new();
        let mut prev: Option<Var> = None;
        while !walker.done() {
            let t = walker.fixations.len();
            let valid = walker.valid();
            let pos = walker.pos;
            let logits = self.decode(g, ctx, st.state);
            let draws = draw_gumbels(&mut stream, n_classes);
            let choice = forced.as_ref().map(|f| f[t]);
            let w = match cfg.mode {
                BridgeMode::StraightThrough | BridgeMode::Relaxed => {
                    let st_mode = cfg.mode == BridgeMode::StraightThrough;
                    let (y, class) = gumbel_bridge_with(
                        g,
                        logits,
                        &valid,
                        &draws,
                        cfg.temperature,
                        st_mode,
                        choice,
                    );
                    if walker.apply(class)?.is_none() {
                        break;
                    }
                    g.gather_cols(y, &self.space.word_classes(pos, ctx.n_words))
                }
                BridgeMode::SoftConvolution => {
                    let class = choice.unwrap_or_else(|| {
                        gumbel_argmax(&g.value(logits).to_f64_vec(), &valid, &draws)
                    });
                    if class == self.space.stop() {
                        walker.apply(class)?;
                        break;
                    }
                    let off = g.slice_cols(logits, 0, k);
                    let z = g.add_const(off, &noise_and_mask(&valid[..k], &draws[..k]));
                    let z = g.scale(z, 1.0 / cfg.temperature);
                    let y = g.softmax(z);
                    let a = soft_convolution_step(g, &self.space, ctx.n_words, prev, y);
                    let word = match choice {
                        Some(c) => self.space.landing(pos, c, ctx.n_words).ok_or(
                            Error::OffsetOutOfRange {
                                step: t,
                                offset: self.space.offset_of(c).unwrap_or(0),
                            },
                        )?,
                        None => argmax(&g.value(a).to_f64_vec()),
                    };
                    walker.place(word);
                    prev = Some(a);
                    a
                }
            };
            weights.push(w);
            if !walker.done() {
                let x = self.mixture_input(g, ctx, w);
                st = self.advance(g, &st, x);
            }
        }
        Ok(GumbelPath {
            fixations: walker.fixations,
            stopped: walker.stopped,
            weights,
            mode: cfg.mode,
        })
    }

    /// Eval-mode hard sample for one encoded sentence.
    pub fn generate<F: Real>(
        &self,
        store: &ParamStore<F>,
        enc: &EncodedText,
        rng: RngState,
        max_fixations: Option<usize>,
    ) -> Result<(Vec<usize>, bool)> {
        let mut g = Graph::with_params(store).no_grad();
        let ctx = self.context(&mut g, enc, None)?;
        let cap = max_fixations.unwrap_or_else(|| default_max_fixations(ctx.n_words));
        self.sample_hard(&mut g, &ctx, rng, cap)
    }
}

fn gumbel_bridge_with<F: Real>(
    g: &mut Graph<'_, F>,
    logits: Var,
    valid: &[bool],
    draws: &[f64],
    tau: f64,
    straight_through: bool,
    choice: Option<usize>,
) -> (Var, usize) {
    match choice {
        None => gumbel_bridge(g, logits, valid, draws, tau, straight_through),
        Some(c) => {
            let (y, _) = gumbel_bridge(g, logits, valid, draws, tau, false);
            if !straight_through {
                return (y, c);
            }
            let mut one_hot = Tensor::zeros(&[1, valid.len()]);
            one_hot.data[c] = F::one();
            (g.straight_through(y, one_hot), c)
        }
    }
}

/// Lowest index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Constant `W x (K*W)` bank: block `o` maps a position distribution to
/// its shift by offset `o`, with out-of-range mass clamped to the nearest
/// boundary word.
pub fn shift_bank<F: Real>(space: &OffsetSpace, n_words: usize) -> Tensor<F> {
    let k = space.n_offsets();
    let cols = k * n_words;
    let mut m = vec![F::zero(); n_words * cols];
    for i in 0..n_words {
        for o in 0..k {
            let t = clamp_word(i as i64 + space.offset_of(o).unwrap(), n_words);
            m[i * cols + o * n_words + t] = F::one();
        }
    }
    Tensor::matrix(n_words, cols, m)
}

/// Landing distribution per offset from the virtual start (`K x W`).
pub fn start_shift<F: Real>(space: &OffsetSpace, n_words: usize) -> Tensor<F> {
    let k = space.n_offsets();
    let mut m = vec![F::zero(); k * n_words];
    for o in 0..k {
        let t = clamp_word(-1 + space.offset_of(o).unwrap(), n_words);
        m[o * n_words + t] = F::one();
    }
    Tensor::matrix(k, n_words, m)
}

fn clamp_word(t: i64, n_words: usize) -> usize {
    t.clamp(0, n_words as i64 - 1) as usize
}

/// `a_t[j] = sum_i a_{t-1}[i] * y[j - i]` with boundary clamping; `prev =
/// None` means the virtual start. `y` is `1 x K` over offset classes.
pub fn soft_convolution_step<F: Real>(
    g: &mut Graph<'_, F>,
    space: &OffsetSpace,
    n_words: usize,
    prev: Option<Var>,
    y: Var,
) -> Var {
    let shifted = match prev {
        None => g.constant(start_shift(space, n_words)),
        Some(a) => {
            let bank = g.constant(shift_bank(space, n_words));
            let m = g.matmul(a, bank);
            g.reshape(m, space.n_offsets(), n_words)
        }
    };
    g.matmul(y, shifted)
}
