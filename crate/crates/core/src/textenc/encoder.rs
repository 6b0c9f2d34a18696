use serde::{Deserialize, Serialize};

use super::tokenize::EncodedText;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, MASK_NEG};
use crate::nn::{LayerNorm, Linear};
use crate::rng::RngState;
use crate::tensor::{Init, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Embedding dropout, train mode only.
    pub dropout: f64,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize, d_model: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            layers: 2,
            heads: 4,
            d_ff: 2 * d_model,
            max_len: 64,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must be >= 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer encoder with learned absolute position and segment
/// embeddings. Feed-forward blocks use a tanh nonlinearity.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
}

/// Graph handles produced by [`TextEncoder::encode`].
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `T x d`, one row per token including specials.
    pub tokens: Var,
    /// `1 x d`, the `[CLS]` row.
    pub cls: Var,
    /// `W x d`, mean of each word's token rows.
    pub words: Var,
}

/// Plain values of an encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderOutput<F> {
    pub token_embeddings: Tensor<F>,
    pub cls_embedding: Tensor<F>,
    pub word_embeddings: Tensor<F>,
}

impl TextEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: TextEncoderConfig,
        rng: RngState,
    ) -> Self {
        cfg.validate().expect("invalid text encoder config");
        let d = cfg.d_model;
        let emb = Init::Normal(0.1);
        let tok_emb = store.add(&format!("{name}.tok_emb"), &[cfg.vocab_size, d], emb, rng);
        let pos_emb = store.add(&format!("{name}.pos_emb"), &[cfg.max_len, d], emb, rng);
        let seg_emb = store.add(&format!("{name}.seg_emb"), &[2, d], emb, rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Block {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d, rng),
                    wq: Linear::new(store, &format!("{p}.wq"), d, d, rng),
                    wk: Linear::new(store, &format!("{p}.wk"), d, d, rng),
                    wv: Linear::new(store, &format!("{p}.wv"), d, d, rng),
                    wo: Linear::new(store, &format!("{p}.wo"), d, d, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d, rng),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), d, cfg.d_ff, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), cfg.d_ff, d, rng),
                }
            })
            .collect();
        let ln_final = LayerNorm::new(store, &format!("{name}.ln_final"), d, rng);
        Self {
            cfg,
            tok_emb,
            pos_emb,
            seg_emb,
            blocks,
            ln_final,
        }
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, enc: &EncodedText) -> Result<EncodedVars> {
        let t = enc.len();
        if t > self.cfg.max_len {
            return Err(Error::Config(format!(
                "{t} tokens exceed encoder max_len {}",
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = enc.token_ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.cfg.vocab_size,
            });
        }
        if enc.n_words() == 0 {
            return Err(Error::Empty("encoded text has no words".into()));
        }
        let tok_table = g.param(self.tok_emb);
        let tok = g.gather_rows(tok_table, &enc.token_ids);
        let pos_table = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(pos_table, &positions);
        let seg_table = g.param(self.seg_emb);
        let segs: Vec<usize> = enc.segment_ids.iter().map(|&s| s as usize).collect();
        let seg = g.gather_rows(seg_table, &segs);
        let x = g.add(tok, pos);
        let mut x = g.add(x, seg);
        x = g.dropout(x, self.cfg.dropout);

        let key_mask = Tensor::row(
            enc.attention_mask
                .iter()
                .map(|&m| if m == 1 { F::zero() } else { F::lit(MASK_NEG) })
                .collect(),
        );
        for b in &self.blocks {
            let h = b.ln_attn.forward(g, x);
            let a = self.attention(g, b, h, &key_mask);
            x = g.add(x, a);
            let h = b.ln_ff.forward(g, x);
            let h = b.ff_in.forward(g, h);
            let h = g.tanh(h);
            let h = b.ff_out.forward(g, h);
            x = g.add(x, h);
        }
        let tokens = self.ln_final.forward(g, x);
        let cls = g.row(tokens, 0);
        let pool = g.constant(pooling_matrix(enc));
        let words = g.matmul(pool, tokens);
        Ok(EncodedVars { tokens, cls, words })
    }

    fn attention<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        b: &Block,
        h: Var,
        key_mask: &Tensor<F>,
    ) -> Var {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let q = b.wq.forward(g, h);
        let k = b.wk.forward(g, h);
        let v = b.wv.forward(g, h);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = g.slice_cols(q, i * dh, dh);
            let kh = g.slice_cols(k, i * dh, dh);
            let vh = g.slice_cols(v, i * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, scale);
            let p = g.masked_softmax(s, key_mask);
            outs.push(g.matmul(p, vh));
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        b.wo.forward(g, cat)
    }

    /// Eval-mode pass returning plain values.
    pub fn run<F: Real>(
        &self,
        store: &ParamStore<F>,
        enc: &EncodedText,
    ) -> Result<TextEncoderOutput<F>> {
        let mut g = Graph::with_params(store).no_grad();
        let v = self.encode(&mut g, enc)?;
        Ok(TextEncoderOutput {
            token_embeddings: g.value(v.tokens).clone(),
            cls_embedding: g.value(v.cls).clone(),
            word_embeddings: g.value(v.words).clone(),
        })
    }
}

/// `W x T` matrix averaging each word's token rows.
pub fn pooling_matrix<F: Real>(enc: &EncodedText) -> Tensor<F> {
    let (w, t) = (enc.n_words(), enc.len());
    let mut m = vec![F::zero(); w * t];
    for (i, &(s, e)) in enc.word_spans.iter().enumerate() {
        let k = F::one() / F::lit((e - s) as f64);
        for j in s..e {
            m[i * t + j] = k;
        }
    }
    Tensor::matrix(w, t, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_params, GradcheckOptions};
    use crate::textenc::{tokenize, Vocab};

    fn setup(d: usize, layers: usize) -> (Vocab, TextEncoder, ParamStore<f32>) {
        let vocab =
            Vocab::build(["the quick brown fox jumps over the lazy dog again"], 48).unwrap();
        let mut cfg = TextEncoderConfig::new(vocab.len(), d);
        cfg.layers = layers;
        cfg.max_len = 24;
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, "lm", cfg, RngState::new(5, 0));
        (vocab, enc, store)
    }

    #[test]
    fn eval_is_deterministic() {
        let (vocab, enc, store) = setup(16, 2);
        let e = tokenize("the lazy fox", None, &vocab, 24).unwrap();
        let a = enc.run(&store, &e).unwrap();
        let b = enc.run(&store, &e).unwrap();
        let bits = |t: &Tensor<f32>| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.token_embeddings), bits(&b.token_embeddings));
        assert!(a.token_embeddings.all_finite());
    }

    #[test]
    fn word_rows_are_means_of_token_rows() {
        let (vocab, enc, store) = setup(16, 2);
        let e = tokenize("jumps quickly over brownish dogs", None, &vocab, 24).unwrap();
        let out = enc.run(&store, &e).unwrap();
        let d = 16;
        for (w, &(s, end)) in e.word_spans.iter().enumerate() {
            for j in 0..d {
                let mean: f32 = (s..end)
                    .map(|t| out.token_embeddings.data[t * d + j])
                    .sum::<f32>()
                    / (end - s) as f32;
                assert!((out.word_embeddings.data[w * d + j] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_tail_does_not_leak() {
        let (vocab, enc, store) = setup(16, 2);
        let mut e = tokenize("the quick dog", None, &vocab, 24).unwrap();
        let n = e.len();
        e.pad_to(n + 4);
        let mut e2 = e.clone();
        // arbitrary ids in masked positions, then a permutation of them
        e.token_ids[n..].copy_from_slice(&[5, 9, 11, 7]);
        e2.token_ids[n..].copy_from_slice(&[11, 7, 5, 9]);
        let a = enc.run(&store, &e).unwrap();
        let b = enc.run(&store, &e2).unwrap();
        for i in 0..n * 16 {
            assert!((a.token_embeddings.data[i] - b.token_embeddings.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_id_is_an_error() {
        let (vocab, enc, store) = setup(16, 1);
        let mut e = tokenize("the dog", None, &vocab, 24).unwrap();
        e.token_ids[1] = 10_000;
        assert!(matches!(
            enc.run(&store, &e),
            Err(Error::TokenOutOfRange { id: 10_000, .. })
        ));
    }

    #[test]
    fn gradcheck_one_layer() {
        let vocab = Vocab::build(["ab cd ef gh ij kl ab cd ef gh ij kl"], 40).unwrap();
        let mut cfg = TextEncoderConfig::new(vocab.len(), 16);
        cfg.layers = 1;
        cfg.max_len = 12;
        let mut store = ParamStore::<f64>::new();
        let enc = TextEncoder::new(&mut store, "lm", cfg, RngState::new(3, 3));
        let e = tokenize("ab cd ef gh ij kl", None, &vocab, 12).unwrap();
        assert_eq!(e.len(), 8);
        let target = Tensor::<f64>::randn(&[8, 16], 1.0, RngState::new(4, 4));
        let r = gradcheck_params(
            &store,
            |g| {
                let v = enc.encode(g, &e).unwrap();
                g.mse(v.tokens, &target)
            },
            GradcheckOptions::default().with_tol(1e-4).sampled(6, 1),
        );
        assert!(r.passed(), "{:?}", r.worst());
    }
}
