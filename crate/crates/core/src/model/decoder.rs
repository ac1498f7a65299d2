//! Incremental decoding with per-layer key/value caches.

use super::params::{LayerParam, ParamId, Parameters};
use super::transformer::TransformerLm;
use super::LanguageModel;
use crate::diffmath::{gelu, gemm, log_softmax_row, softmax_row, MatLayout, Scalar, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Keys and values of every position read so far.
#[derive(Debug, Clone)]
pub struct DecoderState<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    position: usize,
}

impl<S> DecoderState<S> {
    pub fn position(&self) -> usize {
        self.position
    }
}

fn layer_norm<S: Scalar>(x: &[S], gamma: &Tensor<S>, beta: &Tensor<S>) -> Vec<S> {
    let n = S::of(x.len() as f64);
    let mu = x.iter().fold(S::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(S::zero(), |a, &v| a + (v - mu) * (v - mu)) / n;
    let inv = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
    x.iter()
        .zip(gamma.data().iter().zip(beta.data()))
        .map(|(&v, (&g, &b))| (v - mu) * inv * g + b)
        .collect()
}

/// `x · W + b` for one row.
fn affine<S: Scalar>(x: &[S], w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = b.data().to_vec();
    gemm(x, MatLayout::new(1, k), w.data(), MatLayout::new(k, n), &mut out, true);
    out
}

impl<S: Scalar> TransformerLm<S> {
    fn step(&self, state: &mut DecoderState<S>, token: u32) -> Result<Vec<S>> {
        let c = self.config();
        let p: &Parameters<S> = self.params();
        if token as usize >= c.vocab_size {
            return Err(Error::IndexOutOfRange {
                op: "decode",
                index: token as usize,
                extent: c.vocab_size,
            });
        }
        if state.position >= c.max_seq_len {
            return Err(Error::Invalid(format!(
                "decoder already read the model maximum of {} positions",
                c.max_seq_len
            )));
        }
        let (d, h, dh) = (c.d_model, c.n_heads, c.head_dim());
        let t = state.position;
        let emb = p.get(ParamId::TokenEmbedding).data();
        let pos = p.get(ParamId::PositionEmbedding).data();
        let tok = token as usize;
        let mut x: Vec<S> = (0..d).map(|j| emb[tok * d + j] + pos[t * d + j]).collect();
        let scale = S::of(1.0 / (dh as f64).sqrt());

        for l in 0..c.n_layers {
            let w = |q: LayerParam| p.get(ParamId::Layer(l, q));
            let a = layer_norm(&x, w(LayerParam::AttnNormScale), w(LayerParam::AttnNormBias));
            let q = affine(&a, w(LayerParam::QueryWeight), w(LayerParam::QueryBias));
            let k = affine(&a, w(LayerParam::KeyWeight), w(LayerParam::KeyBias));
            let v = affine(&a, w(LayerParam::ValueWeight), w(LayerParam::ValueBias));
            state.keys[l].extend_from_slice(&k);
            state.values[l].extend_from_slice(&v);
            let keys = &state.keys[l];
            let vals = &state.values[l];
            let mut ctx = vec![S::zero(); d];
            let mut scores = vec![S::zero(); t + 1];
            for head in 0..h {
                let off = head * dh;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + off..j * d + off + dh];
                    *s = q[off..off + dh].iter().zip(kj).fold(S::zero(), |acc, (&a, &b)| acc + a * b) * scale;
                }
                softmax_row(&mut scores);
                for (j, &wj) in scores.iter().enumerate() {
                    let vj = &vals[j * d + off..j * d + off + dh];
                    for (cv, &vv) in ctx[off..off + dh].iter_mut().zip(vj) {
                        *cv = *cv + wj * vv;
                    }
                }
            }
            let out = affine(&ctx, w(LayerParam::OutWeight), w(LayerParam::OutBias));
            for (xv, o) in x.iter_mut().zip(out) {
                *xv = *xv + o;
            }
            let f = layer_norm(&x, w(LayerParam::FfNormScale), w(LayerParam::FfNormBias));
            let mut f = affine(&f, w(LayerParam::FfInWeight), w(LayerParam::FfInBias));
            for v in &mut f {
                *v = gelu(*v);
            }
            let f = affine(&f, w(LayerParam::FfOutWeight), w(LayerParam::FfOutBias));
            for (xv, o) in x.iter_mut().zip(f) {
                *xv = *xv + o;
            }
        }
        let x = layer_norm(&x, p.get(ParamId::FinalNormScale), p.get(ParamId::FinalNormBias));
        let mut logits = affine(&x, p.get(ParamId::OutputWeight), p.get(ParamId::OutputBias));
        log_softmax_row(&mut logits);
        state.position += 1;
        Ok(logits)
    }
}

impl<S: Scalar> LanguageModel for TransformerLm<S> {
    type State = DecoderState<S>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_input_len(&self) -> usize {
        self.config().max_seq_len
    }

    fn begin(&self) -> DecoderState<S> {
        let n = self.config().n_layers;
        DecoderState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            position: 0,
        }
    }

    fn advance(&self, state: &mut DecoderState<S>, token: u32) -> Result<Vec<f64>> {
        Ok(self.step(state, token)?.into_iter().map(|v| v.as_f64()).collect())
    }
}
