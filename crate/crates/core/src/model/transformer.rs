use super::config::ModelConfig;
use super::params::{param_shapes, LayerParam, ParamId, Parameters};
use super::SurprisalVector;
use crate::corpus::{make_batches, Batch, TokenSequence};
use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Pre-layer-norm causal transformer decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm<S = f32> {
    config: ModelConfig,
    params: Parameters<S>,
}

impl<S: Scalar> TransformerLm<S> {
    /// Fresh model initialized from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, config.init_seed);
        Ok(TransformerLm { config, params })
    }

    pub fn from_parameters(config: ModelConfig, params: Parameters<S>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if params.tensors().len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.tensors().len()
            )));
        }
        for (t, shape) in params.tensors().iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameters", shape, t.shape()));
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite { op: "parameters" });
        }
        Ok(TransformerLm { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<S> {
        &mut self.params
    }

    pub fn into_params(self) -> Parameters<S> {
        self.params
    }

    pub fn cast<T: Scalar>(&self) -> TransformerLm<T> {
        TransformerLm {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Registers every parameter as a leaf, in storage order.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Registers every parameter as a constant, for gradient-free scoring.
    pub fn bind_constant(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Log-probability table of shape `(rows * steps, vocab)`; row
    /// `r * steps + t` is log p(· | inputs[r, ..=t]).
    ///
    /// `vars` are parameter nodes as returned by [`bind`](Self::bind).
    /// Dropout is active only when `g` is in training mode.
    pub fn forward(&self, g: &mut Graph<S>, vars: &[Var], inputs: &[u32], rows: usize, steps: usize) -> Result<Var> {
        let c = &self.config;
        if steps > c.max_seq_len {
            return Err(Error::Invalid(format!(
                "input length {steps} exceeds the model maximum {}",
                c.max_seq_len
            )));
        }
        if inputs.len() != rows * steps {
            return Err(Error::shape("forward", &[rows, steps], &[inputs.len()]));
        }
        if let Some(&bad) = inputs.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::IndexOutOfRange {
                op: "forward",
                index: bad as usize,
                extent: c.vocab_size,
            });
        }
        if vars.len() != self.params.tensors().len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter nodes, got {}",
                self.params.tensors().len(),
                vars.len()
            )));
        }
        let p = |id: ParamId| vars[id.index(c.n_layers)];
        let (d, h, dh) = (c.d_model, c.n_heads, c.head_dim());
        let n = rows * steps;

        let ids: Vec<usize> = inputs.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).map(|i| i % steps).collect();
        let tok = g.gather_rows(p(ParamId::TokenEmbedding), &ids)?;
        let pos = g.gather_rows(p(ParamId::PositionEmbedding), &positions)?;
        let mut x = g.add(tok, pos)?;
        x = g.dropout(x, c.dropout)?;

        for l in 0..c.n_layers {
            let lp = |q: LayerParam| p(ParamId::Layer(l, q));
            let a = g.layer_norm(x, lp(LayerParam::AttnNormScale), lp(LayerParam::AttnNormBias))?;
            let q = self.affine(g, a, lp(LayerParam::QueryWeight), lp(LayerParam::QueryBias))?;
            let k = self.affine(g, a, lp(LayerParam::KeyWeight), lp(LayerParam::KeyBias))?;
            let v = self.affine(g, a, lp(LayerParam::ValueWeight), lp(LayerParam::ValueBias))?;
            let q = g.reshape(q, &[rows, steps, h, dh])?;
            let q = g.permute(q, &[0, 2, 1, 3])?;
            let k = g.reshape(k, &[rows, steps, h, dh])?;
            let kt = g.permute(k, &[0, 2, 3, 1])?;
            let v = g.reshape(v, &[rows, steps, h, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let scores = g.causal_mask(scores)?;
            let weights = g.softmax(scores)?;
            let ctx = g.matmul(weights, v)?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[n, d])?;
            let out = self.affine(g, ctx, lp(LayerParam::OutWeight), lp(LayerParam::OutBias))?;
            let out = g.dropout(out, c.dropout)?;
            x = g.add(x, out)?;

            let f = g.layer_norm(x, lp(LayerParam::FfNormScale), lp(LayerParam::FfNormBias))?;
            let f = self.affine(g, f, lp(LayerParam::FfInWeight), lp(LayerParam::FfInBias))?;
            let f = g.gelu(f)?;
            let f = self.affine(g, f, lp(LayerParam::FfOutWeight), lp(LayerParam::FfOutBias))?;
            let f = g.dropout(f, c.dropout)?;
            x = g.add(x, f)?;
        }

        let x = g.layer_norm(x, p(ParamId::FinalNormScale), p(ParamId::FinalNormBias))?;
        let logits = self.affine(g, x, p(ParamId::OutputWeight), p(ParamId::OutputBias))?;
        g.log_softmax(logits)
    }

    fn affine(&self, g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// [`forward`](Self::forward) over a padded batch.
    pub fn forward_batch(&self, g: &mut Graph<S>, vars: &[Var], batch: &Batch) -> Result<Var> {
        self.forward(g, vars, &batch.inputs(), batch.rows, batch.steps())
    }

    /// Evaluation-mode log-probability table for a batch.
    pub fn log_prob_table(&self, batch: &Batch) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let out = self.forward_batch(&mut g, &vars, batch)?;
        Ok(g.value(out).clone())
    }

    /// Surprisal vectors of every row of `batch`, in row order.
    pub fn batch_surprisals(&self, batch: &Batch) -> Result<Vec<SurprisalVector>> {
        let table = self.log_prob_table(batch)?;
        let v = self.config.vocab_size;
        let data = table.data();
        let targets = batch.targets();
        Ok(batch
            .target_positions()
            .into_iter()
            .map(|positions| {
                let tgt: Vec<u32> = positions.iter().map(|&i| targets[i]).collect();
                let values = positions
                    .iter()
                    .zip(&tgt)
                    .map(|(&i, &t)| -data[i * v + t as usize].as_f64())
                    .collect();
                SurprisalVector::new(values, tgt)
            })
            .collect())
    }

    pub fn surprisals(&self, seq: &TokenSequence) -> Result<SurprisalVector> {
        let batch = Batch::from_sequences(&[seq], vec![0]);
        Ok(self.batch_surprisals(&batch)?.remove(0))
    }

    /// Scores many sequences in order-preserving batches of at most `max_tokens` ids.
    pub fn score_all(&self, seqs: &[TokenSequence], max_tokens: usize) -> Result<Vec<SurprisalVector>> {
        let budget = max_tokens.max(self.config.max_seq_len + 1);
        let batches = make_batches(seqs, budget, self.config.max_seq_len, 0, false)?;
        let mut out = Vec::with_capacity(seqs.len());
        for b in &batches {
            out.extend(self.batch_surprisals(b)?);
        }
        Ok(out)
    }

    /// `Σ_t log p(w_t | w_<t)` in nats, EOS included.
    pub fn sequence_log_prob(&self, seq: &TokenSequence) -> Result<f64> {
        Ok(-self.surprisals(seq)?.total())
    }
}
