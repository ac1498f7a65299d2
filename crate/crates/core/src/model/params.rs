use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::diffmath::{Scalar, Tensor};

/// Per-block tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerParam {
    AttnNormScale,
    AttnNormBias,
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    OutWeight,
    OutBias,
    FfNormScale,
    FfNormBias,
    FfInWeight,
    FfInBias,
    FfOutWeight,
    FfOutBias,
}

pub const LAYER_PARAMS: [LayerParam; 16] = [
    LayerParam::AttnNormScale,
    LayerParam::AttnNormBias,
    LayerParam::QueryWeight,
    LayerParam::QueryBias,
    LayerParam::KeyWeight,
    LayerParam::KeyBias,
    LayerParam::ValueWeight,
    LayerParam::ValueBias,
    LayerParam::OutWeight,
    LayerParam::OutBias,
    LayerParam::FfNormScale,
    LayerParam::FfNormBias,
    LayerParam::FfInWeight,
    LayerParam::FfInBias,
    LayerParam::FfOutWeight,
    LayerParam::FfOutBias,
];

impl LayerParam {
    fn name(self) -> &'static str {
        match self {
            LayerParam::AttnNormScale => "attn_norm.scale",
            LayerParam::AttnNormBias => "attn_norm.bias",
            LayerParam::QueryWeight => "attn.query.weight",
            LayerParam::QueryBias => "attn.query.bias",
            LayerParam::KeyWeight => "attn.key.weight",
            LayerParam::KeyBias => "attn.key.bias",
            LayerParam::ValueWeight => "attn.value.weight",
            LayerParam::ValueBias => "attn.value.bias",
            LayerParam::OutWeight => "attn.out.weight",
            LayerParam::OutBias => "attn.out.bias",
            LayerParam::FfNormScale => "ff_norm.scale",
            LayerParam::FfNormBias => "ff_norm.bias",
            LayerParam::FfInWeight => "ff.in.weight",
            LayerParam::FfInBias => "ff.in.bias",
            LayerParam::FfOutWeight => "ff.out.weight",
            LayerParam::FfOutBias => "ff.out.bias",
        }
    }
}

/// Names one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    TokenEmbedding,
    PositionEmbedding,
    Layer(usize, LayerParam),
    FinalNormScale,
    FinalNormBias,
    OutputWeight,
    OutputBias,
}

/// How a tensor is initialized.
enum Init {
    /// Zero-mean normal with standard deviation `1/sqrt(fan_in)`.
    Normal { fan_in: usize },
    Zeros,
    Ones,
}

impl ParamId {
    /// Position of this tensor in [`Parameters::tensors`] and in checkpoints.
    pub fn index(self, n_layers: usize) -> usize {
        match self {
            ParamId::TokenEmbedding => 0,
            ParamId::PositionEmbedding => 1,
            ParamId::Layer(l, p) => 2 + l * LAYER_PARAMS.len() + p as usize,
            ParamId::FinalNormScale => 2 + n_layers * LAYER_PARAMS.len(),
            ParamId::FinalNormBias => 3 + n_layers * LAYER_PARAMS.len(),
            ParamId::OutputWeight => 4 + n_layers * LAYER_PARAMS.len(),
            ParamId::OutputBias => 5 + n_layers * LAYER_PARAMS.len(),
        }
    }

    pub fn name(self) -> String {
        match self {
            ParamId::TokenEmbedding => "token_embedding".into(),
            ParamId::PositionEmbedding => "position_embedding".into(),
            ParamId::Layer(l, p) => format!("layers.{l}.{}", p.name()),
            ParamId::FinalNormScale => "final_norm.scale".into(),
            ParamId::FinalNormBias => "final_norm.bias".into(),
            ParamId::OutputWeight => "output.weight".into(),
            ParamId::OutputBias => "output.bias".into(),
        }
    }

    fn spec(self, c: &ModelConfig) -> (Vec<usize>, Init) {
        let (d, ff, v) = (c.d_model, c.d_ff, c.vocab_size);
        use LayerParam::*;
        match self {
            ParamId::TokenEmbedding => (vec![v, d], Init::Normal { fan_in: d }),
            ParamId::PositionEmbedding => (vec![c.max_seq_len, d], Init::Normal { fan_in: d }),
            ParamId::Layer(_, p) => match p {
                AttnNormScale | FfNormScale => (vec![d], Init::Ones),
                AttnNormBias | FfNormBias | QueryBias | KeyBias | ValueBias | OutBias | FfOutBias => {
                    (vec![d], Init::Zeros)
                }
                QueryWeight | KeyWeight | ValueWeight | OutWeight => (vec![d, d], Init::Normal { fan_in: d }),
                FfInWeight => (vec![d, ff], Init::Normal { fan_in: d }),
                FfInBias => (vec![ff], Init::Zeros),
                FfOutWeight => (vec![ff, d], Init::Normal { fan_in: ff }),
            },
            ParamId::FinalNormScale => (vec![d], Init::Ones),
            ParamId::FinalNormBias => (vec![d], Init::Zeros),
            ParamId::OutputWeight => (vec![d, v], Init::Normal { fan_in: d }),
            ParamId::OutputBias => (vec![v], Init::Zeros),
        }
    }
}

/// Every [`ParamId`] of a configuration in storage order.
pub fn param_ids(config: &ModelConfig) -> Vec<ParamId> {
    let mut ids = vec![ParamId::TokenEmbedding, ParamId::PositionEmbedding];
    for l in 0..config.n_layers {
        ids.extend(LAYER_PARAMS.iter().map(|&p| ParamId::Layer(l, p)));
    }
    ids.extend([
        ParamId::FinalNormScale,
        ParamId::FinalNormBias,
        ParamId::OutputWeight,
        ParamId::OutputBias,
    ]);
    ids
}

/// Expected tensor shapes for a configuration, in storage order.
pub fn param_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    param_ids(config).into_iter().map(|id| id.spec(config).0).collect()
}

/// Weights of the decoder, stored flat in the order of [`param_ids`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<S> {
    n_layers: usize,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Parameters<S> {
    /// Deterministic in `seed`: normal weights scaled by `1/sqrt(fan_in)`,
    /// unit layer-norm scales, zero offsets and biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_ids(config)
            .into_iter()
            .map(|id| {
                let (shape, init) = id.spec(config);
                match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, S::one()),
                    Init::Normal { fan_in } => {
                        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| S::of(dist.sample(&mut rng))).collect();
                        Tensor::new(shape, data).expect("shape matches")
                    }
                }
            })
            .collect();
        Parameters {
            n_layers: config.n_layers,
            tensors,
        }
    }

    /// Wraps tensors already known to match `config`'s layout.
    pub(crate) fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<S>>) -> Self {
        debug_assert_eq!(tensors.len(), param_ids(config).len());
        Parameters {
            n_layers: config.n_layers,
            tensors,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.index(self.n_layers)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.index(self.n_layers)]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        Parameters {
            n_layers: self.n_layers,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
