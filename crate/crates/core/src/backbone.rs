//! Bias-free fully connected ReLU network with per-layer feature traces.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `layer_dims = [d₀, …, d_K]`; layer `k` maps `d_{k-1}` features to `d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBackbone {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
}

/// On-disk checkpoint layout: dims plus row-major weight arrays.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

impl MlpBackbone {
    /// He-initialized network, reproducible for a given seed.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect();
                Tensor::matrix(fan_in, fan_out, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
        })
    }

    pub fn from_weights(layer_dims: &[usize], weights: Vec<Tensor>) -> Result<Self> {
        validate_dims(layer_dims)?;
        if weights.len() != layer_dims.len() - 1 {
            return Err(shape_err(
                "from_weights",
                format!("{} weights for {} layers", weights.len(), layer_dims.len() - 1),
            ));
        }
        for (k, (w, dims)) in weights.iter().zip(layer_dims.windows(2)).enumerate() {
            if w.shape() != dims {
                return Err(shape_err(
                    "from_weights",
                    format!("layer {} weight {:?}, expected {:?}", k + 1, w.shape(), dims),
                ));
            }
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Number of weight layers `K`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    /// Records the weights on `tape`, trainable or frozen.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundBackbone<'t> {
        let weights = self
            .weights
            .iter()
            .map(|w| {
                if trainable {
                    tape.param(w.clone())
                } else {
                    tape.constant(w.clone())
                }
            })
            .collect();
        BoundBackbone { tape, weights }
    }

    /// Logits without recording anything.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            h = h.matmul(w)?;
            if k < last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(shape_err(
                "forward",
                format!("input {:?}, model expects {} features", x.shape(), self.input_dim()),
            ));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(|w| w.data().to_vec()).collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        validate_dims(&ck.layer_dims)?;
        let weights = ck
            .weights
            .into_iter()
            .zip(ck.layer_dims.windows(2))
            .map(|(data, d)| Tensor::matrix(d[0], d[1], data))
            .collect::<Result<Vec<_>>>()?;
        Self::from_weights(&ck.layer_dims, weights)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 3 {
        return Err(Error::Config(format!(
            "need at least one hidden layer, got dims {:?}",
            dims
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("zero-width layer in {:?}", dims)));
    }
    Ok(())
}

/// Weights of a backbone recorded on a tape.
pub struct BoundBackbone<'t> {
    tape: &'t Tape,
    weights: Vec<Var<'t>>,
}

/// Feature maps `F⁰ … F^K` of one batch: the raw input, then each layer's
/// post-activation output (pre-softmax logits for the last layer).
#[derive(Clone, Debug)]
pub struct ForwardTrace<'t> {
    pub feature_maps: Vec<Var<'t>>,
}

impl<'t> ForwardTrace<'t> {
    pub fn logits(&self) -> Var<'t> {
        *self.feature_maps.last().expect("trace is never empty")
    }

    pub fn batch_size(&self) -> usize {
        self.feature_maps[0].value().rows()
    }

    /// Number of weight layers covered by the trace.
    pub fn depth(&self) -> usize {
        self.feature_maps.len() - 1
    }
}

impl<'t> BoundBackbone<'t> {
    pub fn weights(&self) -> &[Var<'t>] {
        &self.weights
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Forward pass of a constant input batch.
    pub fn forward_with_trace(&self, x: &Tensor) -> Result<ForwardTrace<'t>> {
        let input = self.tape.constant(x.clone());
        self.forward_var(input)
    }

    /// Forward pass of an input already on the tape (e.g. to differentiate
    /// with respect to the input).
    pub fn forward_var(&self, x: Var<'t>) -> Result<ForwardTrace<'t>> {
        let d0 = self.weights[0].value().rows();
        {
            let v = x.value();
            if v.shape().len() != 2 || v.cols() != d0 {
                return Err(shape_err(
                    "forward_with_trace",
                    format!("input {:?}, model expects {} features", v.shape(), d0),
                ));
            }
        }
        let last = self.weights.len() - 1;
        let mut maps = Vec::with_capacity(self.weights.len() + 1);
        maps.push(x);
        let mut h = x;
        for (k, w) in self.weights.iter().enumerate() {
            h = h.matmul(*w)?;
            if k < last {
                h = h.relu();
            }
            maps.push(h);
        }
        Ok(ForwardTrace { feature_maps: maps })
    }
}
