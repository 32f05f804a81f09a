//! Small feed-forward encoders with hand-written backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize_rows_backward, unit_rows, EmbeddingBatch};
use crate::error::{Error, Result};

/// Affine layer `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Scale of the Gaussian initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScale {
    /// Weights are drawn with std `weight_gain / sqrt(fan_in)`.
    pub weight_gain: f64,
    /// Std of the bias draws.
    pub bias_std: f64,
}

impl Default for InitScale {
    fn default() -> Self {
        Self {
            weight_gain: 1.0,
            bias_std: 1.0,
        }
    }
}

/// Multi-layer perceptron with `tanh` between layers and a linear last layer.
/// The output is row-normalized by [`EncoderModel::forward`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderModel {
    pub layers: Vec<Dense>,
    #[serde(skip)]
    version: u64,
}

// Equality is on parameters only; the cache version counter is bookkeeping.
impl PartialEq for EncoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    version: u64,
    /// Input of every layer; `inputs[0]` is the feature batch and later
    /// entries are `tanh` outputs.
    inputs: Vec<Array2<f64>>,
    /// Output of the last layer before normalization.
    pub raw: Array2<f64>,
    pub unit: Array2<f64>,
    pub norms: Array1<f64>,
}

impl EncoderCache {
    /// Pulls a gradient w.r.t. the unit outputs back to the raw outputs.
    pub fn unit_grad_to_raw(&self, grad_unit: &Array2<f64>) -> Array2<f64> {
        normalize_rows_backward(self.unit.view(), self.norms.view(), grad_unit.view())
    }
}

/// Parameter gradients (same layout as [`EncoderModel::layers`]) plus the
/// gradient with respect to the input features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Dense>,
    pub input: Array2<f64>,
}

impl EncoderGrads {
    /// Flat views in the order of [`EncoderModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

impl EncoderModel {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "an encoder needs at least one layer".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].weight.ncols(),
                    i + 1,
                    pair[1].weight.nrows()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::ShapeMismatch(format!("layer {i} bias length")));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("encoder layer {i}")));
            }
        }
        // Keep contiguous storage so parameters can be exposed as slices.
        let layers = layers
            .into_iter()
            .map(|l| Dense {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias.as_standard_layout().into_owned(),
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    /// One hidden `tanh` layer, Gaussian init from `seed`.
    pub fn mlp(d_in: usize, hidden: usize, d_out: usize, init: InitScale, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let w_std = init.weight_gain / (fan_in as f64).sqrt();
            Dense {
                weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    w_std * rng.sample::<f64, _>(StandardNormal)
                }),
                bias: Array1::from_shape_simple_fn(fan_out, || {
                    init.bias_std * rng.sample::<f64, _>(StandardNormal)
                }),
            }
        };
        let first = layer(d_in, hidden);
        let second = layer(hidden, d_out);
        Self {
            layers: vec![first, second],
            version: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter names matching [`Self::param_slices_mut`].
    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    /// Mutable flat views of every weight and bias, in layer order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Runs the network and normalizes the rows of its output.
    pub fn forward(&self, features: &Array2<f64>) -> Result<(EmbeddingBatch, EncoderCache)> {
        if features.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                features.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = features.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&x);
            inputs.push(x);
            x = if i < last { y.mapv(f64::tanh) } else { y };
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let (unit, norms) = unit_rows(x.view())?;
        let batch = EmbeddingBatch::from_normalized(unit.clone())?;
        Ok((
            batch,
            EncoderCache {
                version: self.version,
                inputs,
                raw: x,
                unit,
                norms,
            },
        ))
    }

    /// Backpropagates a gradient taken w.r.t. the normalized output.
    pub fn backward(&self, cache: &EncoderCache, grad_unit: &Array2<f64>) -> Result<EncoderGrads> {
        self.check_cache(cache, grad_unit)?;
        self.backward_raw(cache, &cache.unit_grad_to_raw(grad_unit))
    }

    /// Backpropagates a gradient taken w.r.t. the output before normalization.
    pub fn backward_raw(
        &self,
        cache: &EncoderCache,
        grad_raw: &Array2<f64>,
    ) -> Result<EncoderGrads> {
        self.check_cache(cache, grad_raw)?;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut g = grad_raw.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            grads.push(Dense {
                weight: x.t().dot(&g),
                bias: g.sum_axis(Axis(0)),
            });
            let mut gx = g.dot(&layer.weight.t());
            if i > 0 {
                // x is tanh output of the previous layer
                gx.zip_mut_with(x, |gv, &h| *gv *= 1.0 - h * h);
            }
            g = gx;
        }
        grads.reverse();
        Ok(EncoderGrads {
            layers: grads,
            input: g,
        })
    }

    fn check_cache(&self, cache: &EncoderCache, grad: &Array2<f64>) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {}, model is at {}",
                cache.version, self.version
            )));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(
                "cache built by a different architecture".into(),
            ));
        }
        if grad.dim() != cache.raw.dim() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} does not match output {:?}",
                grad.dim(),
                cache.raw.dim()
            )));
        }
        Ok(())
    }
}
