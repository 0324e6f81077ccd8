//! Feed-forward encoder mapping a view descriptor to its feature vector.
//!
//! Hidden layers use a rectifier, the output layer is linear. An optional
//! linear classification head on top of the features produces logits for
//! the cross-entropy ablation term.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::pdsc;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            biases: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients for `grad_out` and returns the
    /// gradient with respect to the layer input.
    fn backward(&self, input: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad_b[o] += g;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad_w[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * input[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    layers: Vec<Layer>,
    head: Option<Layer>,
    version: u64,
}

/// Activations recorded by a forward pass, needed for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    logits: Option<Vec<f64>>,
}

impl ForwardCache {
    pub fn features(&self) -> &[f64] {
        self.activations.last().expect("at least the input")
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    /// One gradient per parameter tensor, in `tensors()` order.
    pub params: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl EncoderModel {
    /// Randomly initialised model with `layer_dims = [input, hidden..., output]`.
    pub fn new_random(layer_dims: &[usize], head_classes: Option<usize>, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::invalid(
                "layer_dims",
                "need at least input and output sizes, all positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer::glorot(w[0], w[1], &mut rng))
            .collect();
        let head = match head_classes {
            Some(0) => return Err(Error::invalid("head", "classification head needs at least one class")),
            Some(k) => Some(Layer::glorot(*layer_dims.last().unwrap(), k, &mut rng)),
            None => None,
        };
        Self::from_layers(layers, head)
    }

    /// Single linear layer with identity weights.
    pub fn identity(dim: usize) -> Self {
        let mut layer = Layer::zeros(dim, dim);
        for i in 0..dim {
            layer.weights[i * dim + i] = 1.0;
        }
        Self {
            layers: vec![layer],
            head: None,
            version: 0,
        }
    }

    pub fn from_layers(layers: Vec<Layer>, head: Option<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("encoder", "needs at least one layer"));
        }
        for (i, l) in layers.iter().chain(head.iter()).enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.biases.len() != l.out_dim {
                return Err(Error::invalid(
                    format!("layer {i}"),
                    "parameter shapes do not match dimensions",
                ));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::DimensionMismatch {
                    what: format!("layer {} input", i + 1),
                    expected: w[0].out_dim,
                    found: w[1].in_dim,
                });
            }
        }
        if let Some(h) = &head {
            let out = layers.last().unwrap().out_dim;
            if h.in_dim != out {
                return Err(Error::DimensionMismatch {
                    what: "head input".into(),
                    expected: out,
                    found: h.in_dim,
                });
            }
        }
        let model = Self {
            layers,
            head,
            version: 0,
        };
        model.check_parameters()?;
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Option<&Layer> {
        self.head.as_ref()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn head_classes(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.out_dim)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Parameter tensors: weights then biases per layer, then the head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .chain(self.head.iter())
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .chain(self.head.iter())
            .flat_map(|l| [(l.out_dim, l.in_dim), (1, l.out_dim)])
            .collect()
    }

    /// Mutable access to every parameter tensor. Bumps the model version so
    /// caches from earlier forward passes are detected as stale.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .chain(self.head.iter_mut())
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    pub fn check_parameters(&self) -> Result<()> {
        for (t, tensor) in self.tensors().iter().enumerate() {
            crate::error::check_finite(tensor, |i| format!("parameter tensor {t}, entry {i}"))?;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "encoder input".into(),
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        crate::error::check_finite(x, |i| format!("encoder input entry {i}"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cache = self.forward_cached(x)?;
        Ok(cache.activations.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(activations.last().unwrap());
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(z);
        }
        let logits = self.head.as_ref().map(|h| h.apply(activations.last().unwrap()));
        let out_ok = activations
            .last()
            .unwrap()
            .iter()
            .chain(logits.iter().flatten())
            .all(|v| v.is_finite());
        if !out_ok {
            self.check_parameters()?;
            return Err(Error::NonFinite {
                location: "encoder output".into(),
            });
        }
        Ok(ForwardCache {
            version: self.version,
            activations,
            logits,
        })
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Reverse-mode pass for one sample given the loss gradient with respect
    /// to the features (and to the logits when a head is present).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_features: &[f64],
        grad_logits: Option<&[f64]>,
    ) -> Result<Backward> {
        let mut params = self.zero_grads();
        let input = self.backward_into(cache, grad_features, grad_logits, &mut params)?;
        Ok(Backward { params, input })
    }

    /// As [`backward`](Self::backward), accumulating parameter gradients
    /// into `acc`. Returns the input gradient.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_features: &[f64],
        grad_logits: Option<&[f64]>,
        acc: &mut [Vec<f64>],
    ) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        if grad_features.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature gradient".into(),
                expected: self.output_dim(),
                found: grad_features.len(),
            });
        }
        let mut grad = grad_features.to_vec();
        if let (Some(head), Some(gl)) = (&self.head, grad_logits) {
            let n = 2 * self.layers.len();
            let (hw, hb) = acc[n..].split_at_mut(1);
            let from_head = head.backward(cache.features(), gl, &mut hw[0], &mut hb[0]);
            grad.iter_mut().zip(from_head).for_each(|(g, h)| *g += h);
        }
        for l in (0..self.layers.len()).rev() {
            if l < self.layers.len() - 1 {
                // Rectifier: gate on the post-activation being positive.
                for (g, a) in grad.iter_mut().zip(&cache.activations[l + 1]) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (w, b) = acc[2 * l..].split_at_mut(1);
            grad = self.layers[l].backward(&cache.activations[l], &grad, &mut w[0], &mut b[0]);
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub seed: u64,
    pub epoch: usize,
    pub loss_config: LossConfig,
    #[serde(default)]
    pub head_classes: Option<usize>,
}

pub const ACTIVATION: &str = "relu";

/// Writes a JSON header line followed by one `PDSC` block per tensor.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &EncoderModel,
    seed: u64,
    epoch: usize,
    loss_config: &LossConfig,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        layer_dims: model.layer_dims(),
        activation: ACTIVATION.into(),
        seed,
        epoch,
        loss_config: *loss_config,
        head_classes: model.head_classes(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&header).expect("header serializes");
    let io = |e| Error::io(path, e);
    writeln!(w, "{line}").map_err(io)?;
    for (tensor, (rows, cols)) in model.tensors().iter().zip(model.tensor_shapes()) {
        pdsc::write_block(&mut w, rows, cols, tensor).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderModel, CheckpointHeader)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        location: path.display().to_string(),
        message,
    };
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
    if header.activation != ACTIVATION {
        return Err(parse_err(format!("unsupported activation {:?}", header.activation)));
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let mut blocks = pdsc::read_all_blocks(&mut rest.as_slice())
        .map_err(|e| parse_err(e.to_string()))?
        .into_iter();
    let mut next_layer = |in_dim: usize, out_dim: usize| -> Result<Layer> {
        let w = blocks.next().ok_or_else(|| parse_err("missing weight block".into()))?;
        let b = blocks.next().ok_or_else(|| parse_err("missing bias block".into()))?;
        if (w.rows, w.cols) != (out_dim, in_dim) || (b.rows, b.cols) != (1, out_dim) {
            return Err(parse_err(format!(
                "block shape does not match layer {in_dim}->{out_dim}"
            )));
        }
        Ok(Layer {
            in_dim,
            out_dim,
            weights: w.values,
            biases: b.values,
        })
    };
    let mut layers = Vec::new();
    for w in header.layer_dims.windows(2) {
        layers.push(next_layer(w[0], w[1])?);
    }
    let head = match header.head_classes {
        Some(k) => Some(next_layer(*header.layer_dims.last().unwrap_or(&0), k)?),
        None => None,
    };
    if blocks.next().is_some() {
        return Err(parse_err("trailing blocks after the last layer".into()));
    }
    Ok((EncoderModel::from_layers(layers, head)?, header))
}
