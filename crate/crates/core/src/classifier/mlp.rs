//! Fully connected rectifier network with hand-written backpropagation.

use serde::{Deserialize, Serialize};

use crate::data::io::{put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::mathcore::{Matrix, RngState};

const CHECKPOINT_MAGIC: &[u8; 4] = b"NPCM";
const CHECKPOINT_VERSION: u32 = 1;

/// One affine layer; `weights` is `inputs × outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }
}

/// Rectifier MLP. The last layer is linear; heads (softmax, softplus, sigmoid)
/// are applied by callers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Dense>,
}

/// Activations recorded by [`MlpModel::forward_trace`] for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    /// Pre-activation output of the last layer.
    pub output: Matrix,
}

impl Trace {
    /// Activations of the last hidden layer, if there is one.
    pub fn embeddings(&self) -> Option<&Matrix> {
        (self.inputs.len() > 1).then(|| self.inputs.last().expect("non-empty"))
    }
}

impl MlpModel {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn new(dims: &[usize], rng: &mut RngState) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Dense::zeros(w[0], w[1]);
                for v in layer.weights.as_mut_slice() {
                    *v = bound * (2.0 * rng.uniform_open() - 1.0);
                }
                for v in &mut layer.bias {
                    *v = bound * (2.0 * rng.uniform_open() - 1.0);
                }
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.cols() {
                return Err(Error::shape(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layers[i - 1].weights.cols() != l.weights.rows() {
                return Err(Error::shape(format!("layer {i}: input width mismatch")));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Validation(format!("layer {i}: non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weights.cols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Output-layer pre-activations.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &Matrix) -> Result<Trace> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weights)?;
            z.add_row_vector(&layer.bias);
            inputs.push(current);
            if i + 1 < self.layers.len() {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = z;
        }
        Ok(Trace {
            inputs,
            output: current,
        })
    }

    /// Gradients of a scalar loss given `∂L/∂output`; also returns `∂L/∂input`.
    pub fn backward(&self, trace: &Trace, grad_output: &Matrix) -> Result<(Gradients, Matrix)> {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[l];
            let gw = input.t_matmul(&g)?;
            let gb = g.column_sums();
            let mut g_in = g.matmul_t(&layer.weights)?;
            if l > 0 {
                // input to layer l is relu(pre); relu' = 1 where the activation is positive
                for (gi, &a) in g_in.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if a <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            grads.push(Dense { weights: gw, bias: gb });
            g = g_in;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }

    /// `NPCM` checkpoint bytes (parameters stored as `f32`).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        put_u32(&mut out, self.layers.len())?;
        for d in self.layer_dims() {
            put_u32(&mut out, d)?;
        }
        for l in &self.layers {
            put_f32s(&mut out, l.weights.as_slice());
            put_f32s(&mut out, &l.bias);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let model = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(model)
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32_le("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32_le("layer count")? as usize;
        if count == 0 {
            return Err(Error::format(r.offset() - 4, "checkpoint has no layers"));
        }
        let dims: Vec<usize> = (0..=count)
            .map(|_| r.u32_le("layer width").map(|d| d as usize))
            .collect::<Result<_>>()?;
        let mut layers = Vec::with_capacity(count);
        for w in dims.windows(2) {
            let weights = Matrix::new(w[0], w[1], r.f32_block(w[0] * w[1], "weights")?)?;
            let bias = r.f32_block(w[1], "bias")?;
            layers.push(Dense { weights, bias });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::data::io::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::shape(format!("invalid layer dims {dims:?}")));
    }
    Ok(())
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &MlpModel, learning_rate: f64) -> Self {
        let shapes: Vec<Vec<f64>> = model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.clone(),
            second: shapes,
        }
    }

    /// Descend along `grads`.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in model
            .param_slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
