use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::matrix::{dot, norm2, Matrix};
use crate::tensor_store::{Checkpoint, CheckpointError, DType, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network needs at least two dims, got {0:?}")]
    TooFewDims(Vec<usize>),
    #[error("zero-width layer in dims {0:?}")]
    ZeroWidth(Vec<usize>),
    #[error("sparsity {0} must lie in [0, 1)")]
    Sparsity(f64),
    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Fully connected net with leaky-rectifier hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub layers: Vec<Layer>,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub(crate) fn validate_dims(dims: &[usize]) -> Result<(), NetError> {
    if dims.len() < 2 {
        return Err(NetError::TooFewDims(dims.to_vec()));
    }
    if dims.contains(&0) {
        return Err(NetError::ZeroWidth(dims.to_vec()));
    }
    Ok(())
}

impl ToyNet {
    /// Weights from `weight_std(fan_in)`-scaled normals, zero biases.
    pub fn random<R: Rng>(dims: &[usize], rng: &mut R, weight_std: impl Fn(usize) -> f64) -> Result<Self, NetError> {
        validate_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let normal = Normal::new(0.0, weight_std(fan_in)).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Layer { weight: Matrix::from_vec(fan_out, fan_in, data).unwrap(), bias: vec![0.0; fan_out] }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Unit-normal weights.
    pub fn unit_normal<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self, NetError> {
        Self::random(dims, rng, |_| 1.0)
    }

    /// Normal weights with std `sqrt(2 / fan_in)`.
    pub fn he<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self, NetError> {
        Self::random(dims, rng, |fan_in| (2.0 / fan_in as f64).sqrt())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.cols()];
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Forward pass over a batch (`batch x in`), returning `batch x out`.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_cached(x).activations.pop().unwrap()
    }

    fn forward_cached(&self, x: &Matrix) -> Cache {
        let mut activations = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let (batch, out) = (input.rows(), layer.weight.rows());
            let mut z = Matrix::zeros(batch, out);
            for b in 0..batch {
                let xb = input.row(b);
                for (o, zo) in z.row_mut(b).iter_mut().enumerate() {
                    *zo = dot(layer.weight.row(o), xb) + layer.bias[o];
                }
            }
            let a = if li == last {
                z.clone()
            } else {
                Matrix::from_vec(batch, out, z.as_slice().iter().map(|&v| leaky(v)).collect()).unwrap()
            };
            pre.push(z);
            activations.push(a);
        }
        Cache { activations, pre }
    }

    /// Mean squared error over every output coordinate.
    pub fn mse(&self, x: &Matrix, target: &Matrix) -> f64 {
        mse(&self.forward(x), target)
    }

    /// Loss and its gradient with respect to every weight and bias.
    pub fn loss_and_grad(&self, x: &Matrix, target: &Matrix) -> (f64, Gradients) {
        let cache = self.forward_cached(x);
        let y = cache.activations.last().unwrap();
        let loss = mse(y, target);
        let scale = 2.0 / (y.rows() * y.cols()) as f64;
        let mut delta = Matrix::from_vec(
            y.rows(),
            y.cols(),
            y.as_slice().iter().zip(target.as_slice()).map(|(a, t)| scale * (a - t)).collect(),
        )
        .unwrap();

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.activations[li];
            let (out, fan_in) = layer.weight.shape();
            let mut gw = Matrix::zeros(out, fan_in);
            let mut gb = vec![0.0; out];
            for b in 0..input.rows() {
                let xb = input.row(b);
                for (o, &d) in delta.row(b).iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &xv) in gw.row_mut(o).iter_mut().zip(xb) {
                        *g += d * xv;
                    }
                }
            }
            if li > 0 {
                let prev_pre = &cache.pre[li - 1];
                let mut next = Matrix::zeros(input.rows(), fan_in);
                for b in 0..input.rows() {
                    let row = next.row_mut(b);
                    for (o, &d) in delta.row(b).iter().enumerate() {
                        for (r, &w) in row.iter_mut().zip(layer.weight.row(o)) {
                            *r += d * w;
                        }
                    }
                    for (r, &z) in row.iter_mut().zip(prev_pre.row(b)) {
                        *r *= leaky_grad(z);
                    }
                }
                delta = next;
            }
            grads.push(Layer { weight: gw, bias: gb });
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }

    /// `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for i in 0..l.weight.rows() {
                for (w, gv) in l.weight.row_mut(i).iter_mut().zip(g.weight.row(i)) {
                    *w -= lr * gv;
                }
            }
            for (b, gv) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gv;
            }
        }
    }

    /// Parameters flattened layer by layer: weight rows, then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`ToyNet::params`].
    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter();
        for l in &mut self.layers {
            let (r, c) = l.weight.shape();
            for i in 0..r {
                for (w, p) in l.weight.row_mut(i).iter_mut().zip(it.by_ref().take(c)) {
                    *w = *p;
                }
            }
            for (b, p) in l.bias.iter_mut().zip(it.by_ref()) {
                *b = *p;
            }
        }
    }

    /// Stores layers as `layers.<i>.weight` / `layers.<i>.bias` in F64.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (i, l) in self.layers.iter().enumerate() {
            let (r, c) = l.weight.shape();
            ck.insert(
                Tensor::from_f64(format!("layers.{i}.weight"), vec![r, c], DType::F64, l.weight.as_slice()).unwrap(),
            )
            .unwrap();
            ck.insert(Tensor::from_f64(format!("layers.{i}.bias"), vec![r], DType::F64, &l.bias).unwrap()).unwrap();
        }
        ck
    }

    /// Rebuilds a net with the same layer count from a checkpoint written by
    /// [`ToyNet::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, num_layers: usize) -> Result<Self, NetError> {
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let wn = format!("layers.{i}.weight");
            let bn = format!("layers.{i}.bias");
            let w = ck.get(&wn).ok_or(NetError::MissingTensor(wn))?.as_matrix()?;
            let b = ck.get(&bn).ok_or(NetError::MissingTensor(bn))?.to_f64();
            if b.len() != w.rows() {
                return Err(NetError::Layer { layer: i, reason: "bias length mismatch".into() });
            }
            if let Some(prev) = layers.last() {
                let prev: &Layer = prev;
                if prev.weight.rows() != w.cols() {
                    return Err(NetError::Layer { layer: i, reason: "incompatible with previous layer".into() });
                }
            }
            layers.push(Layer { weight: w, bias: b });
        }
        Ok(Self { layers })
    }
}

struct Cache {
    /// Input followed by each layer's output.
    activations: Vec<Matrix>,
    pre: Vec<Matrix>,
}

/// Gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        ToyNet { layers: self.layers.clone() }.params()
    }
}

pub fn mse(y: &Matrix, target: &Matrix) -> f64 {
    assert_eq!(y.shape(), target.shape());
    let n = y.as_slice().len() as f64;
    y.as_slice().iter().zip(target.as_slice()).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / n
}

/// `batch x dim` unit-normal samples.
pub fn normal_batch<R: Rng>(rng: &mut R, batch: usize, dim: usize) -> Matrix {
    let data = (0..batch * dim).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(batch, dim, data).unwrap()
}

/// Number of channels kept out of `width` at `sparsity`.
pub fn kept_channels(width: usize, sparsity: f64) -> usize {
    // slack absorbs representation error in e.g. (1 - 0.7) * 64
    ((1.0 - sparsity) * width as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Magnitude channel pruning: every hidden layer keeps the channels whose
/// incoming weight rows have the largest L2 norm (lower index wins ties).
/// Kept rows, their bias entries and the next layer's matching columns are
/// sliced out in their original order.
pub fn prune_channels(net: &ToyNet, sparsity: f64) -> Result<ToyNet, NetError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(NetError::Sparsity(sparsity));
    }
    let mut layers = net.layers.clone();
    for li in 0..layers.len() - 1 {
        let width = layers[li].weight.rows();
        let keep = kept_channels(width, sparsity);
        if keep == 0 {
            return Err(NetError::Layer { layer: li, reason: "pruning leaves zero channels".into() });
        }
        let norms: Vec<f64> = (0..width).map(|o| norm2(layers[li].weight.row(o))).collect();
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
        let mut kept = order[..keep].to_vec();
        kept.sort_unstable();

        let l = &layers[li];
        let cols = l.weight.cols();
        let data = kept.iter().flat_map(|&o| l.weight.row(o).to_vec()).collect();
        let bias = kept.iter().map(|&o| l.bias[o]).collect();
        layers[li] = Layer { weight: Matrix::from_vec(keep, cols, data).unwrap(), bias };

        let next = &layers[li + 1];
        let rows = next.weight.rows();
        let data =
            (0..rows).flat_map(|r| kept.iter().map(move |&c| (r, c))).map(|(r, c)| next.weight[(r, c)]).collect();
        layers[li + 1].weight = Matrix::from_vec(rows, keep, data).unwrap();
    }
    Ok(ToyNet { layers })
}
