//! Fully-connected network stack with hand-written backprop.
//!
//! A network is an ordered list of layers in one of two modes. Train mode
//! normalizes with mini-batch statistics and produces a trace of caches for
//! the backward pass; inference mode uses frozen population statistics and is
//! deterministic per example. The loss is always softmax cross-entropy.
//!
//! The lifecycle mirrors how batch normalization is deployed:
//! [`batch_normalize_network`] inserts BN before each nonlinearity (dropping
//! the now-redundant affine biases), [`freeze_network`] estimates population
//! statistics with the trained weights, and [`fold_network`] collapses each
//! Affine+BN pair into a single affine layer.

use crate::batchnorm::{
    bn_accumulate_stats, bn_backward, bn_fold, bn_forward_inference, bn_forward_train, BnCache,
    BnParams, BnStats,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Sigmoid,
    Relu,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)] // networks hold a handful of layers; variant size is immaterial
pub enum Layer {
    /// `z = u W + b`. The bias is dropped when a BatchNorm follows, since
    /// mean subtraction cancels any constant shift.
    Affine { w: Tensor, b: Option<Tensor> },
    BatchNorm {
        params: BnParams,
        stats: BnStats,
        eps: f64,
    },
    Sigmoid,
    Relu,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub mode: Mode,
}

/// Per-layer activations and BN caches from one forward pass.
/// `activations[0]` is the input; `activations[i + 1]` is layer i's output.
#[derive(Clone, Debug)]
pub struct Trace {
    pub activations: Vec<Tensor>,
    pub bn_caches: Vec<Option<BnCache>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds the input at minimum")
    }
}

/// Parameter gradients, mirroring the layer structure exactly.
#[derive(Clone, Debug)]
pub enum LayerGrads {
    Affine { dw: Tensor, db: Option<Tensor> },
    BatchNorm { dgamma: Tensor, dbeta: Tensor },
    None,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

/// `z = u W + b` with the bias broadcast across rows.
pub fn affine_forward(u: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let z = u.matmul(w)?;
    match b {
        Some(bias) => z.add_row(bias),
        None => Ok(z),
    }
}

/// Backward of [`affine_forward`]: `du = dz W^T`, `dW = u^T dz`,
/// `db = column sums of dz` (when a bias is present).
pub fn affine_backward(
    u: &Tensor,
    w: &Tensor,
    dz: &Tensor,
    has_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let du = dz.matmul(&w.transpose())?;
    let dw = u.transpose().matmul(dz)?;
    let db = if has_bias {
        Some(dz.reduce_sum_axis0()?)
    } else {
        None
    };
    Ok((du, dw, db))
}

/// Numerically safe logistic function: never overflows, saturates to 0/1.
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward given the forward *output* y: `dx = dz * y * (1 - y)`.
pub fn sigmoid_backward(y: &Tensor, dz: &Tensor) -> Result<Tensor> {
    dz.mul(&y.map(|v| v * (1.0 - v)))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Backward given the forward *input* x; the subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, dz: &Tensor) -> Result<Tensor> {
    dz.mul(&x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

/// Mean cross-entropy of softmax(logits) against integer labels, plus the
/// gradient `(softmax - onehot) / m`. Softmax is computed with per-row max
/// subtraction so large logits cannot overflow.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("expected [m, k] logits, got {:?}", logits.shape()),
        ));
    }
    let (m, k) = (logits.rows(), logits.cols());
    if labels.len() != m {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{m} rows vs {} labels", labels.len()),
        ));
    }
    if m == 0 {
        return Err(Error::EmptyBatch("softmax_cross_entropy"));
    }
    let mf = m as f64;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; m * k];
    for (i, (&label, row)) in labels.iter().zip(logits.data().chunks_exact(k)).enumerate() {
        if label >= k {
            return Err(Error::Format(format!(
                "softmax_cross_entropy: label {label} out of range for {k} classes"
            )));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln();
        loss -= (row[label] - max - log_sum) / mf;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            dlogits[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / mf;
        }
    }
    Ok((loss, Tensor::from_vec(&[m, k], dlogits)?))
}

/// Runs the network layer by layer, recording activations and BN caches.
pub fn network_forward(net: &Network, x: &Tensor) -> Result<Trace> {
    let mut activations = Vec::with_capacity(net.layers.len() + 1);
    let mut bn_caches = Vec::with_capacity(net.layers.len());
    activations.push(x.clone());
    for layer in &net.layers {
        let cur = activations.last().expect("non-empty");
        let next = match layer {
            Layer::Affine { w, b } => {
                bn_caches.push(None);
                affine_forward(cur, w, b.as_ref())?
            }
            Layer::BatchNorm { params, stats, eps } => match net.mode {
                Mode::Train => {
                    let (y, cache) = bn_forward_train(cur, params, *eps)?;
                    bn_caches.push(Some(cache));
                    y
                }
                Mode::Inference => {
                    bn_caches.push(None);
                    bn_forward_inference(cur, params, stats, *eps)?
                }
            },
            Layer::Sigmoid => {
                bn_caches.push(None);
                sigmoid_forward(cur)
            }
            Layer::Relu => {
                bn_caches.push(None);
                relu_forward(cur)
            }
        };
        activations.push(next);
    }
    Ok(Trace {
        activations,
        bn_caches,
    })
}

/// Backpropagates `dout` through the trace, returning the gradient at the
/// network input together with all parameter gradients.
pub fn network_backward(net: &Network, trace: &Trace, dout: &Tensor) -> Result<(Tensor, Gradients)> {
    if trace.activations.len() != net.layers.len() + 1 {
        return Err(Error::State(
            "network_backward: trace does not match network depth".into(),
        ));
    }
    let mut grad = dout.clone();
    let mut layer_grads: Vec<LayerGrads> = (0..net.layers.len()).map(|_| LayerGrads::None).collect();
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let input = &trace.activations[i];
        let output = &trace.activations[i + 1];
        grad = match layer {
            Layer::Affine { w, b } => {
                let (du, dw, db) = affine_backward(input, w, &grad, b.is_some())?;
                layer_grads[i] = LayerGrads::Affine { dw, db };
                du
            }
            Layer::BatchNorm { params, .. } => {
                let cache = trace.bn_caches[i].as_ref().ok_or_else(|| {
                    Error::State(
                        "network_backward: no BN cache; the forward pass was not train-mode"
                            .into(),
                    )
                })?;
                let (dx, dgamma, dbeta) = bn_backward(cache, &grad, params)?;
                layer_grads[i] = LayerGrads::BatchNorm { dgamma, dbeta };
                dx
            }
            Layer::Sigmoid => sigmoid_backward(output, &grad)?,
            Layer::Relu => relu_backward(input, &grad)?,
        };
    }
    Ok((grad, Gradients { layers: layer_grads }))
}

/// Builds `dims[0] -> dims[1] -> ... -> dims[n-1]` with the chosen
/// nonlinearity after every hidden affine and none after the last. Weights
/// are Gaussian with the given standard deviation, biases zero.
pub fn build_mlp(
    dims: &[usize],
    nonlin: Nonlinearity,
    init_std: f64,
    rng: &mut impl Rng,
) -> Result<Network> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "build_mlp: need at least input and output dims, got {dims:?}"
        )));
    }
    if !(init_std.is_finite() && init_std > 0.0) {
        return Err(Error::Config(format!(
            "build_mlp: init_std must be positive, got {init_std}"
        )));
    }
    let normal = Normal::new(0.0, init_std)
        .map_err(|e| Error::Config(format!("build_mlp: bad init distribution: {e}")))?;
    let mut layers = Vec::new();
    for win in dims.windows(2) {
        let (d_in, d_out) = (win[0], win[1]);
        let w_data: Vec<f64> = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        layers.push(Layer::Affine {
            w: Tensor::from_vec(&[d_in, d_out], w_data)?,
            b: Some(Tensor::zeros(&[d_out])),
        });
        layers.push(match nonlin {
            Nonlinearity::Sigmoid => Layer::Sigmoid,
            Nonlinearity::Relu => Layer::Relu,
        });
    }
    layers.pop(); // no nonlinearity after the output affine
    Ok(Network {
        layers,
        mode: Mode::Train,
    })
}

fn affine_out_dim(w: &Tensor) -> usize {
    w.cols()
}

/// Inserts a BatchNorm between every affine layer and the nonlinearity that
/// follows it, initialized to gamma = 1, beta = 0, and strips that affine's
/// bias. Affines not followed by a nonlinearity (e.g. the output layer) are
/// left alone.
pub fn batch_normalize_network(net: &Network, eps: f64) -> Network {
    let mut layers = Vec::with_capacity(net.layers.len() * 2);
    let mut iter = net.layers.iter().peekable();
    while let Some(layer) = iter.next() {
        match layer {
            Layer::Affine { w, b: _ }
                if matches!(iter.peek(), Some(Layer::Sigmoid) | Some(Layer::Relu)) =>
            {
                let d = affine_out_dim(w);
                layers.push(Layer::Affine {
                    w: w.clone(),
                    b: None,
                });
                layers.push(Layer::BatchNorm {
                    params: BnParams::identity(d),
                    stats: BnStats::new(d),
                    eps,
                });
            }
            other => layers.push(other.clone()),
        }
    }
    Network {
        layers,
        mode: net.mode,
    }
}

/// Estimates population statistics for every BN layer by running train-mode
/// forward passes over the supplied batches, then returns the network in
/// inference mode. Statistics for all layers are collected in the same
/// passes, with the weights held fixed.
pub fn freeze_network(net: &Network, batches: impl Iterator<Item = Tensor>) -> Result<Network> {
    if net.mode != Mode::Train {
        return Err(Error::State(
            "freeze_network: network is already in inference mode".into(),
        ));
    }
    let mut frozen = net.clone();
    let mut fresh: Vec<Option<BnStats>> = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::BatchNorm { params, .. } => Some(BnStats::new(params.dim())),
            _ => None,
        })
        .collect();
    let mut saw_any = false;
    for batch in batches {
        saw_any = true;
        let trace = network_forward(net, &batch)?;
        for (slot, cache) in fresh.iter_mut().zip(&trace.bn_caches) {
            if let (Some(stats), Some(cache)) = (slot.as_mut(), cache.as_ref()) {
                bn_accumulate_stats(stats, &cache.moments())?;
            }
        }
    }
    if !saw_any {
        return Err(Error::State("freeze_network: empty batch stream".into()));
    }
    for (layer, slot) in frozen.layers.iter_mut().zip(fresh) {
        if let (Layer::BatchNorm { stats, .. }, Some(new_stats)) = (layer, slot) {
            *stats = new_stats;
        }
    }
    frozen.mode = Mode::Inference;
    Ok(frozen)
}

/// Collapses every Affine+BatchNorm pair of an inference network into a
/// single affine layer: `W' = W diag(scale)`, `b' = b * scale + shift`.
/// A BatchNorm with no preceding affine becomes a diagonal affine layer.
pub fn fold_network(net: &Network) -> Result<Network> {
    if net.mode != Mode::Inference {
        return Err(Error::State(
            "fold_network: network must be frozen to inference mode first".into(),
        ));
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        match layer {
            Layer::BatchNorm { params, stats, eps } => {
                let folded = bn_fold(params, stats, *eps)?;
                let d = params.dim();
                match layers.pop() {
                    Some(Layer::Affine { w, b }) => {
                        let mut w2 = w.clone();
                        for row in w2.data_mut().chunks_exact_mut(d) {
                            for (v, &s) in row.iter_mut().zip(folded.scale.data()) {
                                *v *= s;
                            }
                        }
                        let b2 = match b {
                            Some(bias) => bias.mul(&folded.scale)?.add(&folded.shift)?,
                            None => folded.shift.clone(),
                        };
                        layers.push(Layer::Affine {
                            w: w2,
                            b: Some(b2),
                        });
                    }
                    prev => {
                        if let Some(p) = prev {
                            layers.push(p);
                        }
                        let mut diag = Tensor::zeros(&[d, d]);
                        for j in 0..d {
                            diag.data_mut()[j * d + j] = folded.scale.data()[j];
                        }
                        layers.push(Layer::Affine {
                            w: diag,
                            b: Some(folded.shift.clone()),
                        });
                    }
                }
            }
            other => layers.push(other.clone()),
        }
    }
    Ok(Network {
        layers,
        mode: Mode::Inference,
    })
}

pub fn network_param_count(net: &Network) -> usize {
    net.layers
        .iter()
        .map(|l| match l {
            Layer::Affine { w, b } => w.len() + b.as_ref().map_or(0, Tensor::len),
            Layer::BatchNorm { params, .. } => params.gamma.len() + params.beta.len(),
            _ => 0,
        })
        .sum()
}

/// Index of the predicted class per row.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.data()
        .chunks_exact(t.cols())
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
