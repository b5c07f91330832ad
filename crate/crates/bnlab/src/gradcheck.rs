//! Finite-difference verification of every hand-written gradient.
//!
//! Each check draws seeded random instances, compares the analytic gradient
//! of a scalar probe loss against central differences coordinate by
//! coordinate, and reports the worst relative error. The probe loss for a
//! layer op is `sum(dy .* op(x))` with a fixed random cotangent dy; the
//! full-network check uses the real softmax cross-entropy loss.
//!
//! The numeric side never calls any backward code, so the two routes stay
//! independent.

use crate::batchnorm::{
    bn_backward, bn_conv_backward, bn_conv_forward_train, bn_forward_train, BnParams,
};
use crate::error::Result;
use crate::nn::{
    affine_backward, affine_forward, batch_normalize_network, build_mlp, network_backward,
    network_forward, relu_forward, sigmoid_forward, softmax_cross_entropy, Layer, LayerGrads,
    Network, Nonlinearity,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a unit floor, so near-zero gradients compare
/// absolutely instead of amplifying noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for OpReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:18} {:4} instances, {:6} coords, max rel err {:.3e} (tol {:.0e}) ... {}",
            self.op,
            self.instances,
            self.coords_checked,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.ops {
            writeln!(f, "{op}")?;
        }
        write!(
            f,
            "gradcheck: {}",
            if self.all_passed() { "all ok" } else { "FAILURES" }
        )
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Tracks the worst error and how many coordinates were compared.
struct Worst {
    max: f64,
    coords: usize,
}

impl Worst {
    fn new() -> Self {
        Worst { max: 0.0, coords: 0 }
    }

    fn observe(&mut self, analytic: f64, numeric: f64) {
        self.max = self.max.max(rel_err(analytic, numeric));
        self.coords += 1;
    }

    /// Central difference of `f` along one coordinate of `x`, compared
    /// against the analytic value.
    fn check_coord(&mut self, x: &Tensor, idx: usize, analytic: f64, f: impl Fn(&Tensor) -> f64) {
        let mut xp = x.clone();
        xp.data_mut()[idx] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= FD_STEP;
        self.observe(analytic, (f(&xp) - f(&xm)) / (2.0 * FD_STEP));
    }
}

fn check_bn_backward(rng: &mut ChaCha8Rng, instances: usize) -> Result<OpReport> {
    let mut worst = Worst::new();
    for _ in 0..instances {
        let m = rng.gen_range(2..17);
        let d = rng.gen_range(1..9);
        let x = randn(rng, &[m, d]).scale(rng.gen_range(0.5..2.0));
        let dy = randn(rng, &[m, d]);
        let params = BnParams::new(
            randn(rng, &[d]).scale(0.3).add_scalar(1.0),
            randn(rng, &[d]),
        )?;
        let eps = 1e-5;
        let (_, cache) = bn_forward_train(&x, &params, eps)?;
        let (dx, dgamma, dbeta) = bn_backward(&cache, &dy, &params)?;

        let loss_x = |xv: &Tensor| {
            let (y, _) = bn_forward_train(xv, &params, eps).expect("forward in probe");
            y.mul(&dy).unwrap().sum()
        };
        for idx in 0..x.len() {
            worst.check_coord(&x, idx, dx.data()[idx], loss_x);
        }
        let loss_gamma = |g: &Tensor| {
            let p = BnParams::new(g.clone(), params.beta.clone()).unwrap();
            let (y, _) = bn_forward_train(&x, &p, eps).expect("forward in probe");
            y.mul(&dy).unwrap().sum()
        };
        for j in 0..d {
            worst.check_coord(&params.gamma, j, dgamma.data()[j], loss_gamma);
        }
        let loss_beta = |b: &Tensor| {
            let p = BnParams::new(params.gamma.clone(), b.clone()).unwrap();
            let (y, _) = bn_forward_train(&x, &p, eps).expect("forward in probe");
            y.mul(&dy).unwrap().sum()
        };
        for j in 0..d {
            worst.check_coord(&params.beta, j, dbeta.data()[j], loss_beta);
        }
    }
    Ok(OpReport {
        op: "bn_backward",
        instances,
        coords_checked: worst.coords,
        max_rel_err: worst.max,
        tolerance: 1e-6,
    })
}

fn check_bn_conv_backward(rng: &mut ChaCha8Rng, instances: usize) -> Result<OpReport> {
    let mut worst = Worst::new();
    for _ in 0..instances {
        let shape = [
            rng.gen_range(2..5),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(2..4),
        ];
        let c = shape[1];
        let x = randn(rng, &shape);
        let dy = randn(rng, &shape);
        let params = BnParams::new(
            randn(rng, &[c]).scale(0.3).add_scalar(1.0),
            randn(rng, &[c]),
        )?;
        let eps = 1e-5;
        let (_, cache) = bn_conv_forward_train(&x, &params, eps)?;
        let (dx, dgamma, dbeta) = bn_conv_backward(&cache, &dy, &params)?;

        let loss_x = |xv: &Tensor| {
            let (y, _) = bn_conv_forward_train(xv, &params, eps).expect("forward in probe");
            y.mul(&dy).unwrap().sum()
        };
        for idx in 0..x.len() {
            worst.check_coord(&x, idx, dx.data()[idx], loss_x);
        }
        let loss_gamma = |g: &Tensor| {
            let p = BnParams::new(g.clone(), params.beta.clone()).unwrap();
            let (y, _) = bn_conv_forward_train(&x, &p, eps).expect("forward in probe");
            y.mul(&dy).unwrap().sum()
        };
        let loss_beta = |b: &Tensor| {
            let p = BnParams::new(params.gamma.clone(), b.clone()).unwrap();
            let (y, _) = bn_conv_forward_train(&x, &p, eps).expect("forward in probe");
            y.mul(&dy).unwrap().sum()
        };
        for k in 0..c {
            worst.check_coord(&params.gamma, k, dgamma.data()[k], loss_gamma);
            worst.check_coord(&params.beta, k, dbeta.data()[k], loss_beta);
        }
    }
    Ok(OpReport {
        op: "bn_conv_backward",
        instances,
        coords_checked: worst.coords,
        max_rel_err: worst.max,
        tolerance: 1e-6,
    })
}

fn check_affine(rng: &mut ChaCha8Rng, instances: usize) -> Result<OpReport> {
    let mut worst = Worst::new();
    for _ in 0..instances {
        let m = rng.gen_range(2..17);
        let d_in = rng.gen_range(1..6);
        let d_out = rng.gen_range(1..6);
        let u = randn(rng, &[m, d_in]);
        let w = randn(rng, &[d_in, d_out]);
        let b = randn(rng, &[d_out]);
        let dz = randn(rng, &[m, d_out]);
        let (du, dw, db) = affine_backward(&u, &w, &dz, true)?;
        let db = db.expect("bias requested");

        let loss_u =
            |uv: &Tensor| affine_forward(uv, &w, Some(&b)).unwrap().mul(&dz).unwrap().sum();
        for idx in 0..u.len() {
            worst.check_coord(&u, idx, du.data()[idx], loss_u);
        }
        let loss_w =
            |wv: &Tensor| affine_forward(&u, wv, Some(&b)).unwrap().mul(&dz).unwrap().sum();
        for idx in 0..w.len() {
            worst.check_coord(&w, idx, dw.data()[idx], loss_w);
        }
        let loss_b =
            |bv: &Tensor| affine_forward(&u, &w, Some(bv)).unwrap().mul(&dz).unwrap().sum();
        for idx in 0..b.len() {
            worst.check_coord(&b, idx, db.data()[idx], loss_b);
        }
    }
    Ok(OpReport {
        op: "affine",
        instances,
        coords_checked: worst.coords,
        max_rel_err: worst.max,
        tolerance: 1e-6,
    })
}

fn check_sigmoid(rng: &mut ChaCha8Rng, instances: usize) -> Result<OpReport> {
    let mut worst = Worst::new();
    for _ in 0..instances {
        let m = rng.gen_range(2..17);
        let d = rng.gen_range(1..8);
        let x = randn(rng, &[m, d]).scale(2.0);
        let dz = randn(rng, &[m, d]);
        let y = sigmoid_forward(&x);
        let dx = crate::nn::sigmoid_backward(&y, &dz)?;
        let loss = |xv: &Tensor| sigmoid_forward(xv).mul(&dz).unwrap().sum();
        for idx in 0..x.len() {
            worst.check_coord(&x, idx, dx.data()[idx], loss);
        }
    }
    Ok(OpReport {
        op: "sigmoid",
        instances,
        coords_checked: worst.coords,
        max_rel_err: worst.max,
        tolerance: 1e-6,
    })
}

fn check_relu(rng: &mut ChaCha8Rng, instances: usize) -> Result<OpReport> {
    let mut worst = Worst::new();
    for _ in 0..instances {
        let m = rng.gen_range(2..17);
        let d = rng.gen_range(1..8);
        // keep every coordinate away from the kink at 0, where central
        // differences straddle the nondifferentiable point
        let x = randn(rng, &[m, d]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let dz = randn(rng, &[m, d]);
        let dx = crate::nn::relu_backward(&x, &dz)?;
        let loss = |xv: &Tensor| relu_forward(xv).mul(&dz).unwrap().sum();
        for idx in 0..x.len() {
            worst.check_coord(&x, idx, dx.data()[idx], loss);
        }
    }
    Ok(OpReport {
        op: "relu",
        instances,
        coords_checked: worst.coords,
        max_rel_err: worst.max,
        tolerance: 1e-6,
    })
}

fn check_softmax_ce(rng: &mut ChaCha8Rng, instances: usize) -> Result<OpReport> {
    let mut worst = Worst::new();
    for _ in 0..instances {
        let m = rng.gen_range(2..17);
        let k = rng.gen_range(2..11);
        let logits = randn(rng, &[m, k]).scale(2.0);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        let loss = |lv: &Tensor| softmax_cross_entropy(lv, &labels).unwrap().0;
        for idx in 0..logits.len() {
            worst.check_coord(&logits, idx, dlogits.data()[idx], loss);
        }
    }
    Ok(OpReport {
        op: "softmax_ce",
        instances,
        coords_checked: worst.coords,
        max_rel_err: worst.max,
        tolerance: 1e-6,
    })
}

/// Perturbs one parameter coordinate of a cloned network.
fn bump_param(net: &Network, layer: usize, idx: usize, delta: f64) -> Network {
    let mut n2 = net.clone();
    match &mut n2.layers[layer] {
        Layer::Affine { w, b } => {
            if idx < w.len() {
                w.data_mut()[idx] += delta;
            } else {
                b.as_mut().expect("bias exists").data_mut()[idx - w.len()] += delta;
            }
        }
        Layer::BatchNorm { params, .. } => {
            let d = params.gamma.len();
            if idx < d {
                params.gamma.data_mut()[idx] += delta;
            } else {
                params.beta.data_mut()[idx - d] += delta;
            }
        }
        _ => unreachable!("no parameters on activation layers"),
    }
    n2
}

fn check_network(rng: &mut ChaCha8Rng, instances: usize) -> Result<OpReport> {
    let mut worst = Worst::new();
    for inst in 0..instances {
        let m = *[2usize, 4, 8, 16][..].get(inst % 4).unwrap();
        let d_in = rng.gen_range(2..6);
        let hidden = rng.gen_range(2..6);
        let classes = rng.gen_range(2..5);
        let nonlin = if inst % 2 == 0 {
            Nonlinearity::Sigmoid
        } else {
            Nonlinearity::Relu
        };
        let base = build_mlp(&[d_in, hidden, classes], nonlin, 0.5, rng)?;
        let net = batch_normalize_network(&base, 1e-5);
        let x = randn(rng, &[m, d_in]);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();

        let loss_of = |net: &Network| {
            let trace = network_forward(net, &x).expect("forward in probe");
            softmax_cross_entropy(trace.output(), &labels).expect("loss in probe").0
        };
        let trace = network_forward(&net, &x)?;
        let (_, dlogits) = softmax_cross_entropy(trace.output(), &labels)?;
        let (dx, grads) = network_backward(&net, &trace, &dlogits)?;

        // input gradient
        let loss_x = |xv: &Tensor| {
            let trace = network_forward(&net, xv).expect("forward in probe");
            softmax_cross_entropy(trace.output(), &labels).expect("loss in probe").0
        };
        for idx in 0..x.len() {
            worst.check_coord(&x, idx, dx.data()[idx], loss_x);
        }

        // every parameter gradient
        for (li, lg) in grads.layers.iter().enumerate() {
            let analytic: Vec<f64> = match lg {
                LayerGrads::Affine { dw, db } => {
                    let mut v = dw.data().to_vec();
                    if let Some(db) = db {
                        v.extend_from_slice(db.data());
                    }
                    v
                }
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    let mut v = dgamma.data().to_vec();
                    v.extend_from_slice(dbeta.data());
                    v
                }
                LayerGrads::None => continue,
            };
            for (pi, &g) in analytic.iter().enumerate() {
                let fp = loss_of(&bump_param(&net, li, pi, FD_STEP));
                let fm = loss_of(&bump_param(&net, li, pi, -FD_STEP));
                worst.observe(g, (fp - fm) / (2.0 * FD_STEP));
            }
        }
    }
    Ok(OpReport {
        op: "network",
        instances,
        coords_checked: worst.coords,
        max_rel_err: worst.max,
        tolerance: 1e-5,
    })
}

/// Runs every gradient check with `instances` seeded random instances each.
pub fn run_all(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(GradcheckReport {
        ops: vec![
            check_bn_backward(&mut rng, instances)?,
            check_bn_conv_backward(&mut rng, instances)?,
            check_affine(&mut rng, instances)?,
            check_sigmoid(&mut rng, instances)?,
            check_relu(&mut rng, instances)?,
            check_softmax_ce(&mut rng, instances)?,
            check_network(&mut rng, instances)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn all_gradients_match_finite_differences() {
        let start = Instant::now();
        let report = run_all(20260819, 20).unwrap();
        assert!(report.all_passed(), "\n{report}");
        assert_eq!(report.ops.len(), 7);
        for op in &report.ops {
            assert!(op.coords_checked > 0, "{} checked nothing", op.op);
        }
        assert!(
            start.elapsed().as_secs() < 60,
            "gradcheck budget exceeded: {:?}",
            start.elapsed()
        );
    }

    #[test]
    fn different_seeds_also_pass() {
        for seed in [1u64, 2, 3] {
            let report = run_all(seed, 3).unwrap();
            assert!(report.all_passed(), "seed {seed}:\n{report}");
        }
    }

    // Negative control: a corrupted gradient must trip the comparison,
    // otherwise the whole suite proves nothing.
    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = randn(&mut rng, &[4, 2]);
        let dy = randn(&mut rng, &[4, 2]);
        let params = BnParams::identity(2);
        let (_, cache) = bn_forward_train(&x, &params, 1e-5).unwrap();
        let (dx, _, _) = bn_backward(&cache, &dy, &params).unwrap();
        let corrupted = dx.data()[0] + 1e-3;
        let loss = |xv: &Tensor| {
            let (y, _) = bn_forward_train(xv, &params, 1e-5).unwrap();
            y.mul(&dy).unwrap().sum()
        };
        let mut xp = x.clone();
        xp.data_mut()[0] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[0] -= FD_STEP;
        let numeric = (loss(&xp) - loss(&xm)) / (2.0 * FD_STEP);
        assert!(rel_err(dx.data()[0], numeric) < 1e-6, "honest gradient passes");
        assert!(rel_err(corrupted, numeric) > 1e-6, "corruption must be flagged");
    }

    #[test]
    fn rel_err_uses_unit_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 2e-9) - 1e-9).abs() < 1e-24);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
