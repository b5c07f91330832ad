//! SGD with heavy-ball momentum and a learning-rate schedule.
//!
//! The update is `v <- mu * v - lr_t * g` then `p <- p + v`, applied to every
//! trainable tensor in the network (affine weights and biases, BN gamma and
//! beta). Velocities live in [`SgdState`], mirroring the layer structure.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Layer, LayerGrads, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr * factor^(step / period)`, a smooth exponential decay.
    Exponential { factor: f64, period: usize },
}

/// Effective learning rate at a given step (steps count from 0).
pub fn lr_at(base_lr: f64, schedule: &LrSchedule, step: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base_lr,
        LrSchedule::Exponential { factor, period } => {
            base_lr * factor.powf(step as f64 / *period as f64)
        }
    }
}

#[derive(Clone, Debug)]
enum Velocity {
    Affine { vw: Tensor, vb: Option<Tensor> },
    BatchNorm { vgamma: Tensor, vbeta: Tensor },
    None,
}

#[derive(Clone, Debug)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    /// L2 penalty applied to affine weight matrices only; 0 disables it.
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub step: usize,
    velocity: Vec<Velocity>,
}

impl SgdState {
    pub fn new(
        net: &Network,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        schedule: LrSchedule,
    ) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("sgd: lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "sgd: momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "sgd: weight_decay must be non-negative, got {weight_decay}"
            )));
        }
        if let LrSchedule::Exponential { factor, period } = schedule {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(Error::Config(format!(
                    "sgd: decay factor must lie in (0, 1], got {factor}"
                )));
            }
            if period == 0 {
                return Err(Error::Config("sgd: decay period must be >= 1".into()));
            }
        }
        let velocity = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Affine { w, b } => Velocity::Affine {
                    vw: Tensor::zeros(w.shape()),
                    vb: b.as_ref().map(|bias| Tensor::zeros(bias.shape())),
                },
                Layer::BatchNorm { params, .. } => Velocity::BatchNorm {
                    vgamma: Tensor::zeros(params.gamma.shape()),
                    vbeta: Tensor::zeros(params.beta.shape()),
                },
                _ => Velocity::None,
            })
            .collect();
        Ok(SgdState {
            lr,
            momentum,
            weight_decay,
            schedule,
            step: 0,
            velocity,
        })
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(self.lr, &self.schedule, self.step)
    }
}

fn momentum_update(p: &mut Tensor, v: &mut Tensor, g: &Tensor, mu: f64, lr_t: f64) -> Result<()> {
    if v.shape() != g.shape() {
        return Err(Error::dim2("sgd_step", v.shape(), g.shape()));
    }
    v.scale_in_place(mu);
    v.add_scaled_in_place(-lr_t, g)?;
    p.add_scaled_in_place(1.0, v)
}

/// One optimizer step over the whole network. The step counter advances
/// afterwards, so the first call uses the schedule at step 0.
pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut SgdState) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::State(
            "sgd_step: gradient structure does not match network".into(),
        ));
    }
    let lr_t = state.current_lr();
    let mu = state.momentum;
    let wd = state.weight_decay;
    for ((layer, vel), grad) in net
        .layers
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(&grads.layers)
    {
        match (layer, vel, grad) {
            (
                Layer::Affine { w, b },
                Velocity::Affine { vw, vb },
                LayerGrads::Affine { dw, db },
            ) => {
                if wd > 0.0 {
                    let dw_reg = dw.add(&w.scale(wd))?;
                    momentum_update(w, vw, &dw_reg, mu, lr_t)?;
                } else {
                    momentum_update(w, vw, dw, mu, lr_t)?;
                }
                match (b, vb, db) {
                    (Some(b), Some(vb), Some(db)) => momentum_update(b, vb, db, mu, lr_t)?,
                    (None, None, None) => {}
                    _ => {
                        return Err(Error::State(
                            "sgd_step: bias presence mismatch between layer and gradient".into(),
                        ))
                    }
                }
            }
            (
                Layer::BatchNorm { params, .. },
                Velocity::BatchNorm { vgamma, vbeta },
                LayerGrads::BatchNorm { dgamma, dbeta },
            ) => {
                momentum_update(&mut params.gamma, vgamma, dgamma, mu, lr_t)?;
                momentum_update(&mut params.beta, vbeta, dbeta, mu, lr_t)?;
            }
            (Layer::Sigmoid | Layer::Relu, Velocity::None, LayerGrads::None) => {}
            _ => {
                return Err(Error::State(
                    "sgd_step: gradient kind does not match layer kind".into(),
                ))
            }
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{
        batch_normalize_network, build_mlp, network_backward, network_forward,
        softmax_cross_entropy, Nonlinearity,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(p0: f64) -> Network {
        Network {
            layers: vec![Layer::Affine {
                w: Tensor::from_vec(&[1, 1], vec![p0]).unwrap(),
                b: None,
            }],
            mode: crate::nn::Mode::Train,
        }
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients {
            layers: vec![LayerGrads::Affine {
                dw: Tensor::from_vec(&[1, 1], vec![g]).unwrap(),
                db: None,
            }],
        }
    }

    fn weight(net: &Network) -> f64 {
        match &net.layers[0] {
            Layer::Affine { w, .. } => w.data()[0],
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut net = scalar_net(1.0);
        let mut state = SgdState::new(&net, 0.5, 0.0, 0.0, LrSchedule::Constant).unwrap();
        sgd_step(&mut net, &scalar_grad(2.0), &mut state).unwrap();
        assert!((weight(&net) - 0.0).abs() < 1e-15); // 1 - 0.5*2
    }

    #[test]
    fn momentum_hand_arithmetic() {
        let mut net = scalar_net(0.0);
        let mut state = SgdState::new(&net, 0.1, 0.9, 0.0, LrSchedule::Constant).unwrap();
        sgd_step(&mut net, &scalar_grad(1.0), &mut state).unwrap();
        assert!((weight(&net) - (-0.1)).abs() < 1e-15);
        sgd_step(&mut net, &scalar_grad(1.0), &mut state).unwrap();
        // v = 0.9*(-0.1) - 0.1 = -0.19; p = -0.1 - 0.19 = -0.29
        assert!((weight(&net) - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity_geometrically() {
        let mut net = scalar_net(0.0);
        let mut state = SgdState::new(&net, 0.1, 0.9, 0.0, LrSchedule::Constant).unwrap();
        sgd_step(&mut net, &scalar_grad(1.0), &mut state).unwrap(); // v = -0.1
        let mut expected = -0.1;
        let mut v = -0.1;
        for _ in 0..5 {
            sgd_step(&mut net, &scalar_grad(0.0), &mut state).unwrap();
            v *= 0.9;
            expected += v;
            assert!((weight(&net) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_at(0.1, &LrSchedule::Constant, 12345), 0.1);
        let exp = LrSchedule::Exponential {
            factor: 0.5,
            period: 1000,
        };
        assert_eq!(lr_at(0.1, &exp, 0), 0.1);
        assert!((lr_at(0.1, &exp, 2000) - 0.025).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for step in (0..5000).step_by(100) {
            let cur = lr_at(0.1, &exp, step);
            assert!(cur <= prev, "schedule must be non-increasing");
            prev = cur;
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let net = scalar_net(0.0);
        assert!(SgdState::new(&net, 0.0, 0.9, 0.0, LrSchedule::Constant).is_err());
        assert!(SgdState::new(&net, 0.1, 1.0, 0.0, LrSchedule::Constant).is_err());
        assert!(SgdState::new(&net, 0.1, -0.1, 0.0, LrSchedule::Constant).is_err());
        assert!(SgdState::new(
            &net,
            0.1,
            0.9,
            0.0,
            LrSchedule::Exponential {
                factor: 1.5,
                period: 10
            }
        )
        .is_err());
        assert!(SgdState::new(
            &net,
            0.1,
            0.9,
            0.0,
            LrSchedule::Exponential {
                factor: 0.5,
                period: 0
            }
        )
        .is_err());
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut net = scalar_net(0.0);
        let mut state = SgdState::new(&net, 0.1, 0.9, 0.0, LrSchedule::Constant).unwrap();
        let bad = Gradients {
            layers: vec![LayerGrads::Affine {
                dw: Tensor::zeros(&[2, 2]),
                db: None,
            }],
        };
        assert!(sgd_step(&mut net, &bad, &mut state).is_err());
    }

    #[test]
    fn weight_decay_shrinks_weights() {
        let mut plain = scalar_net(1.0);
        let mut decayed = scalar_net(1.0);
        let mut s1 = SgdState::new(&plain, 0.1, 0.0, 0.0, LrSchedule::Constant).unwrap();
        let mut s2 = SgdState::new(&decayed, 0.1, 0.0, 0.1, LrSchedule::Constant).unwrap();
        sgd_step(&mut plain, &scalar_grad(0.0), &mut s1).unwrap();
        sgd_step(&mut decayed, &scalar_grad(0.0), &mut s2).unwrap();
        assert_eq!(weight(&plain), 1.0);
        assert!((weight(&decayed) - 0.99).abs() < 1e-15); // 1 - 0.1*0.1*1
    }

    // 200 steps on a linearly separable 2-class problem must drive the
    // smoothed loss down for both the plain and batch-normalized nets.
    #[test]
    fn training_decreases_smoothed_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let base = build_mlp(&[2, 8, 2], Nonlinearity::Sigmoid, 0.5, &mut rng).unwrap();
        for net in [base.clone(), batch_normalize_network(&base, 1e-5)] {
            let mut net = net;
            let mut state = SgdState::new(&net, 0.5, 0.9, 0.0, LrSchedule::Constant).unwrap();
            let mut losses = Vec::new();
            for _ in 0..200 {
                let m = 16;
                let mut xs = Vec::with_capacity(m * 2);
                let mut labels = Vec::with_capacity(m);
                for _ in 0..m {
                    let cls = rng.gen_range(0..2usize);
                    let center = if cls == 0 { -2.0 } else { 2.0 };
                    xs.push(center + rng.gen_range(-0.5..0.5));
                    xs.push(center + rng.gen_range(-0.5..0.5));
                    labels.push(cls);
                }
                let x = Tensor::from_vec(&[m, 2], xs).unwrap();
                let trace = network_forward(&net, &x).unwrap();
                let (loss, dlogits) = softmax_cross_entropy(trace.output(), &labels).unwrap();
                let (_, grads) = network_backward(&net, &trace, &dlogits).unwrap();
                sgd_step(&mut net, &grads, &mut state).unwrap();
                losses.push(loss);
            }
            let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
            let tail: f64 = losses[150..].iter().sum::<f64>() / 50.0;
            assert!(
                tail < head,
                "smoothed loss should fall: head {head}, tail {tail}"
            );
            assert!(tail < 0.1, "separable problem should be nearly solved: {tail}");
        }
    }
}
