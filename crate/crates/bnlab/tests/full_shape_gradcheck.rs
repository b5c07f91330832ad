//! Finite-difference check of every parameter coordinate at the experiment's
//! real network shape (784-100-100-100-10 with BN), not just the small random
//! shapes of the fast gradcheck suite. Catches accumulation problems that
//! only appear at production fan-in.

use bnlab::data::{binarize, generate_synthetic, SynthConfig};
use bnlab::gradcheck::{rel_err, FD_STEP};
use bnlab::nn::{
    batch_normalize_network, build_mlp, network_backward, network_forward,
    softmax_cross_entropy, Layer, LayerGrads, Network, Nonlinearity,
};
use bnlab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss_of(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let trace = network_forward(net, x).unwrap();
    let (loss, _) = softmax_cross_entropy(trace.output(), labels).unwrap();
    loss
}

fn param_mut(net: &mut Network, li: usize, pi: usize) -> &mut f64 {
    match &mut net.layers[li] {
        Layer::Affine { w, b } => {
            if pi < w.len() {
                &mut w.data_mut()[pi]
            } else {
                &mut b.as_mut().unwrap().data_mut()[pi - w.len()]
            }
        }
        Layer::BatchNorm { params, .. } => {
            let d = params.gamma.len();
            if pi < d {
                &mut params.gamma.data_mut()[pi]
            } else {
                &mut params.beta.data_mut()[pi - d]
            }
        }
        Layer::Sigmoid | Layer::Relu => unreachable!("no parameters"),
    }
}

#[test]
fn every_parameter_matches_finite_differences_at_full_shape() {
    let m = 4;
    let (pixels, raw_labels) = generate_synthetic(m, 99, SynthConfig::default());
    let x = binarize(
        &Tensor::from_vec(&[m, 784], pixels.iter().map(|&p| p as f64 / 255.0).collect()).unwrap(),
        0.5,
    )
    .unwrap();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let base = build_mlp(&[784, 100, 100, 100, 10], Nonlinearity::Sigmoid, 0.1, &mut rng).unwrap();
    let mut net = batch_normalize_network(&base, 1e-5);

    let trace = network_forward(&net, &x).unwrap();
    let (_, dlogits) = softmax_cross_entropy(trace.output(), &labels).unwrap();
    let (_, grads) = network_backward(&net, &trace, &dlogits).unwrap();

    let mut max_err = 0.0_f64;
    let mut worst = (0usize, 0usize);
    let mut coords = 0usize;
    for li in 0..net.layers.len() {
        let analytic: Vec<f64> = match &grads.layers[li] {
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
            let saved = *param_mut(&mut net, li, pi);
            *param_mut(&mut net, li, pi) = saved + FD_STEP;
            let plus = loss_of(&net, &x, &labels);
            *param_mut(&mut net, li, pi) = saved - FD_STEP;
            let minus = loss_of(&net, &x, &labels);
            *param_mut(&mut net, li, pi) = saved;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_err(g, numeric);
            if err > max_err {
                max_err = err;
                worst = (li, pi);
            }
            coords += 1;
        }
    }
    assert!(coords > 100_000, "expected the full parameter set, saw {coords}");
    assert!(
        max_err < 1e-5,
        "max rel err {max_err:.3e} at layer {} coord {} over {coords} coords",
        worst.0,
        worst.1
    );
}
