//! The release gate: every numbered criterion below must hold, each printing
//! one pass/fail line. Tolerances are pinned here, not imported, so loosening
//! one is a visible diff.
//!
//! Criterion 8 trains the full experiment twice (BN and baseline arms,
//! 50,000 steps each); expect several minutes of runtime on one core.

use bnlab::batchnorm::{
    bn_accumulate_stats, bn_backward, bn_conv_backward, bn_conv_forward_train, bn_forward_train,
    BnParams, BnStats,
};
use bnlab::checkpoint::load_network;
use bnlab::config::TrainConfig;
use bnlab::data::{write_synthetic_dataset, SynthConfig};
use bnlab::experiment::run_train;
use bnlab::gradcheck::{self, rel_err};
use bnlab::metrics::MetricsRecord;
use bnlab::nn::{fold_network, network_forward, Layer};
use bnlab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

const SEED: u64 = 1;
const CORPUS_SEED: u64 = 3;
const N_TRAIN: usize = 60_000;
const N_TEST: usize = 2_000;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

struct Criterion {
    number: usize,
    name: &'static str,
    outcome: Result<String, String>,
}

/// 1: all finite-difference suites pass within 1e-5 in under a minute.
fn criterion_gradcheck() -> Result<String, String> {
    let started = std::time::Instant::now();
    let report = gradcheck::run_all(SEED, 20).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    if !report.all_passed() {
        return Err(format!("suite reported failures:\n{report}"));
    }
    if elapsed.as_secs_f64() >= 60.0 {
        return Err(format!("took {:.1}s, budget is 60s", elapsed.as_secs_f64()));
    }
    let max = report
        .ops
        .iter()
        .map(|op| op.max_rel_err)
        .fold(0.0_f64, f64::max);
    Ok(format!(
        "7 ops x 20 instances, max rel err {max:.2e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

/// 2: normalized columns have zero sum (within 1e-9*m) and mean square
/// sigma^2/(sigma^2+eps) (within 1e-9) on 100 random batches.
fn criterion_normalization_statistics() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let eps = 1e-5;
    let mut worst_sum = 0.0_f64;
    let mut worst_msq = 0.0_f64;
    for batch in 0..100 {
        let m = rng.gen_range(2..=16);
        let d = rng.gen_range(1..=8);
        let x = randn(&mut rng, &[m, d], 3.0);
        let params = BnParams::identity(d);
        let (_, cache) = bn_forward_train(&x, &params, eps).map_err(|e| e.to_string())?;
        for j in 0..d {
            let col = cache.x_hat.col(j);
            let sum: f64 = col.iter().sum();
            let mean_sq: f64 = col.iter().map(|v| v * v).sum::<f64>() / m as f64;
            let sigma2 = cache.sigma2_b.data()[j];
            let want = sigma2 / (sigma2 + eps);
            worst_sum = worst_sum.max(sum.abs() / m as f64);
            worst_msq = worst_msq.max((mean_sq - want).abs());
            if sum.abs() > 1e-9 * m as f64 {
                return Err(format!("batch {batch} col {j}: |sum x_hat| = {:.3e}", sum.abs()));
            }
            if (mean_sq - want).abs() > 1e-9 {
                return Err(format!(
                    "batch {batch} col {j}: mean square off by {:.3e}",
                    (mean_sq - want).abs()
                ));
            }
        }
    }
    Ok(format!(
        "100 batches, worst |sum|/m {worst_sum:.2e}, worst mean-square gap {worst_msq:.2e}"
    ))
}

/// 3: BN(Wu) = BN((aW)u) for a in {0.1, 10}: outputs within 1e-9, du equal
/// and d(aW) = (1/a) dW within 1e-9 relative, 20 instances.
fn criterion_scale_invariance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    // The identity is exact only at eps = 0, which training-mode validation
    // rejects. At eps > 0 the two paths compute sqrt(sigma^2 + eps) vs
    // sqrt(a^2 sigma^2 + eps), a mismatch that backward amplifies to roughly
    // eps / sigma^3; the smallest seeded channel variance here is ~9e-5. An
    // eps below the f64 resolution of every channel variance tests the
    // identity in its exact regime.
    let eps = 1e-30;
    let mut worst = 0.0_f64;
    for instance in 0..20 {
        let m = rng.gen_range(2..=16);
        let k = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=6);
        let u = randn(&mut rng, &[m, k], 1.0);
        let w = randn(&mut rng, &[k, d], 1.0);
        let gamma = randn(&mut rng, &[d], 0.5).map(|v| v + 1.0);
        let beta = randn(&mut rng, &[d], 0.5);
        let params = BnParams::new(gamma, beta).unwrap();
        let dy = randn(&mut rng, &[m, d], 1.0);
        for &a in &[0.1, 10.0] {
            let x = u.matmul(&w).map_err(|e| e.to_string())?;
            let xa = x.scale(a);
            let (y, cache) = bn_forward_train(&x, &params, eps).map_err(|e| e.to_string())?;
            let (ya, cache_a) = bn_forward_train(&xa, &params, eps).map_err(|e| e.to_string())?;
            for (p, q) in y.data().iter().zip(ya.data()) {
                let gap = (p - q).abs();
                worst = worst.max(gap);
                if gap > 1e-9 {
                    return Err(format!("instance {instance} a={a}: outputs differ by {gap:.3e}"));
                }
            }
            let (dx, _, _) = bn_backward(&cache, &dy, &params).map_err(|e| e.to_string())?;
            let (dxa, _, _) = bn_backward(&cache_a, &dy, &params).map_err(|e| e.to_string())?;
            // chain to the pre-BN matmul: du = dx W^T (scaled: a dxa W^T),
            // dW = u^T dx (scaled net sees d(aW) = u^T dxa)
            let du = dx.matmul(&w.transpose()).map_err(|e| e.to_string())?;
            let du_a = dxa
                .matmul(&w.transpose())
                .map_err(|e| e.to_string())?
                .scale(a);
            let dw = u.transpose().matmul(&dx).map_err(|e| e.to_string())?;
            let dw_a = u.transpose().matmul(&dxa).map_err(|e| e.to_string())?;
            for (p, q) in du.data().iter().zip(du_a.data()) {
                let gap = rel_err(*p, *q);
                worst = worst.max(gap);
                if gap > 1e-9 {
                    return Err(format!("instance {instance} a={a}: du gap {gap:.3e}"));
                }
            }
            for (p, q) in dw.data().iter().zip(dw_a.data()) {
                // d(aW) must equal (1/a) dW, i.e. a * dw_a == dw
                let gap = rel_err(*p, a * q);
                worst = worst.max(gap);
                if gap > 1e-9 {
                    return Err(format!("instance {instance} a={a}: dW gap {gap:.3e}"));
                }
            }
        }
    }
    Ok(format!("20 instances, a in {{0.1, 10}}, worst gap {worst:.2e}"))
}

/// 4: gamma = sqrt(sigma_B^2 + eps), beta = mu_B reproduces the input
/// within 1e-9.
fn criterion_identity_representation() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let eps = 1e-5;
    let mut worst = 0.0_f64;
    for instance in 0..20 {
        let m = rng.gen_range(2..=16);
        let d = rng.gen_range(1..=8);
        let x = randn(&mut rng, &[m, d], 2.0);
        let (_, cache) =
            bn_forward_train(&x, &BnParams::identity(d), eps).map_err(|e| e.to_string())?;
        let gamma = cache.sigma2_b.map(|v| (v + eps).sqrt());
        let beta = cache.mu_b.clone();
        let params = BnParams::new(gamma, beta).unwrap();
        let (y, _) = bn_forward_train(&x, &params, eps).map_err(|e| e.to_string())?;
        for (a, b) in y.data().iter().zip(x.data()) {
            let gap = (a - b).abs();
            worst = worst.max(gap);
            if gap > 1e-9 {
                return Err(format!("instance {instance}: reconstruction off by {gap:.3e}"));
            }
        }
    }
    Ok(format!("20 instances, worst reconstruction gap {worst:.2e}"))
}

/// 5: the frozen 50k BN network folds with < 1e-10 max deviation on 1000
/// test examples, and frozen inference ignores batch composition exactly.
fn criterion_fold_equivalence(frozen_path: &Path, probe_x: &Tensor) -> Result<String, String> {
    let frozen = load_network(frozen_path).map_err(|e| e.to_string())?;
    let folded = fold_network(&frozen).map_err(|e| e.to_string())?;
    if folded.layers.iter().any(|l| matches!(l, Layer::BatchNorm { .. })) {
        return Err("folded network still contains BN layers".into());
    }
    let before = network_forward(&frozen, probe_x).map_err(|e| e.to_string())?;
    let after = network_forward(&folded, probe_x).map_err(|e| e.to_string())?;
    let max_dev = before
        .output()
        .data()
        .iter()
        .zip(after.output().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    if max_dev >= 1e-10 {
        return Err(format!("fold deviation {max_dev:.3e} on {} examples", probe_x.rows()));
    }

    // batch independence: each row alone must equal its row in the batch
    let k = 20.min(probe_x.rows());
    let indices: Vec<usize> = (0..k).collect();
    let batch = probe_x.take_rows(&indices);
    let joint = network_forward(&frozen, &batch).map_err(|e| e.to_string())?;
    for i in 0..k {
        let single = probe_x.take_rows(&[i]);
        let alone = network_forward(&frozen, &single).map_err(|e| e.to_string())?;
        if alone.output().data() != joint.output().row(i) {
            return Err(format!("example {i} changes with batch composition"));
        }
    }
    Ok(format!(
        "max fold deviation {max_dev:.2e} over {} examples; {k} examples batch-independent bit-for-bit",
        probe_x.rows()
    ))
}

/// 6: over 10,000 Gaussian mini-batches (m=10, sigma^2=9) the corrected
/// accumulator lands within 3 standard errors of 9 while the uncorrected
/// average sits near 8.1.
fn criterion_unbiased_variance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    let normal = Normal::new(5.0, 3.0).unwrap();
    let (m, batches) = (10usize, 10_000usize);
    let mut stats = BnStats::new(1);
    let mut uncorrected_sum = 0.0;
    for _ in 0..batches {
        let x = Tensor::from_vec(&[m, 1], (0..m).map(|_| normal.sample(&mut rng)).collect())
            .unwrap();
        let (_, cache) =
            bn_forward_train(&x, &BnParams::identity(1), 1e-5).map_err(|e| e.to_string())?;
        uncorrected_sum += cache.sigma2_b.data()[0];
        bn_accumulate_stats(&mut stats, &cache.moments()).map_err(|e| e.to_string())?;
    }
    let corrected = stats.var.data()[0];
    let uncorrected = uncorrected_sum / batches as f64;
    // variance of the per-batch unbiased estimate is 2 sigma^4 / (m-1)
    let se_corrected = (2.0 * 81.0 / 9.0 / batches as f64).sqrt();
    let se_uncorrected = se_corrected * (m as f64 - 1.0) / m as f64;
    if (corrected - 9.0).abs() > 3.0 * se_corrected {
        return Err(format!(
            "corrected {corrected:.4} misses 9 by more than 3 SE ({:.4})",
            3.0 * se_corrected
        ));
    }
    if (uncorrected - 8.1).abs() > 3.0 * se_uncorrected {
        return Err(format!(
            "uncorrected {uncorrected:.4} not near 8.1 (3 SE = {:.4})",
            3.0 * se_uncorrected
        ));
    }
    Ok(format!(
        "corrected {corrected:.4} (|gap| {:.4} <= {:.4}), uncorrected {uncorrected:.4} near 8.1",
        (corrected - 9.0).abs(),
        3.0 * se_corrected
    ))
}

/// Reshape oracle: NCHW to [m*p*q, c] rows, each spatial position a row.
fn nchw_to_rows(x: &Tensor) -> Tensor {
    let (m, c, p, q) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![0.0; m * p * q * c];
    for i in 0..m {
        for k in 0..c {
            for a in 0..p {
                for b in 0..q {
                    let row = i * p * q + a * q + b;
                    out[row * c + k] = x.data()[((i * c + k) * p + a) * q + b];
                }
            }
        }
    }
    Tensor::from_vec(&[m * p * q, c], out).unwrap()
}

fn rows_to_nchw(rows: &Tensor, m: usize, c: usize, p: usize, q: usize) -> Tensor {
    let mut out = vec![0.0; m * c * p * q];
    for i in 0..m {
        for k in 0..c {
            for a in 0..p {
                for b in 0..q {
                    let row = i * p * q + a * q + b;
                    out[((i * c + k) * p + a) * q + b] = rows.data()[row * c + k];
                }
            }
        }
    }
    Tensor::from_vec(&[m, c, p, q], out).unwrap()
}

/// 7: the 4-D convolutional path matches the reshape-to-rows oracle within
/// 1e-12, forward and backward, 20 instances.
fn criterion_conv_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let eps = 1e-5;
    let mut worst = 0.0_f64;
    for instance in 0..20 {
        let (m, c, p, q) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
        );
        if m * p * q < 2 {
            continue;
        }
        let x = randn(&mut rng, &[m, c, p, q], 2.0);
        let gamma = randn(&mut rng, &[c], 0.5).map(|v| v + 1.0);
        let beta = randn(&mut rng, &[c], 0.5);
        let params = BnParams::new(gamma, beta).unwrap();
        let dy = randn(&mut rng, &[m, c, p, q], 1.0);

        let (y, cache) = bn_conv_forward_train(&x, &params, eps).map_err(|e| e.to_string())?;
        let (dx, dgamma, dbeta) =
            bn_conv_backward(&cache, &dy, &params).map_err(|e| e.to_string())?;

        let rows = nchw_to_rows(&x);
        let (y_rows, cache_rows) =
            bn_forward_train(&rows, &params, eps).map_err(|e| e.to_string())?;
        let y_oracle = rows_to_nchw(&y_rows, m, c, p, q);
        let (dx_rows, dg_oracle, db_oracle) =
            bn_backward(&cache_rows, &nchw_to_rows(&dy), &params).map_err(|e| e.to_string())?;
        let dx_oracle = rows_to_nchw(&dx_rows, m, c, p, q);

        for (name, got, want) in [
            ("y", y.data(), y_oracle.data()),
            ("dx", dx.data(), dx_oracle.data()),
            ("dgamma", dgamma.data(), dg_oracle.data()),
            ("dbeta", dbeta.data(), db_oracle.data()),
        ] {
            for (a, b) in got.iter().zip(want) {
                let gap = (a - b).abs();
                worst = worst.max(gap);
                if gap > 1e-12 {
                    return Err(format!("instance {instance}: {name} gap {gap:.3e}"));
                }
            }
        }
    }
    Ok(format!("20 instances, worst elementwise gap {worst:.2e}"))
}

fn stability(records: &[MetricsRecord], horizon: usize) -> f64 {
    let p50s: Vec<f64> = records
        .iter()
        .filter(|r| r.step > horizon / 2 && r.step <= horizon)
        .map(|r| r.p50)
        .collect();
    let mean = p50s.iter().sum::<f64>() / p50s.len() as f64;
    (p50s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p50s.len() as f64).sqrt()
}

fn accuracy_at(records: &[MetricsRecord], step: usize) -> Result<f64, String> {
    records
        .iter()
        .find(|r| r.step == step)
        .map(|r| r.test_accuracy)
        .ok_or_else(|| format!("no eval record at step {step}"))
}

struct ExperimentArms {
    bn: Vec<MetricsRecord>,
    base: Vec<MetricsRecord>,
    bn_metrics_bytes: Vec<u8>,
    frozen_path: std::path::PathBuf,
}

/// Trains both 50,000-step arms with the shared default config. The 10k-step
/// claims read the step-10000 records: training is prefix-deterministic, so
/// they equal a dedicated 10k run's final state.
fn run_experiment_arms(data_dir: &Path, work: &Path) -> Result<ExperimentArms, String> {
    let cfg = TrainConfig::default();
    let bn_out = work.join("bn");
    let outcome_bn = run_train(&cfg, data_dir, &bn_out).map_err(|e| e.to_string())?;
    let mut base_cfg = cfg.clone();
    base_cfg.bn = false;
    let outcome_base =
        run_train(&base_cfg, data_dir, &work.join("base")).map_err(|e| e.to_string())?;
    let bn_metrics_bytes = std::fs::read(&outcome_bn.metrics_path).map_err(|e| e.to_string())?;
    Ok(ExperimentArms {
        bn: outcome_bn.records,
        base: outcome_base.records,
        bn_metrics_bytes,
        frozen_path: outcome_bn
            .checkpoint_inference
            .ok_or("BN run produced no frozen checkpoint")?,
    })
}

/// 8: BN beats the baseline's test accuracy at steps 10000 and 50000, and
/// the probed unit's p50 is strictly steadier (smaller std over the last
/// half) for BN at both horizons.
fn criterion_experiment(arms: &ExperimentArms) -> Result<String, String> {
    let acc_bn_10k = accuracy_at(&arms.bn, 10_000)?;
    let acc_base_10k = accuracy_at(&arms.base, 10_000)?;
    let acc_bn_50k = accuracy_at(&arms.bn, 50_000)?;
    let acc_base_50k = accuracy_at(&arms.base, 50_000)?;
    if acc_bn_10k <= acc_base_10k {
        return Err(format!("at 10k: BN {acc_bn_10k:.4} <= baseline {acc_base_10k:.4}"));
    }
    if acc_bn_50k <= acc_base_50k {
        return Err(format!("at 50k: BN {acc_bn_50k:.4} <= baseline {acc_base_50k:.4}"));
    }
    for horizon in [10_000, 50_000] {
        let s_bn = stability(&arms.bn, horizon);
        let s_base = stability(&arms.base, horizon);
        if s_bn >= s_base {
            return Err(format!(
                "p50 std over last half of {horizon}: BN {s_bn:.4} >= baseline {s_base:.4}"
            ));
        }
    }
    Ok(format!(
        "acc 10k {acc_bn_10k:.4} > {acc_base_10k:.4}, 50k {acc_bn_50k:.4} > {acc_base_50k:.4}; \
         p50 std 10k {:.4} < {:.4}, 50k {:.4} < {:.4}",
        stability(&arms.bn, 10_000),
        stability(&arms.base, 10_000),
        stability(&arms.bn, 50_000),
        stability(&arms.base, 50_000)
    ))
}

/// 9: identical (config, seed) twice gives byte-identical metrics CSV. The
/// replay uses a 2000-step prefix config; determinism has no step horizon.
fn criterion_determinism(data_dir: &Path, work: &Path) -> Result<String, String> {
    let cfg = TrainConfig {
        steps: 2_000,
        ..TrainConfig::default()
    };
    let a = run_train(&cfg, data_dir, &work.join("det-a")).map_err(|e| e.to_string())?;
    let b = run_train(&cfg, data_dir, &work.join("det-b")).map_err(|e| e.to_string())?;
    let bytes_a = std::fs::read(&a.metrics_path).map_err(|e| e.to_string())?;
    let bytes_b = std::fs::read(&b.metrics_path).map_err(|e| e.to_string())?;
    if bytes_a != bytes_b {
        return Err("metrics CSVs differ between identical runs".into());
    }
    Ok(format!(
        "{} bytes identical across two {}-step runs",
        bytes_a.len(),
        cfg.steps
    ))
}

#[test]
fn acceptance_criteria() {
    let work = tempfile::tempdir().unwrap();
    let data_dir = work.path().join("data");
    write_synthetic_dataset(&data_dir, N_TRAIN, N_TEST, CORPUS_SEED, SynthConfig::default())
        .unwrap();

    let mut results: Vec<Criterion> = Vec::new();
    let mut push = |number, name, outcome| {
        results.push(Criterion {
            number,
            name,
            outcome,
        })
    };

    push(1, "gradient exactness", criterion_gradcheck());
    push(2, "normalization statistics", criterion_normalization_statistics());
    push(3, "scale invariance", criterion_scale_invariance());
    push(4, "identity representation", criterion_identity_representation());
    push(6, "unbiased variance", criterion_unbiased_variance());
    push(7, "conv equivalence", criterion_conv_equivalence());

    // the experiment arms feed criteria 5 and 8
    match run_experiment_arms(&data_dir, work.path()) {
        Ok(arms) => {
            let (_, test) = bnlab::data::load_dataset_dir(&data_dir).unwrap();
            let binarized = bnlab::data::binarize(&test.images, 0.5).unwrap();
            let probe_indices: Vec<usize> = (0..1000.min(binarized.rows())).collect();
            let probe_x = binarized.take_rows(&probe_indices);
            push(
                5,
                "fold equivalence",
                criterion_fold_equivalence(&arms.frozen_path, &probe_x),
            );
            push(8, "experiment reproduction", criterion_experiment(&arms));
            assert!(!arms.bn_metrics_bytes.is_empty());
        }
        Err(e) => {
            push(5, "fold equivalence", Err(format!("experiment failed: {e}")));
            push(8, "experiment reproduction", Err(e));
        }
    }

    push(9, "determinism", criterion_determinism(&data_dir, work.path()));

    results.sort_by_key(|c| c.number);
    let mut failed = Vec::new();
    for c in &results {
        match &c.outcome {
            Ok(detail) => println!("criterion {} ({}): PASS - {detail}", c.number, c.name),
            Err(detail) => {
                println!("criterion {} ({}): FAIL - {detail}", c.number, c.name);
                failed.push(c.number);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
