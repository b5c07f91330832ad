//! The experiment driver behind the CLI subcommands: training runs with
//! periodic evaluation, percentile probing of a chosen pre-nonlinearity unit,
//! fold verification, and checkpoint evaluation.
//!
//! Everything here is deterministic in (config, seed): weight init and batch
//! shuffling draw from independent ChaCha8 streams derived from the seed, and
//! evaluation touches no RNG at all, so the metrics CSV is reproducible byte
//! for byte.

use crate::batchnorm::bn_update_ema;
use crate::checkpoint::{load_network, save_network};
use crate::config::TrainConfig;
use crate::data::{load_dataset_dir, binarize, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{percentiles_15_50_85, MetricsRecord, MetricsWriter};
use crate::nn::{
    argmax_rows, batch_normalize_network, build_mlp, fold_network, freeze_network,
    network_backward, network_forward, softmax_cross_entropy, Layer, Mode, Network,
};
use crate::optim::{sgd_step, SgdState};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Moving-average decay used to track population statistics during training.
pub const EMA_DECAY: f64 = 0.9;

/// Examples in the fixed probe subset (and in fold verification).
pub const PROBE_SET_SIZE: usize = 1000;

/// Maximum rows pushed through an inference forward at once.
const EVAL_CHUNK: usize = 1000;

/// Folded networks must reproduce the unfolded output to this bound.
pub const FOLD_TOLERANCE: f64 = 1e-10;

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub config_path: PathBuf,
    pub checkpoint_train: PathBuf,
    /// Present only for BN runs: the frozen inference network.
    pub checkpoint_inference: Option<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

/// Loads the corpus and applies the configured binarization.
fn load_prepared(data_dir: &Path, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = load_dataset_dir(data_dir)?;
    if cfg.binarize {
        train.images = binarize(&train.images, 0.5)?;
        test.images = binarize(&test.images, 0.5)?;
    }
    Ok((train, test))
}

/// First `PROBE_SET_SIZE` test examples; fixed, so percentile traces are
/// comparable across eval points and across runs.
fn probe_subset(test: &Dataset) -> Tensor {
    let n = test.len().min(PROBE_SET_SIZE);
    let indices: Vec<usize> = (0..n).collect();
    test.images.take_rows(&indices)
}

/// Index of the activation feeding hidden block `probe_layer`'s nonlinearity.
/// `trace.activations[i]` is the input of `layers[i]`, so this is just the
/// position of the probe_layer-th nonlinearity layer.
pub fn probe_input_index(net: &Network, probe_layer: usize) -> Result<usize> {
    let mut seen = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        if matches!(layer, Layer::Sigmoid | Layer::Relu) {
            if seen == probe_layer {
                return Ok(i);
            }
            seen += 1;
        }
    }
    Err(Error::Config(format!(
        "probe layer {probe_layer} out of range: network has {seen} nonlinearity blocks"
    )))
}

/// Percentiles of the probed unit's pre-nonlinearity input, train-mode
/// forward (for BN nets the batch statistics come from the probe set itself).
pub fn probe_percentiles(
    net: &Network,
    probe_x: &Tensor,
    probe_layer: usize,
    probe_unit: usize,
) -> Result<(f64, f64, f64)> {
    let idx = probe_input_index(net, probe_layer)?;
    let mut probed = net.clone();
    probed.mode = Mode::Train;
    let trace = network_forward(&probed, probe_x)?;
    let act = &trace.activations[idx];
    if probe_unit >= act.cols() {
        return Err(Error::Config(format!(
            "probe unit {probe_unit} out of range: block has {} units",
            act.cols()
        )));
    }
    let mut column = act.col(probe_unit);
    percentiles_15_50_85(&mut column)
}

/// Inference-ready clone: frozen statistics when present, otherwise the
/// moving-average track (how accuracy is followed mid-training). A BN layer
/// with neither is a state error.
pub fn inference_view(net: &Network) -> Result<Network> {
    let mut view = net.clone();
    view.mode = Mode::Inference;
    for layer in &mut view.layers {
        if let Layer::BatchNorm { stats, .. } = layer {
            if stats.batches_seen == 0 {
                *stats = stats.ema_snapshot()?;
            }
        }
    }
    Ok(view)
}

/// Accuracy of an inference-mode network over a labeled dataset, chunked to
/// bound the working set.
pub fn dataset_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("accuracy evaluation"));
    }
    let mut correct = 0usize;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let x = data.images.take_rows(&indices);
        let trace = network_forward(net, &x)?;
        let predicted = argmax_rows(trace.output());
        correct += predicted
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

fn evaluate(
    net: &Network,
    test: &Dataset,
    probe_x: &Tensor,
    cfg: &TrainConfig,
    step: usize,
    train_loss: f64,
) -> Result<MetricsRecord> {
    let eval_net = inference_view(net)?;
    let test_accuracy = dataset_accuracy(&eval_net, test)?;
    let (p15, p50, p85) = probe_percentiles(net, probe_x, cfg.probe_layer, cfg.probe_unit)?;
    Ok(MetricsRecord {
        step,
        test_accuracy,
        train_loss,
        p15,
        p50,
        p85,
    })
}

/// Trains per config, recording a MetricsRecord at every eval point and at
/// the final step. Writes metrics.csv, the effective config sidecar, the
/// train-mode checkpoint, and (BN runs) a frozen inference checkpoint.
pub fn run_train(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, test) = load_prepared(data_dir, cfg)?;
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds training set of {}",
            cfg.batch_size,
            train.len()
        )));
    }
    let probe_x = probe_subset(&test);

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let config_path = out_dir.join("config.txt");
    let checkpoint_train = out_dir.join("checkpoint-train.bnck");
    std::fs::write(&config_path, cfg.to_kv_string())?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);

    let base = build_mlp(&cfg.dims(), cfg.nonlinearity, cfg.init_std, &mut init_rng)?;
    let mut net = if cfg.bn {
        batch_normalize_network(&base, cfg.eps)
    } else {
        base
    };
    // probe indices were validated against the hidden layout; recheck against
    // the realized network so the error surfaces before training
    probe_input_index(&net, cfg.probe_layer)?;

    let mut opt = SgdState::new(&net, cfg.lr, cfg.momentum, 0.0, cfg.schedule())?;
    let mut batches = BatchIterator::new(&train, cfg.batch_size, batch_rng)?;
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut records = Vec::new();

    for step in 1..=cfg.steps {
        let (x, labels) = batches.next_batch();
        let trace = network_forward(&net, &x)?;
        let (loss, dlogits) = softmax_cross_entropy(trace.output(), &labels)?;
        let (_, grads) = network_backward(&net, &trace, &dlogits)?;
        for (i, cache) in trace.bn_caches.iter().enumerate() {
            if let Some(cache) = cache {
                if let Layer::BatchNorm { stats, .. } = &mut net.layers[i] {
                    bn_update_ema(stats, &cache.moments(), EMA_DECAY)?;
                }
            }
        }
        sgd_step(&mut net, &grads, &mut opt)?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let record = evaluate(&net, &test, &probe_x, cfg, step, loss)?;
            writer.write(&record)?;
            records.push(record);
        }
    }
    writer.finish()?;

    save_network(&net, &checkpoint_train)?;
    let checkpoint_inference = if cfg.bn {
        let path = out_dir.join("checkpoint-inference.bnck");
        let frozen = freeze_network(
            &net,
            (0..cfg.freeze_batches).map(|_| batches.next_batch().0),
        )?;
        save_network(&frozen, &path)?;
        Some(path)
    } else {
        None
    };

    Ok(TrainOutcome {
        metrics_path,
        config_path,
        checkpoint_train,
        checkpoint_inference,
        records,
    })
}

/// Accuracy of a stored checkpoint on the test split.
pub fn run_eval(checkpoint: &Path, data_dir: &Path, binarize_input: bool) -> Result<f64> {
    let net = load_network(checkpoint)?;
    let (mut test, _) = {
        let (_, test) = load_dataset_dir(data_dir)?;
        (test, ())
    };
    if binarize_input {
        test.images = binarize(&test.images, 0.5)?;
    }
    let eval_net = inference_view(&net)?;
    dataset_accuracy(&eval_net, &test)
}

/// Probes a stream of checkpoints, writing one CSV row per checkpoint with
/// its ordinal position as the step column.
pub fn run_percentiles(
    checkpoints: &[PathBuf],
    data_dir: &Path,
    probe_layer: usize,
    probe_unit: usize,
    binarize_input: bool,
    out: &Path,
) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints given to probe".into()));
    }
    let (_, mut test) = load_dataset_dir(data_dir)?;
    if binarize_input {
        test.images = binarize(&test.images, 0.5)?;
    }
    let probe_x = probe_subset(&test);

    let mut rows = String::from("step,p15,p50,p85\n");
    for (ordinal, path) in checkpoints.iter().enumerate() {
        let net = load_network(path)?;
        let (p15, p50, p85) = probe_percentiles(&net, &probe_x, probe_layer, probe_unit)?;
        if !(p15 <= p50 && p50 <= p85) {
            return Err(Error::Verification(format!(
                "percentiles out of order for {}",
                path.display()
            )));
        }
        rows.push_str(&format!(
            "{ordinal},{p15:.8e},{p50:.8e},{p85:.8e}\n"
        ));
    }
    std::fs::write(out, rows)?;
    Ok(())
}

#[derive(Debug)]
pub struct FoldOutcome {
    pub max_deviation: f64,
    pub examples_checked: usize,
}

/// Folds every BN layer of an inference checkpoint into its neighboring
/// affine, verifies equivalence on up to `PROBE_SET_SIZE` test examples, and
/// writes the folded checkpoint.
pub fn run_fold(
    checkpoint_in: &Path,
    checkpoint_out: &Path,
    data_dir: &Path,
    binarize_input: bool,
) -> Result<FoldOutcome> {
    let net = load_network(checkpoint_in)?;
    let folded = fold_network(&net)?;

    let (_, mut test) = load_dataset_dir(data_dir)?;
    if binarize_input {
        test.images = binarize(&test.images, 0.5)?;
    }
    let x = probe_subset(&test);
    if x.rows() == 0 {
        return Err(Error::EmptyBatch("fold verification"));
    }
    let before = network_forward(&net, &x)?;
    let after = network_forward(&folded, &x)?;
    let max_deviation = before
        .output()
        .data()
        .iter()
        .zip(after.output().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    if max_deviation.is_nan() || max_deviation >= FOLD_TOLERANCE {
        return Err(Error::Verification(format!(
            "folded network deviates by {max_deviation:.3e} (allowed < {FOLD_TOLERANCE:.0e})"
        )));
    }
    save_network(&folded, checkpoint_out)?;
    Ok(FoldOutcome {
        max_deviation,
        examples_checked: x.rows(),
    })
}
