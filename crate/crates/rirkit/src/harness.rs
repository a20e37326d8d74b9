//! Training/evaluation harness: run configuration, the training loop with
//! per-epoch metrics and checkpoints, the ablation sweep over streams and
//! layers, and the blocks x layers grid sweep.
//!
//! A run is a pure function of its RunConfig: with wall-clock timing
//! disabled, the metrics CSV and every checkpoint are byte-identical across
//! repeats of the same configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{
    augment, batch_indices, load_cifar, normalize, stratified_subset, synthetic_dataset,
    BatchPlan, CifarVariant, Dataset, SplitTag, IMAGE_CHANNELS, IMAGE_EDGE, IMAGE_LEN,
};
use crate::error::{Result, RirError};
use crate::init::InitKind;
use crate::model::{build_network, spec_by_name, Gradients, Model, ModelKind};
use crate::ops::{softmax_cross_entropy, Mode};
use crate::optim::{lr_at, step, OptConfig, OptState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything a run needs; serialized into checkpoints and config.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub arch: String,
    pub kind: ModelKind,
    pub dataset: CifarVariant,
    pub data_path: Option<PathBuf>,
    /// Stratified train subset size; None uses the full split (synthetic
    /// runs default to 5000).
    pub subset: Option<usize>,
    /// Stratified test subset size; None uses the full split (synthetic
    /// runs default to 2000).
    pub test_subset: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: OptConfig,
    pub init: InitKind,
    /// Seed for weights, batch order, and augmentation.
    pub seed: u64,
    /// Seed for subset selection and synthetic data, kept separate so
    /// different run seeds train on the same data.
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub f64_mode: bool,
    pub augment: bool,
    pub normalize: bool,
    /// With timing off the wall_ms column is written as 0, making the CSV
    /// byte-reproducible.
    pub wall_clock: bool,
}

impl RunConfig {
    pub fn classes(&self) -> usize {
        self.dataset.classes()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,train_acc,test_acc,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_ms: u64,
}

impl EpochRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.train_loss, self.train_acc, self.test_acc,
            self.wall_ms
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub param_count: usize,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

impl TrainOutcome {
    pub fn final_test_acc(&self) -> f64 {
        self.rows.last().map(|r| r.test_acc).unwrap_or(0.0)
    }

    pub fn initial_train_loss(&self) -> f64 {
        self.rows.first().map(|r| r.train_loss).unwrap_or(f64::NAN)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN)
    }
}

/// Loads (or synthesizes) the train and test splits, subsets, and normalizes
/// test data with the train statistics.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match cfg.dataset {
        CifarVariant::Synthetic => {
            let n_train = cfg.subset.unwrap_or(5000);
            let n_test = cfg.test_subset.unwrap_or(2000);
            (
                synthetic_dataset(10, n_train, SplitTag::Train, cfg.data_seed),
                synthetic_dataset(10, n_test, SplitTag::Test, cfg.data_seed),
            )
        }
        variant => {
            let dir = cfg.data_path.clone().ok_or_else(|| {
                RirError::config(
                    "no data path; pass --data-path or set RIRKIT_DATA".to_string(),
                )
            })?;
            let mut train = load_cifar(&dir, variant, SplitTag::Train)?;
            let mut test = load_cifar(&dir, variant, SplitTag::Test)?;
            if let Some(n) = cfg.subset {
                train = stratified_subset(&train, n, cfg.data_seed)?;
            }
            if let Some(n) = cfg.test_subset {
                test = stratified_subset(&test, n, cfg.data_seed)?;
            }
            (train, test)
        }
    };
    if cfg.normalize {
        let stats = normalize(&mut train, None);
        normalize(&mut test, Some(&stats));
    }
    Ok((train, test))
}

pub fn build_from_config<T: Scalar>(cfg: &RunConfig) -> Result<Model<T>> {
    let spec = spec_by_name(&cfg.arch, cfg.classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    build_network(&spec, cfg.kind, cfg.init, &mut rng)
}

fn gather_batch<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    aug_rng: Option<&mut ChaCha8Rng>,
) -> (Tensor<T>, Vec<usize>) {
    match aug_rng {
        None => ds.batch(indices),
        Some(rng) => {
            let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
            let mut labels = Vec::with_capacity(indices.len());
            for &i in indices {
                let img = augment(ds.image(i), rng);
                data.extend(img.iter().map(|&v| T::from_f64(v as f64)));
                labels.push(ds.labels[i] as usize);
            }
            let t = Tensor::from_vec(
                &[indices.len(), IMAGE_CHANNELS, IMAGE_EDGE, IMAGE_EDGE],
                data,
            )
            .expect("batch shape");
            (t, labels)
        }
    }
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let (n, k) = logits.dims2().expect("logits are [N, K]");
    let mut correct = 0;
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mut best = 0;
        for ki in 1..k {
            if row[ki] > row[best] {
                best = ki;
            }
        }
        if best == labels[ni] {
            correct += 1;
        }
    }
    correct
}

/// Accuracy over the dataset in eval mode, sequential batches.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = ds.batch::<T>(chunk);
        let logits = model.forward(&batch, Mode::Eval)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.f64_mode {
        train_typed::<f64>(cfg)
    } else {
        train_typed::<f32>(cfg)
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.opt.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(RirError::config("epochs and batch size must be >= 1".to_string()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let config_json = cfg.to_json()?;
    fs::write(cfg.out_dir.join("config.json"), &config_json)?;

    let (train_ds, test_ds) = prepare_data(cfg)?;
    let mut model = build_from_config::<T>(cfg)?;
    let param_count = model.count_params();

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let final_path = cfg.out_dir.join("final.ckpt");
    let best_path = cfg.out_dir.join("best.ckpt");
    let last_path = cfg.out_dir.join("last.ckpt");

    let mut csv = format!("# params={param_count}\n{METRICS_HEADER}\n");
    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut opt_state = OptState::<T>::new();
    let mut steps_done = 0u64;
    let mut best_acc = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg.epochs, cfg.opt.base_lr);
        let plan = BatchPlan {
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            epoch: (epoch - 1) as u64,
        };
        let mut aug_rng = cfg.augment.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0x100 + epoch as u64);
            rng
        });

        let mut loss_sum = 0.0f64;
        let mut batches_done = 0usize;
        let mut correct = 0usize;
        for indices in batch_indices(train_ds.len(), &plan) {
            let (batch, labels) = gather_batch::<T>(&train_ds, &indices, aug_rng.as_mut());
            let (logits, trace) = model.forward_traced(&batch, Mode::Train)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                let diag = format!(
                    "non-finite loss at epoch {epoch} step {steps_done}; last good checkpoint: {}",
                    if epoch > 1 { last_path.display().to_string() } else { "none".to_string() }
                );
                fs::write(cfg.out_dir.join("DIAGNOSTIC.txt"), &diag)?;
                return Err(RirError::Numeric(diag));
            }
            correct += count_correct(&logits, &labels);
            let grads: Gradients<T> = model.backward(&trace, &grad_logits)?;
            if let Err(e) = step(&mut model, &grads, &mut opt_state, &cfg.opt, lr) {
                let diag = format!(
                    "{e} (epoch {epoch}, step {steps_done}); last good checkpoint: {}",
                    if epoch > 1 { last_path.display().to_string() } else { "none".to_string() }
                );
                fs::write(cfg.out_dir.join("DIAGNOSTIC.txt"), &diag)?;
                return Err(RirError::Numeric(diag));
            }
            loss_sum += loss.to_f64();
            batches_done += 1;
            steps_done += 1;
        }

        let test_acc = evaluate(&mut model, &test_ds, cfg.batch_size)?;
        let row = EpochRow {
            epoch,
            step: steps_done,
            lr,
            train_loss: loss_sum / batches_done as f64,
            train_acc: correct as f64 / train_ds.len() as f64,
            test_acc,
            wall_ms: if cfg.wall_clock { started.elapsed().as_millis() as u64 } else { 0 },
        };
        csv.push_str(&row.to_csv());
        csv.push('\n');
        rows.push(row);

        let ckpt = Checkpoint::from_model(&model, config_json.clone());
        save_checkpoint(&last_path, &ckpt)?;
        if test_acc > best_acc {
            best_acc = test_acc;
            save_checkpoint(&best_path, &ckpt)?;
        }
        if epoch == cfg.epochs {
            save_checkpoint(&final_path, &ckpt)?;
        }
    }
    fs::write(&metrics_path, &csv)?;
    Ok(TrainOutcome {
        rows,
        param_count,
        metrics_path,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}

/// Rebuilds the model recorded in a checkpoint (f32) and returns its config.
pub fn load_model(path: &Path) -> Result<(Model<f32>, RunConfig)> {
    let ckpt = load_checkpoint(path)?;
    let cfg: RunConfig = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| RirError::Format(format!("checkpoint config: {e}")))?;
    let spec = spec_by_name(&cfg.arch, cfg.classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model: Model<f32> = build_network(&spec, cfg.kind, cfg.init, &mut rng)?;
    ckpt.apply_to(&mut model)?;
    Ok((model, cfg))
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// -1 marks the no-ablation baseline row.
    pub layer_index: i64,
    pub stream: String,
    pub test_acc: f64,
}

pub const ABLATION_HEADER: &str = "layer_index,stream,test_acc";

/// Accuracy with each stream zeroed at each fused layer, one at a time,
/// plus the baseline. The model is cloned per evaluation, so the original
/// is untouched throughout.
pub fn ablation_table(
    model: &Model<f32>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Vec<AblationRow>> {
    if !model.kind.is_dual_stream() {
        return Err(RirError::UnsupportedModel(format!(
            "ablation needs resnet-init or rir, got {}",
            model.kind
        )));
    }
    let mut rows = Vec::new();
    let baseline = evaluate(&mut model.clone(), ds, batch_size)?;
    rows.push(AblationRow { layer_index: -1, stream: "none".to_string(), test_acc: baseline });
    for layer in 0..model.num_fused_layers() {
        for stream in [crate::streams::Stream::Residual, crate::streams::Stream::Transient] {
            let mut ablated = model.with_ablated_layer(layer, stream)?;
            let acc = evaluate(&mut ablated, ds, batch_size)?;
            rows.push(AblationRow {
                layer_index: layer as i64,
                stream: stream.to_string(),
                test_acc: acc,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.layer_index, r.stream, r.test_acc));
    }
    out
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub status: String,
    pub final_test_acc: Option<f64>,
}

pub const SWEEP_HEADER: &str = "blocks,layers_per_block,status,final_test_acc";

/// Trains one desk-scale cell per (blocks, layers) pair with a shared seed
/// policy, so every cell sees identical data ordering. Failures are recorded
/// and the sweep continues.
pub fn sweep(base: &RunConfig, blocks: &[usize], layers: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &b in blocks {
        for &l in layers {
            let mut cfg = base.clone();
            cfg.arch = format!("desk-b{b}-l{l}");
            cfg.out_dir = base.out_dir.join(format!("cell-b{b}-l{l}"));
            let row = match train(&cfg) {
                Ok(outcome) => SweepRow {
                    blocks: b,
                    layers_per_block: l,
                    status: "ok".to_string(),
                    final_test_acc: Some(outcome.final_test_acc()),
                },
                Err(e) => SweepRow {
                    blocks: b,
                    layers_per_block: l,
                    status: format!("error: {e}").replace(',', ";").replace('\n', " "),
                    final_test_acc: None,
                },
            };
            rows.push(row);
        }
    }
    let csv = sweep_csv(&rows);
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("sweep.csv"), csv)?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let acc = r.final_test_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.blocks, r.layers_per_block, r.status, acc));
    }
    out
}
