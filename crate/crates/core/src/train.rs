//! Training and evaluation protocol, checkpoint snapshots, and the stream
//! ablation harness.
//!
//! Epoch `e` (1-based) trains with `lr(e - 1)`; the scheduler then steps and
//! the model is evaluated. A checkpoint is taken only when the evaluated PC
//! strictly exceeds the best so far, which starts at -1.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, NamedTensor};
use crate::data::{Dataset, PreprocessConfig, IMAGENET_MEAN, IMAGENET_STD};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::mamba::VimConfig;
use crate::metrics::{evaluate_predictions, EvalResult};
use crate::model::{MdNet, ModelConfig};
use crate::optim::{smooth_l1, AdamW, AdamWConfig, CosineSchedule, SmoothL1Config};
use crate::prior::PriorEncoderConfig;
use crate::tensor::Real;

pub const PC_BEST_INIT: f64 = -1.0;
pub const REPORT_HEADER: &str = "epoch,loss,pc,mae,rmse,lr,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Smooth L1 transition point.
    pub beta: f64,
    pub image_size: usize,
    pub flip_probability: f64,
    pub shuffle: bool,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub vim: VimConfig,
    pub prior: PriorEncoderConfig,
    pub num_heads: usize,
    pub d_hidden: usize,
    pub head_init_bias: f64,
    pub clamp_inference: bool,
    /// Directory of `<image stem>.fpyr` files replacing the surrogate encoder.
    pub features_dir: Option<PathBuf>,
    /// Asks the driver for a single worker thread. Kernels split work without
    /// changing summation order, so results never depend on thread count.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 1e-5,
            eta_min: 0.0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta: 1.0,
            image_size: 224,
            flip_probability: 0.5,
            shuffle: true,
            seed: 0,
            fusion_mode: model.fusion_mode,
            vim: model.vim,
            prior: model.prior,
            num_heads: model.num_heads,
            d_hidden: model.d_hidden,
            head_init_bias: model.head_init_bias,
            clamp_inference: model.clamp_inference,
            features_dir: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_height: self.image_size,
            image_width: self.image_size,
            fusion_mode: self.fusion_mode,
            vim: self.vim.clone(),
            prior: self.prior.clone(),
            num_heads: self.num_heads,
            d_hidden: self.d_hidden,
            head_init_bias: self.head_init_bias,
            clamp_inference: self.clamp_inference,
            seed: self.seed,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_size: self.image_size,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            flip_probability: self.flip_probability,
        }
    }

    pub fn adamw_config(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<CosineSchedule> {
        CosineSchedule::new(self.lr, self.eta_min, self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0 and beta > 0".into()));
        }
        self.preprocess_config().validate()?;
        self.model_config().validate()?;
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub pc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.loss, self.pc, self.mae, self.rmse, self.lr, self.seconds
        )
    }

    pub fn log_line(&self, total: usize) -> String {
        format!(
            "epoch {}/{total} loss={:.6} PC={:.4} MAE={:.4} RMSE={:.4} lr={:.3e} ({:.1}s)",
            self.epoch, self.loss, self.pc, self.mae, self.rmse, self.lr, self.seconds
        )
    }
}

/// What the epoch loop needs from a concrete trainer.
pub trait TrainingProtocol {
    /// One pass over the training data; returns the mean loss.
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64>;
    fn evaluate(&mut self) -> Result<EvalResult>;
    fn snapshot(&self, epoch: usize, pc_best: f64) -> Result<Checkpoint>;
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub reports: Vec<EpochReport>,
    /// Snapshot of the best epoch; absent only if no epoch beat -1.
    pub best: Option<Checkpoint>,
    pub best_epoch: Option<usize>,
    pub pc_best: f64,
    /// Epochs at which a checkpoint was taken, in order.
    pub checkpoint_epochs: Vec<usize>,
    pub last: EvalResult,
}

impl ProtocolOutcome {
    pub fn best_result(&self) -> Option<&EpochReport> {
        self.best_epoch.map(|e| &self.reports[e - 1])
    }
}

/// The epoch loop. `on_epoch` sees each report; `on_checkpoint` each new best.
pub fn run_protocol<P: TrainingProtocol>(
    protocol: &mut P,
    schedule: &CosineSchedule,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<ProtocolOutcome> {
    let epochs = schedule.total_epochs;
    let mut pc_best = PC_BEST_INIT;
    let mut best = None;
    let mut best_epoch = None;
    let mut checkpoint_epochs = Vec::new();
    let mut reports = Vec::with_capacity(epochs);
    let mut last = None;
    for epoch in 1..=epochs {
        let start = Instant::now();
        let lr = schedule.lr(epoch - 1)?;
        let loss = protocol.train_epoch(epoch, lr)?;
        let result = protocol.evaluate()?;
        let report = EpochReport {
            epoch,
            loss,
            pc: result.pc,
            mae: result.mae,
            rmse: result.rmse,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&report)?;
        reports.push(report);
        if result.pc > pc_best {
            pc_best = result.pc;
            let ckpt = protocol.snapshot(epoch, pc_best)?;
            on_checkpoint(&ckpt)?;
            best = Some(ckpt);
            best_epoch = Some(epoch);
            checkpoint_epochs.push(epoch);
        }
        last = Some(result);
    }
    Ok(ProtocolOutcome {
        reports,
        best,
        best_epoch,
        pc_best,
        checkpoint_epochs,
        last: last.expect("schedule has at least one epoch"),
    })
}

/// Model plus optimizer state.
pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub model: MdNet<T>,
    pub optimizer: AdamW<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MdNet::new(&cfg.model_config())?;
        let optimizer = AdamW::new(model.trainable_parameters(), cfg.adamw_config())?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            optimizer,
        })
    }

    /// One optimizer step per batch; returns the sample-weighted mean loss.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize, lr: f64) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let loss_cfg = SmoothL1Config { beta: self.cfg.beta };
        let (mut total, mut count) = (0.0, 0usize);
        for batch in data.batches::<T>(self.cfg.batch_size, self.cfg.shuffle, true, self.cfg.seed, epoch)? {
            let batch = batch?;
            self.optimizer.zero_grad();
            let y_hat = self.model.forward(&batch.images, batch.pyramids.as_deref())?;
            let loss = smooth_l1(&batch.scores, &y_hat, loss_cfg)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss in epoch {epoch} (records {:?})",
                    batch.indices
                )));
            }
            loss.backward()?;
            self.optimizer.step(lr)?;
            total += value * batch.indices.len() as f64;
            count += batch.indices.len();
        }
        Ok(total / count as f64)
    }

    /// Predictions in manifest order, computed without a graph.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Contract("evaluation set is empty".into()));
        }
        let mut out = Vec::with_capacity(data.len());
        for batch in data.batches::<T>(self.cfg.batch_size, false, false, self.cfg.seed, 0)? {
            let batch = batch?;
            out.extend(self.model.predict(&batch.images, batch.pyramids.as_deref())?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalResult> {
        let predictions = self.predict(data)?;
        evaluate_predictions(&data.scores(), &predictions)
    }

    pub fn snapshot(&self, epoch: usize, pc_best: f64) -> Result<Checkpoint> {
        let config = serde_json::to_value(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut tensors: Vec<NamedTensor> = self
            .model
            .named_parameters()
            .iter()
            .map(|(name, t)| NamedTensor::from_tensor(format!("param.{name}"), t))
            .collect();
        for (i, (name, t)) in self.optimizer.params().iter().enumerate() {
            let (m, v) = self.optimizer.moments(i);
            tensors.push(NamedTensor::from_values(format!("adam.m.{name}"), t.shape(), m));
            tensors.push(NamedTensor::from_values(format!("adam.v.{name}"), t.shape(), v));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                config,
                epoch,
                pc_best,
                optimizer_step: self.optimizer.step_count(),
            },
            tensors,
        })
    }

    /// Rebuilds a trainer from a checkpoint. With `runtime` given, its model
    /// architecture must agree with the stored one.
    pub fn from_checkpoint(ckpt: &Checkpoint, runtime: Option<&TrainConfig>) -> Result<Self> {
        let stored = stored_config(ckpt)?;
        if let Some(rt) = runtime {
            check_compatible(&stored.model_config(), &rt.model_config())?;
        }
        let mut trainer = Trainer::new(&stored)?;
        trainer.restore(ckpt)?;
        Ok(trainer)
    }

    /// Loads parameters and optimizer state in place.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        check_compatible(&stored_config(ckpt)?.model_config(), &self.cfg.model_config())?;
        let mut values = Vec::new();
        for (name, t) in self.model.named_parameters() {
            values.push((t.clone(), load_tensor::<T>(ckpt, &format!("param.{name}"), t.shape())?));
        }
        let mut moments = Vec::new();
        for (name, t) in self.optimizer.params() {
            let m = load_tensor::<T>(ckpt, &format!("adam.m.{name}"), t.shape())?;
            let v = load_tensor::<T>(ckpt, &format!("adam.v.{name}"), t.shape())?;
            moments.push((m, v));
        }
        self.optimizer.restore(ckpt.meta.optimizer_step, moments)?;
        for (t, v) in values {
            t.set_data(v)?;
        }
        Ok(())
    }
}

fn stored_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| Error::Corruption(format!("checkpoint config does not parse: {e}")))
}

fn check_compatible(stored: &ModelConfig, runtime: &ModelConfig) -> Result<()> {
    let mut a = stored.clone();
    let mut b = runtime.clone();
    // inference-only switches do not change the parameter set
    a.clamp_inference = false;
    b.clamp_inference = false;
    if a != b {
        return Err(Error::Mismatch(format!(
            "checkpoint model (mode {}, d_model {}, depth {}, image {}x{}) differs from runtime (mode {}, d_model {}, depth {}, image {}x{})",
            a.fusion_mode.name(),
            a.vim.d_model,
            a.vim.depth,
            a.image_height,
            a.image_width,
            b.fusion_mode.name(),
            b.vim.d_model,
            b.vim.depth,
            b.image_height,
            b.image_width
        )));
    }
    Ok(())
}

fn load_tensor<T: Real>(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<Vec<T>> {
    let t = ckpt
        .get(name)
        .ok_or_else(|| Error::Corruption(format!("checkpoint lacks tensor '{name}'")))?;
    if t.shape != shape {
        return Err(Error::Corruption(format!(
            "tensor '{name}' has shape {:?}, config implies {shape:?}",
            t.shape
        )));
    }
    t.data.to_real()
}

struct DataProtocol<'a, T: Real> {
    trainer: &'a mut Trainer<T>,
    train: &'a Dataset,
    test: &'a Dataset,
}

impl<T: Real> TrainingProtocol for DataProtocol<'_, T> {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64> {
        self.trainer.train_epoch(self.train, epoch, lr)
    }

    fn evaluate(&mut self) -> Result<EvalResult> {
        self.trainer.evaluate(self.test)
    }

    fn snapshot(&self, epoch: usize, pc_best: f64) -> Result<Checkpoint> {
        self.trainer.snapshot(epoch, pc_best)
    }
}

pub struct TrainingRun<T: Real> {
    /// Holds the best epoch's parameters on return.
    pub trainer: Trainer<T>,
    pub outcome: ProtocolOutcome,
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub echo: bool,
}

pub const BEST_CHECKPOINT: &str = "best.mdck";
pub const LAST_CHECKPOINT: &str = "last.mdck";
pub const REPORT_FILE: &str = "report.csv";

/// Opens a dataset with the run's preprocessing and optional features.
pub fn open_dataset(cfg: &TrainConfig, root: &Path, manifest: &Path) -> Result<Dataset> {
    Dataset::open(root, manifest, cfg.preprocess_config())?
        .with_features_dir(cfg.features_dir.clone())
        .preload()
}

/// Full training loop over two datasets.
pub fn run_training<T: Real>(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    output: &RunOutput,
) -> Result<TrainingRun<T>> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let schedule = cfg.schedule()?;
    let mut report_file = match &output.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(REPORT_FILE);
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{REPORT_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let outcome = {
        let mut protocol = DataProtocol {
            trainer: &mut trainer,
            train,
            test,
        };
        run_protocol(
            &mut protocol,
            &schedule,
            |r| {
                if output.echo {
                    eprintln!("{}", r.log_line(cfg.epochs));
                }
                if let Some((f, path)) = report_file.as_mut() {
                    writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(&*path, e))?;
                }
                Ok(())
            },
            |ckpt| match &output.dir {
                Some(dir) => ckpt.save(&dir.join(BEST_CHECKPOINT)),
                None => Ok(()),
            },
        )?
    };
    if let Some(dir) = &output.dir {
        let last_epoch = outcome.reports.len();
        trainer
            .snapshot(last_epoch, outcome.pc_best)?
            .save(&dir.join(LAST_CHECKPOINT))?;
    }
    if let Some(best) = &outcome.best {
        trainer.restore(best)?;
    }
    Ok(TrainingRun { trainer, outcome })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: char,
    pub configuration: String,
    pub mode: FusionMode,
    pub pc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub params: usize,
}

pub fn ablation_rows() -> [(char, &'static str, FusionMode); 4] {
    [
        ('A', "Full MD-Net Model", FusionMode::CrossAttention),
        ('B', "w/o Mamba Stream (prior encoder only)", FusionMode::PriorOnly),
        ('C', "w/o Prior Stream (Mamba only)", FusionMode::MambaOnly),
        ('D', "w/ Concatenation Fusion (instead of Cross-Attention)", FusionMode::Concat),
    ]
}

/// Trains each configuration with everything but the fusion mode shared and
/// reports best-epoch test metrics.
pub fn run_ablation<T: Real>(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for (label, configuration, mode) in ablation_rows() {
        let row_cfg = TrainConfig {
            fusion_mode: mode,
            ..cfg.clone()
        };
        let run = run_training::<T>(&row_cfg, train, test, &RunOutput::default())?;
        let best = run
            .outcome
            .best_result()
            .cloned()
            .ok_or_else(|| Error::Numeric(format!("configuration {label} never produced a valid PC")))?;
        let row = AblationRow {
            label,
            configuration: configuration.to_string(),
            mode,
            pc: best.pc,
            mae: best.mae,
            rmse: best.rmse,
            params: run.trainer.model.trainable_count(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,configuration,pc,mae,rmse,params\n");
    for r in rows {
        out.push_str(&format!(
            "{},\"{}\",{:.4},{:.4},{:.4},{}\n",
            r.label, r.configuration, r.pc, r.mae, r.rmse, r.params
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted {
        pcs: Vec<f64>,
        next: usize,
        weight: f64,
        lrs: Vec<f64>,
    }

    impl TrainingProtocol for Scripted {
        fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64> {
            self.weight = epoch as f64;
            self.lrs.push(lr);
            Ok(0.0)
        }

        fn evaluate(&mut self) -> Result<EvalResult> {
            let pc = self.pcs[self.next];
            self.next += 1;
            Ok(EvalResult { pc, mae: 0.0, rmse: 0.0, n: 2 })
        }

        fn snapshot(&self, epoch: usize, pc_best: f64) -> Result<Checkpoint> {
            Ok(Checkpoint {
                meta: CheckpointMeta {
                    config: serde_json::Value::Null,
                    epoch,
                    pc_best,
                    optimizer_step: 0,
                },
                tensors: vec![NamedTensor::from_values("w", &[1], &[self.weight])],
            })
        }
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.image_size), (15, 16, 224));
        assert_eq!((c.lr, c.weight_decay, c.beta), (1e-5, 0.01, 1.0));
        assert_eq!(c.flip_probability, 0.5);
        assert_eq!(c.fusion_mode, FusionMode::CrossAttention);
        c.validate().unwrap();
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!((c.epochs, c.batch_size), (3, 16));
    }

    #[test]
    fn strict_improvement_checkpoints() {
        let mut p = Scripted {
            pcs: vec![0.1, 0.3, 0.3, 0.2],
            next: 0,
            weight: 0.0,
            lrs: vec![],
        };
        let sched = CosineSchedule::new(1e-5, 0.0, 4).unwrap();
        let out = run_protocol(&mut p, &sched, |_| Ok(()), |_| Ok(())).unwrap();
        assert_eq!(out.checkpoint_epochs, vec![1, 2]);
        assert_eq!(out.best_epoch, Some(2));
        assert_eq!(out.best.unwrap().get("w").unwrap().data.to_real::<f64>().unwrap(), vec![2.0]);
        assert_eq!(p.lrs[0], 1e-5);
        assert_eq!(out.last.pc, 0.2);
    }

    #[test]
    fn minus_one_never_checkpoints() {
        let mut p = Scripted {
            pcs: vec![-1.0],
            next: 0,
            weight: 0.0,
            lrs: vec![],
        };
        let sched = CosineSchedule::new(1e-5, 0.0, 1).unwrap();
        let out = run_protocol(&mut p, &sched, |_| Ok(()), |_| Ok(())).unwrap();
        assert!(out.best.is_none());
        assert_eq!(out.pc_best, PC_BEST_INIT);
    }

    #[test]
    fn report_formats() {
        let r = EpochReport {
            epoch: 1,
            loss: 0.5,
            pc: 0.25,
            mae: 0.1,
            rmse: 0.2,
            lr: 1e-5,
            seconds: 1.23456,
        };
        assert_eq!(r.csv_row(), "1,0.5,0.25,0.1,0.2,0.00001,1.235");
        assert!(r.log_line(15).starts_with("epoch 1/15 loss=0.500000 PC=0.2500"));
    }
}
