use mdnet::checkpoint::{Checkpoint, NamedTensor, TensorData};
use mdnet::mamba::{Pool, VimConfig};
use mdnet::prior::PriorEncoderConfig;
use mdnet::synth::{write_dataset, SynthConfig};
use mdnet::train::{open_dataset, run_training, RunOutput, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};
use mdnet::Error;

fn tiny() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        image_size: 32,
        vim: VimConfig {
            patch_size: 8,
            d_model: 8,
            depth: 1,
            d_state: 4,
            expand: 2,
            pool: Pool::Mean,
        },
        prior: PriorEncoderConfig {
            stage_channels: vec![4, 4, 8, 8],
            seed: 0,
            token_grid: 2,
        },
        num_heads: 2,
        d_hidden: 8,
        ..TrainConfig::default()
    }
}

/// Trains briefly and returns the output directory and the run's pc_best.
fn trained() -> (tempfile::TempDir, f64, TrainConfig) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, &SynthConfig { n: 12, size: 32, seed: 8 }).unwrap();
    let cfg = tiny();
    let ds = open_dataset(&cfg, &data, &data.join("manifest.csv")).unwrap();
    let out = RunOutput {
        dir: Some(dir.path().join("run")),
        echo: false,
    };
    let run = run_training::<f32>(&cfg, &ds, &ds, &out).unwrap();
    (dir, run.outcome.pc_best, cfg)
}

#[test]
fn best_checkpoint_reproduces_pc_best() {
    let (dir, pc_best, cfg) = trained();
    let ckpt = Checkpoint::load(&dir.path().join("run").join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.meta.pc_best, pc_best);
    let trainer = Trainer::<f32>::from_checkpoint(&ckpt, None).unwrap();
    let data = dir.path().join("data");
    let ds = open_dataset(&cfg, &data, &data.join("manifest.csv")).unwrap();
    assert!((trainer.evaluate(&ds).unwrap().pc - pc_best).abs() < 1e-6);
    assert!(dir.path().join("run").join(LAST_CHECKPOINT).exists());
}

#[test]
fn checkpoint_holds_parameters_and_optimizer_state_only() {
    let (dir, _, cfg) = trained();
    let ckpt = Checkpoint::load(&dir.path().join("run").join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.meta.epoch, 2);
    assert_eq!(ckpt.meta.optimizer_step, 6);
    assert!(ckpt.tensors.iter().all(|t| !t.name.contains("encoder")));
    let trainer = Trainer::<f32>::new(&cfg).unwrap();
    for (name, _) in trainer.optimizer.params() {
        for prefix in ["param.", "adam.m.", "adam.v."] {
            assert!(ckpt.get(&format!("{prefix}{name}")).is_some(), "{prefix}{name}");
        }
    }
    let stored: TrainConfig = serde_json::from_value(ckpt.meta.config.clone()).unwrap();
    assert_eq!(stored, cfg);
}

#[test]
fn architecture_mismatch_is_reported() {
    let (dir, _, cfg) = trained();
    let ckpt = Checkpoint::load(&dir.path().join("run").join(BEST_CHECKPOINT)).unwrap();
    let mut other = cfg.clone();
    other.vim.d_model = 16;
    assert!(matches!(Trainer::<f32>::from_checkpoint(&ckpt, Some(&other)), Err(Error::Mismatch(_))));
    let mut wider = Trainer::<f32>::new(&other).unwrap();
    assert!(matches!(wider.restore(&ckpt), Err(Error::Mismatch(_))));

    // inference switches do not change the parameter set
    let clamped = TrainConfig {
        clamp_inference: true,
        ..cfg.clone()
    };
    assert!(Trainer::<f32>::from_checkpoint(&ckpt, Some(&clamped)).is_ok());

    // a 32-bit checkpoint cannot feed a 64-bit model
    assert!(matches!(Trainer::<f64>::from_checkpoint(&ckpt, None), Err(Error::Mismatch(_))));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (dir, _, _) = trained();
    let path = dir.path().join("run").join(BEST_CHECKPOINT);
    let mut ckpt = Checkpoint::load(&path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() / 2]), Err(Error::Corruption(_))));

    let victim = ckpt.tensors.iter().position(|t| t.name.starts_with("param.")).unwrap();
    let removed = ckpt.tensors.remove(victim);
    assert!(matches!(Trainer::<f32>::from_checkpoint(&ckpt, None), Err(Error::Corruption(_))));

    let n = removed.data.len() + 1;
    ckpt.tensors.push(NamedTensor {
        name: removed.name.clone(),
        shape: vec![n],
        data: TensorData::F32(vec![0.0; n]),
    });
    assert!(matches!(Trainer::<f32>::from_checkpoint(&ckpt, None), Err(Error::Corruption(_))));
}
