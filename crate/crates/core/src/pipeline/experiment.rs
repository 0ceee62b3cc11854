use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fidelity::{assign_targets, QualityStats};
use crate::model::{save_model, write_model, ModelConfig};
use crate::svr::{save_svr, svr_fit, svr_to_bytes, SvrConfig};

use super::data::{ingest_manifest, load_inputs};
use super::eval::{clamped_scores, EvalReport};
use super::synth::{gen_synthetic, SynthConfig};
use super::train::{embed_tensors, train_on_tensors, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub svr: SvrConfig,
}

impl ExperimentConfig {
    /// Balanced synthetic split with every stage seeded from `seed`.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_train: 400,
            n_test: 100,
            synth: SynthConfig { seed, ..SynthConfig::default() },
            model: ModelConfig { seed, ..ModelConfig::desk() },
            train: TrainConfig { seed, ..TrainConfig::default() },
            svr: SvrConfig { seed, ..SvrConfig::default() },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub loss_log: Vec<f64>,
    pub stats: QualityStats,
    pub model_bytes: Vec<u8>,
    pub svr_bytes: Vec<u8>,
    pub model_path: PathBuf,
    pub svr_path: PathBuf,
}

/// Generate data, train the backbone, fit the regressor and evaluate on the held-out split.
pub fn run_experiment(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<ExperimentOutcome> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let split = |n: usize, stream: u64| SynthConfig {
        n_real: n / 2,
        n_fake: n - n / 2,
        seed: config.synth.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..config.synth.clone()
    };
    let train_manifest = gen_synthetic(&split(config.n_train, 1), out_dir.join("train"))?;
    let test_manifest = gen_synthetic(&split(config.n_test, 2), out_dir.join("test"))?;
    let mut train = ingest_manifest(&train_manifest)?;
    let mut test = ingest_manifest(&test_manifest)?;
    let stats = QualityStats::fit(&train)?;
    assign_targets(&mut train, &stats)?;
    assign_targets(&mut test, &stats)?;

    let size = config.model.input_size;
    let train_x = load_inputs(&train, size)?;
    let test_x = load_inputs(&test, size)?;
    let targets: Vec<f32> = train.iter().map(|r| r.fidelity_target as f32).collect();
    let model = crate::model::SsaaFormer::<f32>::new(config.model.clone())?;
    let trained = train_on_tensors(model, &train_x, &targets, &config.train)?;

    let (train_f, _) = embed_tensors(&trained.model, &train_x, 32)?;
    let (test_f, _) = embed_tensors(&trained.model, &test_x, 32)?;
    let train_t: Vec<f64> = train.iter().map(|r| r.fidelity_target).collect();
    let svr = svr_fit(&train_f, &train_t, &config.svr)?;
    let report = EvalReport::from_scores(&clamped_scores(&svr, &test_f)?, &test)?;

    let model_path = out_dir.join("backbone.ssaf");
    let svr_path = out_dir.join("regressor.svrm");
    save_model(&trained.model, &model_path)?;
    save_svr(&svr, &svr_path)?;
    let report_path = out_dir.join("report.txt");
    std::fs::write(&report_path, report.to_key_values()).map_err(|e| Error::io(&report_path, e))?;
    Ok(ExperimentOutcome {
        model_bytes: write_model(&trained.model),
        svr_bytes: svr_to_bytes(&svr),
        report,
        loss_log: trained.loss_log,
        stats,
        model_path,
        svr_path,
    })
}
