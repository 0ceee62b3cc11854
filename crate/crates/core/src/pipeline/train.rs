use crate::error::{domain_err, Result};
use crate::fidelity::FidelityRecord;
use crate::model::{Mode, ModelConfig, SsaaFormer};
use crate::rng::SplitMix64;
use crate::tensor::{AdamW, Graph, Tensor};

use super::data::{load_inputs, require_mapped, FeatureSet};
use super::image_io::stack;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine_schedule: bool,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 15, batch_size: 16, lr: 1.2e-3, weight_decay: 0.05, cosine_schedule: true, seed: 42 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SsaaFormer<f32>,
    /// Mean training loss of each epoch.
    pub loss_log: Vec<f64>,
}

/// Fit the backbone head score to the fidelity targets with MSE.
pub fn train_backbone(records: &[FidelityRecord], model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    require_mapped(records)?;
    let inputs = load_inputs(records, model_config.input_size)?;
    let targets: Vec<f32> = records.iter().map(|r| r.fidelity_target as f32).collect();
    let model = SsaaFormer::<f32>::new(model_config.clone())?;
    train_on_tensors(model, &inputs, &targets, config)
}

/// Training loop over preloaded, normalized inputs.
pub fn train_on_tensors(
    mut model: SsaaFormer<f32>,
    inputs: &[Tensor<f32>],
    targets: &[f32],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(domain_err!("need matching non-empty inputs and targets"));
    }
    if config.batch_size == 0 {
        return Err(domain_err!("batch_size must be at least 1"));
    }
    if !(config.lr >= 0.0) || !(config.weight_decay >= 0.0) {
        return Err(domain_err!("lr and weight_decay must be non-negative"));
    }
    let n = inputs.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut opt = AdamW::new(model.params(), config.lr, config.weight_decay);
    let mut loss_log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(config.seed).fork(epoch as u64).shuffle(&mut order);
        let mut total = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            if config.cosine_schedule {
                let t = step as f64 / total_steps as f64;
                opt.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            }
            let x = stack(&batch.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?;
            let y = Tensor::new(&[batch.len()], batch.iter().map(|&i| targets[i]).collect())?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let yv = g.constant(y);
            let (out, vars) = model.forward(&mut g, xv, Mode::Train)?;
            let loss = g.mse(out.score, yv)?;
            g.backward(loss)?;
            total += g.data(loss)[0] as f64 * batch.len() as f64;
            model.zero_grads();
            model.accumulate_grads(&g, &vars)?;
            model.set_running_stats(out.running)?;
            opt.step(model.params_mut())?;
            step += 1;
        }
        loss_log.push(total / n as f64);
    }
    model.zero_grads();
    Ok(TrainOutcome { model, loss_log })
}

/// Embeddings for every input in row order, computed in eval mode.
pub fn embed_tensors(model: &SsaaFormer<f32>, inputs: &[Tensor<f32>], batch_size: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut feats = Vec::with_capacity(inputs.len());
    let mut scores = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let (emb, sc) = model.infer(stack(&chunk.iter().collect::<Vec<_>>())?)?;
        let d = emb.shape()[1];
        feats.extend(emb.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<f64>>()));
        scores.extend(sc.iter().map(|&v| v as f64));
    }
    Ok((feats, scores))
}

/// One embedding row per record, in record order.
pub fn extract_features(model: &SsaaFormer<f32>, records: &[FidelityRecord]) -> Result<FeatureSet> {
    let inputs = load_inputs(records, model.config().input_size)?;
    let (features, _) = embed_tensors(model, &inputs, 32)?;
    Ok(FeatureSet {
        paths: records.iter().map(|r| r.image_path.clone()).collect(),
        targets: records.iter().map(|r| r.fidelity_target).collect(),
        features,
    })
}
