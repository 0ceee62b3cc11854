//! Finite-difference checks of every differentiable operation and of the
//! tiny backbone, in double precision.

use crate::error::Result;
use crate::model::{ssaa, AttentionVars, Mode, ModelConfig, SsaaFormer};
use crate::rng::SplitMix64;
use crate::tensor::{grad_check, Conv2dSpec, Graph, RunningStats, Tensor, Var};

pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn uniform(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("positive shape")
}

/// Contract `y` with fixed random weights so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut SplitMix64::new(seed), g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("conv2d", vec![vec![2, 3, 5, 4], vec![4, 3, 3, 2], vec![4]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(2, 1, 1))?;
            project(g, y, 2)
        }),
        ("conv2d_depthwise", vec![vec![1, 3, 6, 6], vec![3, 1, 5, 5], vec![3]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(1, 2, 3))?;
            project(g, y, 3)
        }),
        ("conv2d_pointwise", vec![vec![2, 4, 3, 3], vec![5, 4, 1, 1], vec![5]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::default())?;
            project(g, y, 4)
        }),
        ("hflip", vec![vec![2, 1, 3, 5]], |g, v| {
            let y = g.hflip(v[0])?;
            project(g, y, 5)
        }),
        ("ssaa", vec![vec![2, 2, 3, 4], vec![1], vec![1]], |g, v| {
            let y = ssaa(g, v[0], v[1], v[2])?;
            project(g, y, 6)
        }),
        ("matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 7)
        }),
        ("softmax", vec![vec![2, 3, 4]], |g, v| {
            let y = g.softmax(v[0], 2)?;
            project(g, y, 8)
        }),
        ("attention", vec![vec![2, 3, 4], vec![4, 4], vec![4], vec![4, 4], vec![4], vec![4, 4], vec![4], vec![4, 4], vec![4]], |g, v| {
            let av = AttentionVars {
                q_w: v[1],
                q_b: v[2],
                k_w: v[3],
                k_b: v[4],
                v_w: v[5],
                v_b: v[6],
                proj_w: v[7],
                proj_b: v[8],
            };
            let y = av.forward(g, v[0], 2)?;
            project(g, y, 9)
        }),
        ("batchnorm_train", vec![vec![2, 3, 2, 2], vec![3], vec![3]], |g, v| {
            let y = g.batchnorm2d(v[0], v[1], v[2], &mut RunningStats::new(3), true, 1e-5, 0.1)?;
            project(g, y, 10)
        }),
        ("batchnorm_eval", vec![vec![2, 2, 2, 3], vec![2], vec![2]], |g, v| {
            let mut s = RunningStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7] };
            let y = g.batchnorm2d(v[0], v[1], v[2], &mut s, false, 1e-5, 0.1)?;
            project(g, y, 11)
        }),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
            project(g, y, 12)
        }),
        ("gelu", vec![vec![2, 5]], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, 13)
        }),
        ("global_avg_pool", vec![vec![2, 3, 3, 2]], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, 14)
        }),
        ("elementwise", vec![vec![2, 3], vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[2])?;
            let c = g.mul(b, v[0])?;
            project(g, c, 15)
        }),
        ("scale", vec![vec![2, 4], vec![1]], |g, v| {
            let y = g.scale(v[0], v[1])?;
            project(g, y, 16)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, 17)
        }),
        ("permute_reshape", vec![vec![2, 3, 4]], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.reshape(y, &[4, 6])?;
            project(g, y, 18)
        }),
        ("mse", vec![vec![5], vec![5]], |g, v| g.mse(v[0], v[1])),
    ]
}

/// Check each differentiable op on random inputs drawn from `seed`.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = SplitMix64::new(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, build)| {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(&mut rng, s)).collect();
            Ok(GradCheckResult {
                name: name.to_string(),
                max_rel_error: grad_check(build, &inputs, GRAD_CHECK_STEP)?,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

/// End-to-end check of the tiny backbone with an MSE loss in train mode.
/// Parameters are perturbed away from the init so no gradient is trivially zero.
pub fn tiny_model_gradient(seed: u64) -> Result<GradCheckResult> {
    let mut rng = SplitMix64::new(seed);
    let mut model = SsaaFormer::<f64>::new(ModelConfig { seed, ..ModelConfig::tiny() })?;
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.3, 0.3));
    }
    let side = model.config().input_size;
    let images = uniform(&mut rng, &[2, model.config().in_channels, side, side]);
    let targets = Tensor::new(&[2], vec![rng.next_f64(), rng.next_f64()])?;
    let mut inputs = vec![images];
    inputs.extend(model.params().iter().cloned());
    let err = grad_check(
        |g, v| {
            let out = model.forward_bound(g, &v[1..], v[0], Mode::Train)?;
            let t = g.constant(targets.clone());
            g.mse(out.score, t)
        },
        &inputs,
        GRAD_CHECK_STEP,
    )?;
    Ok(GradCheckResult { name: "tiny_model".into(), max_rel_error: err, tolerance: MODEL_TOLERANCE })
}

pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut all = op_gradient_suite(seed)?;
    all.push(tiny_model_gradient(seed)?);
    Ok(all)
}
