use super::blocks::{from_tokens, linear, ssaa, to_tokens, AttentionVars};
use super::config::ModelConfig;
use crate::error::{config_err, dim_err, Result};
use crate::rng::SplitMix64;
use crate::tensor::{
    Conv2dSpec, Element, Graph, RunningStats, Tensor, Var, BATCHNORM_EPS, BATCHNORM_MOMENTUM,
    LAYERNORM_EPS,
};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct LnIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
enum NormIdx {
    Batch(BnIdx),
    Layer(LnIdx),
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Downsample {
    conv: Affine,
    stride: usize,
    norm: NormIdx,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    dpe: Affine,
    norm1: BnIdx,
    pw1: Affine,
    dw: Affine,
    ssaa: Option<(usize, usize)>,
    pw2: Affine,
    norm2: BnIdx,
    fc1: Affine,
    fc2: Affine,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    dpe: Affine,
    norm1: LnIdx,
    q: Affine,
    k: Affine,
    v: Affine,
    proj: Affine,
    norm2: LnIdx,
    fc1: Affine,
    fc2: Affine,
}

#[derive(Debug, Clone)]
struct Layout {
    downs: [Downsample; 4],
    conv_stages: [Vec<ConvBlock>; 2],
    attn_stages: [Vec<AttnBlock>; 2],
    head: Affine,
}

/// Vars produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[N, c4]` pooled stage-4 features.
    pub embedding: Var,
    /// `[N]` unbounded head output.
    pub score: Var,
    /// Output of every block, in network order.
    pub block_outputs: Vec<Var>,
    pub stage_outputs: [Var; 4],
    /// Batch-norm running statistics after this pass (changed only in train mode).
    pub running: Vec<RunningStats<T>>,
}

/// All learnable tensors and batch-norm buffers of the backbone.
#[derive(Debug, Clone)]
pub struct SsaaFormer<T: Element = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running_names: Vec<String>,
    running: Vec<RunningStats<T>>,
    layout: Layout,
}

struct Builder<T: Element> {
    rng: SplitMix64,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running_names: Vec<String>,
    running: Vec<RunningStats<T>>,
}

impl<T: Element> Builder<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t.tracked());
        self.params.len() - 1
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.trunc_normal(INIT_STD))).collect();
        let t = Tensor::new(shape, data).expect("positive shape");
        self.push(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.push(name, Tensor::full(shape, T::of(v)))
    }

    fn affine(&mut self, name: &str, wshape: &[usize], out: usize) -> Affine {
        Affine {
            w: self.weight(format!("{name}.weight"), wshape),
            b: self.fill(format!("{name}.bias"), &[out], 0.0),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIdx {
        let gamma = self.fill(format!("{name}.gamma"), &[c], 1.0);
        let beta = self.fill(format!("{name}.beta"), &[c], 0.0);
        self.running_names.push(name.to_string());
        self.running.push(RunningStats::new(c));
        BnIdx {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }

    fn ln(&mut self, name: &str, c: usize) -> LnIdx {
        LnIdx {
            gamma: self.fill(format!("{name}.gamma"), &[c], 1.0),
            beta: self.fill(format!("{name}.beta"), &[c], 0.0),
        }
    }

    fn conv_block(&mut self, name: &str, c: usize, cfg: &ModelConfig, with_ssaa: bool) -> ConvBlock {
        let (kd, kp, e) = (cfg.dw_kernel, cfg.dpe_kernel, cfg.ffn_expansion);
        ConvBlock {
            dpe: self.affine(&format!("{name}.dpe"), &[c, 1, kp, kp], c),
            norm1: self.bn(&format!("{name}.norm1"), c),
            pw1: self.affine(&format!("{name}.pw1"), &[c, c, 1, 1], c),
            dw: self.affine(&format!("{name}.dw"), &[c, 1, kd, kd], c),
            ssaa: with_ssaa.then(|| {
                (
                    self.fill(format!("{name}.ssaa.w1"), &[1], 1.0),
                    self.fill(format!("{name}.ssaa.w2"), &[1], 0.0),
                )
            }),
            pw2: self.affine(&format!("{name}.pw2"), &[c, c, 1, 1], c),
            norm2: self.bn(&format!("{name}.norm2"), c),
            fc1: self.affine(&format!("{name}.fc1"), &[c * e, c, 1, 1], c * e),
            fc2: self.affine(&format!("{name}.fc2"), &[c, c * e, 1, 1], c),
        }
    }

    fn attn_block(&mut self, name: &str, c: usize, cfg: &ModelConfig) -> AttnBlock {
        let (kp, e) = (cfg.dpe_kernel, cfg.ffn_expansion);
        AttnBlock {
            dpe: self.affine(&format!("{name}.dpe"), &[c, 1, kp, kp], c),
            norm1: self.ln(&format!("{name}.norm1"), c),
            q: self.affine(&format!("{name}.attn.q"), &[c, c], c),
            k: self.affine(&format!("{name}.attn.k"), &[c, c], c),
            v: self.affine(&format!("{name}.attn.v"), &[c, c], c),
            proj: self.affine(&format!("{name}.attn.proj"), &[c, c], c),
            norm2: self.ln(&format!("{name}.norm2"), c),
            fc1: self.affine(&format!("{name}.fc1"), &[c, c * e], c * e),
            fc2: self.affine(&format!("{name}.fc2"), &[c * e, c], c),
        }
    }

    fn downsample(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize, batch_norm: bool) -> Downsample {
        let conv = self.affine(&format!("{name}.conv"), &[c_out, c_in, stride, stride], c_out);
        let norm_name = format!("{name}.norm");
        let norm = if batch_norm {
            NormIdx::Batch(self.bn(&norm_name, c_out))
        } else {
            NormIdx::Layer(self.ln(&norm_name, c_out))
        };
        Downsample { conv, stride, norm }
    }
}

impl<T: Element> SsaaFormer<T> {
    /// Fresh model: conv and linear weights from a truncated normal
    /// (std 0.02), zero biases, unit norm gains, mirror weights (1, 0).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: SplitMix64::new(config.seed),
            names: Vec::new(),
            params: Vec::new(),
            running_names: Vec::new(),
            running: Vec::new(),
        };
        let ch = config.stage_channels;
        let depths = config.stage_depths;
        let stem = b.downsample("stem", config.in_channels, ch[0], 4, true);
        let stage1 = (0..depths[0])
            .map(|i| b.conv_block(&format!("stage1.{i}"), ch[0], &config, i < config.ssaa_blocks))
            .collect();
        let down2 = b.downsample("down2", ch[0], ch[1], 2, true);
        let stage2 = (0..depths[1])
            .map(|i| b.conv_block(&format!("stage2.{i}"), ch[1], &config, false))
            .collect();
        let down3 = b.downsample("down3", ch[1], ch[2], 2, false);
        let stage3 = (0..depths[2])
            .map(|i| b.attn_block(&format!("stage3.{i}"), ch[2], &config))
            .collect();
        let down4 = b.downsample("down4", ch[2], ch[3], 2, false);
        let stage4 = (0..depths[3])
            .map(|i| b.attn_block(&format!("stage4.{i}"), ch[3], &config))
            .collect();
        let head = b.affine("head", &[ch[3], 1], 1);
        let layout = Layout {
            downs: [stem, down2, down3, down4],
            conv_stages: [stage1, stage2],
            attn_stages: [stage3, stage4],
            head,
        };
        Ok(Self {
            config,
            names: b.names,
            params: b.params,
            running_names: b.running_names,
            running: b.running,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn running_names(&self) -> &[String] {
        &self.running_names
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Replace the batch-norm statistics, typically with `ForwardOutput::running`.
    pub fn set_running_stats(&mut self, running: Vec<RunningStats<T>>) -> Result<()> {
        if running.len() != self.running.len()
            || running.iter().zip(&self.running).any(|(a, b)| a.mean.len() != b.mean.len())
        {
            return Err(dim_err!("running statistics do not match the model layout"));
        }
        self.running = running;
        Ok(())
    }

    /// Copy every parameter and buffer whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_weights_from<U: Element>(&mut self, other: &SsaaFormer<U>) -> usize {
        let mut copied = 0;
        for (name, p) in self.names.iter().zip(&mut self.params) {
            if let Some(src) = other.param(name) {
                if src.shape() == p.shape() {
                    *p = src.cast::<T>();
                    p.requires_grad = true;
                    copied += 1;
                }
            }
        }
        for (name, r) in self.running_names.iter().zip(&mut self.running) {
            if let Some(i) = other.running_names.iter().position(|n| n == name) {
                let src = &other.running[i];
                if src.mean.len() == r.mean.len() {
                    r.mean = src.mean.iter().map(|v| T::of(v.f64())).collect();
                    r.var = src.var.iter().map(|v| T::of(v.f64())).collect();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Element>(&self) -> SsaaFormer<U> {
        SsaaFormer {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running_names: self.running_names.clone(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| U::of(v.f64())).collect(),
                    var: r.var.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Record every parameter on `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Record every parameter on `g` as an untracked constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Add the gradients held by `g` for `vars` (from [`Self::bind`]) to each
    /// parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(dim_err!("{} vars for {} parameters", vars.len(), self.params.len()));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Binds the parameters (tracked in train mode, frozen in eval mode) and
    /// runs the network.
    pub fn forward(&self, g: &mut Graph<T>, images: Var, mode: Mode) -> Result<(ForwardOutput<T>, Vec<Var>)> {
        let vars = match mode {
            Mode::Train => self.bind(g),
            Mode::Eval => self.bind_frozen(g),
        };
        let out = self.forward_bound(g, &vars, images, mode)?;
        Ok((out, vars))
    }

    /// Run the network with parameters already recorded as `vars`.
    pub fn forward_bound(&self, g: &mut Graph<T>, vars: &[Var], images: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        if vars.len() != self.params.len() {
            return Err(dim_err!("{} vars for {} parameters", vars.len(), self.params.len()));
        }
        let s = g.shape(images).to_vec();
        let side = self.config.input_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != side || s[3] != side {
            return Err(dim_err!(
                "expected images [N, {}, {side}, {side}], got {s:?}",
                self.config.in_channels
            ));
        }
        let mut running = self.running.clone();
        let mut blocks = Vec::new();
        let mut stages = Vec::new();
        let mut x = images;
        for (stage, down) in self.layout.downs.iter().enumerate() {
            x = self.downsample(g, vars, x, down, mode, &mut running)?;
            let depth = self.config.stage_depths[stage];
            for i in 0..depth {
                x = if stage < 2 {
                    let use_ssaa = self.layout.conv_stages[stage][i].ssaa.is_some();
                    self.conv_block_forward(g, vars, x, stage, i, use_ssaa, mode, &mut running)?
                } else {
                    self.attention_block_forward(g, vars, x, stage, i)?
                };
                blocks.push(x);
            }
            stages.push(x);
        }
        let embedding = g.global_avg_pool(x)?;
        let head = self.layout.head;
        let score = linear(g, embedding, vars[head.w], vars[head.b])?;
        let n = s[0];
        let score = g.reshape(score, &[n])?;
        Ok(ForwardOutput {
            embedding,
            score,
            block_outputs: blocks,
            stage_outputs: [stages[0], stages[1], stages[2], stages[3]],
            running,
        })
    }

    fn batch_norm(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        bn: BnIdx,
        mode: Mode,
        running: &mut [RunningStats<T>],
    ) -> Result<Var> {
        g.batchnorm2d(
            x,
            vars[bn.gamma],
            vars[bn.beta],
            &mut running[bn.stats],
            mode == Mode::Train,
            BATCHNORM_EPS,
            BATCHNORM_MOMENTUM,
        )
    }

    /// Layer norm over channels of an `[N, C, H, W]` map.
    fn channel_layer_norm(&self, g: &mut Graph<T>, vars: &[Var], x: Var, ln: LnIdx) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let t = to_tokens(g, x)?;
        let t = g.layernorm(t, vars[ln.gamma], vars[ln.beta], LAYERNORM_EPS)?;
        from_tokens(g, t, s[2], s[3])
    }

    fn downsample(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        d: &Downsample,
        mode: Mode,
        running: &mut [RunningStats<T>],
    ) -> Result<Var> {
        // Odd (or 1x1) maps get one ring of zero padding so the output side is ceil(side / 2).
        let side = g.shape(x)[2];
        let padding = if d.stride == 2 { side % 2 } else { 0 };
        let y = g.conv2d(
            x,
            vars[d.conv.w],
            Some(vars[d.conv.b]),
            Conv2dSpec::new(d.stride, padding, 1),
        )?;
        match d.norm {
            NormIdx::Batch(bn) => self.batch_norm(g, vars, y, bn, mode, running),
            NormIdx::Layer(ln) => self.channel_layer_norm(g, vars, y, ln),
        }
    }

    fn depthwise(&self, g: &mut Graph<T>, vars: &[Var], x: Var, a: Affine) -> Result<Var> {
        let c = g.shape(x)[1];
        let k = g.shape(vars[a.w])[2];
        g.conv2d(x, vars[a.w], Some(vars[a.b]), Conv2dSpec::new(1, k / 2, c))
    }

    fn pointwise(&self, g: &mut Graph<T>, vars: &[Var], x: Var, a: Affine) -> Result<Var> {
        g.conv2d(x, vars[a.w], Some(vars[a.b]), Conv2dSpec::default())
    }

    fn conv_block(&self, stage: usize, index: usize) -> Result<&ConvBlock> {
        self.layout
            .conv_stages
            .get(stage)
            .and_then(|s| s.get(index))
            .ok_or_else(|| config_err!("no convolutional block {index} in stage {}", stage + 1))
    }

    /// Front half of a convolutional block. Returns `(x + dpe(x), A)` where
    /// `A = dw(pw1(bn(x + dpe(x))))` is the local attention map that the
    /// mirror blend acts on.
    #[allow(clippy::too_many_arguments)]
    pub fn local_attention(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        stage: usize,
        index: usize,
        mode: Mode,
        running: &mut [RunningStats<T>],
    ) -> Result<(Var, Var)> {
        let blk = self.conv_block(stage, index)?;
        let c = self.params[blk.pw1.w].shape()[0];
        if g.shape(x).len() != 4 || g.shape(x)[1] != c {
            return Err(dim_err!("block expects {c} channels, got input {:?}", g.shape(x)));
        }
        let pos = self.depthwise(g, vars, x, blk.dpe)?;
        let x = g.add(x, pos)?;
        let h = self.batch_norm(g, vars, x, blk.norm1, mode, running)?;
        let h = self.pointwise(g, vars, h, blk.pw1)?;
        let a = self.depthwise(g, vars, h, blk.dw)?;
        Ok((x, a))
    }

    /// Stem (or inter-stage) downsampling in front of stage `stage`.
    pub fn downsample_forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        stage: usize,
        mode: Mode,
        running: &mut [RunningStats<T>],
    ) -> Result<Var> {
        let d = self
            .layout
            .downs
            .get(stage)
            .ok_or_else(|| config_err!("no stage {}", stage + 1))?;
        self.downsample(g, vars, x, d, mode, running)
    }

    /// One convolutional block of stage `stage` (0 or 1):
    /// `x += dpe(x)`, `x += pw2([ssaa](dw(pw1(bn(x)))))`, `x += fc2(gelu(fc1(bn(x))))`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_block_forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        stage: usize,
        index: usize,
        use_ssaa: bool,
        mode: Mode,
        running: &mut [RunningStats<T>],
    ) -> Result<Var> {
        let blk = self.conv_block(stage, index)?;
        let (x, mut h) = self.local_attention(g, vars, x, stage, index, mode, running)?;
        if use_ssaa {
            let (w1, w2) = blk
                .ssaa
                .ok_or_else(|| config_err!("block {index} of stage {} has no mirror weights", stage + 1))?;
            h = ssaa(g, h, vars[w1], vars[w2])?;
        }
        let h = self.pointwise(g, vars, h, blk.pw2)?;
        let x = g.add(x, h)?;

        let h = self.batch_norm(g, vars, x, blk.norm2, mode, running)?;
        let h = self.pointwise(g, vars, h, blk.fc1)?;
        let h = g.gelu(h);
        let h = self.pointwise(g, vars, h, blk.fc2)?;
        g.add(x, h)
    }

    /// One attention block of stage `stage` (2 or 3): `x += dpe(x)`, then
    /// pre-norm multi-head attention and feed-forward residuals over tokens.
    pub fn attention_block_forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        stage: usize,
        index: usize,
    ) -> Result<Var> {
        let blk = stage
            .checked_sub(2)
            .and_then(|s| self.layout.attn_stages.get(s))
            .and_then(|s| s.get(index))
            .ok_or_else(|| config_err!("no attention block {index} in stage {}", stage + 1))?;
        let shape = g.shape(x).to_vec();
        let c = self.params[blk.q.w].shape()[0];
        if shape.len() != 4 || shape[1] != c {
            return Err(dim_err!("block expects {c} channels, got input {shape:?}"));
        }
        let pos = self.depthwise(g, vars, x, blk.dpe)?;
        let x = g.add(x, pos)?;
        let t = to_tokens(g, x)?;

        let h = g.layernorm(t, vars[blk.norm1.gamma], vars[blk.norm1.beta], LAYERNORM_EPS)?;
        let attn = AttentionVars {
            q_w: vars[blk.q.w],
            q_b: vars[blk.q.b],
            k_w: vars[blk.k.w],
            k_b: vars[blk.k.b],
            v_w: vars[blk.v.w],
            v_b: vars[blk.v.b],
            proj_w: vars[blk.proj.w],
            proj_b: vars[blk.proj.b],
        };
        let h = attn.forward(g, h, self.config.heads)?;
        let t = g.add(t, h)?;

        let h = g.layernorm(t, vars[blk.norm2.gamma], vars[blk.norm2.beta], LAYERNORM_EPS)?;
        let h = linear(g, h, vars[blk.fc1.w], vars[blk.fc1.b])?;
        let h = g.gelu(h);
        let h = linear(g, h, vars[blk.fc2.w], vars[blk.fc2.b])?;
        let t = g.add(t, h)?;
        from_tokens(g, t, shape[2], shape[3])
    }

    /// Convenience inference: `[N, C, S, S]` images to (embeddings, scores).
    pub fn infer(&self, images: Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let mut g = Graph::new();
        let x = g.constant(images);
        let (out, _) = self.forward(&mut g, x, Mode::Eval)?;
        Ok((g.value(out.embedding).clone(), g.data(out.score).to_vec()))
    }

    /// CRC32 over the little-endian bytes of every parameter and buffer.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut feed = |vals: &[T]| {
            for v in vals {
                h.update(&(v.f64() as f32).to_le_bytes());
            }
        };
        self.params.iter().for_each(|p| feed(p.data()));
        for r in &self.running {
            feed(&r.mean);
            feed(&r.var);
        }
        h.finalize()
    }
}
