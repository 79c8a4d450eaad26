//! Four-stage pyramid models built from mix-shift token-mixing blocks.
//!
//! Each stage reduces spatial resolution with a patch embedding (patch
//! flatten + channel projection) and stacks token-mixing blocks:
//!
//! ```text
//! Z = mix_shift(norm(X)) + X
//! O = mlp(norm(Z)) + Z          mlp = linear(C -> ratio*C), gelu, linear(back)
//! ```
//!
//! A final layer norm, global average pooling, and a linear classifier head
//! produce the logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mixshift::{
    mix_shift_forward, mix_shift_forward_tape, ConvType, GroupKernel, MixShiftParams, MixShiftSpec, MixShiftVars,
    ProjectionMode,
};
use crate::ops;
use crate::params::{DepthwiseKernel, FlatParam, FullKernel, LinearWeights, NormAffine};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor4;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Weight initialization: samples are redrawn until within two standard
/// deviations.
pub const INIT_STD: f64 = 0.02;

// ---------------------------------------------------------------------------
// specs

/// One token-mixing block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub channels: usize,
    pub mixshift: MixShiftSpec,
    /// Hidden expansion of the channel MLP.
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        self.mixshift.validate()?;
        if self.mlp_ratio < 1 {
            return Err(Error::invalid_argument("mlp_ratio must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::invalid_argument("drop_path_rate must be in [0, 1)"));
        }
        crate::mixshift::group_widths(self.channels, self.mixshift.shifting_size)?;
        Ok(())
    }
}

/// One pyramid stage: a patch embedding followed by `num_blocks` blocks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageSpec {
    /// Patch-embedding reduction ratio.
    #[serde(rename = "p")]
    pub patch_ratio: usize,
    #[serde(rename = "c")]
    pub out_channels: usize,
    #[serde(rename = "blocks")]
    pub num_blocks: usize,
    pub mixshift: MixShiftSpec,
    #[serde(default)]
    pub drop_path_max: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.patch_ratio, 2 | 4) {
            return Err(Error::invalid_argument(format!(
                "stage patch ratio must be 2 or 4, got {}",
                self.patch_ratio
            )));
        }
        if self.num_blocks < 1 {
            return Err(Error::invalid_argument("stage needs >= 1 block"));
        }
        self.mixshift.validate()?;
        crate::mixshift::group_widths(self.out_channels, self.mixshift.shifting_size)?;
        if !(0.0..1.0).contains(&self.drop_path_max) {
            return Err(Error::invalid_argument("drop_path_max must be in [0, 1)"));
        }
        Ok(())
    }
}

fn default_image_size() -> usize {
    224
}
fn default_in_channels() -> usize {
    3
}
fn default_mlp_ratio() -> usize {
    4
}

/// Whole-model description.
///
/// JSON schema:
/// `{image_size, num_classes, stages: [{p, c, blocks, mixshift: {S, d, r,
/// axis_mode, conv_type, projection}, drop_path_max}]}` — `in_channels` and
/// `mlp_ratio` are optional and default to 3 and 4.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub stages: Vec<StageSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid_argument("model needs >= 1 stage"));
        }
        if self.num_classes < 1 || self.in_channels < 1 {
            return Err(Error::invalid_argument("num_classes and in_channels must be >= 1"));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::invalid_argument("mlp_ratio must be >= 1"));
        }
        let mut reduction = 1usize;
        for stage in &self.stages {
            stage.validate()?;
            reduction *= stage.patch_ratio;
        }
        if !self.image_size.is_multiple_of(reduction) {
            return Err(Error::invalid_argument(format!(
                "image size {} not divisible by total patch reduction {}",
                self.image_size, reduction
            )));
        }
        Ok(())
    }

    /// Token-map side length entering each stage's blocks, for a given image.
    pub fn stage_resolutions(&self, image_size: usize) -> Vec<usize> {
        let mut side = image_size;
        self.stages
            .iter()
            .map(|s| {
                side /= s.patch_ratio;
                side
            })
            .collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.num_blocks).sum()
    }

    /// Per-block drop-path rates: a linear ramp from 0 to the model's
    /// maximum stage rate over all blocks in depth order.
    pub fn drop_path_schedule(&self) -> Vec<f64> {
        let max_rate = self.stages.iter().map(|s| s.drop_path_max).fold(0.0, f64::max);
        let total = self.total_blocks();
        (0..total)
            .map(|k| {
                if total <= 1 {
                    0.0
                } else {
                    max_rate * k as f64 / (total - 1) as f64
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: NormAffine,
    pub mixer: MixShiftParams,
    pub norm2: NormAffine,
    pub mlp_fc1: LinearWeights,
    pub mlp_fc2: LinearWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub embed: LinearWeights,
    pub blocks: Vec<BlockParams>,
}

/// A built model: the spec plus every parameter, addressable by
/// hierarchical name (`stages.1.blocks.0.mlp.fc1`, `head`, ...).
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub stages: Vec<StageParams>,
    pub final_norm: NormAffine,
    pub head: LinearWeights,
    block_drop_path: Vec<f64>,
}

/// Drop-path behavior of a forward pass.
pub enum ForwardMode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

impl ForwardMode<'_> {
    /// `None`: the residual branch is dropped this pass. `Some(s)`: kept,
    /// scaled by `s` (the usual 1/(1-rate) compensation during training).
    fn branch_scale(&mut self, rate: f64) -> Option<f64> {
        match self {
            ForwardMode::Eval => Some(1.0),
            ForwardMode::Train { rng } => {
                if rate <= 0.0 {
                    Some(1.0)
                } else if rng.random_range(0.0..1.0) < rate {
                    None
                } else {
                    Some(1.0 / (1.0 - rate))
                }
            }
        }
    }
}

/// Non-overlapping `p x p` patch embedding: patch flatten plus projection.
/// `(n, h, w, c) -> (n, h/p, w/p, out)`.
pub fn patch_embed(x: &Tensor4, p: usize, weights: &LinearWeights) -> Result<Tensor4> {
    let flat = ops::space_to_depth(x, p)?;
    ops::channel_linear(&flat, weights)
}

/// One token-mixing block (see module docs). `drop_path_rate` comes from the
/// block spec; the mode decides whether it is applied.
pub fn ms_block_forward(
    x: &Tensor4,
    block: &BlockSpec,
    params: &BlockParams,
    mode: &mut ForwardMode<'_>,
) -> Result<Tensor4> {
    if x.channels() != block.channels {
        return Err(Error::invalid_argument(format!(
            "block expects {} channels, input has {}",
            block.channels,
            x.channels()
        )));
    }
    let normed = ops::layer_norm(x, &params.norm1, LAYER_NORM_EPS)?;
    let mixed = mix_shift_forward(&normed, &block.mixshift, &params.mixer)?;
    let z = match mode.branch_scale(block.drop_path_rate) {
        Some(s) => {
            let branch = if s == 1.0 { mixed } else { mixed.scale(s) };
            branch.add(x)?
        }
        None => x.clone(),
    };

    let normed2 = ops::layer_norm(&z, &params.norm2, LAYER_NORM_EPS)?;
    let hidden = ops::gelu(&ops::channel_linear(&normed2, &params.mlp_fc1)?);
    let mlp_out = ops::channel_linear(&hidden, &params.mlp_fc2)?;
    match mode.branch_scale(block.drop_path_rate) {
        Some(s) => {
            let branch = if s == 1.0 { mlp_out } else { mlp_out.scale(s) };
            branch.add(&z)
        }
        None => Ok(z),
    }
}

/// Tape variables for one block's parameters.
struct BlockVars {
    norm1: Var,
    mixer: MixShiftVars,
    norm2: Var,
    mlp_fc1: Var,
    mlp_fc2: Var,
}

/// A recorded forward pass: the tape, the logits node, and every parameter
/// leaf in model traversal order.
pub struct TapedForward {
    pub tape: GradTape,
    pub input: Var,
    pub logits: Var,
    /// `(hierarchical name, tape leaf)` in [`Model::visit_params`] order.
    pub params: Vec<(String, Var)>,
}

impl Model {
    /// Deterministic build: linear and convolution weights from a truncated
    /// normal (std 0.02, redrawn beyond 2 sigma), biases zero, norm affines
    /// at identity, drop-path rates linearly ramped over depth.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let draw = move |rng: &mut ChaCha8Rng| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                return v;
            }
        };

        let init_linear = |inf: usize, outf: usize, rng: &mut ChaCha8Rng| {
            let mut w = LinearWeights::zeros(inf, outf);
            for v in w.weight.iter_mut() {
                *v = draw(rng);
            }
            w
        };

        let mut stages = Vec::with_capacity(spec.stages.len());
        let schedule = spec.drop_path_schedule();
        let mut in_channels = spec.in_channels;
        for stage_spec in &spec.stages {
            let p = stage_spec.patch_ratio;
            let embed = init_linear(p * p * in_channels, stage_spec.out_channels, &mut rng);
            let c = stage_spec.out_channels;

            let mut blocks = Vec::with_capacity(stage_spec.num_blocks);
            for _ in 0..stage_spec.num_blocks {
                let mixer = init_mixshift(&stage_spec.mixshift, c, &mut rng, &mut |r| draw(r))?;
                blocks.push(BlockParams {
                    norm1: NormAffine::unit(c),
                    mixer,
                    norm2: NormAffine::unit(c),
                    mlp_fc1: init_linear(c, c * spec.mlp_ratio, &mut rng),
                    mlp_fc2: init_linear(c * spec.mlp_ratio, c, &mut rng),
                });
            }
            stages.push(StageParams { embed, blocks });
            in_channels = c;
        }

        let final_norm = NormAffine::unit(in_channels);
        let head = init_linear(in_channels, spec.num_classes, &mut rng);

        Ok(Model {
            spec: spec.clone(),
            stages,
            final_norm,
            head,
            block_drop_path: schedule,
        })
    }

    /// Resolved per-block drop-path rates in depth order.
    pub fn drop_path_rates(&self) -> &[f64] {
        &self.block_drop_path
    }

    fn block_spec(&self, stage: usize, depth_index: usize) -> BlockSpec {
        let s = &self.spec.stages[stage];
        BlockSpec {
            channels: s.out_channels,
            mixshift: s.mixshift.clone(),
            mlp_ratio: self.spec.mlp_ratio,
            drop_path_rate: self.block_drop_path[depth_index],
        }
    }

    fn check_images(&self, images: &Tensor4) -> Result<()> {
        let (_, h, w, c) = images.shape();
        if h != self.spec.image_size || w != self.spec.image_size || c != self.spec.in_channels {
            return Err(Error::invalid_argument(format!(
                "expected images of shape (*, {0}, {0}, {1}), got {2:?}",
                self.spec.image_size,
                self.spec.in_channels,
                images.shape()
            )));
        }
        Ok(())
    }

    /// Deterministic inference pass. Returns logits as `(n, 1, 1, classes)`;
    /// use [`Tensor4::rows`] for the matrix view.
    pub fn forward(&self, images: &Tensor4) -> Result<Tensor4> {
        self.forward_with_mode(images, &mut ForwardMode::Eval)
    }

    /// Forward with stochastic depth active.
    pub fn forward_train(&self, images: &Tensor4, rng: &mut ChaCha8Rng) -> Result<Tensor4> {
        self.forward_with_mode(images, &mut ForwardMode::Train { rng })
    }

    fn forward_with_mode(&self, images: &Tensor4, mode: &mut ForwardMode<'_>) -> Result<Tensor4> {
        self.check_images(images)?;
        let mut x = images.clone();
        let mut depth = 0usize;
        for (si, stage) in self.stages.iter().enumerate() {
            x = patch_embed(&x, self.spec.stages[si].patch_ratio, &stage.embed)?;
            for block in &stage.blocks {
                let bs = self.block_spec(si, depth);
                x = ms_block_forward(&x, &bs, block, mode)?;
                depth += 1;
            }
        }
        let x = ops::layer_norm(&x, &self.final_norm, LAYER_NORM_EPS)?;
        let pooled = ops::global_avg_pool(&x);
        ops::channel_linear(&pooled, &self.head)
    }

    /// Forward recorded on a gradient tape, for training and gradient checks.
    /// The pure and taped routes compute identical values.
    pub fn forward_tape(&self, images: &Tensor4, mut mode: ForwardMode<'_>) -> Result<TapedForward> {
        self.check_images(images)?;
        let mut tape = GradTape::new();
        let input = tape.input(images.clone());
        let mut params: Vec<(String, Var)> = Vec::new();

        let mut x = input;
        let mut depth = 0usize;
        for (si, stage) in self.stages.iter().enumerate() {
            let embed = tape.param_linear(stage.embed.clone());
            params.push((format!("stages.{si}.embed"), embed));
            let flat = tape.space_to_depth(x, self.spec.stages[si].patch_ratio)?;
            x = tape.channel_linear(flat, embed)?;

            for (bi, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("stages.{si}.blocks.{bi}");
                let vars = record_block_params(&mut tape, block, &prefix, &mut params);
                let bs = self.block_spec(si, depth);
                x = ms_block_forward_tape(&mut tape, x, &bs, &vars, &mut mode)?;
                depth += 1;
            }
        }

        let fnorm = tape.param_norm(self.final_norm.clone());
        params.push(("final_norm".to_string(), fnorm));
        let x = tape.layer_norm(x, fnorm, LAYER_NORM_EPS)?;
        let pooled = tape.global_avg_pool(x);
        let head = tape.param_linear(self.head.clone());
        params.push(("head".to_string(), head));
        let logits = tape.channel_linear(pooled, head)?;

        Ok(TapedForward {
            tape,
            input,
            logits,
            params,
        })
    }

    // -- parameter traversal -------------------------------------------------

    /// Visit every parameter tensor with its hierarchical name, in a fixed
    /// deterministic order (the same order as `forward_tape`'s bindings).
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &dyn FlatParam)) {
        for (si, stage) in self.stages.iter().enumerate() {
            f(&format!("stages.{si}.embed"), &stage.embed);
            for (bi, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("stages.{si}.blocks.{bi}");
                visit_block(block, &prefix, &mut |name, p| f(name, p));
            }
        }
        f("final_norm", &self.final_norm);
        f("head", &self.head);
    }

    /// Mutable variant of [`Model::visit_params`], same order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut dyn FlatParam)) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            f(&format!("stages.{si}.embed"), &mut stage.embed);
            for (bi, block) in stage.blocks.iter_mut().enumerate() {
                let prefix = format!("stages.{si}.blocks.{bi}");
                visit_block_mut(block, &prefix, &mut |name, p| f(name, p));
            }
        }
        f("final_norm", &mut self.final_norm);
        f("head", &mut self.head);
    }

    /// Total number of stored parameter scalars.
    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| total += p.flat_len());
        total
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }

    pub fn param_flat_len(&self, name: &str) -> usize {
        let mut len = 0;
        self.visit_params(&mut |n, p| {
            if n == name {
                len = p.flat_len();
            }
        });
        len
    }

    pub fn get_param_scalar(&self, name: &str, index: usize) -> f64 {
        let mut value = f64::NAN;
        self.visit_params(&mut |n, p| {
            if n == name {
                value = p.to_flat()[index];
            }
        });
        assert!(!value.is_nan(), "unknown parameter tensor {name}");
        value
    }

    pub fn set_param_scalar(&mut self, name: &str, index: usize, value: f64) {
        let mut found = false;
        self.visit_params_mut(&mut |n, p| {
            if n == name {
                let mut flat = p.to_flat();
                flat[index] = value;
                p.write_from_flat(&flat);
                found = true;
            }
        });
        assert!(found, "unknown parameter tensor {name}");
    }
}

fn init_mixshift(
    spec: &MixShiftSpec,
    channels: usize,
    rng: &mut ChaCha8Rng,
    draw: &mut dyn FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<MixShiftParams> {
    let widths = crate::mixshift::group_widths(channels, spec.shifting_size)?;
    let mut branches = Vec::new();
    for _axis in spec.axis_mode.axes() {
        let kernels = widths
            .iter()
            .zip(&spec.region_sizes)
            .map(|(&w, &r)| {
                Ok(match spec.conv_type {
                    ConvType::Dw => {
                        let mut k = DepthwiseKernel::zeros(w, r, true)?;
                        for v in k.weight.iter_mut() {
                            *v = draw(rng);
                        }
                        GroupKernel::Depthwise(k)
                    }
                    ConvType::Full => {
                        let mut k = FullKernel::zeros(w, w, r, true)?;
                        for v in k.weight.iter_mut() {
                            *v = draw(rng);
                        }
                        GroupKernel::Full(k)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut proj = |rng: &mut ChaCha8Rng| {
            let mut w = LinearWeights::zeros(channels, channels);
            for v in w.weight.iter_mut() {
                *v = draw(rng);
            }
            w
        };
        let (pre, post) = match spec.projection {
            ProjectionMode::None => (None, None),
            ProjectionMode::Post => (None, Some(proj(rng))),
            ProjectionMode::PrePost => (Some(proj(rng)), Some(proj(rng))),
        };
        branches.push(crate::mixshift::BranchParams { pre, post, kernels });
    }
    Ok(MixShiftParams { branches })
}

fn visit_block(block: &BlockParams, prefix: &str, f: &mut dyn FnMut(&str, &dyn FlatParam)) {
    f(&format!("{prefix}.norm1"), &block.norm1);
    for (bi, branch) in block.mixer.branches.iter().enumerate() {
        let label = branch_label_from_count(block.mixer.branches.len(), bi);
        if let Some(p) = &branch.pre {
            f(&format!("{prefix}.mix.{label}.pre"), p);
        }
        for (gi, kernel) in branch.kernels.iter().enumerate() {
            match kernel {
                GroupKernel::Depthwise(k) => f(&format!("{prefix}.mix.{label}.g{gi}"), k),
                GroupKernel::Full(k) => f(&format!("{prefix}.mix.{label}.g{gi}"), k),
            }
        }
        if let Some(p) = &branch.post {
            f(&format!("{prefix}.mix.{label}.post"), p);
        }
    }
    f(&format!("{prefix}.norm2"), &block.norm2);
    f(&format!("{prefix}.mlp.fc1"), &block.mlp_fc1);
    f(&format!("{prefix}.mlp.fc2"), &block.mlp_fc2);
}

fn visit_block_mut(block: &mut BlockParams, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn FlatParam)) {
    f(&format!("{prefix}.norm1"), &mut block.norm1);
    let count = block.mixer.branches.len();
    for (bi, branch) in block.mixer.branches.iter_mut().enumerate() {
        let label = branch_label_from_count(count, bi);
        if let Some(p) = &mut branch.pre {
            f(&format!("{prefix}.mix.{label}.pre"), p);
        }
        for (gi, kernel) in branch.kernels.iter_mut().enumerate() {
            match kernel {
                GroupKernel::Depthwise(k) => f(&format!("{prefix}.mix.{label}.g{gi}"), k),
                GroupKernel::Full(k) => f(&format!("{prefix}.mix.{label}.g{gi}"), k),
            }
        }
        if let Some(p) = &mut branch.post {
            f(&format!("{prefix}.mix.{label}.post"), p);
        }
    }
    f(&format!("{prefix}.norm2"), &mut block.norm2);
    f(&format!("{prefix}.mlp.fc1"), &mut block.mlp_fc1);
    f(&format!("{prefix}.mlp.fc2"), &mut block.mlp_fc2);
}

fn branch_label_from_count(count: usize, index: usize) -> &'static str {
    if count == 1 {
        "b0"
    } else if index == 0 {
        "h"
    } else {
        "v"
    }
}

fn record_block_params(
    tape: &mut GradTape,
    block: &BlockParams,
    prefix: &str,
    params: &mut Vec<(String, Var)>,
) -> BlockVars {
    let norm1 = tape.param_norm(block.norm1.clone());
    params.push((format!("{prefix}.norm1"), norm1));

    let mixer = MixShiftVars::record(tape, &block.mixer);
    let count = mixer.branches.len();
    for (bi, (bvars, bparams)) in mixer.branches.iter().zip(&block.mixer.branches).enumerate() {
        let label = branch_label_from_count(count, bi);
        if let Some(p) = bvars.pre {
            debug_assert!(bparams.pre.is_some());
            params.push((format!("{prefix}.mix.{label}.pre"), p));
        }
        for (gi, kv) in bvars.kernels.iter().enumerate() {
            params.push((format!("{prefix}.mix.{label}.g{gi}"), *kv));
        }
        if let Some(p) = bvars.post {
            params.push((format!("{prefix}.mix.{label}.post"), p));
        }
    }

    let norm2 = tape.param_norm(block.norm2.clone());
    params.push((format!("{prefix}.norm2"), norm2));
    let mlp_fc1 = tape.param_linear(block.mlp_fc1.clone());
    params.push((format!("{prefix}.mlp.fc1"), mlp_fc1));
    let mlp_fc2 = tape.param_linear(block.mlp_fc2.clone());
    params.push((format!("{prefix}.mlp.fc2"), mlp_fc2));

    BlockVars {
        norm1,
        mixer,
        norm2,
        mlp_fc1,
        mlp_fc2,
    }
}

fn ms_block_forward_tape(
    tape: &mut GradTape,
    x: Var,
    block: &BlockSpec,
    vars: &BlockVars,
    mode: &mut ForwardMode<'_>,
) -> Result<Var> {
    let normed = tape.layer_norm(x, vars.norm1, LAYER_NORM_EPS)?;
    let mixed = mix_shift_forward_tape(tape, normed, &block.mixshift, &vars.mixer)?;
    let z = match mode.branch_scale(block.drop_path_rate) {
        Some(s) => {
            let branch = if s == 1.0 { mixed } else { tape.scale(mixed, s) };
            tape.add(branch, x)?
        }
        None => x,
    };

    let normed2 = tape.layer_norm(z, vars.norm2, LAYER_NORM_EPS)?;
    let h1 = tape.channel_linear(normed2, vars.mlp_fc1)?;
    let act = tape.gelu(h1);
    let mlp_out = tape.channel_linear(act, vars.mlp_fc2)?;
    match mode.branch_scale(block.drop_path_rate) {
        Some(s) => {
            let branch = if s == 1.0 { mlp_out } else { tape.scale(mlp_out, s) };
            tape.add(branch, z)
        }
        None => Ok(z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixshift::AxisMode;
    use crate::presets::preset;

    fn tiny() -> ModelSpec {
        preset("tiny-desk").unwrap()
    }

    #[test]
    fn patch_embed_spatial_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::random(1, 8, 8, 3, -1.0, 1.0, &mut rng);
        let w = LinearWeights::zeros(4 * 4 * 3, 16);
        let y = patch_embed(&x, 4, &w).unwrap();
        assert_eq!(y.shape(), (1, 2, 2, 16));
    }

    #[test]
    fn patch_embed_p1_equals_channel_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::random(1, 3, 3, 4, -1.0, 1.0, &mut rng);
        let mut w = LinearWeights::zeros(4, 6);
        for v in w.weight.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let a = patch_embed(&x, 1, &w).unwrap();
        let b = ops::channel_linear(&x, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patch_embed_matches_flatten_matmul_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::random(1, 4, 4, 2, -1.0, 1.0, &mut rng);
        let mut w = LinearWeights::zeros(2 * 2 * 2, 3);
        for v in w.weight.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let y = patch_embed(&x, 2, &w).unwrap();
        for bi in 0..2usize {
            for bj in 0..2usize {
                // explicit patch flatten in (di, dj, ch) order
                let mut patch = Vec::new();
                for di in 0..2 {
                    for dj in 0..2 {
                        for ch in 0..2 {
                            patch.push(x.at(0, bi * 2 + di, bj * 2 + dj, ch));
                        }
                    }
                }
                for o in 0..3 {
                    let mut acc = w.bias[o];
                    for (i, p) in patch.iter().enumerate() {
                        acc += w.w(o, i) * p;
                    }
                    assert!((y.at(0, bi, bj, o) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn patch_embed_rejects_indivisible_extent() {
        let x = Tensor4::zeros(1, 6, 6, 3);
        let w = LinearWeights::zeros(4 * 4 * 3, 8);
        assert!(patch_embed(&x, 4, &w).is_err());
    }

    #[test]
    fn zero_params_block_is_residual_passthrough() {
        let spec = MixShiftSpec {
            shifting_size: 2,
            distances: vec![0, 1],
            region_sizes: vec![1, 3],
            axis_mode: AxisMode::DualBranchSum,
            conv_type: ConvType::Dw,
            projection: ProjectionMode::None,
        };
        let bs = BlockSpec {
            channels: 4,
            mixshift: spec.clone(),
            mlp_ratio: 4,
            drop_path_rate: 0.0,
        };
        // all-zero parameters: both residual branches contribute nothing
        let widths = crate::mixshift::group_widths(4, 2).unwrap();
        let zero_branch = || crate::mixshift::BranchParams {
            pre: None,
            post: None,
            kernels: widths
                .iter()
                .zip(&spec.region_sizes)
                .map(|(&w, &r)| GroupKernel::Depthwise(DepthwiseKernel::zeros(w, r, true).unwrap()))
                .collect(),
        };
        let params = BlockParams {
            norm1: NormAffine {
                gamma: vec![0.0; 4],
                beta: vec![0.0; 4],
            },
            mixer: MixShiftParams {
                branches: vec![zero_branch(), zero_branch()],
            },
            norm2: NormAffine {
                gamma: vec![0.0; 4],
                beta: vec![0.0; 4],
            },
            mlp_fc1: LinearWeights::zeros(4, 16),
            mlp_fc2: LinearWeights::zeros(16, 4),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::random(1, 5, 5, 4, -1.0, 1.0, &mut rng);
        let y = ms_block_forward(&x, &bs, &params, &mut ForwardMode::Eval).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn drop_path_zero_train_equals_eval() {
        let spec = tiny();
        let model = Model::build(&spec, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::random(2, spec.image_size, spec.image_size, 3, 0.0, 1.0, &mut rng);
        let eval = model.forward(&x).unwrap();
        let mut train_rng = ChaCha8Rng::seed_from_u64(5);
        let train = model.forward_train(&x, &mut train_rng).unwrap();
        // tiny-desk has drop_path_max = 0, so the passes must agree exactly
        assert_eq!(eval, train);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = tiny();
        let a = Model::build(&spec, 42).unwrap();
        let b = Model::build(&spec, 42).unwrap();
        let mut flat_a = Vec::new();
        a.visit_params(&mut |_, p| p.copy_to_flat(&mut flat_a));
        let mut flat_b = Vec::new();
        b.visit_params(&mut |_, p| p.copy_to_flat(&mut flat_b));
        assert_eq!(flat_a, flat_b, "same seed must give bitwise-identical parameters");
        let c = Model::build(&spec, 43).unwrap();
        let mut flat_c = Vec::new();
        c.visit_params(&mut |_, p| p.copy_to_flat(&mut flat_c));
        assert_ne!(flat_a, flat_c, "different seeds should differ");
    }

    #[test]
    fn forward_batch_independence_and_determinism() {
        let spec = tiny();
        let model = Model::build(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Tensor4::random(1, 32, 32, 3, 0.0, 1.0, &mut rng);

        // batch of two identical images -> identical logit rows
        let mut both = Vec::new();
        both.extend_from_slice(img.data());
        both.extend_from_slice(img.data());
        let batch = Tensor4::from_vec(2, 32, 32, 3, both).unwrap();
        let logits = model.forward(&batch).unwrap();
        let rows = logits.rows();
        assert_eq!(rows[0], rows[1]);

        // permuting batch order permutes logits identically
        let img2 = Tensor4::random(1, 32, 32, 3, 0.0, 1.0, &mut rng);
        let mut ab = Vec::new();
        ab.extend_from_slice(img.data());
        ab.extend_from_slice(img2.data());
        let mut ba = Vec::new();
        ba.extend_from_slice(img2.data());
        ba.extend_from_slice(img.data());
        let l_ab = model.forward(&Tensor4::from_vec(2, 32, 32, 3, ab).unwrap()).unwrap();
        let l_ba = model.forward(&Tensor4::from_vec(2, 32, 32, 3, ba).unwrap()).unwrap();
        assert_eq!(l_ab.rows()[0], l_ba.rows()[1]);
        assert_eq!(l_ab.rows()[1], l_ba.rows()[0]);

        // pure function: same input twice -> identical output
        let again = model.forward(&batch).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn taped_forward_matches_pure_forward() {
        let spec = tiny();
        let model = Model::build(&spec, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::random(2, 32, 32, 3, 0.0, 1.0, &mut rng);
        let pure = model.forward(&x).unwrap();
        let taped = model.forward_tape(&x, ForwardMode::Eval).unwrap();
        assert_eq!(taped.tape.value(taped.logits), &pure);
    }

    #[test]
    fn taped_and_pure_routes_agree_under_active_drop_path() {
        // same rng seed => same drop decisions on both routes
        let mut spec = tiny();
        for s in &mut spec.stages {
            s.drop_path_max = 0.5;
        }
        let model = Model::build(&spec, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::random(1, 32, 32, 3, 0.0, 1.0, &mut rng);
        for trial in 0..5u64 {
            let mut rng_a = ChaCha8Rng::seed_from_u64(trial);
            let mut rng_b = ChaCha8Rng::seed_from_u64(trial);
            let pure = model.forward_train(&x, &mut rng_a).unwrap();
            let taped = model
                .forward_tape(&x, ForwardMode::Train { rng: &mut rng_b })
                .unwrap();
            assert_eq!(taped.tape.value(taped.logits), &pure, "trial {trial}");
        }
    }

    #[test]
    fn tape_binding_order_matches_visit_order() {
        let spec = tiny();
        let model = Model::build(&spec, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4::random(1, 32, 32, 3, 0.0, 1.0, &mut rng);
        let taped = model.forward_tape(&x, ForwardMode::Eval).unwrap();
        let bound: Vec<String> = taped.params.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(bound, model.param_names());
    }

    #[test]
    fn drop_path_schedule_ramps_linearly() {
        let mut spec = tiny();
        for s in &mut spec.stages {
            s.drop_path_max = 0.2;
        }
        let rates = spec.drop_path_schedule();
        assert_eq!(rates.len(), spec.total_blocks());
        assert_eq!(rates[0], 0.0);
        let last = rates[rates.len() - 1];
        assert!((last - 0.2).abs() < 1e-12);
        for pair in rates.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
    }

    #[test]
    fn model_spec_json_roundtrip() {
        let spec = tiny();
        let json = spec.to_json();
        let back = ModelSpec::from_json(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = tiny();
        spec.image_size = 30; // not divisible by 8
        assert!(Model::build(&spec, 0).is_err());

        let mut spec2 = tiny();
        spec2.stages[0].patch_ratio = 3;
        assert!(spec2.validate().is_err());

        let mut spec3 = tiny();
        spec3.stages[0].num_blocks = 0;
        assert!(spec3.validate().is_err());
    }

    #[test]
    fn block_matches_straight_line_composition_of_module_oracles() {
        // a random block against the plain sequence of pure ops it names
        let spec = preset("tiny-desk").unwrap();
        let model = Model::build(&spec, 21).unwrap();
        let block = &model.stages[0].blocks[0];
        let bs = model.block_spec(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::random(2, 8, 8, 16, -1.0, 1.0, &mut rng);

        let fast = ms_block_forward(&x, &bs, block, &mut ForwardMode::Eval).unwrap();

        let n1 = ops::layer_norm(&x, &block.norm1, LAYER_NORM_EPS).unwrap();
        let mixed = crate::mixshift::mix_shift_reference_forward(&n1, &bs.mixshift, &block.mixer).unwrap();
        let z = mixed.add(&x).unwrap();
        let n2 = ops::layer_norm(&z, &block.norm2, LAYER_NORM_EPS).unwrap();
        let h = ops::gelu(&ops::channel_linear(&n2, &block.mlp_fc1).unwrap());
        let o = ops::channel_linear(&h, &block.mlp_fc2).unwrap().add(&z).unwrap();

        assert!(fast.max_abs_diff(&o) <= 1e-10, "deviation {}", fast.max_abs_diff(&o));
    }

    #[test]
    fn ablation_local_spatial_mixing_is_pure_multi_shift_at_block_level() {
        // the r=1 reduction lifted to block level: with delta kernels the
        // block's spatial-mixing residual branch is exactly the multi-offset
        // channel-group shift of the normed input
        let spec = preset("ablation-local").unwrap();
        let ms = spec.stages[0].mixshift.clone();
        assert!(ms.region_sizes.iter().all(|&r| r == 1));

        let c = 10usize;
        let bs = BlockSpec {
            channels: c,
            mixshift: ms.clone(),
            mlp_ratio: 4,
            drop_path_rate: 0.0,
        };
        let params = BlockParams {
            norm1: NormAffine::unit(c),
            mixer: MixShiftParams::identity(&ms, c).unwrap(),
            norm2: NormAffine::unit(c),
            // zero MLP: the second residual branch contributes nothing
            mlp_fc1: LinearWeights::zeros(c, 4 * c),
            mlp_fc2: LinearWeights::zeros(4 * c, c),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor4::random(1, 9, 9, c, -1.0, 1.0, &mut rng);
        let out = ms_block_forward(&x, &bs, &params, &mut ForwardMode::Eval).unwrap();

        // matched-parameter expectation built from first principles
        let normed = ops::layer_norm(&x, &params.norm1, LAYER_NORM_EPS).unwrap();
        let groups = crate::mixshift::split_channels(&normed, ms.shifting_size).unwrap();
        let mut expect_mix: Option<Tensor4> = None;
        for axis in ms.axis_mode.axes() {
            let shifted: Vec<Tensor4> = groups
                .iter()
                .zip(&ms.distances)
                .map(|(g, &d)| ops::shift2d_saturating(g, -d, axis))
                .collect();
            let refs: Vec<&Tensor4> = shifted.iter().collect();
            let stack = ops::concat_channels(&refs).unwrap();
            expect_mix = Some(match expect_mix {
                Some(acc) => acc.add(&stack).unwrap(),
                None => stack,
            });
        }
        let expect = expect_mix.unwrap().add(&x).unwrap();
        assert_eq!(out, expect, "block-level multi-shift reduction must be exact");
    }

    #[test]
    fn analytic_param_count_matches_live_lite_model() {
        // exercises chunk group widths (96/5) and learnable projections at scale
        let spec = preset("ms-mlp-t-lite").unwrap();
        let analytic = crate::flops::count_params(&spec).unwrap().total_params as usize;
        let model = Model::build(&spec, 0).unwrap();
        assert_eq!(analytic, model.num_params());
    }
}
