//! The mix-shift regional token-mixing operator.
//!
//! A feature map is split along channels into `S` groups. Group `n` mixes an
//! `r_n x r_n` region around a center token offset by `d_n` along the branch
//! axis (group 1 is the query group: `d_1 = 0`, `r_1 = 1`), then every group
//! is shifted by `-d_n` so the mixed centers align with the query position
//! before the groups are concatenated back together. Small regions near the
//! query give fine-grained mixing; large regions far away give coarse-grained
//! mixing with the same per-token cost.
//!
//! Two forward routes exist on purpose:
//! - [`mix_shift_branch`] — the operational pipeline (whole-map group
//!   convolutions, then shifts, then concat);
//! - [`mix_shift_reference`] — a per-output-token transcription of the
//!   definition that gathers each shifted window directly.
//!
//! They must agree to 1e-10 elementwise; the oracle suite cross-validates
//! them over random shapes and specs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{DepthwiseKernel, FullKernel, LinearWeights};
use crate::tape::{GradTape, Var};
use crate::tensor::{Axis, Tensor4};

/// How horizontal and vertical branches combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisMode {
    HorizontalOnly,
    VerticalOnly,
    /// Two independent branches (own parameters each), outputs summed.
    DualBranchSum,
}

impl AxisMode {
    /// Branch axes in evaluation order.
    pub fn axes(self) -> Vec<Axis> {
        match self {
            AxisMode::HorizontalOnly => vec![Axis::Horizontal],
            AxisMode::VerticalOnly => vec![Axis::Vertical],
            AxisMode::DualBranchSum => vec![Axis::Horizontal, Axis::Vertical],
        }
    }
}

/// Regional mixing function type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvType {
    /// One `r x r` filter per channel.
    #[default]
    Dw,
    /// Dense cross-channel convolution within each group.
    Full,
}

/// Which channel projections the operator carries.
///
/// `None` is the strict pipeline (split / mix / shift / concat only) — the
/// configuration that reproduces the published model complexity figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    None,
    /// A learnable C→C projection after the concat.
    Post,
    /// Learnable C→C projections both before the split and after the concat.
    #[default]
    PrePost,
}

/// The `(S, d, r, axis-mode)` tuple defining one regional-mixing operator.
///
/// Serializes to `{"S", "d", "r", "axis_mode", "conv_type", "projection"}`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixShiftSpec {
    /// Shifting size: the number of channel groups.
    #[serde(rename = "S")]
    pub shifting_size: usize,
    /// Relative distance of each group's region center from the query, in
    /// tokens along the branch axis. `d[0]` must be 0: the first group holds
    /// the query tokens.
    #[serde(rename = "d")]
    pub distances: Vec<i64>,
    /// Mixing region size of each group (odd). The query group conventionally
    /// keeps `r[0] = 1`; the global-mixing ablation raises it.
    #[serde(rename = "r")]
    pub region_sizes: Vec<usize>,
    pub axis_mode: AxisMode,
    #[serde(default)]
    pub conv_type: ConvType,
    #[serde(default)]
    pub projection: ProjectionMode,
}

impl MixShiftSpec {
    pub fn new(distances: Vec<i64>, region_sizes: Vec<usize>, axis_mode: AxisMode) -> Result<Self> {
        let spec = MixShiftSpec {
            shifting_size: distances.len(),
            distances,
            region_sizes,
            axis_mode,
            conv_type: ConvType::Dw,
            projection: ProjectionMode::None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shifting_size;
        if s < 1 {
            return Err(Error::invalid_argument("shifting size must be >= 1"));
        }
        if self.distances.len() != s || self.region_sizes.len() != s {
            return Err(Error::invalid_argument(format!(
                "d and r must both have length S = {s} (got {} and {})",
                self.distances.len(),
                self.region_sizes.len()
            )));
        }
        if self.distances[0] != 0 {
            return Err(Error::invalid_argument("d[0] must be 0: the first group holds the query tokens"));
        }
        for (i, &r) in self.region_sizes.iter().enumerate() {
            if r == 0 || r % 2 == 0 {
                return Err(Error::invalid_argument(format!("r[{i}] = {r} must be odd and >= 1")));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: MixShiftSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

/// Near-equal channel group widths: the first groups take `ceil(c / s)`
/// channels, the last takes the remainder. Widths are exactly `c / s`
/// whenever `s` divides `c`. Errors if any group would come out empty.
pub fn group_widths(channels: usize, s: usize) -> Result<Vec<usize>> {
    if s < 1 {
        return Err(Error::invalid_argument("group count must be >= 1"));
    }
    let chunk = channels.div_ceil(s);
    let head = chunk * (s - 1);
    if head >= channels {
        return Err(Error::invalid_argument(format!(
            "{channels} channels cannot form {s} nonempty groups"
        )));
    }
    let mut widths = vec![chunk; s - 1];
    widths.push(channels - head);
    Ok(widths)
}

/// Equal split of the channel dimension into `s` disjoint groups whose
/// concatenation reproduces the input. Strict: errors when `s` does not
/// divide the channel count.
pub fn split_channels(x: &Tensor4, s: usize) -> Result<Vec<Tensor4>> {
    if s < 1 {
        return Err(Error::invalid_argument("group count must be >= 1"));
    }
    let c = x.channels();
    if !c.is_multiple_of(s) {
        return Err(Error::invalid_argument(format!(
            "{c} channels are not divisible into {s} equal groups"
        )));
    }
    let width = c / s;
    (0..s).map(|g| ops::slice_channels(x, g * width, width)).collect()
}

/// Regional mixing kernel of one channel group.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupKernel {
    Depthwise(DepthwiseKernel),
    Full(FullKernel),
}

impl GroupKernel {
    pub fn region(&self) -> usize {
        match self {
            GroupKernel::Depthwise(k) => k.region,
            GroupKernel::Full(k) => k.region,
        }
    }

    fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            GroupKernel::Depthwise(k) => ops::depthwise_conv2d(x, k),
            GroupKernel::Full(k) => ops::full_conv2d(x, k),
        }
    }
}

/// Parameters of one branch: optional projections plus one kernel per group.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub pre: Option<LinearWeights>,
    pub post: Option<LinearWeights>,
    pub kernels: Vec<GroupKernel>,
}

/// Parameters of the whole operator: one [`BranchParams`] per axis in
/// [`AxisMode::axes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MixShiftParams {
    pub branches: Vec<BranchParams>,
}

impl MixShiftParams {
    /// Identity-behaving parameters: delta kernels, projections per the
    /// spec's mode realized as identity matrices. The operator then reduces
    /// to the pure multi-offset channel-group shift.
    pub fn identity(spec: &MixShiftSpec, channels: usize) -> Result<Self> {
        let widths = group_widths(channels, spec.shifting_size)?;
        let mut branches = Vec::new();
        for _axis in spec.axis_mode.axes() {
            let kernels = widths
                .iter()
                .zip(&spec.region_sizes)
                .map(|(&w, &r)| match spec.conv_type {
                    ConvType::Dw => Ok(GroupKernel::Depthwise(DepthwiseKernel::delta(w, r)?)),
                    ConvType::Full => {
                        let mut k = FullKernel::zeros(w, w, r, true)?;
                        let mid = r / 2;
                        for ch in 0..w {
                            let idx = ((ch * w + ch) * r + mid) * r + mid;
                            k.weight[idx] = 1.0;
                        }
                        Ok(GroupKernel::Full(k))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let (pre, post) = match spec.projection {
                ProjectionMode::None => (None, None),
                ProjectionMode::Post => (None, Some(LinearWeights::identity(channels))),
                ProjectionMode::PrePost => (
                    Some(LinearWeights::identity(channels)),
                    Some(LinearWeights::identity(channels)),
                ),
            };
            branches.push(BranchParams { pre, post, kernels });
        }
        Ok(MixShiftParams { branches })
    }

    /// Randomly initialized parameters (uniform in `[-scale, scale]`,
    /// biases included). Used by tests and the oracle suite; model training
    /// uses the truncated-normal initializer in the model builder.
    pub fn random<R: Rng>(spec: &MixShiftSpec, channels: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let widths = group_widths(channels, spec.shifting_size)?;
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
                                *v = rng.random_range(-scale..scale);
                            }
                            for v in k.bias.as_mut().unwrap().iter_mut() {
                                *v = rng.random_range(-scale..scale);
                            }
                            GroupKernel::Depthwise(k)
                        }
                        ConvType::Full => {
                            let mut k = FullKernel::zeros(w, w, r, true)?;
                            for v in k.weight.iter_mut() {
                                *v = rng.random_range(-scale..scale);
                            }
                            for v in k.bias.as_mut().unwrap().iter_mut() {
                                *v = rng.random_range(-scale..scale);
                            }
                            GroupKernel::Full(k)
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut proj = || {
                let mut w = LinearWeights::zeros(channels, channels);
                for v in w.weight.iter_mut() {
                    *v = rng.random_range(-scale..scale);
                }
                for v in w.bias.iter_mut() {
                    *v = rng.random_range(-scale..scale);
                }
                w
            };
            let (pre, post) = match spec.projection {
                ProjectionMode::None => (None, None),
                ProjectionMode::Post => (None, Some(proj())),
                ProjectionMode::PrePost => (Some(proj()), Some(proj())),
            };
            branches.push(BranchParams { pre, post, kernels });
        }
        Ok(MixShiftParams { branches })
    }

    fn check(&self, spec: &MixShiftSpec, channels: usize) -> Result<()> {
        let axes = spec.axis_mode.axes();
        if self.branches.len() != axes.len() {
            return Err(Error::invalid_argument(format!(
                "params have {} branches, axis mode needs {}",
                self.branches.len(),
                axes.len()
            )));
        }
        let widths = group_widths(channels, spec.shifting_size)?;
        for branch in &self.branches {
            if branch.kernels.len() != spec.shifting_size {
                return Err(Error::invalid_argument("one kernel per group required"));
            }
            for ((kernel, &w), &r) in branch.kernels.iter().zip(&widths).zip(&spec.region_sizes) {
                let (kc, kr) = match kernel {
                    GroupKernel::Depthwise(k) => (k.channels, k.region),
                    GroupKernel::Full(k) => (k.in_channels, k.region),
                };
                if kc != w || kr != r {
                    return Err(Error::invalid_argument(format!(
                        "kernel shape ({kc} ch, r={kr}) does not match group (width {w}, r={r})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Slice `x` into the operator's channel groups (chunk widths).
fn chunked_groups(x: &Tensor4, widths: &[usize]) -> Result<Vec<Tensor4>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &w in widths {
        out.push(ops::slice_channels(x, off, w)?);
        off += w;
    }
    Ok(out)
}

/// One branch of the operator along `axis`: optional pre-projection, split,
/// per-group regional convolution, shift each group by `-d_n` to align the
/// mixed centers with the query tokens, concat, optional post-projection.
/// Shape preserving.
pub fn mix_shift_branch(x: &Tensor4, spec: &MixShiftSpec, branch: &BranchParams, axis: Axis) -> Result<Tensor4> {
    spec.validate()?;
    let widths = group_widths(x.channels(), spec.shifting_size)?;

    let cur = match &branch.pre {
        Some(p) => ops::channel_linear(x, p)?,
        None => x.clone(),
    };
    let groups = chunked_groups(&cur, &widths)?;
    let mut mixed = Vec::with_capacity(groups.len());
    for (n, group) in groups.iter().enumerate() {
        let conv = branch.kernels[n].apply(group)?;
        // a group whose center offset exceeds the map degrades to zeros
        mixed.push(ops::shift2d_saturating(&conv, -spec.distances[n], axis));
    }
    let refs: Vec<&Tensor4> = mixed.iter().collect();
    let cat = ops::concat_channels(&refs)?;
    match &branch.post {
        Some(p) => ops::channel_linear(&cat, p),
        None => Ok(cat),
    }
}

/// Full operator forward: single branch, or the sum of an independent
/// horizontal and vertical branch under [`AxisMode::DualBranchSum`].
pub fn mix_shift_forward(x: &Tensor4, spec: &MixShiftSpec, params: &MixShiftParams) -> Result<Tensor4> {
    params.check(spec, x.channels())?;
    let axes = spec.axis_mode.axes();
    let mut acc: Option<Tensor4> = None;
    for (axis, branch) in axes.into_iter().zip(&params.branches) {
        let y = mix_shift_branch(x, spec, branch, axis)?;
        acc = Some(match acc {
            Some(a) => a.add(&y)?,
            None => y,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Tape-resident parameter handles for one branch.
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub pre: Option<Var>,
    pub post: Option<Var>,
    pub kernels: Vec<Var>,
}

/// Tape-resident parameter handles for the whole operator.
#[derive(Debug, Clone)]
pub struct MixShiftVars {
    pub branches: Vec<BranchVars>,
}

impl MixShiftVars {
    /// Record all operator parameters as tape leaves.
    pub fn record(tape: &mut GradTape, params: &MixShiftParams) -> Self {
        let branches = params
            .branches
            .iter()
            .map(|b| BranchVars {
                pre: b.pre.clone().map(|p| tape.param_linear(p)),
                post: b.post.clone().map(|p| tape.param_linear(p)),
                kernels: b
                    .kernels
                    .iter()
                    .map(|k| match k {
                        GroupKernel::Depthwise(k) => tape.param_depthwise(k.clone()),
                        GroupKernel::Full(k) => tape.param_full(k.clone()),
                    })
                    .collect(),
            })
            .collect();
        MixShiftVars { branches }
    }
}

/// [`mix_shift_branch`] recorded on a gradient tape.
pub fn mix_shift_branch_tape(
    tape: &mut GradTape,
    x: Var,
    spec: &MixShiftSpec,
    branch: &BranchVars,
    axis: Axis,
) -> Result<Var> {
    let channels = tape.value(x).channels();
    let widths = group_widths(channels, spec.shifting_size)?;

    let cur = match branch.pre {
        Some(p) => tape.channel_linear(x, p)?,
        None => x,
    };
    let mut mixed = Vec::with_capacity(widths.len());
    let mut off = 0;
    for (n, &w) in widths.iter().enumerate() {
        let group = tape.slice_channels(cur, off, w)?;
        off += w;
        let kernel = branch.kernels[n];
        let conv = match tape_kernel_kind(tape, kernel) {
            ConvType::Dw => tape.depthwise_conv2d(group, kernel)?,
            ConvType::Full => tape.full_conv2d(group, kernel)?,
        };
        mixed.push(tape.shift2d_saturating(conv, -spec.distances[n], axis));
    }
    let cat = tape.concat_channels(&mixed)?;
    match branch.post {
        Some(p) => tape.channel_linear(cat, p),
        None => Ok(cat),
    }
}

fn tape_kernel_kind(tape: &GradTape, v: Var) -> ConvType {
    if tape.is_depthwise_leaf(v) {
        ConvType::Dw
    } else {
        ConvType::Full
    }
}

/// [`mix_shift_forward`] recorded on a gradient tape.
pub fn mix_shift_forward_tape(tape: &mut GradTape, x: Var, spec: &MixShiftSpec, vars: &MixShiftVars) -> Result<Var> {
    let axes = spec.axis_mode.axes();
    if vars.branches.len() != axes.len() {
        return Err(Error::invalid_argument("branch count does not match axis mode"));
    }
    let mut acc: Option<Var> = None;
    for (axis, branch) in axes.into_iter().zip(&vars.branches) {
        let y = mix_shift_branch_tape(tape, x, spec, branch, axis)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Naive per-output-token transcription of the regional mixing definition:
/// for every output token, gather each group's `r_n x r_n` window around the
/// `d_n`-offset center directly, with zero contribution from out-of-range
/// indices (a center outside the map contributes nothing). Verification
/// oracle for [`mix_shift_branch`]; the two must agree to 1e-10.
pub fn mix_shift_reference(x: &Tensor4, spec: &MixShiftSpec, branch: &BranchParams, axis: Axis) -> Result<Tensor4> {
    spec.validate()?;
    let (nb, h, w, c) = x.shape();
    let widths = group_widths(c, spec.shifting_size)?;

    // pre-projection via an explicit per-position matrix-vector loop
    let pre = match &branch.pre {
        Some(p) => {
            if p.in_features != c {
                return Err(Error::invalid_argument("pre-projection width mismatch"));
            }
            let mut y = Tensor4::zeros(nb, h, w, p.out_features);
            for b in 0..nb {
                for i in 0..h {
                    for j in 0..w {
                        for o in 0..p.out_features {
                            let mut acc = p.bias[o];
                            for ci in 0..c {
                                acc += p.w(o, ci) * x.at(b, i, j, ci);
                            }
                            *y.at_mut(b, i, j, o) = acc;
                        }
                    }
                }
            }
            y
        }
        None => x.clone(),
    };

    let mut gathered = Tensor4::zeros(nb, h, w, c);
    let mut group_start = 0usize;
    for (n, &width) in widths.iter().enumerate() {
        let r = spec.region_sizes[n];
        let d = spec.distances[n];
        let pad = (r as i64 - 1) / 2;
        for b in 0..nb {
            for i in 0..h {
                for j in 0..w {
                    // center token of this group's region for query (i, j)
                    let (ci, cj) = match axis {
                        Axis::Vertical => (i as i64 + d, j as i64),
                        Axis::Horizontal => (i as i64, j as i64 + d),
                    };
                    let center_in_range = ci >= 0 && cj >= 0 && ci < h as i64 && cj < w as i64;
                    for local in 0..width {
                        let value = if !center_in_range {
                            0.0
                        } else {
                            match &branch.kernels[n] {
                                GroupKernel::Depthwise(k) => {
                                    let mut acc = k.bias.as_ref().map_or(0.0, |bias| bias[local]);
                                    for u in 0..r {
                                        for v in 0..r {
                                            acc += k.w(local, u, v)
                                                * pre.at_or_zero(
                                                    b,
                                                    ci + u as i64 - pad,
                                                    cj + v as i64 - pad,
                                                    group_start + local,
                                                );
                                        }
                                    }
                                    acc
                                }
                                GroupKernel::Full(k) => {
                                    let mut acc = k.bias.as_ref().map_or(0.0, |bias| bias[local]);
                                    for src in 0..width {
                                        for u in 0..r {
                                            for v in 0..r {
                                                acc += k.w(local, src, u, v)
                                                    * pre.at_or_zero(
                                                        b,
                                                        ci + u as i64 - pad,
                                                        cj + v as i64 - pad,
                                                        group_start + src,
                                                    );
                                            }
                                        }
                                    }
                                    acc
                                }
                            }
                        };
                        *gathered.at_mut(b, i, j, group_start + local) = value;
                    }
                }
            }
        }
        group_start += width;
    }

    // post-projection, again as an explicit loop
    match &branch.post {
        Some(p) => {
            if p.in_features != c {
                return Err(Error::invalid_argument("post-projection width mismatch"));
            }
            let mut y = Tensor4::zeros(nb, h, w, p.out_features);
            for b in 0..nb {
                for i in 0..h {
                    for j in 0..w {
                        for o in 0..p.out_features {
                            let mut acc = p.bias[o];
                            for ci in 0..c {
                                acc += p.w(o, ci) * gathered.at(b, i, j, ci);
                            }
                            *y.at_mut(b, i, j, o) = acc;
                        }
                    }
                }
            }
            Ok(y)
        }
        None => Ok(gathered),
    }
}

/// Reference evaluation of the full operator (all branches, summed).
pub fn mix_shift_reference_forward(x: &Tensor4, spec: &MixShiftSpec, params: &MixShiftParams) -> Result<Tensor4> {
    params.check(spec, x.channels())?;
    let axes = spec.axis_mode.axes();
    let mut acc: Option<Tensor4> = None;
    for (axis, branch) in axes.into_iter().zip(&params.branches) {
        let y = mix_shift_reference(x, spec, branch, axis)?;
        acc = Some(match acc {
            Some(a) => a.add(&y)?,
            None => y,
        });
    }
    Ok(acc.expect("at least one branch"))
}
