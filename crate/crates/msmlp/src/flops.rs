//! Analytic complexity formulas and exact multiply-accumulate / parameter
//! counting.
//!
//! Counting conventions (fixed, documented here and in the README):
//! - 1 FLOP = 1 MAC; multiplies and adds are not double-counted;
//! - linear projection: `positions * C_in * C_out`;
//! - depthwise group convolution: `positions * sum_n width_n * r_n^2`
//!   per branch (full conv: `width_n^2 * r_n^2`);
//! - patch embedding: `(H/p)(W/p) * (p^2 C_in) * C_out`;
//! - normalizations, activations, shifts, residual adds, and pooling are
//!   excluded;
//! - counts are per single image and exact integers.

use crate::error::{Error, Result};
use crate::mixshift::{ConvType, ProjectionMode};
use crate::model::ModelSpec;

/// Token-interaction methods with closed-form complexity expressions.
///
/// The attention rows (`Msa`, `WMsa`, `FMsa`) and `GlobalMix` are full
/// operation counts in `H, W, C` (and window size `M`); `AxialShift` and
/// `MixShift` are *per-token per-channel-group factors* (`S` and
/// `sum_n r_n^2`) — the published comparison mixes these units, and the
/// calculator exposes the expressions verbatim rather than reconciling them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Msa,
    WMsa,
    FMsa,
    GlobalMix,
    AxialShift,
    MixShift,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        Ok(match name {
            "msa" => Method::Msa,
            "w-msa" => Method::WMsa,
            "f-msa" => Method::FMsa,
            "global-mix" => Method::GlobalMix,
            "axial-shift" => Method::AxialShift,
            "mix-shift" => Method::MixShift,
            other => return Err(Error::UnknownName(other.to_string())),
        })
    }
}

/// Inputs to [`complexity_formula`]. Only the fields the chosen method reads
/// need to be present.
#[derive(Debug, Clone, Default)]
pub struct ComplexityQuery {
    pub method: Option<Method>,
    pub h: Option<u64>,
    pub w: Option<u64>,
    pub c: Option<u64>,
    /// Window size, for the windowed attention methods.
    pub m: Option<u64>,
    /// Shifting size / focal level count.
    pub s: Option<u64>,
    /// Region sizes per group.
    pub r: Option<Vec<u64>>,
}

impl ComplexityQuery {
    fn need(&self, field: Option<u64>, name: &str) -> Result<u64> {
        field.ok_or_else(|| Error::invalid_argument(format!("complexity query missing field `{name}`")))
    }

    fn need_r(&self) -> Result<&[u64]> {
        self.r
            .as_deref()
            .ok_or_else(|| Error::invalid_argument("complexity query missing field `r`"))
    }
}

/// Evaluate the closed-form cost expression of a method, constants as
/// published: `MSA -> 2(HW)^2 C`, `W-MSA -> 2 M^2 HWC`,
/// `F-MSA -> (S + sum r_n^2) M HWC`, `global-mix -> (HW)^2 C`,
/// `axial-shift -> S`, `mix-shift -> sum r_n^2`.
pub fn complexity_formula(q: &ComplexityQuery) -> Result<u128> {
    let method = q
        .method
        .ok_or_else(|| Error::invalid_argument("complexity query missing field `method`"))?;
    Ok(match method {
        Method::Msa => {
            let (h, w, c) = (q.need(q.h, "h")?, q.need(q.w, "w")?, q.need(q.c, "c")?);
            let hw = (h as u128) * (w as u128);
            2 * hw * hw * c as u128
        }
        Method::WMsa => {
            let (h, w, c, m) = (q.need(q.h, "h")?, q.need(q.w, "w")?, q.need(q.c, "c")?, q.need(q.m, "m")?);
            2 * (m as u128) * (m as u128) * (h as u128) * (w as u128) * (c as u128)
        }
        Method::FMsa => {
            let (h, w, c, m) = (q.need(q.h, "h")?, q.need(q.w, "w")?, q.need(q.c, "c")?, q.need(q.m, "m")?);
            let s = q.need(q.s, "s")?;
            let sum_r2: u128 = q.need_r()?.iter().map(|&r| (r as u128) * (r as u128)).sum();
            (s as u128 + sum_r2) * (m as u128) * (h as u128) * (w as u128) * (c as u128)
        }
        Method::GlobalMix => {
            let (h, w, c) = (q.need(q.h, "h")?, q.need(q.w, "w")?, q.need(q.c, "c")?);
            let hw = (h as u128) * (w as u128);
            hw * hw * c as u128
        }
        Method::AxialShift => q.need(q.s, "s")? as u128,
        Method::MixShift => q.need_r()?.iter().map(|&r| (r as u128) * (r as u128)).sum(),
    })
}

/// One costed layer of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

/// Per-layer multiply-accumulate and parameter tallies. Totals always equal
/// the sum of the rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub rows: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl FlopsReport {
    fn from_rows(rows: Vec<LayerCost>) -> FlopsReport {
        let total_macs = rows.iter().map(|r| r.macs).sum();
        let total_params = rows.iter().map(|r| r.params).sum();
        FlopsReport {
            rows,
            total_macs,
            total_params,
        }
    }

    /// `layer,name,macs,params` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,name,macs,params\n");
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i, row.name, row.macs, row.params));
        }
        out
    }

    /// Parse the [`FlopsReport::to_csv`] format back into a report.
    pub fn from_csv(csv: &str) -> Result<FlopsReport> {
        let mut lines = csv.lines();
        let header = lines.next().ok_or_else(|| Error::invalid_argument("empty report CSV"))?;
        if header != "layer,name,macs,params" {
            return Err(Error::invalid_argument(format!("unexpected report CSV header `{header}`")));
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::invalid_argument(format!(
                    "report CSV line {}: expected 4 columns, got {}",
                    lineno + 2,
                    cols.len()
                )));
            }
            let bad = |field: &str| Error::invalid_argument(format!("report CSV line {}: bad {field}", lineno + 2));
            rows.push(LayerCost {
                name: cols[1].to_string(),
                macs: cols[2].parse().map_err(|_| bad("macs"))?,
                params: cols[3].parse().map_err(|_| bad("params"))?,
            });
        }
        Ok(FlopsReport::from_rows(rows))
    }

    /// `{"total_macs": .., "total_params": ..}`.
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "total_macs": self.total_macs,
            "total_params": self.total_params,
        })
        .to_string()
    }
}

fn linear_params(cin: u64, cout: u64) -> u64 {
    cin * cout + cout
}

/// Kernel parameter/MAC helper: per-group totals for one branch.
struct GroupCosts {
    params: u64,
    macs_per_position: u64,
}

fn group_costs(widths: &[usize], regions: &[usize], conv: ConvType) -> GroupCosts {
    let mut params = 0u64;
    let mut macs = 0u64;
    for (&w, &r) in widths.iter().zip(regions) {
        let (w, r) = (w as u64, r as u64);
        match conv {
            ConvType::Dw => {
                params += w * r * r + w; // + bias
                macs += w * r * r;
            }
            ConvType::Full => {
                params += w * w * r * r + w;
                macs += w * w * r * r;
            }
        }
    }
    GroupCosts {
        params,
        macs_per_position: macs,
    }
}

/// Exact per-layer parameter and MAC report for a model at a given input
/// image size. The stored-parameter count of a built model equals
/// `total_params` exactly.
pub fn count_flops(spec: &ModelSpec, image_size: usize) -> Result<FlopsReport> {
    spec.validate()?;
    let reduction: usize = spec.stages.iter().map(|s| s.patch_ratio).product();
    if !image_size.is_multiple_of(reduction) {
        return Err(Error::invalid_argument(format!(
            "image size {image_size} not divisible by total patch reduction {reduction}"
        )));
    }

    let mut rows = Vec::new();
    let mut side = image_size as u64;
    let mut cin = spec.in_channels as u64;

    for (si, stage) in spec.stages.iter().enumerate() {
        let p = stage.patch_ratio as u64;
        side /= p;
        let positions = side * side;
        let c = stage.out_channels as u64;

        rows.push(LayerCost {
            name: format!("stages.{si}.embed"),
            macs: positions * (p * p * cin) * c,
            params: linear_params(p * p * cin, c),
        });

        let widths = crate::mixshift::group_widths(stage.out_channels, stage.mixshift.shifting_size)?;
        let branches = stage.mixshift.axis_mode.axes().len() as u64;
        let kernels = group_costs(&widths, &stage.mixshift.region_sizes, stage.mixshift.conv_type);
        let (proj_count, _) = match stage.mixshift.projection {
            ProjectionMode::None => (0u64, ()),
            ProjectionMode::Post => (1, ()),
            ProjectionMode::PrePost => (2, ()),
        };

        for bi in 0..stage.num_blocks {
            let prefix = format!("stages.{si}.blocks.{bi}");
            rows.push(LayerCost {
                name: format!("{prefix}.norm1"),
                macs: 0,
                params: 2 * c,
            });
            rows.push(LayerCost {
                name: format!("{prefix}.mix"),
                macs: branches * positions * (kernels.macs_per_position + proj_count * c * c),
                params: branches * (kernels.params + proj_count * linear_params(c, c)),
            });
            rows.push(LayerCost {
                name: format!("{prefix}.norm2"),
                macs: 0,
                params: 2 * c,
            });
            let hidden = c * spec.mlp_ratio as u64;
            rows.push(LayerCost {
                name: format!("{prefix}.mlp.fc1"),
                macs: positions * c * hidden,
                params: linear_params(c, hidden),
            });
            rows.push(LayerCost {
                name: format!("{prefix}.mlp.fc2"),
                macs: positions * hidden * c,
                params: linear_params(hidden, c),
            });
        }
        cin = c;
    }

    rows.push(LayerCost {
        name: "final_norm".to_string(),
        macs: 0,
        params: 2 * cin,
    });
    rows.push(LayerCost {
        name: "head".to_string(),
        macs: cin * spec.num_classes as u64,
        params: linear_params(cin, spec.num_classes as u64),
    });

    Ok(FlopsReport::from_rows(rows))
}

/// Parameter-only report (the MAC column is zeroed). `total_params` equals
/// the number of scalars a built model stores, exactly.
pub fn count_params(spec: &ModelSpec) -> Result<FlopsReport> {
    let full = count_flops(spec, spec.image_size)?;
    let rows = full
        .rows
        .into_iter()
        .map(|r| LayerCost {
            name: r.name,
            macs: 0,
            params: r.params,
        })
        .collect();
    Ok(FlopsReport::from_rows(rows))
}
