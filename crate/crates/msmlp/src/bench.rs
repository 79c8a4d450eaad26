//! Operator scaling benchmarks: wall-time sweeps over token counts, log-log
//! slope fits, and a round-trippable CSV record format.
//!
//! Three benchmark operators:
//! - `mix-shift` — one horizontal branch of the regional-mixing operator
//!   (S=5, d=[0..4], r=[1,1,3,5,7], depthwise, no projections), Θ(HW) work
//!   per channel group;
//! - `axial-shift` — channel-group shifting only, no multiplies (its MACs
//!   column is 0);
//! - `global-mix` — a matrix-free all-token mixing reference
//!   (`out[p] = sum_q coef[(p+q) mod HW] * x[q]` per channel), Θ((HW)^2)
//!   work with O(HW) memory, standing in for a learned token-mixing matrix
//!   that would not fit in memory at large HW.
//!
//! Timings are medians over `reps >= 3` runs after one warm-up; inputs are
//! deterministic for a fixed internal seed, so only the wall times vary
//! between invocations.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixshift::{group_widths, mix_shift_branch, AxisMode, GroupKernel, MixShiftParams, MixShiftSpec};
use crate::ops;
use crate::tensor::{Axis, Tensor4};

/// One measured point of a scaling sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRecord {
    pub op: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub reps: usize,
    pub median_s: f64,
    pub macs: u128,
}

/// Least-squares fit of `ln(time)` against `ln(HW)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Benchmarkable operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    MixShift,
    AxialShift,
    GlobalMix,
}

impl BenchOp {
    pub fn parse(name: &str) -> Result<BenchOp> {
        Ok(match name {
            "mix-shift" => BenchOp::MixShift,
            "axial-shift" => BenchOp::AxialShift,
            "global-mix" => BenchOp::GlobalMix,
            other => return Err(Error::UnknownName(other.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::MixShift => "mix-shift",
            BenchOp::AxialShift => "axial-shift",
            BenchOp::GlobalMix => "global-mix",
        }
    }
}

const BENCH_DISTANCES: [i64; 5] = [0, 1, 2, 3, 4];
const BENCH_REGIONS: [usize; 5] = [1, 1, 3, 5, 7];

fn bench_spec() -> MixShiftSpec {
    MixShiftSpec {
        shifting_size: 5,
        distances: BENCH_DISTANCES.to_vec(),
        region_sizes: BENCH_REGIONS.to_vec(),
        axis_mode: AxisMode::HorizontalOnly,
        conv_type: crate::mixshift::ConvType::Dw,
        projection: crate::mixshift::ProjectionMode::None,
    }
}

/// Analytic MAC count of one benchmark evaluation.
fn op_macs(op: BenchOp, h: usize, w: usize, c: usize) -> Result<u128> {
    let hw = (h * w) as u128;
    Ok(match op {
        BenchOp::MixShift => {
            let widths = group_widths(c, 5)?;
            let per_pos: u128 = widths
                .iter()
                .zip(BENCH_REGIONS.iter())
                .map(|(&wd, &r)| (wd * r * r) as u128)
                .sum();
            hw * per_pos
        }
        BenchOp::AxialShift => 0,
        BenchOp::GlobalMix => hw * hw * c as u128,
    })
}

/// Matrix-free global token mixing: a circulant coefficient pattern applied
/// per channel, evaluated naively in Θ((HW)^2) time. `threads` chunks the
/// output rows across scoped threads.
fn global_mix_circulant(x: &Tensor4, coef: &[f64], threads: usize) -> Tensor4 {
    let (n, h, w, c) = x.shape();
    let hw = h * w;
    debug_assert_eq!(coef.len(), hw);
    let mut out = Tensor4::zeros(n, h, w, c);

    // gather per-channel planes so the hot loop is contiguous
    for b in 0..n {
        for ch in 0..c {
            let mut plane = vec![0.0f64; hw];
            for (p, v) in plane.iter_mut().enumerate() {
                *v = x.data()[(b * hw + p) * c + ch];
            }
            let mut result = vec![0.0f64; hw];
            let chunk = hw.div_ceil(threads.max(1));
            std::thread::scope(|scope| {
                for (t, slot) in result.chunks_mut(chunk).enumerate() {
                    let plane = &plane;
                    let start = t * chunk;
                    scope.spawn(move || {
                        for (local, out_v) in slot.iter_mut().enumerate() {
                            let p = start + local;
                            let mut acc = 0.0;
                            for (q, xv) in plane.iter().enumerate() {
                                let mut k = p + q;
                                if k >= hw {
                                    k -= hw;
                                }
                                acc += coef[k] * xv;
                            }
                            *out_v = acc;
                        }
                    });
                }
            });
            for (p, v) in result.iter().enumerate() {
                out.data_mut()[(b * hw + p) * c + ch] = *v;
            }
        }
    }
    out
}

/// Pure multi-offset channel-group shift (the r=1 limit of the operator).
fn axial_shift_op(x: &Tensor4) -> Result<Tensor4> {
    let widths = group_widths(x.channels(), 5)?;
    let mut off = 0;
    let mut parts = Vec::new();
    for (n, &wd) in widths.iter().enumerate() {
        let group = ops::slice_channels(x, off, wd)?;
        off += wd;
        parts.push(ops::shift2d_saturating(&group, -BENCH_DISTANCES[n], Axis::Horizontal));
    }
    let refs: Vec<&Tensor4> = parts.iter().collect();
    ops::concat_channels(&refs)
}

/// Parallel variant of the benchmark mix-shift branch: channel groups are
/// convolved and shifted on scoped threads, then concatenated.
fn mix_shift_parallel(x: &Tensor4, spec: &MixShiftSpec, params: &MixShiftParams, threads: usize) -> Result<Tensor4> {
    if threads <= 1 {
        return mix_shift_branch(x, spec, &params.branches[0], Axis::Horizontal);
    }
    let widths = group_widths(x.channels(), spec.shifting_size)?;
    let mut groups = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &wd in &widths {
        groups.push(ops::slice_channels(x, off, wd)?);
        off += wd;
    }
    let branch = &params.branches[0];
    let mut mixed: Vec<Option<Tensor4>> = vec![None; groups.len()];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (n, group) in groups.iter().enumerate() {
            let kernel = &branch.kernels[n];
            let d = spec.distances[n];
            handles.push(scope.spawn(move || {
                let conv = match kernel {
                    GroupKernel::Depthwise(k) => ops::depthwise_conv2d(group, k),
                    GroupKernel::Full(k) => ops::full_conv2d(group, k),
                };
                conv.map(|c| ops::shift2d_saturating(&c, -d, Axis::Horizontal))
            }));
        }
        for (slot, handle) in mixed.iter_mut().zip(handles) {
            *slot = handle.join().expect("bench worker panicked").ok();
        }
    });
    let parts: Vec<Tensor4> = mixed.into_iter().map(|p| p.expect("group result")).collect();
    let refs: Vec<&Tensor4> = parts.iter().collect();
    ops::concat_channels(&refs)
}

/// Run a timing sweep of `op` over distinct `(h, w)` sizes at channel width
/// `c`. One warm-up evaluation precedes `reps >= 3` timed evaluations per
/// size; the median is recorded. `threads > 1` enables the data-parallel
/// evaluation path.
pub fn run_scaling_sweep(
    op: BenchOp,
    sizes: &[(usize, usize)],
    c: usize,
    reps: usize,
    threads: usize,
) -> Result<Vec<ScalingRecord>> {
    if reps < 3 {
        return Err(Error::invalid_argument("need >= 3 repetitions"));
    }
    if sizes.is_empty() {
        return Err(Error::invalid_argument("need >= 1 size"));
    }
    for (i, a) in sizes.iter().enumerate() {
        for b in &sizes[i + 1..] {
            if a == b {
                return Err(Error::invalid_argument(format!("duplicate size {}x{}", a.0, a.1)));
            }
        }
    }

    let mut records = Vec::with_capacity(sizes.len());
    for &(h, w) in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ ((h as u64) << 20) ^ w as u64);
        let x = Tensor4::random(1, h, w, c, -1.0, 1.0, &mut rng);

        let spec = bench_spec();
        let params = match op {
            BenchOp::MixShift => Some(MixShiftParams::random(&spec, c, 0.5, &mut rng)?),
            _ => None,
        };
        let coef: Vec<f64> = match op {
            BenchOp::GlobalMix => (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
            _ => Vec::new(),
        };

        let run = || -> Result<f64> {
            let out = match op {
                BenchOp::MixShift => mix_shift_parallel(&x, &spec, params.as_ref().unwrap(), threads)?,
                BenchOp::AxialShift => axial_shift_op(&x)?,
                BenchOp::GlobalMix => global_mix_circulant(&x, &coef, threads),
            };
            // touch the output so the evaluation cannot be elided
            Ok(out.data().iter().sum())
        };

        std::hint::black_box(run()?); // warm-up
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            std::hint::black_box(run()?);
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_s = times[times.len() / 2].max(f64::MIN_POSITIVE);

        records.push(ScalingRecord {
            op: op.name().to_string(),
            h,
            w,
            c,
            reps,
            median_s,
            macs: op_macs(op, h, w, c)?,
        });
    }
    Ok(records)
}

/// Least squares of `ln(median_s)` on `ln(HW)` over >= 4 records with
/// distinct token counts.
pub fn fit_scaling(records: &[ScalingRecord]) -> Result<FitResult> {
    if records.len() < 4 {
        return Err(Error::invalid_argument(format!(
            "need >= 4 records to fit a slope, got {}",
            records.len()
        )));
    }
    let xs: Vec<f64> = records.iter().map(|r| ((r.h * r.w) as f64).ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.median_s.ln()).collect();
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid_argument("all records share one size; slope is undefined"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let pred = intercept + slope * x;
            (y - pred) * (y - pred)
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
    })
}

/// `op,h,w,c,reps,median_s,macs` CSV with a header row. `f64` values print
/// in Rust's shortest round-trippable form.
pub fn records_to_csv(records: &[ScalingRecord]) -> String {
    let mut out = String::from("op,h,w,c,reps,median_s,macs\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.op, r.h, r.w, r.c, r.reps, r.median_s, r.macs
        ));
    }
    out
}

/// Parse the [`records_to_csv`] format (header row required).
pub fn records_from_csv(csv: &str) -> Result<Vec<ScalingRecord>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid_argument("empty scaling CSV"))?;
    if header != "op,h,w,c,reps,median_s,macs" {
        return Err(Error::invalid_argument(format!("unexpected scaling CSV header `{header}`")));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::invalid_argument(format!(
                "scaling CSV line {}: expected 7 columns, got {}",
                lineno + 2,
                cols.len()
            )));
        }
        let parse_err = |field: &str| Error::invalid_argument(format!("scaling CSV line {}: bad {field}", lineno + 2));
        records.push(ScalingRecord {
            op: cols[0].to_string(),
            h: cols[1].parse().map_err(|_| parse_err("h"))?,
            w: cols[2].parse().map_err(|_| parse_err("w"))?,
            c: cols[3].parse().map_err(|_| parse_err("c"))?,
            reps: cols[4].parse().map_err(|_| parse_err("reps"))?,
            median_s: cols[5].parse().map_err(|_| parse_err("median_s"))?,
            macs: cols[6].parse().map_err(|_| parse_err("macs"))?,
        });
    }
    Ok(records)
}

use rand::Rng;
