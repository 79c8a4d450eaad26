//! `msmlp` — command-line harness for the mix-shift MLP library.
//!
//! Subcommands: `flops`, `params`, `gradcheck`, `oracle`, `bench`, `train`,
//! `presets`. Exit codes: 0 success, 1 check failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msmlp::bench::{fit_scaling, records_to_csv, run_scaling_sweep, BenchOp};
use msmlp::flops::{count_flops, count_params};
use msmlp::gradcheck::{check_model_gradients, check_primitive_gradients};
use msmlp::mixshift::{group_widths, mix_shift_forward, mix_shift_reference_forward, AxisMode, ConvType, MixShiftParams, MixShiftSpec, ProjectionMode};
use msmlp::model::Model;
use msmlp::presets::{preset, PRESET_NAMES};
use msmlp::train::{make_synthetic_task, train_loop, SyntheticTask, TrainConfig};
use msmlp::Tensor4;

#[derive(Parser)]
#[command(name = "msmlp", version, about = "Mix-shift MLP operators, models, and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer MAC and parameter report for a preset.
    Flops {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 224)]
        image_size: usize,
        /// Write the per-layer report as CSV (layer,name,macs,params).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print a JSON summary {total_macs, total_params} instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Parameter totals for a preset.
    Params {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient verification (primitives + tiny-desk model).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tolerance for the whole-model check; primitives use tol/10.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Cross-validate the operator against its naive reference on random cases.
    Oracle {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Wall-time scaling sweep of a benchmark operator.
    Bench {
        /// One of: mix-shift, axial-shift, global-mix.
        #[arg(long)]
        op: String,
        /// Comma-separated sizes, e.g. 28x28,56x56,112x112.
        #[arg(long)]
        sizes: String,
        #[arg(long, default_value_t = 96)]
        channels: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Data-parallel evaluation threads (1 = sequential; timings are
        /// stablest single-threaded).
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Train a preset on the synthetic square-texture task.
    Train {
        #[arg(long, default_value = "tiny-desk")]
        preset: String,
        #[arg(long, default_value_t = 700)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Write the metrics history as CSV (step,loss,acc).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Save the trained model checkpoint here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// List the available presets.
    Presets,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                msmlp::Error::InvalidArgument(_) | msmlp::Error::UnknownName(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> msmlp::Result<bool> {
    match command {
        Command::Flops {
            preset: name,
            image_size,
            csv,
            json,
        } => {
            let spec = preset(&name)?;
            let report = count_flops(&spec, image_size)?;
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())?;
                eprintln!("wrote {} layers to {}", report.rows.len(), path.display());
            }
            if json {
                println!("{}", report.summary_json());
            } else {
                println!(
                    "{name} @ {image_size}x{image_size}: {:.2}M params, {:.2}G MACs ({} layers)",
                    report.total_params as f64 / 1e6,
                    report.total_macs as f64 / 1e9,
                    report.rows.len()
                );
                println!("convention: 1 FLOP = 1 MAC; projections/convs/embeddings/head counted, norms+activations excluded");
            }
            Ok(true)
        }
        Command::Params { preset: name, json } => {
            let spec = preset(&name)?;
            let report = count_params(&spec)?;
            if json {
                println!("{}", report.summary_json());
            } else {
                println!("{name}: {} parameters ({:.2}M)", report.total_params, report.total_params as f64 / 1e6);
            }
            Ok(true)
        }
        Command::Gradcheck { seed, tol } => {
            let prim_tol = tol / 10.0;
            let mut worst_prim: f64 = 0.0;
            for s in seed..seed + 3 {
                worst_prim = worst_prim.max(check_primitive_gradients(s)?);
            }
            println!("primitives: max rel err {worst_prim:.3e} (tol {prim_tol:.1e})");

            let spec = preset("tiny-desk")?;
            let model = Model::build(&spec, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let images = Tensor4::random(1, spec.image_size, spec.image_size, spec.in_channels, 0.0, 1.0, &mut rng);
            let report = check_model_gradients(&model, &images, 10, seed)?;
            println!(
                "tiny-desk model: max rel err {:.3e} (tol {tol:.1e}), worst tensor `{}`",
                report.max_err, report.worst_param
            );

            let pass = worst_prim < prim_tol && report.max_err < tol;
            println!("gradcheck: {}", if pass { "OK" } else { "FAILED" });
            Ok(pass)
        }
        Command::Oracle { cases, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            let mut ran = 0usize;
            while ran < cases {
                let h = rng.random_range(3..=11);
                let w = rng.random_range(3..=11);
                let s = rng.random_range(1..=6usize);
                let c = rng.random_range(s.max(2)..=18);
                if group_widths(c, s).is_err() {
                    continue;
                }
                let mut d = vec![0i64];
                let mut r = vec![1usize];
                for _ in 1..s {
                    d.push(rng.random_range(-5..=5));
                    r.push([1, 3, 5, 7][rng.random_range(0..4)]);
                }
                let spec = MixShiftSpec {
                    shifting_size: s,
                    distances: d,
                    region_sizes: r,
                    axis_mode: [AxisMode::HorizontalOnly, AxisMode::VerticalOnly, AxisMode::DualBranchSum]
                        [rng.random_range(0..3)],
                    conv_type: if rng.random_range(0..2) == 0 { ConvType::Dw } else { ConvType::Full },
                    projection: [ProjectionMode::None, ProjectionMode::Post, ProjectionMode::PrePost]
                        [rng.random_range(0..3)],
                };
                if spec.validate().is_err() {
                    continue;
                }
                let params = MixShiftParams::random(&spec, c, 0.8, &mut rng)?;
                let x = Tensor4::random(1, h, w, c, -1.0, 1.0, &mut rng);
                let fast = mix_shift_forward(&x, &spec, &params)?;
                let slow = mix_shift_reference_forward(&x, &spec, &params)?;
                worst = worst.max(fast.max_abs_diff(&slow));
                ran += 1;
            }
            let pass = worst <= 1e-10;
            println!("oracle: {ran} cases, max |optimized - reference| = {worst:.3e} (bound 1e-10): {}",
                if pass { "OK" } else { "FAILED" });
            Ok(pass)
        }
        Command::Bench {
            op,
            sizes,
            channels,
            reps,
            threads,
            csv,
            json,
        } => {
            let op = BenchOp::parse(&op)?;
            let parsed_sizes = parse_sizes(&sizes)?;
            let records = run_scaling_sweep(op, &parsed_sizes, channels, reps, threads)?;
            if let Some(path) = &csv {
                std::fs::write(path, records_to_csv(&records))?;
                eprintln!("wrote {} records to {}", records.len(), path.display());
            }
            let fit = if records.len() >= 4 { fit_scaling(&records).ok() } else { None };
            if json {
                let fit_json = fit.map(|f| {
                    serde_json::json!({"slope": f.slope, "intercept": f.intercept, "r_squared": f.r_squared})
                });
                println!(
                    "{}",
                    serde_json::json!({
                        "op": op.name(),
                        "threads": threads,
                        "records": records.iter().map(|r| serde_json::json!({
                            "h": r.h, "w": r.w, "c": r.c, "reps": r.reps,
                            "median_s": r.median_s, "macs": r.macs as u64,
                        })).collect::<Vec<_>>(),
                        "fit": fit_json,
                    })
                );
            } else {
                println!("op={} threads={threads}", op.name());
                for r in &records {
                    println!("  {}x{} c={}: median {:.6}s ({} MACs)", r.h, r.w, r.c, r.median_s, r.macs);
                }
                if let Some(f) = fit {
                    println!("  log-log slope {:.3} (R^2 {:.4})", f.slope, f.r_squared);
                }
            }
            Ok(true)
        }
        Command::Train {
            preset: name,
            steps,
            seed,
            lr,
            samples,
            csv,
            checkpoint,
        } => {
            let mut spec = preset(&name)?;
            if spec.num_classes != 8 {
                eprintln!("note: retargeting {name}'s head from {} to the task's 8 classes", spec.num_classes);
                spec.num_classes = 8;
            }
            let task = SyntheticTask {
                image_size: spec.image_size,
                num_classes: 8,
                seed,
                samples,
            };
            let data = make_synthetic_task(&task)?;
            let mut model = Model::build(&spec, seed)?;
            let cfg = TrainConfig {
                steps,
                batch_size: 16,
                lr,
                seed,
                ..Default::default()
            };
            let history = train_loop(&mut model, &data, &cfg)?;
            if let Some(path) = &csv {
                std::fs::write(path, history.to_csv())?;
                eprintln!("wrote {} steps to {}", history.steps.len(), path.display());
            }
            if let Some(path) = &checkpoint {
                msmlp::checkpoint::save_model_to_path(&model, path)?;
                eprintln!("saved checkpoint to {}", path.display());
            }
            let last = history.steps.last().expect("at least one step");
            println!(
                "trained {name} for {} steps: final loss {:.4}, train accuracy {:.1}%",
                history.steps.len(),
                last.loss,
                history.final_train_accuracy * 100.0
            );
            Ok(true)
        }
        Command::Presets => {
            for name in PRESET_NAMES {
                let spec = preset(name)?;
                let blocks: Vec<String> = spec.stages.iter().map(|s| s.num_blocks.to_string()).collect();
                let channels: Vec<String> = spec.stages.iter().map(|s| s.out_channels.to_string()).collect();
                println!(
                    "{name}: image {}, classes {}, blocks {}, channels {}",
                    spec.image_size,
                    spec.num_classes,
                    blocks.join("-"),
                    channels.join("/")
                );
            }
            Ok(true)
        }
    }
}

fn parse_sizes(arg: &str) -> msmlp::Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for part in arg.split(',') {
        let (h, w) = part
            .split_once('x')
            .ok_or_else(|| msmlp::Error::InvalidArgument(format!("size `{part}` is not HxW")))?;
        let h = h
            .trim()
            .parse()
            .map_err(|_| msmlp::Error::InvalidArgument(format!("bad height in `{part}`")))?;
        let w = w
            .trim()
            .parse()
            .map_err(|_| msmlp::Error::InvalidArgument(format!("bad width in `{part}`")))?;
        out.push((h, w));
    }
    Ok(out)
}
