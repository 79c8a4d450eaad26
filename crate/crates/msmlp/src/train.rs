//! Desk-scale training: AdamW, cross-entropy, a synthetic classification
//! task, and the training loop that overfits it.
//!
//! The synthetic task stands in for large-scale benchmarks: each image holds
//! one bright textured square whose class combines a *local* cue (the
//! square's checkerboard phase) with a *global* cue (which quadrant it sits
//! in), so solving it exercises both fine-grained and long-range mixing.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model};
use crate::params::FlatParam;
use crate::tape::Gradients;
use crate::tensor::Tensor4;

// ---------------------------------------------------------------------------
// AdamW

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW update on a flat parameter buffer.
///
/// Decoupled decay shrinks the parameter before the moment term is applied;
/// the moment estimates are bias-corrected with the 1-based step count `t`.
pub fn adamw_step(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWParams,
) -> Result<()> {
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(Error::invalid_argument(format!(
            "adamw_step buffer length mismatch: theta {}, grad {}, m {}, v {}",
            theta.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::invalid_argument("adamw_step step count is 1-based"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        theta[i] -= lr * cfg.weight_decay * theta[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Per-parameter-tensor optimizer state for a whole model.
#[derive(Debug)]
pub struct OptimState {
    pub cfg: AdamWParams,
    pub step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new(model: &Model, cfg: AdamWParams) -> Self {
        let mut moments = Vec::new();
        model.visit_params(&mut |_, p| {
            moments.push((vec![0.0; p.flat_len()], vec![0.0; p.flat_len()]));
        });
        OptimState {
            cfg,
            step: 0,
            moments,
        }
    }

    /// Apply one update across the model. `grads` must be in
    /// [`Model::visit_params`] order (see [`collect_grads`]).
    pub fn apply(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.moments.len() {
            return Err(Error::invalid_argument(format!(
                "gradient tensor count {} does not match optimizer state {}",
                grads.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        let step = self.step;
        let cfg = self.cfg;
        let mut idx = 0;
        let mut failure: Option<Error> = None;
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |_, p| {
            if failure.is_some() {
                return;
            }
            let mut flat = p.to_flat();
            let (m, v) = &mut moments[idx];
            if let Err(e) = adamw_step(&mut flat, &grads[idx], m, v, step, lr, &cfg) {
                failure = Some(e);
                return;
            }
            p.write_from_flat(&flat);
            idx += 1;
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Flatten tape gradients into [`Model::visit_params`] order, zero-filling
/// tensors no path reached (e.g. branches dropped by stochastic depth).
pub fn collect_grads(model: &Model, bindings: &[(String, crate::tape::Var)], grads: &Gradients) -> Vec<Vec<f64>> {
    let mut by_name: std::collections::HashMap<&str, &crate::tape::Var> = std::collections::HashMap::new();
    for (name, var) in bindings {
        by_name.insert(name.as_str(), var);
    }
    let mut out = Vec::with_capacity(bindings.len());
    model.visit_params(&mut |name, p| {
        let flat = by_name
            .get(name)
            .and_then(|var| grads.get(**var))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.flat_len()]);
        debug_assert_eq!(flat.len(), p.flat_len(), "gradient length for {name}");
        out.push(flat);
    });
    out
}

// ---------------------------------------------------------------------------
// cross-entropy

/// Mean cross-entropy over the batch plus the logits gradient
/// `(softmax - onehot) / batch`, stabilized by max-subtraction.
/// `logits` has shape `(n, 1, 1, classes)`.
pub fn cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let (n, h, w, k) = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::invalid_argument("cross_entropy expects (n, 1, 1, classes) logits"));
    }
    if labels.len() != n {
        return Err(Error::invalid_argument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= k {
            return Err(Error::invalid_argument(format!("label {l} out of range for {k} classes")));
        }
    }

    let mut grad = Tensor4::zeros(n, 1, 1, k);
    let mut total = 0.0;
    for b in 0..n {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - row[labels[b]];
        let grow = &mut grad.data_mut()[b * k..(b + 1) * k];
        for (i, z) in row.iter().enumerate() {
            let softmax = (z - max).exp() / sum_exp;
            grow[i] = (softmax - if i == labels[b] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor4, labels: &[usize]) -> f64 {
    let rows = logits.rows();
    let mut correct = 0usize;
    for (row, &label) in rows.iter().zip(labels) {
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

// ---------------------------------------------------------------------------
// synthetic task

/// Generator description for the square-texture classification task.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTask {
    pub image_size: usize,
    /// Must be 8: four quadrants times two texture parities.
    pub num_classes: usize,
    pub seed: u64,
    pub samples: usize,
}

/// A materialized dataset: images `(samples, s, s, 3)` plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a batch by sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let (_, h, w, c) = self.images.shape();
        let stride = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor4::from_vec(indices.len(), h, w, c, data).expect("batch shape"),
            labels,
        )
    }
}

/// Generate the dataset. Classes cycle round-robin so the label distribution
/// is uniform to within one sample; images are deterministic for a fixed
/// seed.
///
/// Per sample: the *brightest* square (an `s/4 x s/4` checkerboard at 1.0) is
/// placed at a random position inside the class's quadrant with the class's
/// parity bit as its phase. Three half-brightness decoy squares with random
/// positions and phases, a distractor texture with an independent random
/// phase per quadrant, pixel noise, and whole-image brightness jitter make
/// the label a function of *which square is brightest* — a reading that needs
/// brightness gating before phase detection, so no fixed raw-pixel template
/// recovers it.
pub fn make_synthetic_task(task: &SyntheticTask) -> Result<Dataset> {
    if task.num_classes != 8 {
        return Err(Error::invalid_argument(
            "synthetic task encodes 4 quadrants x 2 parities: num_classes must be 8",
        ));
    }
    let s = task.image_size;
    if s < 8 || !s.is_multiple_of(4) {
        return Err(Error::invalid_argument("image size must be >= 8 and divisible by 4"));
    }
    if task.samples == 0 {
        return Err(Error::invalid_argument("need >= 1 sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let half = s / 2;
    let square = s / 4;
    let channel_gain = [1.0, 0.8, 0.6];
    let overlaps = |a: (usize, usize), b: (usize, usize)| {
        a.0 < b.0 + square && b.0 < a.0 + square && a.1 < b.1 + square && b.1 < a.1 + square
    };

    let mut images = Tensor4::zeros(task.samples, s, s, 3);
    let mut labels = Vec::with_capacity(task.samples);
    for sample in 0..task.samples {
        let class = sample % 8;
        let quadrant = class / 2;
        let parity = class % 2;
        labels.push(class);

        let (qi, qj) = (quadrant / 2, quadrant % 2);
        let max_off = half - square;
        let target = (
            qi * half + rng.random_range(0..=max_off),
            qj * half + rng.random_range(0..=max_off),
        );

        // dim decoy squares anywhere that does not touch the target
        let mut decoys: Vec<((usize, usize), usize)> = Vec::new();
        while decoys.len() < 3 {
            let pos = (rng.random_range(0..=s - square), rng.random_range(0..=s - square));
            let phase = rng.random_range(0..2usize);
            if !overlaps(pos, target) {
                decoys.push((pos, phase));
            }
        }

        let quadrant_phase: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..2usize));
        let jitter = rng.random_range(0.7..1.3);

        // checkerboard with 2x2-pixel cells, phase relative to the square's
        // own corner: any fixed pixel template sees phase XOR position
        // parity, so the cue is not linearly readable
        let board = |i: usize, j: usize, corner: (usize, usize), phase: usize| {
            let (u, v) = (i - corner.0, j - corner.1);
            (u / 2 + v / 2 + phase).is_multiple_of(2)
        };

        for i in 0..s {
            for j in 0..s {
                let in_target = i >= target.0 && i < target.0 + square && j >= target.1 && j < target.1 + square;
                let decoy = decoys
                    .iter()
                    .find(|(pos, _)| i >= pos.0 && i < pos.0 + square && j >= pos.1 && j < pos.1 + square);
                let base = if in_target {
                    if board(i, j, target, parity) {
                        1.0
                    } else {
                        0.3
                    }
                } else if let Some((pos, phase)) = decoy {
                    if board(i, j, *pos, *phase) {
                        0.5
                    } else {
                        0.15
                    }
                } else {
                    let q = (i / half).min(1) * 2 + (j / half).min(1);
                    let tex = if (i / 2 + j / 2 + quadrant_phase[q]).is_multiple_of(2) { 0.15 } else { 0.0 };
                    tex + rng.random_range(-0.05..0.05)
                };
                for (ch, gain) in channel_gain.iter().enumerate() {
                    *images.at_mut(sample, i, j, ch) = base * gain * jitter;
                }
            }
        }
    }
    Ok(Dataset { images, labels })
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optim: AdamWParams,
    /// Fraction of steps spent in linear warm-up before cosine decay.
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 16,
            lr: 1e-3,
            optim: AdamWParams::default(),
            warmup_frac: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub steps: Vec<StepMetrics>,
    /// Whole-dataset accuracy in eval mode after the last step.
    pub final_train_accuracy: f64,
}

impl TrainHistory {
    /// `step,loss,acc` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,acc\n");
        for m in &self.steps {
            out.push_str(&format!("{},{},{}\n", m.step, m.loss, m.batch_accuracy));
        }
        out
    }

    /// Parse the [`TrainHistory::to_csv`] format into
    /// `(step, loss, accuracy)` rows.
    pub fn parse_csv(csv: &str) -> Result<Vec<(usize, f64, f64)>> {
        let mut lines = csv.lines();
        let header = lines.next().ok_or_else(|| Error::invalid_argument("empty metrics CSV"))?;
        if header != "step,loss,acc" {
            return Err(Error::invalid_argument(format!("unexpected metrics CSV header `{header}`")));
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::invalid_argument(format!(
                    "metrics CSV line {}: expected 3 columns",
                    lineno + 2
                )));
            }
            let bad = |field: &str| Error::invalid_argument(format!("metrics CSV line {}: bad {field}", lineno + 2));
            rows.push((
                cols[0].parse().map_err(|_| bad("step"))?,
                cols[1].parse().map_err(|_| bad("loss"))?,
                cols[2].parse().map_err(|_| bad("acc"))?,
            ));
        }
        Ok(rows)
    }
}

/// Cosine decay with linear warm-up over the first `warmup_frac` of steps.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let warm = ((cfg.steps as f64 * cfg.warmup_frac).ceil() as usize).max(1);
    if step < warm {
        cfg.lr * (step + 1) as f64 / warm as f64
    } else if cfg.steps <= warm {
        cfg.lr
    } else {
        let progress = (step - warm) as f64 / (cfg.steps - warm) as f64;
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Train `model` on `data`. Deterministic given the config seed; aborts with
/// a diagnostic if the loss stops being finite.
pub fn train_loop(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    if data.is_empty() {
        return Err(Error::invalid_argument("empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut optim = OptimState::new(model, cfg.optim);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        // full-batch when the batch covers the dataset, sampled otherwise
        let indices: Vec<usize> = if cfg.batch_size >= data.len() {
            (0..data.len()).collect()
        } else {
            (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect()
        };
        let (images, labels) = data.batch(&indices);

        let fwd = model.forward_tape(&images, ForwardMode::Train { rng: &mut drop_rng })?;
        let logits = fwd.tape.value(fwd.logits);
        let (loss, grad_seed) = cross_entropy(logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::invalid_state(format!(
                "non-finite loss {loss} at step {step}; aborting training"
            )));
        }
        let batch_acc = accuracy(logits, &labels);
        let grads = fwd.tape.backward(fwd.logits, &grad_seed)?;
        let flat = collect_grads(model, &fwd.params, &grads);
        let lr = lr_at_step(step, cfg);
        optim.apply(model, &flat, lr)?;

        history.push(StepMetrics {
            step,
            loss,
            batch_accuracy: batch_acc,
            lr,
        });
    }

    let logits = model.forward(&data.images)?;
    let final_train_accuracy = accuracy(&logits, &data.labels);
    Ok(TrainHistory {
        steps: history,
        final_train_accuracy,
    })
}

/// Train a single linear layer on raw pixels with the same optimizer recipe,
/// returning `(train accuracy, held-out accuracy)`.
///
/// The reference point showing the synthetic task is not linearly *solvable*:
/// with far fewer samples than raw-pixel dimensions a linear model always
/// memorizes its training set, so the informative number is the held-out
/// accuracy, which stays low because the texture-parity cue has no
/// position-independent linear detector.
pub fn linear_probe_accuracy_split(
    train: &Dataset,
    heldout: &Dataset,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let (n, h, w, c) = train.images.shape();
    let dim = h * w * c;
    let classes = train.labels.iter().max().unwrap() + 1;
    let flat_images = Tensor4::from_vec(n, 1, 1, dim, train.images.data().to_vec())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = crate::params::LinearWeights::zeros(dim, classes);
    for v in weights.weight.iter_mut() {
        *v = rng.random_range(-0.01..0.01);
    }
    let cfg = AdamWParams::default();
    let mut m = vec![0.0; weights.flat_len()];
    let mut v = vec![0.0; weights.flat_len()];

    let batch = 32.min(n);
    for step in 0..steps {
        let indices: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let stride = dim;
        let mut data_buf = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            data_buf.extend_from_slice(&flat_images.data()[i * stride..(i + 1) * stride]);
            labels.push(train.labels[i]);
        }
        let xb = Tensor4::from_vec(indices.len(), 1, 1, dim, data_buf)?;

        let logits = crate::ops::channel_linear(&xb, &weights)?;
        let (_, grad_seed) = cross_entropy(&logits, &labels)?;
        let (_, dw) = crate::ops::channel_linear_vjp(&xb, &weights, &grad_seed);

        let mut flat = weights.to_flat();
        adamw_step(&mut flat, &dw, &mut m, &mut v, step as u64 + 1, lr, &cfg)?;
        weights.write_from_flat(&flat);
    }

    let train_logits = crate::ops::channel_linear(&flat_images, &weights)?;
    let train_acc = accuracy(&train_logits, &train.labels);

    let (hn, ..) = heldout.images.shape();
    let held_flat = Tensor4::from_vec(hn, 1, 1, dim, heldout.images.data().to_vec())?;
    let held_logits = crate::ops::channel_linear(&held_flat, &weights)?;
    let held_acc = accuracy(&held_logits, &heldout.labels);
    Ok((train_acc, held_acc))
}
