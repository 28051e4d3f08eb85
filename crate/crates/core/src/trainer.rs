//! Data/property mutual-mapping training.
//!
//! Each outer iteration runs `N1` steps on labeled data drawn from the
//! replay pool and `N2` steps on self-generated data: targets `y ~ p2(y)`
//! are crossed with prior draws `z ~ p(z)`, decoded, measured by the
//! oracle, penalized, and finally appended to the pool with their true
//! labels `f(x)`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::eval::{self, EvalSettings};
use crate::model::{Architecture, ModelParams};
use crate::objective::{self, ConstraintContext, ConstraintSet, LossBreakdown, LossWeights};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, Rng, Stream};
use crate::synth::measure_properties;
use crate::synth::{
    measure_properties_tape, sample_property_targets, ImageSample, PropertyVector, RangeSpec, Resolution, TargetMode,
};
use crate::tensor::{Tape, Tensor, Var};

/// Ablation switches. Each maps onto plain config changes, see
/// [`TrainConfig::effective`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Full framework.
    None,
    /// Base generator only: no unseen steps, no property or variance loss.
    Base,
    /// No `L4` variance penalty.
    Ours1,
    /// No unseen (self-generated) steps.
    Ours2,
    /// Unseen targets restricted to the in-distribution ranges.
    Ours3,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Ablation::None),
            "base" => Ok(Ablation::Base),
            "ours-1" => Ok(Ablation::Ours1),
            "ours-2" => Ok(Ablation::Ours2),
            "ours-3" => Ok(Ablation::Ours3),
            _ => Err(Error::InvalidArgument(format!("unknown ablation `{s}` (none|base|ours-1|ours-2|ours-3)"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Base => "base",
            Ablation::Ours1 => "ours-1",
            Ablation::Ours2 => "ours-2",
            Ablation::Ours3 => "ours-3",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateSchedule {
    /// One optimizer update after every inner step.
    PerStep,
    /// Sum gradients over all `N1 + N2` inner steps, then update once.
    Accumulate,
}

impl FromStr for UpdateSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(UpdateSchedule::PerStep),
            "accumulate" => Ok(UpdateSchedule::Accumulate),
            _ => Err(Error::InvalidArgument(format!("unknown schedule `{s}` (per-step|accumulate)"))),
        }
    }
}

impl fmt::Display for UpdateSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateSchedule::PerStep => "per-step",
            UpdateSchedule::Accumulate => "accumulate",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Outer iterations `N`.
    pub iterations: usize,
    /// Seen-data steps per iteration `N1`.
    pub seen_steps: usize,
    /// Unseen-data steps per iteration `N2`.
    pub unseen_steps: usize,
    pub learning_rate: f64,
    /// Multiplier on every unseen-branch term.
    pub n_sample: f64,
    pub batch_size: usize,
    /// Targets per unseen step.
    pub grid_y: usize,
    /// Prior draws per target per unseen step.
    pub grid_z: usize,
    /// Draw unseen targets from the union of in-distribution and OOD ranges.
    pub ood_mode: bool,
    pub seed: u64,
    pub weights: LossWeights,
    pub optimizer: OptimizerKind,
    pub schedule: UpdateSchedule,
    pub ablation: Ablation,
    /// Generated-pool capacity as a multiple of the original pool.
    pub capacity_factor: usize,
    /// Posterior samples per datum in seen steps.
    pub posterior_samples: usize,
    pub ranges: RangeSpec,
    /// Snapshot cadence in iterations; 0 snapshots only the final iteration.
    pub eval_every: usize,
    pub snapshot: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            seen_steps: 1,
            unseen_steps: 1,
            learning_rate: 1e-3,
            n_sample: 1.0,
            batch_size: 32,
            grid_y: 8,
            grid_z: 4,
            ood_mode: true,
            seed: 0,
            weights: LossWeights::default(),
            optimizer: OptimizerKind::Adam,
            schedule: UpdateSchedule::PerStep,
            ablation: Ablation::None,
            capacity_factor: 4,
            posterior_samples: 1,
            ranges: RangeSpec::default(),
            eval_every: 0,
            snapshot: EvalSettings::snapshot(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && self.seen_steps + self.unseen_steps == 0 {
            return Err(Error::config("training.seen_steps", "N1 + N2 must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("training.learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if self.posterior_samples == 0 {
            return Err(Error::config("training.posterior_samples", "must be at least 1"));
        }
        if !(self.n_sample >= 0.0) {
            return Err(Error::config("training.n_sample", "must be >= 0"));
        }
        self.weights.validate()
    }

    /// The configuration actually trained after applying the ablation.
    pub fn effective(&self) -> TrainConfig {
        let mut c = self.clone();
        match self.ablation {
            Ablation::None => {}
            Ablation::Base => {
                c.unseen_steps = 0;
                c.weights.alpha = 0.0;
                c.weights.xi = 0.0;
            }
            Ablation::Ours1 => c.weights.xi = 0.0,
            Ablation::Ours2 => c.unseen_steps = 0,
            Ablation::Ours3 => c.ood_mode = false,
        }
        c
    }

    pub fn target_mode(&self) -> TargetMode {
        if self.ood_mode {
            TargetMode::Union
        } else {
            TargetMode::InDist
        }
    }
}

/// The growing labeled pool `D`: original samples plus a FIFO of
/// self-generated, oracle-labeled ones.
#[derive(Clone, Debug)]
pub struct ReplayDataset {
    original: Vec<ImageSample>,
    generated: VecDeque<ImageSample>,
    capacity: usize,
    resolution: Resolution,
}

impl ReplayDataset {
    pub fn new(original: Vec<ImageSample>, resolution: Resolution, capacity_factor: usize) -> Result<Self> {
        if original.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(bad) = original.iter().find(|s| s.pixels.len() != resolution.pixels()) {
            return Err(Error::LengthMismatch { expected: resolution.pixels(), got: bad.pixels.len() });
        }
        let capacity = capacity_factor * original.len();
        Ok(ReplayDataset { original, generated: VecDeque::new(), capacity, resolution })
    }

    pub fn original(&self) -> &[ImageSample] {
        &self.original
    }

    pub fn generated(&self) -> impl Iterator<Item = &ImageSample> {
        self.generated.iter()
    }

    pub fn generated_len(&self) -> usize {
        self.generated.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.original.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn push_generated(&mut self, sample: ImageSample) {
        if self.capacity == 0 {
            return;
        }
        if self.generated.len() == self.capacity {
            self.generated.pop_front();
        }
        self.generated.push_back(sample);
    }

    pub fn get(&self, i: usize) -> &ImageSample {
        if i < self.original.len() {
            &self.original[i]
        } else {
            &self.generated[i - self.original.len()]
        }
    }

    /// Uniform draws with replacement over original and generated samples.
    pub fn sample_batch(&self, rng: &mut Rng, n: usize) -> Vec<&ImageSample> {
        let len = self.len();
        (0..n).map(|_| self.get(rng.random_range(0..len))).collect()
    }

    /// Recompute the oracle for every generated sample; labels must match
    /// bit for bit.
    pub fn verify_labels(&self) -> Result<()> {
        for (i, s) in self.generated.iter().enumerate() {
            if s.label != measure_properties(&s.pixels, self.resolution) {
                return Err(Error::InvalidArgument(format!("generated sample {i} has a stale label")));
            }
        }
        Ok(())
    }
}

/// Loss values and parameter gradients of one inner step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor>,
}

fn batch_tensor(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend(r);
        n += 1;
    }
    Tensor::new(vec![n, cols], data)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

/// Adds `c * v` onto an optional running total.
fn add_weighted(tape: &mut Tape, total: Option<Var>, v: Var, c: f64) -> Result<Option<Var>> {
    if c == 0.0 {
        return Ok(total);
    }
    let term = if c == 1.0 { v } else { tape.scale(v, c)? };
    Ok(Some(match total {
        Some(t) => tape.add(t, term)?,
        None => term,
    }))
}

/// One labeled-data step: `L1 + alpha * L2_seen + beta * L3 + sum c_i C_i`.
pub fn step_seen(
    model: &ModelParams,
    batch: &[&ImageSample],
    weights: &LossWeights,
    posterior_samples: usize,
    rng: &mut Rng,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let arch = model.arch();
    let res = arch.resolution;
    let reps = posterior_samples.max(1);
    let n = batch.len() * reps;
    let rows = || (0..reps).flat_map(|_| batch.iter());

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let x = tape.constant(batch_tensor(rows().map(|s| s.pixels.clone()), res.pixels())?);
    let y = tape.constant(batch_tensor(rows().map(|s| s.label.as_slice().to_vec()), arch.num_properties)?);

    let post = model.encode_tape(&mut tape, &bound, x, y)?;
    let noise = Tensor::matrix(n, arch.latent_dim(), rng::normal_vec(rng, n * arch.latent_dim()))?;
    let (z, w_enc) = model.reparameterize_tape(&mut tape, post, noise)?;
    let w = if arch.kind.w_is_y() { model.property_encode_tape(&mut tape, &bound, y)? } else { w_enc };
    let x_hat = model.decode_tape(&mut tape, &bound, z, w)?;

    let l1 = objective::mse_tape(&mut tape, x, x_hat)?;
    let f_hat = measure_properties_tape(&mut tape, x_hat, res)?;
    let l2 = objective::mse_tape(&mut tape, f_hat, y)?;
    // Tied kinds never consume the encoder's w block, so only z is regularized.
    let (mu, ls) = if arch.kind.w_is_y() {
        (tape.slice(post.mu, 1, 0, arch.dim_z)?, tape.slice(post.log_sigma, 1, 0, arch.dim_z)?)
    } else {
        (post.mu, post.log_sigma)
    };
    let l3 = objective::kl_tape(&mut tape, mu, ls)?;

    let set = ConstraintSet::for_kind(arch.kind);
    let mapped_y = if arch.kind.w_is_y() { None } else { Some(model.property_encode_tape(&mut tape, &bound, y)?) };
    let ctx = ConstraintContext { z, w, y, mapped_y };
    let penalties = objective::constraint_penalties(&mut tape, &set, &ctx)?;

    let mut total = Some(l1);
    total = add_weighted(&mut tape, total, l2, weights.alpha)?;
    total = add_weighted(&mut tape, total, l3, weights.beta)?;
    for (i, (_, p)) in penalties.iter().enumerate() {
        total = add_weighted(&mut tape, total, *p, weights.constraint_weight(i))?;
    }
    let total = total.expect("L1 always present");

    let grads = tape.backward(total)?;
    let grads = bound.vars.iter().zip(model.tensors()).map(|(&v, t)| grads.wrt(v, t)).collect();
    let breakdown = LossBreakdown {
        l1: scalar(&tape, l1),
        l2_seen: scalar(&tape, l2),
        l3: scalar(&tape, l3),
        constraint_penalties: penalties.iter().map(|(id, v)| (id.clone(), scalar(&tape, *v))).collect(),
        total: scalar(&tape, total),
        ..LossBreakdown::default()
    };
    Ok(StepOutput { breakdown, grads })
}

/// Output of an unseen step: the step itself plus the oracle-labeled
/// samples to append to the pool.
#[derive(Clone, Debug)]
pub struct UnseenOutput {
    pub step: StepOutput,
    pub generated: Vec<ImageSample>,
}

/// One self-generated-data step over the grid `targets x z_draws`:
/// `n_sample * (L1_unseen + alpha * L2_unseen + xi * (var_y + var_z))`.
pub fn step_unseen(
    model: &ModelParams,
    targets: &[PropertyVector],
    z_draws: &[Vec<f64>],
    weights: &LossWeights,
    n_sample: f64,
) -> Result<UnseenOutput> {
    let (n_y, n_z) = (targets.len(), z_draws.len());
    if n_y < 2 || n_z < 2 {
        return Err(Error::GridTooSmall { n_y, n_z });
    }
    let arch = model.arch();
    let res = arch.resolution;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let y_rows = targets.iter().flat_map(|y| std::iter::repeat_n(y.as_slice().to_vec(), n_z));
    let z_rows = (0..n_y).flat_map(|_| z_draws.iter().cloned());
    let y = tape.constant(batch_tensor(y_rows, arch.num_properties)?);
    let z = tape.constant(batch_tensor(z_rows, arch.dim_z)?);

    let w = model.property_encode_tape(&mut tape, &bound, y)?;
    let x = model.decode_tape(&mut tape, &bound, z, w)?;
    let fx = measure_properties_tape(&mut tape, x, res)?;
    let l2 = objective::mse_tape(&mut tape, fx, y)?;

    // Re-encode the generated data: [h(x, y)]_z feeds L4, g(h(x, y)) feeds L1.
    let post = model.encode_tape(&mut tape, &bound, x, y)?;
    let (z_enc, w_enc) = model.split_latent(&mut tape, post.mu)?;
    let (var_y, var_z) = objective::disentangle_tape(&mut tape, fx, z_enc, n_y, n_z)?;
    let w_re = if arch.kind.w_is_y() { y } else { w_enc };
    let x_re = model.decode_tape(&mut tape, &bound, z_enc, w_re)?;
    let l1 = objective::mse_tape(&mut tape, x, x_re)?;

    let mut total = add_weighted(&mut tape, None, l1, n_sample)?;
    total = add_weighted(&mut tape, total, l2, n_sample * weights.alpha)?;
    total = add_weighted(&mut tape, total, var_y, n_sample * weights.xi)?;
    total = add_weighted(&mut tape, total, var_z, n_sample * weights.xi)?;
    let total = match total {
        Some(t) => t,
        None => tape.scalar(0.0),
    };

    let grads = tape.backward(total)?;
    let grads = bound.vars.iter().zip(model.tensors()).map(|(&v, t)| grads.wrt(v, t)).collect();
    let breakdown = LossBreakdown {
        l1: n_sample * scalar(&tape, l1),
        l2_unseen: n_sample * scalar(&tape, l2),
        l4_var_y: n_sample * scalar(&tape, var_y),
        l4_var_z: n_sample * scalar(&tape, var_z),
        total: scalar(&tape, total),
        ..LossBreakdown::default()
    };
    let generated =
        tape.value(x).data().chunks(res.pixels()).map(|px| ImageSample::generated(px.to_vec(), res)).collect();
    Ok(UnseenOutput { step: StepOutput { breakdown, grads }, generated })
}

/// Averaged loss breakdown of one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
}

/// One evaluation snapshot, a row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    pub prop_mse_id: f64,
    pub prop_mse_ood: f64,
    pub disetg1: f64,
    pub disetg2: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,l1,l2_seen,l2_unseen,l3,l4_var_y,l4_var_z,total,prop_mse_id,prop_mse_ood,disetg1,disetg2";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            b.l1,
            b.l2_seen,
            b.l2_unseen,
            b.l3,
            b.l4_var_y,
            b.l4_var_z,
            b.total,
            self.prop_mse_id,
            self.prop_mse_ood,
            self.disetg1,
            self.disetg2
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub iterations: Vec<IterationLog>,
    pub snapshots: Vec<MetricsRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for row in &self.snapshots {
            out.push_str(&row.csv());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: TrainLog,
}

/// Cold start: initialize from `arch` and the config seed, then train.
pub fn run_training(data: &mut ReplayDataset, arch: Architecture, config: &TrainConfig) -> Result<TrainOutcome> {
    let model = ModelParams::init(arch, config.seed)?;
    train_from(model, data, config)
}

/// Continue training an existing model; its architecture must equal `arch`.
pub fn warm_start(
    base: ModelParams,
    arch: &Architecture,
    data: &mut ReplayDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if base.arch() != arch {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint `{}` vs config `{}`",
            base.arch().descriptor(),
            arch.descriptor()
        )));
    }
    train_from(base, data, config)
}

fn train_from(mut model: ModelParams, data: &mut ReplayDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if data.resolution() != model.arch().resolution {
        return Err(Error::ArchitectureMismatch("dataset resolution differs from model".into()));
    }
    let cfg = config.effective();
    let mut rng = rng::stream(cfg.seed, Stream::Training);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut log = TrainLog::default();
    let mode = cfg.target_mode();

    for t in 1..=cfg.iterations {
        let mut sum = LossBreakdown::default();
        let mut accumulated: Option<Vec<Tensor>> = None;
        let mut apply = |model: &mut ModelParams, grads: Vec<Tensor>| match cfg.schedule {
            UpdateSchedule::PerStep => opt.step(model.tensors_mut(), &grads),
            UpdateSchedule::Accumulate => match accumulated.as_mut() {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
                None => accumulated = Some(grads),
            },
        };

        for _ in 0..cfg.seen_steps {
            let batch = data.sample_batch(&mut rng, cfg.batch_size);
            let out = step_seen(&model, &batch, &cfg.weights, cfg.posterior_samples, &mut rng)?;
            sum.accumulate(&out.breakdown);
            apply(&mut model, out.grads);
        }
        for _ in 0..cfg.unseen_steps {
            let targets = sample_property_targets(&cfg.ranges, mode, cfg.grid_y, &mut rng);
            let z_draws: Vec<Vec<f64>> =
                (0..cfg.grid_z).map(|_| rng::normal_vec(&mut rng, model.arch().dim_z)).collect();
            let out = step_unseen(&model, &targets, &z_draws, &cfg.weights, cfg.n_sample)?;
            sum.accumulate(&out.step.breakdown);
            apply(&mut model, out.step.grads);
            for s in out.generated {
                data.push_generated(s);
            }
        }
        if let Some(grads) = accumulated {
            opt.step(model.tensors_mut(), &grads);
        }

        let steps = (cfg.seen_steps + cfg.unseen_steps) as f64;
        let breakdown = sum.scaled(1.0 / steps);
        let snapshot_due = (cfg.eval_every > 0 && t % cfg.eval_every == 0) || t == cfg.iterations;
        if snapshot_due {
            log.snapshots.push(snapshot(&model, t, &breakdown, &cfg)?);
        }
        log.iterations.push(IterationLog { iteration: t, breakdown });
    }
    Ok(TrainOutcome { model, log })
}

fn snapshot(model: &ModelParams, iteration: usize, breakdown: &LossBreakdown, cfg: &TrainConfig) -> Result<MetricsRow> {
    let s = &cfg.snapshot;
    let mut rng = rng::stream(cfg.seed, Stream::Evaluation);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let id_targets = sample_property_targets(&cfg.ranges, TargetMode::InDist, s.n_targets, &mut rng);
    let prop_mse_id = mean(eval::eval_property_mse(model, &id_targets, s.n_z, &mut rng)?);
    let ood_targets = sample_property_targets(&cfg.ranges, TargetMode::Ood, s.n_targets, &mut rng);
    let prop_mse_ood = mean(eval::eval_property_mse(model, &ood_targets, s.n_z, &mut rng)?);
    let (disetg1, disetg2) =
        eval::eval_disentanglement(model, &cfg.ranges, TargetMode::InDist, s.grid_y, s.grid_z, &mut rng)?;
    Ok(MetricsRow { iteration, breakdown: breakdown.clone(), prop_mse_id, prop_mse_ood, disetg1, disetg2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, BaseGeneratorKind};
    use crate::synth::{generate_dataset, Origin};
    use crate::tensor::gradcheck;

    fn tiny_arch(kind: BaseGeneratorKind) -> Architecture {
        Architecture {
            kind,
            resolution: Resolution { h: 8, w: 8 },
            dim_z: 2,
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            property_hidden: vec![4],
            activation: Activation::Tanh,
            ..Architecture::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<ImageSample> {
        let ranges = RangeSpec::desk();
        generate_dataset(n, &ranges, Resolution { h: 8, w: 8 }, 1, 16).unwrap().train
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 2,
            batch_size: 4,
            grid_y: 2,
            grid_z: 2,
            snapshot: EvalSettings { n_targets: 4, n_z: 2, grid_y: 2, grid_z: 2, sigma_p: 0.1 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn seen_step_total_is_composed_from_parts() {
        for kind in BaseGeneratorKind::ALL {
            let model = ModelParams::init(tiny_arch(kind), 1).unwrap();
            let data = tiny_data(20);
            let batch: Vec<&ImageSample> = data.iter().take(6).collect();
            let w = LossWeights { alpha: 3.0, beta: 0.5, xi: 2.0, constraint_weights: vec![0.7, 1.3] };
            let mut rng = rng::stream(1, Stream::Training);
            let out = step_seen(&model, &batch, &w, 1, &mut rng).unwrap();
            let b = &out.breakdown;
            assert!((b.compose(&w) - b.total).abs() < 1e-12, "{kind}");
            assert!(b.l1 >= 0.0 && b.l2_seen >= 0.0 && b.l3 >= 0.0);
            assert!(b.constraint_penalties.iter().all(|(_, v)| *v >= 0.0));
        }
    }

    #[test]
    fn empty_seen_batch() {
        let model = ModelParams::init(tiny_arch(BaseGeneratorKind::SemiVae), 1).unwrap();
        let mut rng = rng::stream(1, Stream::Training);
        assert!(matches!(step_seen(&model, &[], &LossWeights::default(), 1, &mut rng), Err(Error::EmptyBatch)));
    }

    #[test]
    fn seen_step_is_deterministic() {
        let model = ModelParams::init(tiny_arch(BaseGeneratorKind::SemiVae), 1).unwrap();
        let data = tiny_data(20);
        let batch: Vec<&ImageSample> = data.iter().take(5).collect();
        let run = || {
            let mut rng = rng::stream(4, Stream::Training);
            step_seen(&model, &batch, &LossWeights::default(), 1, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.breakdown, b.breakdown);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn recon_only_weights_reduce_to_vae_recon_step() {
        let model = ModelParams::init(tiny_arch(BaseGeneratorKind::SemiVae), 1).unwrap();
        let data = tiny_data(20);
        let batch: Vec<&ImageSample> = data.iter().take(5).collect();
        let w = LossWeights { alpha: 0.0, beta: 0.0, xi: 0.0, constraint_weights: vec![0.0, 0.0] };
        let mut rng = rng::stream(4, Stream::Training);
        let out = step_seen(&model, &batch, &w, 1, &mut rng).unwrap();
        assert_eq!(out.breakdown.total, out.breakdown.l1);
    }

    #[test]
    fn seen_step_gradient_matches_finite_differences() {
        // 2-pixel-wide toy would break the oracle's 8x8 minimum, so use the
        // smallest legal frame with a handful of hidden units.
        let arch = tiny_arch(BaseGeneratorKind::PcVae);
        let model = ModelParams::init(arch.clone(), 5).unwrap();
        let data = tiny_data(10);
        let batch: Vec<&ImageSample> = data.iter().take(3).collect();
        let w = LossWeights { alpha: 2.0, beta: 0.3, xi: 0.0, constraint_weights: vec![] };
        let noise_seed = 12;
        let analytic = {
            let mut rng = rng::stream(noise_seed, Stream::Training);
            step_seen(&model, &batch, &w, 1, &mut rng).unwrap()
        };
        let loss_at = |m: &ModelParams| {
            let mut rng = rng::stream(noise_seed, Stream::Training);
            step_seen(m, &batch, &w, 1, &mut rng).unwrap().breakdown.total
        };
        let h = 1e-5;
        // Probe a few entries of every block.
        for (bi, t) in model.tensors().iter().enumerate() {
            for k in [0, t.len() / 2, t.len() - 1] {
                let mut up = model.clone();
                up.tensors_mut()[bi].data_mut()[k] += h;
                let mut down = model.clone();
                down.tensors_mut()[bi].data_mut()[k] -= h;
                let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
                let a = analytic.grads[bi].data()[k];
                assert!(
                    gradcheck::agrees(a, numeric, gradcheck::REL_TOL),
                    "{} [{k}]: analytic {a} numeric {numeric}",
                    model.names()[bi]
                );
            }
        }
    }

    #[test]
    fn unseen_step_contract() {
        let model = ModelParams::init(tiny_arch(BaseGeneratorKind::SemiVae), 1).unwrap();
        let ys = vec![PropertyVector::new(vec![0.1, 0.3, 0.5]); 3];
        let zs = vec![vec![0.1, -0.2], vec![1.0, 0.4]];
        let out = step_unseen(&model, &ys, &zs, &LossWeights::default(), 1.0).unwrap();
        assert_eq!(out.generated.len(), 6);
        for s in &out.generated {
            assert_eq!(s.origin, Origin::Generated);
            assert_eq!(s.label, measure_properties(&s.pixels, Resolution { h: 8, w: 8 }));
        }
        let b = &out.step.breakdown;
        assert!((b.compose(&LossWeights::default()) - b.total).abs() < 1e-12);

        assert!(matches!(
            step_unseen(&model, &ys[..1], &zs, &LossWeights::default(), 1.0),
            Err(Error::GridTooSmall { .. })
        ));
        assert!(matches!(
            step_unseen(&model, &ys, &zs[..1], &LossWeights::default(), 1.0),
            Err(Error::GridTooSmall { .. })
        ));
    }

    #[test]
    fn replay_pool_counts_and_fifo() {
        let data = tiny_data(10);
        let n = data.len();
        let mut pool = ReplayDataset::new(data, Resolution { h: 8, w: 8 }, 1).unwrap();
        assert_eq!(pool.capacity(), n);
        for i in 0..n + 3 {
            pool.push_generated(ImageSample::generated(vec![i as f64 / 100.0; 64], Resolution { h: 8, w: 8 }));
        }
        assert_eq!(pool.generated_len(), n);
        assert_eq!(pool.generated().next().unwrap().pixels[0], 3.0 / 100.0);
        pool.verify_labels().unwrap();
        assert!(ReplayDataset::new(vec![], Resolution { h: 8, w: 8 }, 4).is_err());
    }

    #[test]
    fn generated_pool_size_after_training() {
        let mut pool = ReplayDataset::new(tiny_data(30), Resolution { h: 8, w: 8 }, 4).unwrap();
        let cfg = TrainConfig { iterations: 2, unseen_steps: 1, ..tiny_config() };
        run_training(&mut pool, tiny_arch(BaseGeneratorKind::SemiVae), &cfg).unwrap();
        assert_eq!(pool.generated_len(), 8);
        pool.verify_labels().unwrap();
    }

    #[test]
    fn no_unseen_steps_keeps_pool_empty() {
        let mut pool = ReplayDataset::new(tiny_data(30), Resolution { h: 8, w: 8 }, 4).unwrap();
        let cfg = TrainConfig { unseen_steps: 0, ..tiny_config() };
        run_training(&mut pool, tiny_arch(BaseGeneratorKind::SemiVae), &cfg).unwrap();
        assert_eq!(pool.generated_len(), 0);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let run = || {
            let mut pool = ReplayDataset::new(tiny_data(30), Resolution { h: 8, w: 8 }, 4).unwrap();
            run_training(&mut pool, tiny_arch(BaseGeneratorKind::PcVae), &tiny_config()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn schedules_differ() {
        let run = |schedule| {
            let mut pool = ReplayDataset::new(tiny_data(30), Resolution { h: 8, w: 8 }, 4).unwrap();
            let cfg = TrainConfig { schedule, ..tiny_config() };
            run_training(&mut pool, tiny_arch(BaseGeneratorKind::SemiVae), &cfg).unwrap().model
        };
        assert_ne!(run(UpdateSchedule::PerStep), run(UpdateSchedule::Accumulate));
    }

    #[test]
    fn warm_start_with_zero_iterations_is_identity() {
        let arch = tiny_arch(BaseGeneratorKind::SemiVae);
        let base = ModelParams::init(arch.clone(), 9).unwrap();
        let mut pool = ReplayDataset::new(tiny_data(30), Resolution { h: 8, w: 8 }, 4).unwrap();
        let cfg = TrainConfig { iterations: 0, ..tiny_config() };
        let out = warm_start(base.clone(), &arch, &mut pool, &cfg).unwrap();
        assert_eq!(out.model, base);

        let other = Architecture { dim_z: 3, ..arch.clone() };
        assert!(matches!(warm_start(base, &other, &mut pool, &cfg), Err(Error::ArchitectureMismatch(_))));
    }

    #[test]
    fn ablations_map_to_config() {
        let base = TrainConfig::default();
        let e = |a| TrainConfig { ablation: a, ..base.clone() }.effective();
        assert_eq!(e(Ablation::Ours1).weights.xi, 0.0);
        assert_eq!(e(Ablation::Ours2).unseen_steps, 0);
        assert!(!e(Ablation::Ours3).ood_mode);
        assert_eq!(e(Ablation::Ours3).target_mode(), TargetMode::InDist);
        let b = e(Ablation::Base);
        assert_eq!((b.unseen_steps, b.weights.alpha, b.weights.xi), (0, 0.0, 0.0));
        assert_eq!(e(Ablation::None), base);
    }

    #[test]
    fn metrics_csv_layout() {
        let mut pool = ReplayDataset::new(tiny_data(30), Resolution { h: 8, w: 8 }, 4).unwrap();
        let cfg = TrainConfig { eval_every: 1, ..tiny_config() };
        let out = run_training(&mut pool, tiny_arch(BaseGeneratorKind::SemiVae), &cfg).unwrap();
        let csv = out.log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').count(), 12);
    }
}
