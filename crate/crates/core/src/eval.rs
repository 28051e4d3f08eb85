//! Evaluation: property controllability, disentanglement, generation
//! quality, interpolation grids and the alpha trade-off curve.
//!
//! Every function here only reads the model.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats;
use crate::model::{Architecture, ModelParams};
use crate::objective;
use crate::rng::{self, Rng, Stream};
use crate::synth::{
    measure_properties, sample_property_targets, ImageSample, PropertyVector, RangeSpec, Resolution, TargetMode,
};
use crate::trainer::{run_training, warm_start, Ablation, ReplayDataset, TrainConfig};

/// What evaluation needs from a generative model. Implemented by
/// [`ModelParams`]; tests plug in closed-form stubs.
pub trait Generator {
    fn resolution(&self) -> Resolution;
    fn dim_z(&self) -> usize;
    /// `g(z_i, m(y_i))` for paired rows.
    fn generate(&self, ys: &[PropertyVector], zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
    /// `[h(x_i, y_i)]_z`, the posterior-mean z block.
    fn encode_z(&self, xs: &[Vec<f64>], ys: &[PropertyVector]) -> Result<Vec<Vec<f64>>>;
    /// Deterministic reconstruction from the posterior mean.
    fn reconstruct(&self, xs: &[Vec<f64>], ys: &[PropertyVector]) -> Result<Vec<Vec<f64>>>;
}

impl Generator for ModelParams {
    fn resolution(&self) -> Resolution {
        self.arch().resolution
    }

    fn dim_z(&self) -> usize {
        self.arch().dim_z
    }

    fn generate(&self, ys: &[PropertyVector], zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.generate_batch(ys, zs)
    }

    fn encode_z(&self, xs: &[Vec<f64>], ys: &[PropertyVector]) -> Result<Vec<Vec<f64>>> {
        let dz = self.arch().dim_z;
        Ok(self
            .encode_batch(xs, ys)?
            .into_iter()
            .map(|mut r| {
                r.truncate(dz);
                r
            })
            .collect())
    }

    fn reconstruct(&self, xs: &[Vec<f64>], ys: &[PropertyVector]) -> Result<Vec<Vec<f64>>> {
        self.reconstruct_batch(xs, ys)
    }
}

/// Sizes of the Monte-Carlo estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// Targets for the property MSE.
    pub n_targets: usize,
    /// Prior draws per target for the property MSE.
    pub n_z: usize,
    pub grid_y: usize,
    pub grid_z: usize,
    /// Decoder scale used for the reported NLL.
    pub sigma_p: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_targets: 200, n_z: 8, grid_y: 10, grid_z: 10, sigma_p: 0.1 }
    }
}

impl EvalSettings {
    /// Cheap settings for in-training snapshots.
    pub fn snapshot() -> Self {
        EvalSettings { n_targets: 50, n_z: 4, grid_y: 6, grid_z: 6, sigma_p: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_targets == 0 || self.n_z == 0 {
            return Err(Error::config("eval.n_targets", "n_targets and n_z must be at least 1"));
        }
        if self.grid_y < 2 || self.grid_z < 2 {
            return Err(Error::GridTooSmall { n_y: self.grid_y, n_z: self.grid_z });
        }
        if !(self.sigma_p > 0.0) {
            return Err(Error::config("eval.sigma_p", "must be > 0"));
        }
        Ok(())
    }
}

/// Targets drawn from one mode's intervals; every draw is checked to lie
/// inside them.
pub fn draw_targets(ranges: &RangeSpec, mode: TargetMode, n: usize, rng: &mut Rng) -> Vec<PropertyVector> {
    let targets = sample_property_targets(ranges, mode, n, rng);
    let ivs = ranges.intervals(mode);
    for y in &targets {
        for (k, allowed) in ivs.iter().enumerate() {
            assert!(allowed.iter().any(|iv| iv.contains(y[k])), "target {y:?} escaped its {mode} intervals");
        }
    }
    targets
}

/// Per-property MSE between each target and the oracle reading of
/// `g(z, m(y))`, over `n_z` prior draws per target.
pub fn eval_property_mse<G: Generator + ?Sized>(
    g: &G,
    targets: &[PropertyVector],
    n_z: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if targets.is_empty() || n_z == 0 {
        return Err(Error::EmptyBatch);
    }
    let k = targets[0].len();
    let mut ys = Vec::with_capacity(targets.len() * n_z);
    let mut zs = Vec::with_capacity(targets.len() * n_z);
    for y in targets {
        for _ in 0..n_z {
            ys.push(y.clone());
            zs.push(rng::normal_vec(rng, g.dim_z()));
        }
    }
    let xs = g.generate(&ys, &zs)?;
    let mut sse = vec![0.0; k];
    for (x, y) in xs.iter().zip(&ys) {
        let m = measure_properties(x, g.resolution());
        for j in 0..k {
            sse[j] += (m[j] - y[j]).powi(2);
        }
    }
    Ok(sse.into_iter().map(|s| s / ys.len() as f64).collect())
}

/// `(disetg1, disetg2)` on a fresh `n_y x n_z` grid: the spread of `f(x)`
/// across z at fixed y, and of the re-encoded z across y at fixed z.
pub fn eval_disentanglement<G: Generator + ?Sized>(
    g: &G,
    ranges: &RangeSpec,
    mode: TargetMode,
    n_y: usize,
    n_z: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if n_y < 2 || n_z < 2 {
        return Err(Error::GridTooSmall { n_y, n_z });
    }
    let targets = draw_targets(ranges, mode, n_y, rng);
    let z_draws: Vec<Vec<f64>> = (0..n_z).map(|_| rng::normal_vec(rng, g.dim_z())).collect();
    disentanglement_on_grid(g, &targets, &z_draws)
}

/// The disentanglement estimator on an explicit grid.
pub fn disentanglement_on_grid<G: Generator + ?Sized>(
    g: &G,
    targets: &[PropertyVector],
    z_draws: &[Vec<f64>],
) -> Result<(f64, f64)> {
    let (n_y, n_z) = (targets.len(), z_draws.len());
    if n_y < 2 || n_z < 2 {
        return Err(Error::GridTooSmall { n_y, n_z });
    }
    let ys: Vec<PropertyVector> = targets.iter().flat_map(|y| std::iter::repeat_n(y.clone(), n_z)).collect();
    let zs: Vec<Vec<f64>> = (0..n_y).flat_map(|_| z_draws.iter().cloned()).collect();
    let xs = g.generate(&ys, &zs)?;
    let z_enc = g.encode_z(&xs, &ys)?;
    let res = g.resolution();
    let f_grid: Vec<Vec<PropertyVector>> =
        xs.chunks(n_z).map(|row| row.iter().map(|x| measure_properties(x, res)).collect()).collect();
    let z_grid: Vec<Vec<Vec<f64>>> = z_enc.chunks(n_z).map(<[Vec<f64>]>::to_vec).collect();
    objective::loss_disentangle(&f_grid, &z_grid)
}

/// Mean reconstruction MSE and mean Gaussian NLL (scale `sigma_p`) over a
/// test split.
pub fn eval_generation_quality<G: Generator + ?Sized>(g: &G, test: &[ImageSample], sigma_p: f64) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let xs: Vec<Vec<f64>> = test.iter().map(|s| s.pixels.clone()).collect();
    let ys: Vec<PropertyVector> = test.iter().map(|s| s.label.clone()).collect();
    let recon = g.reconstruct(&xs, &ys)?;
    let var = sigma_p * sigma_p;
    let log_norm = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let mut recon_err = 0.0;
    let mut nll = 0.0;
    for (x, xh) in xs.iter().zip(&recon) {
        recon_err += objective::loss_recon(x, xh)?;
        nll += x.iter().zip(xh).map(|(a, b)| (a - b).powi(2) / (2.0 * var) + log_norm).sum::<f64>();
    }
    let n = test.len() as f64;
    Ok((recon_err / n, nll / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mode used for the disentanglement grid.
    pub mode: TargetMode,
    pub mse_id: Vec<f64>,
    pub mse_ood: Vec<f64>,
    pub disetg1: f64,
    pub disetg2: f64,
    pub recon_error: f64,
    pub nll: f64,
    pub samples: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Mean over properties of the in-distribution or OOD MSE.
    pub fn mean_mse(&self, mode: TargetMode) -> f64 {
        let v = if mode == TargetMode::Ood { &self.mse_ood } else { &self.mse_id };
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn csv_header(k: usize) -> String {
        let mut h = String::from("mode,seed,samples");
        for prefix in ["mse_id", "mse_ood"] {
            for j in 0..k {
                write!(h, ",{prefix}_{j}").unwrap();
            }
        }
        h.push_str(",disetg1,disetg2,recon_error,nll");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{}", self.mode, self.seed, self.samples);
        for v in self.mse_id.iter().chain(&self.mse_ood) {
            write!(r, ",{v}").unwrap();
        }
        write!(r, ",{},{},{},{}", self.disetg1, self.disetg2, self.recon_error, self.nll).unwrap();
        r
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(self.mse_id.len()), self.csv_row())
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        format!(
            "mode         {}\nseed         {}\nsamples      {}\nmse id       {}\nmse ood      {}\n\
             disetg1      {:.6}\ndisetg2      {:.6}\nrecon error  {:.6}\nnll          {:.3}\n",
            self.mode,
            self.seed,
            self.samples,
            fmt(&self.mse_id),
            fmt(&self.mse_ood),
            self.disetg1,
            self.disetg2,
            self.recon_error,
            self.nll
        )
    }
}

/// Full report. The seed fixes every Monte-Carlo draw, so the same model
/// and seed always give the same report.
pub fn evaluate<G: Generator + ?Sized>(
    g: &G,
    test: &[ImageSample],
    ranges: &RangeSpec,
    mode: TargetMode,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalReport> {
    settings.validate()?;
    let mut rng = rng::stream(seed, Stream::Evaluation);
    let id = draw_targets(ranges, TargetMode::InDist, settings.n_targets, &mut rng);
    let mse_id = eval_property_mse(g, &id, settings.n_z, &mut rng)?;
    let ood = draw_targets(ranges, TargetMode::Ood, settings.n_targets, &mut rng);
    let mse_ood = eval_property_mse(g, &ood, settings.n_z, &mut rng)?;
    let (disetg1, disetg2) = eval_disentanglement(g, ranges, mode, settings.grid_y, settings.grid_z, &mut rng)?;
    let (recon_error, nll) = eval_generation_quality(g, test, settings.sigma_p)?;
    Ok(EvalReport { mode, mse_id, mse_ood, disetg1, disetg2, recon_error, nll, samples: test.len(), seed })
}

/// Decoded images along one property with everything else fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationGrid {
    pub property: usize,
    pub values: Vec<f64>,
    pub tiles: Vec<Vec<f64>>,
    pub measured: Vec<PropertyVector>,
    pub resolution: Resolution,
}

impl InterpolationGrid {
    /// All tiles side by side, one black pixel column between tiles.
    pub fn to_pgm(&self) -> Vec<u8> {
        let res = self.resolution;
        let n = self.tiles.len();
        let width = n * res.w + n.saturating_sub(1);
        let mut canvas = vec![0.0; width * res.h];
        for (t, tile) in self.tiles.iter().enumerate() {
            let x0 = t * (res.w + 1);
            for r in 0..res.h {
                canvas[r * width + x0..r * width + x0 + res.w].copy_from_slice(&tile[r * res.w..(r + 1) * res.w]);
            }
        }
        formats::encode_pgm(&canvas, res.h, width)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tile,target,size,x_pos,y_pos\n");
        for (i, (v, m)) in self.values.iter().zip(&self.measured).enumerate() {
            let cols: Vec<String> = m.as_slice().iter().map(f64::to_string).collect();
            writeln!(out, "{i},{v},{}", cols.join(",")).unwrap();
        }
        out
    }

    /// Writes `<stem>.pgm` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.pgm")), self.to_pgm())?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Sweep property `property` of `base` over `values`, decoding each with
/// the same `z`. Values must fall inside that property's in-distribution
/// or OOD interval.
pub fn interpolation_sweep<G: Generator + ?Sized>(
    g: &G,
    ranges: &RangeSpec,
    property: usize,
    values: &[f64],
    base: &PropertyVector,
    z: &[f64],
) -> Result<InterpolationGrid> {
    if property >= base.len() {
        return Err(Error::InvalidArgument(format!("property index {property} out of range 0..{}", base.len())));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let allowed = &ranges.intervals(TargetMode::Union)[property];
    // Closed intervals here so the endpoints themselves can be shown.
    if let Some(v) = values.iter().find(|v| !allowed.iter().any(|iv| **v >= iv.lo && **v <= iv.hi)) {
        return Err(Error::InvalidArgument(format!("sweep value {v} outside the configured ranges")));
    }
    let ys: Vec<PropertyVector> = values
        .iter()
        .map(|&v| {
            let mut y = base.as_slice().to_vec();
            y[property] = v;
            PropertyVector::new(y)
        })
        .collect();
    let zs = vec![z.to_vec(); values.len()];
    let tiles = g.generate(&ys, &zs)?;
    let res = g.resolution();
    let measured = tiles.iter().map(|t| measure_properties(t, res)).collect();
    Ok(InterpolationGrid { property, values: values.to_vec(), tiles, measured, resolution: res })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffRow {
    pub alpha: f64,
    pub recon_error: f64,
    /// In-distribution property MSE averaged over properties.
    pub prop_mse: f64,
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from("alpha,recon_error,prop_mse\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.alpha, r.recon_error, r.prop_mse).unwrap();
    }
    out
}

/// Trade-off curve over `alphas`. A shared starting point is trained for
/// `config.iterations` with the base objective only (ablation `base`), then
/// each alpha warm-starts from it for another `config.iterations` under the
/// same seed. All points are scored on the same evaluation draws.
pub fn tradeoff_sweep(
    train: &[ImageSample],
    test: &[ImageSample],
    arch: &Architecture,
    config: &TrainConfig,
    alphas: &[f64],
    settings: &EvalSettings,
) -> Result<Vec<TradeoffRow>> {
    if alphas.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "trade-off sweep needs at least 2 alpha values, got {}",
            alphas.len()
        )));
    }
    settings.validate()?;
    let start = {
        let cfg = TrainConfig { ablation: Ablation::Base, ..config.clone() };
        let mut pool = ReplayDataset::new(train.to_vec(), arch.resolution, cfg.capacity_factor)?;
        run_training(&mut pool, arch.clone(), &cfg)?.model
    };
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = config.clone();
        cfg.weights.alpha = alpha;
        let mut pool = ReplayDataset::new(train.to_vec(), arch.resolution, cfg.capacity_factor)?;
        let model = warm_start(start.clone(), arch, &mut pool, &cfg)?.model;
        let mut rng = rng::stream(config.seed, Stream::Sweep);
        let targets = draw_targets(&cfg.ranges, TargetMode::InDist, settings.n_targets, &mut rng);
        let mse = eval_property_mse(&model, &targets, settings.n_z, &mut rng)?;
        let (recon_error, _) = eval_generation_quality(&model, test, settings.sigma_p)?;
        rows.push(TradeoffRow { alpha, recon_error, prop_mse: mse.iter().sum::<f64>() / mse.len() as f64 });
    }
    Ok(rows)
}
