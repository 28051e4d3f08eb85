//! Experiment configuration: INI-style `[section]` blocks of `key = value`
//! lines. Unknown sections or keys, duplicates and unparsable values are
//! errors naming `section.key`. Every key is optional; the defaults are
//! those printed by [`ExperimentConfig::to_ini`] on the default config.
//!
//! ```text
//! [dataset]
//! resolution = 16x16
//! n = 4250
//! ranges_id = 0.08:0.2,0.25:0.75,0.25:0.75
//! ranges_ood = 0.04:0.08,0.1:0.25,0.75:0.9
//! split_ratio = 16
//! seed = 0            # also seeds initialization, training and evaluation
//!
//! [model]
//! kind = semivae      # condvae | semivae | csvae | pcvae
//! ...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::model::{self, Architecture};
use crate::synth::{format_intervals, parse_intervals, RangeSpec, Resolution, TargetMode, DEFAULT_SPLIT_RATIO};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub resolution: Resolution,
    /// Total samples before the train/test split.
    pub n: usize,
    pub ranges: RangeSpec,
    pub split_ratio: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            resolution: Resolution::default(),
            n: 4250,
            ranges: RangeSpec::default(),
            split_ratio: DEFAULT_SPLIT_RATIO,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: Architecture,
    /// `seed` and `ranges` mirror the dataset section.
    pub training: TrainConfig,
    pub eval: EvalSettings,
    pub eval_mode: TargetMode,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: Architecture::default(),
            training: TrainConfig::default(),
            eval: EvalSettings::default(),
            eval_mode: TargetMode::InDist,
            output_dir: PathBuf::from("out"),
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    ("dataset", &["resolution", "n", "ranges_id", "ranges_ood", "split_ratio", "seed"]),
    ("model", &["kind", "dim_z", "dim_w", "encoder_hidden", "decoder_hidden", "property_hidden", "activation"]),
    (
        "training",
        &[
            "iterations",
            "seen_steps",
            "unseen_steps",
            "learning_rate",
            "n_sample",
            "batch_size",
            "grid_y",
            "grid_z",
            "ood_mode",
            "alpha",
            "beta",
            "xi",
            "constraint_weights",
            "optimizer",
            "schedule",
            "ablation",
            "capacity_factor",
            "posterior_samples",
            "eval_every",
        ],
    ),
    ("eval", &["n_targets", "n_z", "grid_y", "grid_z", "sigma_p", "mode"]),
    ("output", &["dir"]),
];

fn parse_resolution(s: &str) -> Option<Resolution> {
    let (h, w) = match s.split_once('x') {
        Some((h, w)) => (h.trim().parse().ok()?, w.trim().parse().ok()?),
        None => {
            let n = s.parse().ok()?;
            (n, n)
        }
    };
    Some(Resolution { h, w })
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_f64_list(s: &str) -> Option<Vec<f64>> {
    if s.is_empty() {
        return Some(vec![]);
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = read_entries(text)?;
        let mut cfg = ExperimentConfig::default();
        for ((section, key), value) in &entries {
            cfg.apply(section, key, value)?;
        }
        cfg.training.seed = cfg.seed;
        cfg.training.ranges = cfg.dataset.ranges.clone();
        cfg.model.resolution = cfg.dataset.resolution;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let field = format!("{section}.{key}");
        let bad = |what: &str| Error::config(field.clone(), format!("expected {what}, got `{value}`"));
        let usize_ = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let f64_ = || value.parse::<f64>().map_err(|_| bad("a number"));
        let relabel = |e: Error| Error::config(field.clone(), e.to_string());
        let t = &mut self.training;
        match (section, key) {
            ("dataset", "resolution") => {
                self.dataset.resolution = parse_resolution(value).ok_or_else(|| bad("HxW"))?;
                Resolution::new(self.dataset.resolution.h, self.dataset.resolution.w).map_err(relabel)?;
            }
            ("dataset", "n") => self.dataset.n = usize_()?,
            ("dataset", "ranges_id") => self.dataset.ranges.in_dist = parse_intervals(value).map_err(relabel)?,
            ("dataset", "ranges_ood") => self.dataset.ranges.ood = parse_intervals(value).map_err(relabel)?,
            ("dataset", "split_ratio") => self.dataset.split_ratio = usize_()?,
            ("dataset", "seed") => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,

            ("model", "kind") => self.model.kind = value.parse().map_err(relabel)?,
            ("model", "dim_z") => self.model.dim_z = usize_()?,
            ("model", "dim_w") => self.model.dim_w = usize_()?,
            ("model", "encoder_hidden") => self.model.encoder_hidden = model::parse_widths(&field, value)?,
            ("model", "decoder_hidden") => self.model.decoder_hidden = model::parse_widths(&field, value)?,
            ("model", "property_hidden") => self.model.property_hidden = model::parse_widths(&field, value)?,
            ("model", "activation") => self.model.activation = value.parse().map_err(relabel)?,

            ("training", "iterations") => t.iterations = usize_()?,
            ("training", "seen_steps") => t.seen_steps = usize_()?,
            ("training", "unseen_steps") => t.unseen_steps = usize_()?,
            ("training", "learning_rate") => t.learning_rate = f64_()?,
            ("training", "n_sample") => t.n_sample = f64_()?,
            ("training", "batch_size") => t.batch_size = usize_()?,
            ("training", "grid_y") => t.grid_y = usize_()?,
            ("training", "grid_z") => t.grid_z = usize_()?,
            ("training", "ood_mode") => t.ood_mode = parse_bool(value).ok_or_else(|| bad("true or false"))?,
            ("training", "alpha") => t.weights.alpha = f64_()?,
            ("training", "beta") => t.weights.beta = f64_()?,
            ("training", "xi") => t.weights.xi = f64_()?,
            ("training", "constraint_weights") => {
                t.weights.constraint_weights = parse_f64_list(value).ok_or_else(|| bad("comma-separated numbers"))?
            }
            ("training", "optimizer") => t.optimizer = value.parse().map_err(relabel)?,
            ("training", "schedule") => t.schedule = value.parse().map_err(relabel)?,
            ("training", "ablation") => t.ablation = value.parse().map_err(relabel)?,
            ("training", "capacity_factor") => t.capacity_factor = usize_()?,
            ("training", "posterior_samples") => t.posterior_samples = usize_()?,
            ("training", "eval_every") => t.eval_every = usize_()?,

            ("eval", "n_targets") => self.eval.n_targets = usize_()?,
            ("eval", "n_z") => self.eval.n_z = usize_()?,
            ("eval", "grid_y") => self.eval.grid_y = usize_()?,
            ("eval", "grid_z") => self.eval.grid_z = usize_()?,
            ("eval", "sigma_p") => self.eval.sigma_p = f64_()?,
            ("eval", "mode") => self.eval_mode = value.parse().map_err(relabel)?,

            ("output", "dir") => self.output_dir = PathBuf::from(value),
            _ => unreachable!("keys are checked against KEYS before apply"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.dataset.ranges;
        if r.in_dist.len() != self.model.num_properties {
            return Err(Error::config("dataset.ranges_id", format!("need {} intervals", self.model.num_properties)));
        }
        if r.ood.len() != self.model.num_properties {
            return Err(Error::config("dataset.ranges_ood", format!("need {} intervals", self.model.num_properties)));
        }
        if self.dataset.n < 2 {
            return Err(Error::config("dataset.n", "must be at least 2"));
        }
        if self.dataset.split_ratio == 0 {
            return Err(Error::config("dataset.split_ratio", "must be at least 1"));
        }
        if self.training.grid_y < 2 || self.training.grid_z < 2 {
            return Err(Error::config("training.grid_y", "unseen grid needs both sides >= 2"));
        }
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        self.training.validate()?;
        self.eval.validate().map_err(|e| Error::config("eval", e.to_string()))
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_ini(&self) -> String {
        let t = &self.training;
        let m = &self.model;
        let mut s = String::new();
        let res = self.dataset.resolution;
        writeln!(s, "[dataset]").unwrap();
        writeln!(s, "resolution = {}x{}", res.h, res.w).unwrap();
        writeln!(s, "n = {}", self.dataset.n).unwrap();
        writeln!(s, "ranges_id = {}", format_intervals(&self.dataset.ranges.in_dist)).unwrap();
        writeln!(s, "ranges_ood = {}", format_intervals(&self.dataset.ranges.ood)).unwrap();
        writeln!(s, "split_ratio = {}", self.dataset.split_ratio).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "\n[model]").unwrap();
        writeln!(s, "kind = {}", m.kind).unwrap();
        writeln!(s, "dim_z = {}", m.dim_z).unwrap();
        writeln!(s, "dim_w = {}", m.dim_w).unwrap();
        writeln!(s, "encoder_hidden = {}", model::join(&m.encoder_hidden)).unwrap();
        writeln!(s, "decoder_hidden = {}", model::join(&m.decoder_hidden)).unwrap();
        writeln!(s, "property_hidden = {}", model::join(&m.property_hidden)).unwrap();
        writeln!(s, "activation = {}", m.activation).unwrap();
        writeln!(s, "\n[training]").unwrap();
        writeln!(s, "iterations = {}", t.iterations).unwrap();
        writeln!(s, "seen_steps = {}", t.seen_steps).unwrap();
        writeln!(s, "unseen_steps = {}", t.unseen_steps).unwrap();
        writeln!(s, "learning_rate = {}", t.learning_rate).unwrap();
        writeln!(s, "n_sample = {}", t.n_sample).unwrap();
        writeln!(s, "batch_size = {}", t.batch_size).unwrap();
        writeln!(s, "grid_y = {}", t.grid_y).unwrap();
        writeln!(s, "grid_z = {}", t.grid_z).unwrap();
        writeln!(s, "ood_mode = {}", t.ood_mode).unwrap();
        writeln!(s, "alpha = {}", t.weights.alpha).unwrap();
        writeln!(s, "beta = {}", t.weights.beta).unwrap();
        writeln!(s, "xi = {}", t.weights.xi).unwrap();
        let cw: Vec<String> = t.weights.constraint_weights.iter().map(f64::to_string).collect();
        writeln!(s, "constraint_weights = {}", cw.join(",")).unwrap();
        writeln!(s, "optimizer = {}", t.optimizer).unwrap();
        writeln!(s, "schedule = {}", t.schedule).unwrap();
        writeln!(s, "ablation = {}", t.ablation).unwrap();
        writeln!(s, "capacity_factor = {}", t.capacity_factor).unwrap();
        writeln!(s, "posterior_samples = {}", t.posterior_samples).unwrap();
        writeln!(s, "eval_every = {}", t.eval_every).unwrap();
        writeln!(s, "\n[eval]").unwrap();
        writeln!(s, "n_targets = {}", self.eval.n_targets).unwrap();
        writeln!(s, "n_z = {}", self.eval.n_z).unwrap();
        writeln!(s, "grid_y = {}", self.eval.grid_y).unwrap();
        writeln!(s, "grid_z = {}", self.eval.grid_z).unwrap();
        writeln!(s, "sigma_p = {}", self.eval.sigma_p).unwrap();
        writeln!(s, "mode = {}", self.eval_mode).unwrap();
        writeln!(s, "\n[output]").unwrap();
        writeln!(s, "dir = {}", self.output_dir.display()).unwrap();
        s
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Section/key pairs in file order after syntax and key checks.
fn read_entries(text: &str) -> Result<Vec<((String, String), String)>> {
    let mut section: Option<&str> = None;
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("line {}", lineno + 1);
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::config(at.clone(), format!("malformed section header `{line}`")))?
                .trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(Error::config(name, "unknown section"));
            }
            section = Some(KEYS.iter().find(|(s, _)| *s == name).unwrap().0);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(at.clone(), format!("expected key = value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section.ok_or_else(|| Error::config(key, "key outside of any section"))?;
        let field = format!("{sec}.{key}");
        let known = KEYS.iter().find(|(s, _)| *s == sec).unwrap().1;
        if !known.contains(&key) {
            return Err(Error::config(field, "unknown key"));
        }
        if seen.insert(field.clone(), ()).is_some() {
            return Err(Error::config(field, "duplicate key"));
        }
        out.push(((sec.to_string(), key.to_string()), value.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaseGeneratorKind;
    use crate::trainer::Ablation;

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 7;
        cfg.training.seed = 7;
        cfg.model.kind = BaseGeneratorKind::PcVae;
        cfg.model.dim_w = 4;
        cfg.training.ablation = Ablation::Ours3;
        cfg.training.weights.constraint_weights = vec![0.5, 2.0];
        let back = ExperimentConfig::parse(&cfg.to_ini()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn values_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# experiment\n[dataset]\nresolution = 12x10 ; note\nseed=3\n[training]\nalpha = 2.5\nood_mode = false\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset.resolution, Resolution { h: 12, w: 10 });
        assert_eq!(cfg.model.resolution, Resolution { h: 12, w: 10 });
        assert_eq!(cfg.training.seed, 3);
        assert_eq!(cfg.training.weights.alpha, 2.5);
        assert!(!cfg.training.ood_mode);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("[dataset]\nranges_id = 1:0,0:1,0:1\n", "dataset.ranges_id"),
            ("[dataset]\nranges_ood = 0:1\n", "dataset.ranges_ood"),
            ("[training]\nlearning_rat = 0.1\n", "training.learning_rat"),
            ("[training]\nalpha = lots\n", "training.alpha"),
            ("[training]\nalpha = 1\nalpha = 2\n", "training.alpha"),
            ("[trainin]\n", "trainin"),
            ("[model]\nkind = gan\n", "model.kind"),
            ("[dataset]\nresolution = 4x4\n", "dataset.resolution"),
            ("[training]\nablation = ours-9\n", "training.ablation"),
        ];
        for (text, field) in cases {
            assert_eq!(field_of(ExperimentConfig::parse(text).unwrap_err()), field, "{text}");
        }
    }
}
