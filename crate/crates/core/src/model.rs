//! Encoder `h_phi`, decoder `g_theta` and property encoder `m_gamma`.
//!
//! All three are small MLPs over flattened images. The latent vector is laid
//! out as `[z | w]`: the first `dim_z` entries are the property-free group,
//! the remaining `dim_w` entries are tied to the controlled properties.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::synth::{PropertyVector, Resolution, NUM_PROPERTIES};
use crate::tensor::{Tape, Tensor, Var};

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;

/// Which base generator's extra assumptions are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaseGeneratorKind {
    CondVae,
    SemiVae,
    CsVae,
    PcVae,
}

impl BaseGeneratorKind {
    pub const ALL: [BaseGeneratorKind; 4] =
        [BaseGeneratorKind::CondVae, BaseGeneratorKind::SemiVae, BaseGeneratorKind::CsVae, BaseGeneratorKind::PcVae];

    /// Kinds that assume `y = w` use the property vector itself as `w`.
    pub fn w_is_y(self) -> bool {
        matches!(self, BaseGeneratorKind::CondVae | BaseGeneratorKind::SemiVae)
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseGeneratorKind::CondVae => "condvae",
            BaseGeneratorKind::SemiVae => "semivae",
            BaseGeneratorKind::CsVae => "csvae",
            BaseGeneratorKind::PcVae => "pcvae",
        }
    }
}

impl fmt::Display for BaseGeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaseGeneratorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "condvae" => Ok(BaseGeneratorKind::CondVae),
            "semivae" => Ok(BaseGeneratorKind::SemiVae),
            "csvae" => Ok(BaseGeneratorKind::CsVae),
            "pcvae" => Ok(BaseGeneratorKind::PcVae),
            _ => Err(Error::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::InvalidArgument(format!("unknown activation `{s}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub kind: BaseGeneratorKind,
    pub resolution: Resolution,
    pub num_properties: usize,
    pub dim_z: usize,
    pub dim_w: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub property_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            kind: BaseGeneratorKind::SemiVae,
            resolution: Resolution::default(),
            num_properties: NUM_PROPERTIES,
            dim_z: 6,
            dim_w: NUM_PROPERTIES,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            property_hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

pub(crate) fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_widths(field: &str, s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::config(field, format!("bad width `{p}`"))))
        .collect()
}

impl Architecture {
    pub fn latent_dim(&self) -> usize {
        self.dim_z + self.dim_w
    }

    pub fn validate(&self) -> Result<()> {
        Resolution::new(self.resolution.h, self.resolution.w)?;
        if self.dim_z == 0 {
            return Err(Error::ArchitectureMismatch("dim_z must be at least 1".into()));
        }
        if self.dim_w < self.num_properties {
            return Err(Error::ArchitectureMismatch(format!(
                "dim_w {} < number of properties {}",
                self.dim_w, self.num_properties
            )));
        }
        if self.kind.w_is_y() && self.dim_w != self.num_properties {
            return Err(Error::ArchitectureMismatch(format!(
                "{} ties w to y, so dim_w must equal {}",
                self.kind, self.num_properties
            )));
        }
        let widths = self.encoder_hidden.iter().chain(&self.decoder_hidden).chain(&self.property_hidden);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::ArchitectureMismatch("zero-width hidden layer".into()));
        }
        Ok(())
    }

    /// ASCII descriptor stored in checkpoints.
    pub fn descriptor(&self) -> String {
        format!(
            "kind={};h={};w={};k={};dim_z={};dim_w={};enc={};dec={};prop={};act={}",
            self.kind,
            self.resolution.h,
            self.resolution.w,
            self.num_properties,
            self.dim_z,
            self.dim_w,
            join(&self.encoder_hidden),
            join(&self.decoder_hidden),
            join(&self.property_hidden),
            self.activation
        )
    }

    pub fn from_descriptor(s: &str) -> Result<Self> {
        let mut arch = Architecture::default();
        let mut seen = 0;
        for part in s.split(';') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config("architecture", format!("malformed entry `{part}`")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| Error::config(key, format!("bad integer `{v}`")));
            match key {
                "kind" => arch.kind = value.parse()?,
                "h" => arch.resolution.h = num(value)?,
                "w" => arch.resolution.w = num(value)?,
                "k" => arch.num_properties = num(value)?,
                "dim_z" => arch.dim_z = num(value)?,
                "dim_w" => arch.dim_w = num(value)?,
                "enc" => arch.encoder_hidden = parse_widths(key, value)?,
                "dec" => arch.decoder_hidden = parse_widths(key, value)?,
                "prop" => arch.property_hidden = parse_widths(key, value)?,
                "act" => arch.activation = value.parse()?,
                _ => return Err(Error::config("architecture", format!("unknown key `{key}`"))),
            }
            seen += 1;
        }
        if seen != 10 {
            return Err(Error::config("architecture", format!("expected 10 entries, got {seen}")));
        }
        arch.validate()?;
        Ok(arch)
    }

    /// Names and shapes of every parameter block, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut mlp = |prefix: &str, input: usize, hidden: &[usize], output: usize| {
            let mut fan_in = input;
            for (i, &width) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
                out.push((format!("{prefix}.{i}.weight"), vec![fan_in, width]));
                out.push((format!("{prefix}.{i}.bias"), vec![width]));
                fan_in = width;
            }
        };
        let pixels = self.resolution.pixels();
        mlp("encoder", pixels + self.num_properties, &self.encoder_hidden, 2 * self.latent_dim());
        mlp("decoder", self.latent_dim(), &self.decoder_hidden, pixels);
        if !self.kind.w_is_y() {
            mlp("property", self.num_properties, &self.property_hidden, self.dim_w);
        }
        out
    }
}

/// Posterior `q(z, w | x, y)` as a diagonal Gaussian over `[z | w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSplit {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

/// All learnable weights plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameter handles on one tape, in [`Architecture::layout`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl ModelParams {
    /// Fresh weights: Glorot-uniform matrices, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let (names, tensors) = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 2 {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("layout shapes are positive")
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .unzip();
        Ok(ModelParams { arch, names, tensors })
    }

    /// Reassemble from stored blocks, checking them against the layout.
    pub fn from_parts(arch: Architecture, blocks: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != blocks.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameter blocks, found {}",
                layout.len(),
                blocks.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&blocks) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "block `{got_name}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::ArchitectureMismatch(format!("block `{got_name}` is not finite")));
            }
        }
        let (names, tensors) = blocks.into_iter().unzip();
        Ok(ModelParams { arch, names, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Put every block on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    fn block_index(&self, prefix: &str) -> usize {
        let key = format!("{prefix}.0.weight");
        self.names.iter().position(|n| *n == key).expect("prefix present in layout")
    }

    fn mlp(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, input: Var) -> Result<Var> {
        let start = self.block_index(prefix);
        let layers = self.names[start..].iter().filter(|n| n.starts_with(prefix) && n.ends_with(".weight")).count();
        let mut h = input;
        for layer in 0..layers {
            let w = bound.vars[start + 2 * layer];
            let b = bound.vars[start + 2 * layer + 1];
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if layer + 1 < layers {
                h = match self.arch.activation {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Tanh => tape.tanh(h)?,
                };
            }
        }
        Ok(h)
    }

    fn check_cols(&self, tape: &Tape, v: Var, cols: usize, what: &str) -> Result<usize> {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != cols {
            return Err(Error::shape(format!("{what}: expected [B, {cols}], got {s:?}")));
        }
        Ok(s[0])
    }

    /// `(mu, log_sigma) = h_phi(x, y)`, with `x` and `y` concatenated at the
    /// input. `log_sigma` is clamped to `[-8, 4]`.
    pub fn encode_tape(&self, tape: &mut Tape, bound: &BoundParams, x: Var, y: Var) -> Result<PosteriorVars> {
        let b = self.check_cols(tape, x, self.arch.resolution.pixels(), "encoder image")?;
        let by = self.check_cols(tape, y, self.arch.num_properties, "encoder properties")?;
        if b != by {
            return Err(Error::shape(format!("batch {b} images vs {by} property rows")));
        }
        let input = tape.concat(&[x, y], 1)?;
        let out = self.mlp(tape, bound, "encoder", input)?;
        let d = self.arch.latent_dim();
        let mu = tape.slice(out, 1, 0, d)?;
        let raw = tape.slice(out, 1, d, 2 * d)?;
        let log_sigma = tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok(PosteriorVars { mu, log_sigma })
    }

    /// `x = g_theta(z, w)`, sigmoid-squashed into `(0, 1)`.
    pub fn decode_tape(&self, tape: &mut Tape, bound: &BoundParams, z: Var, w: Var) -> Result<Var> {
        let b = self.check_cols(tape, z, self.arch.dim_z, "decoder z")?;
        let bw = self.check_cols(tape, w, self.arch.dim_w, "decoder w")?;
        if b != bw {
            return Err(Error::shape(format!("batch {b} z rows vs {bw} w rows")));
        }
        let input = tape.concat(&[z, w], 1)?;
        let logits = self.mlp(tape, bound, "decoder", input)?;
        tape.sigmoid(logits)
    }

    /// `w = m_gamma(y)`. Kinds assuming `y = w` return `y` itself.
    pub fn property_encode_tape(&self, tape: &mut Tape, bound: &BoundParams, y: Var) -> Result<Var> {
        self.check_cols(tape, y, self.arch.num_properties, "property encoder")?;
        if self.arch.kind.w_is_y() {
            Ok(y)
        } else {
            self.mlp(tape, bound, "property", y)
        }
    }

    /// Split `mu + exp(log_sigma) * noise` into `(z, w)`.
    pub fn reparameterize_tape(&self, tape: &mut Tape, post: PosteriorVars, noise: Tensor) -> Result<(Var, Var)> {
        let noise = tape.constant(noise);
        let sigma = tape.exp(post.log_sigma)?;
        let scaled = tape.mul(sigma, noise)?;
        let sample = tape.add(post.mu, scaled)?;
        self.split_latent(tape, sample)
    }

    pub fn split_latent(&self, tape: &mut Tape, latent: Var) -> Result<(Var, Var)> {
        let dz = self.arch.dim_z;
        let z = tape.slice(latent, 1, 0, dz)?;
        let w = tape.slice(latent, 1, dz, self.arch.latent_dim())?;
        Ok((z, w))
    }

    // Plain-value wrappers over the tape forward passes.

    pub fn encode(&self, x: &[f64], y: &PropertyVector) -> Result<PosteriorParams> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let yv = tape.constant(Tensor::matrix(1, y.len(), y.as_slice().to_vec())?);
        let post = self.encode_tape(&mut tape, &bound, xv, yv)?;
        Ok(PosteriorParams {
            mu: tape.value(post.mu).data().to_vec(),
            log_sigma: tape.value(post.log_sigma).data().to_vec(),
        })
    }

    pub fn decode(&self, lat: &LatentSplit) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = tape.constant(Tensor::matrix(1, lat.z.len(), lat.z.clone())?);
        let w = tape.constant(Tensor::matrix(1, lat.w.len(), lat.w.clone())?);
        let x = self.decode_tape(&mut tape, &bound, z, w)?;
        Ok(tape.value(x).data().to_vec())
    }

    /// `w = m(y, z)`; `z` is accepted for interface parity and ignored.
    pub fn property_encode(&self, y: &PropertyVector, _z: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.arch.num_properties {
            return Err(Error::LengthMismatch { expected: self.arch.num_properties, got: y.len() });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let yv = tape.constant(Tensor::matrix(1, y.len(), y.as_slice().to_vec())?);
        let w = self.property_encode_tape(&mut tape, &bound, yv)?;
        Ok(tape.value(w).data().to_vec())
    }

    /// Decode `g(z_i, m(y_i))` for paired rows.
    pub fn generate_batch(&self, ys: &[PropertyVector], zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if ys.len() != zs.len() {
            return Err(Error::LengthMismatch { expected: ys.len(), got: zs.len() });
        }
        if ys.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let y = tape.constant(rows_to_tensor(ys.iter().map(PropertyVector::as_slice), self.arch.num_properties)?);
        let z = tape.constant(rows_to_tensor(zs.iter().map(Vec::as_slice), self.arch.dim_z)?);
        let w = self.property_encode_tape(&mut tape, &bound, y)?;
        let x = self.decode_tape(&mut tape, &bound, z, w)?;
        Ok(tensor_rows(tape.value(x)))
    }

    /// Posterior means for paired rows.
    pub fn encode_batch(&self, xs: &[Vec<f64>], ys: &[PropertyVector]) -> Result<Vec<Vec<f64>>> {
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch { expected: xs.len(), got: ys.len() });
        }
        if xs.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(rows_to_tensor(xs.iter().map(Vec::as_slice), self.arch.resolution.pixels())?);
        let y = tape.constant(rows_to_tensor(ys.iter().map(PropertyVector::as_slice), self.arch.num_properties)?);
        let post = self.encode_tape(&mut tape, &bound, x, y)?;
        Ok(tensor_rows(tape.value(post.mu)))
    }

    /// Deterministic reconstruction `g(h(x, y))` using the posterior mean,
    /// with `w` replaced by `y` for kinds that tie them.
    pub fn reconstruct_batch(&self, xs: &[Vec<f64>], ys: &[PropertyVector]) -> Result<Vec<Vec<f64>>> {
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch { expected: xs.len(), got: ys.len() });
        }
        if xs.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(rows_to_tensor(xs.iter().map(Vec::as_slice), self.arch.resolution.pixels())?);
        let y = tape.constant(rows_to_tensor(ys.iter().map(PropertyVector::as_slice), self.arch.num_properties)?);
        let post = self.encode_tape(&mut tape, &bound, x, y)?;
        let (z, w_enc) = self.split_latent(&mut tape, post.mu)?;
        let w = if self.arch.kind.w_is_y() { y } else { w_enc };
        let out = self.decode_tape(&mut tape, &bound, z, w)?;
        Ok(tensor_rows(tape.value(out)))
    }
}

/// `sample = mu + exp(log_sigma) * noise`, split into `(z, w)` after `dim_z`.
pub fn reparameterize(p: &PosteriorParams, noise: &[f64], dim_z: usize) -> Result<LatentSplit> {
    if noise.len() != p.mu.len() || p.log_sigma.len() != p.mu.len() {
        return Err(Error::LengthMismatch { expected: p.mu.len(), got: noise.len() });
    }
    let sample: Vec<f64> = p.mu.iter().zip(&p.log_sigma).zip(noise).map(|((m, ls), e)| m + ls.exp() * e).collect();
    let (z, w) = sample.split_at(dim_z.min(sample.len()));
    Ok(LatentSplit { z: z.to_vec(), w: w.to_vec() })
}

/// `z ~ N(0, I)` of length `dim_z` from the given seed.
pub fn prior_sample(dim_z: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng::stream(seed, Stream::Training);
    prior_sample_with(dim_z, &mut rng)
}

pub fn prior_sample_with(dim_z: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if dim_z == 0 {
        return Err(Error::InvalidArgument("dim_z must be at least 1".into()));
    }
    Ok(rng::normal_vec(rng, dim_z))
}

pub(crate) fn rows_to_tensor<'a>(rows: impl Iterator<Item = &'a [f64]>, cols: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != cols {
            return Err(Error::LengthMismatch { expected: cols, got: r.len() });
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::new(vec![n, cols], data)
}

pub(crate) fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn small_arch(kind: BaseGeneratorKind) -> Architecture {
        Architecture {
            kind,
            resolution: Resolution { h: 8, w: 8 },
            dim_z: 2,
            encoder_hidden: vec![5],
            decoder_hidden: vec![4],
            property_hidden: vec![3],
            activation: Activation::Tanh,
            ..Architecture::default()
        }
    }

    fn image(seed: usize) -> Vec<f64> {
        (0..64).map(|i| ((i * 7 + seed * 13) % 10) as f64 / 10.0).collect()
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let m = ModelParams::init(Architecture::default(), 1).unwrap();
        let x = vec![0.5; 256];
        let y = PropertyVector::new(vec![0.1, 0.4, 0.6]);
        let a = m.encode(&x, &y).unwrap();
        let b = m.encode(&x, &y).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mu.len(), 9);
        assert_eq!(a.log_sigma.len(), 9);
        assert!(a.log_sigma.iter().all(|v| (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(v)));
    }

    #[test]
    fn encoder_shape_mismatch() {
        let m = ModelParams::init(Architecture::default(), 1).unwrap();
        let y = PropertyVector::new(vec![0.1, 0.4, 0.6]);
        assert!(matches!(m.encode(&[0.0; 100], &y), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let m = ModelParams::init(small_arch(BaseGeneratorKind::PcVae), 3).unwrap();
        let x = Tensor::matrix(2, 64, [image(0), image(1)].concat()).unwrap();
        let y = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.5, 0.1, 0.9]).unwrap();
        let report = gradcheck::check(
            m.tensors(),
            |tape, vars| {
                let bound = BoundParams { vars: vars.to_vec() };
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let post = m.encode_tape(tape, &bound, xv, yv)?;
                // one mu coordinate and one log-sigma coordinate
                let mu = tape.slice(post.mu, 1, 1, 2)?;
                let ls = tape.slice(post.log_sigma, 1, 3, 4)?;
                let both = tape.add(mu, ls)?;
                tape.sum(both)
            },
            gradcheck::DEFAULT_STEP,
            gradcheck::REL_TOL,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn reparameterize_zero_noise_is_mean() {
        let p = PosteriorParams { mu: vec![0.3, -1.0, 2.0], log_sigma: vec![0.1, 0.2, -0.5] };
        let l = reparameterize(&p, &[0.0; 3], 2).unwrap();
        assert_eq!(l.z, vec![0.3, -1.0]);
        assert_eq!(l.w, vec![2.0]);
    }

    #[test]
    fn reparameterize_clamped_sigma_is_near_mean() {
        let p = PosteriorParams { mu: vec![1.0, 2.0], log_sigma: vec![LOG_SIGMA_MIN; 2] };
        let noise = [2.5, -1.5];
        let l = reparameterize(&p, &noise, 1).unwrap();
        let floor = LOG_SIGMA_MIN.exp();
        assert!((l.z[0] - 1.0).abs() <= floor * 2.5 + 1e-15);
        assert!((l.w[0] - 2.0).abs() <= floor * 1.5 + 1e-15);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let p = PosteriorParams { mu: vec![0.7, -0.2], log_sigma: vec![0.3, -0.4] };
        let mut rng = rng::stream(11, Stream::Training);
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let e = rng::normal_vec(&mut rng, 2);
            let l = reparameterize(&p, &e, 1).unwrap();
            sums[0] += l.z[0];
            sums[1] += l.w[0];
        }
        for k in 0..2 {
            let sigma = p.log_sigma[k].exp();
            let mean = sums[k] / n as f64;
            assert!((mean - p.mu[k]).abs() < 3.0 * sigma / (n as f64).sqrt(), "coord {k}: {mean}");
        }
    }

    #[test]
    fn decode_range_and_shape() {
        let m = ModelParams::init(Architecture::default(), 2).unwrap();
        let lat = LatentSplit { z: vec![0.5; 6], w: vec![0.1, 0.5, 0.5] };
        let x = m.decode(&lat).unwrap();
        assert_eq!(x.len(), 256);
        assert!(x.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(x, m.decode(&lat).unwrap());
        let bad = LatentSplit { z: vec![0.5; 5], w: vec![0.1, 0.5, 0.5] };
        assert!(matches!(m.decode(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn property_encoder_identity_for_tied_kinds() {
        let y = PropertyVector::new(vec![0.7, 0.2, 0.9]);
        for kind in [BaseGeneratorKind::SemiVae, BaseGeneratorKind::CondVae] {
            let arch = Architecture { kind, ..Architecture::default() };
            let m = ModelParams::init(arch, 4).unwrap();
            assert_eq!(m.property_encode(&y, &[0.0; 6]).unwrap(), y.as_slice());
        }
        let arch = Architecture { kind: BaseGeneratorKind::PcVae, ..Architecture::default() };
        let m = ModelParams::init(arch, 4).unwrap();
        let w1 = m.property_encode(&y, &[0.0; 6]).unwrap();
        let w2 = m.property_encode(&y, &[1.0; 6]).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(w1.len(), 3);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(matches!("betavae".parse::<BaseGeneratorKind>(), Err(Error::UnknownKind(_))));
        assert_eq!("Semi-VAE".parse::<BaseGeneratorKind>().unwrap(), BaseGeneratorKind::SemiVae);
    }

    #[test]
    fn prior_sample_contract() {
        assert_eq!(prior_sample(6, 3).unwrap(), prior_sample(6, 3).unwrap());
        assert_eq!(prior_sample(4, 3).unwrap().len(), 4);
        assert!(prior_sample(0, 3).is_err());
        let mut rng = rng::stream(8, Stream::Training);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| prior_sample_with(1, &mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn descriptor_round_trip() {
        for kind in BaseGeneratorKind::ALL {
            let arch = Architecture { kind, ..small_arch(kind) };
            let back = Architecture::from_descriptor(&arch.descriptor()).unwrap();
            assert_eq!(arch, back);
        }
        assert!(Architecture::from_descriptor("kind=semivae").is_err());
    }

    #[test]
    fn tied_kinds_require_dim_w_equal_k() {
        let arch = Architecture { dim_w: 4, ..Architecture::default() };
        assert!(matches!(arch.validate(), Err(Error::ArchitectureMismatch(_))));
        let arch = Architecture { dim_w: 4, kind: BaseGeneratorKind::CsVae, ..Architecture::default() };
        assert!(arch.validate().is_ok());
    }
}
