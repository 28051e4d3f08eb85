//! Loss terms of the controllable-generation objective
//! `L = L1 + alpha*L2 + beta*L3 + xi*L4 + sum_i c_i * C_i`:
//!
//! * `L1` reconstruction MSE (mean over pixels),
//! * `L2` property MSE between targets and the oracle on generated images,
//! * `L3` KL of the diagonal-Gaussian posterior against `N(0, I)`,
//! * `L4` the two variance penalties that stand in for `y ⊥ z`,
//! * `C_i` the base generator's extra assumptions.
//!
//! The Gaussian scale factors of the likelihood terms are folded into the
//! weights. The `y ⊥ z` constraint is carried by `L4` alone and never shows
//! up among the `C_i`.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{BaseGeneratorKind, PosteriorParams};
use crate::synth::PropertyVector;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub xi: f64,
    /// One weight per constraint in [`ConstraintSet::for_kind`] order;
    /// missing entries default to 1.
    pub constraint_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 10.0, beta: 0.1, xi: 1.0, constraint_weights: vec![] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.xi].into_iter().chain(self.constraint_weights.iter().copied());
        for w in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config("weights", format!("weight {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn constraint_weight(&self, index: usize) -> f64 {
        self.constraint_weights.get(index).copied().unwrap_or(1.0)
    }
}

/// Raw (unweighted) term values of one step plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2_seen: f64,
    pub l2_unseen: f64,
    pub l3: f64,
    pub l4_var_y: f64,
    pub l4_var_z: f64,
    pub constraint_penalties: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted sum of the raw terms.
    pub fn compose(&self, w: &LossWeights) -> f64 {
        let constraints: f64 =
            self.constraint_penalties.iter().enumerate().map(|(i, (_, v))| w.constraint_weight(i) * v).sum();
        self.l1
            + w.alpha * (self.l2_seen + self.l2_unseen)
            + w.beta * self.l3
            + w.xi * (self.l4_var_y + self.l4_var_z)
            + constraints
    }

    /// Element-wise sum, used to average over the steps of one iteration.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l1 += other.l1;
        self.l2_seen += other.l2_seen;
        self.l2_unseen += other.l2_unseen;
        self.l3 += other.l3;
        self.l4_var_y += other.l4_var_y;
        self.l4_var_z += other.l4_var_z;
        self.total += other.total;
        for (name, v) in &other.constraint_penalties {
            match self.constraint_penalties.iter_mut().find(|(n, _)| n == name) {
                Some((_, acc)) => *acc += v,
                None => self.constraint_penalties.push((name.clone(), *v)),
            }
        }
    }

    pub fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            l1: self.l1 * c,
            l2_seen: self.l2_seen * c,
            l2_unseen: self.l2_unseen * c,
            l3: self.l3 * c,
            l4_var_y: self.l4_var_y * c,
            l4_var_z: self.l4_var_z * c,
            constraint_penalties: self.constraint_penalties.iter().map(|(n, v)| (n.clone(), v * c)).collect(),
            total: self.total * c,
        }
    }
}

/// Latent or observed variable group a constraint talks about.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Z,
    /// The `w` the decoder actually consumes.
    W,
    Y,
    /// `m_gamma(y)`, the property encoder's image of the batch targets.
    MappedY,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintTerm {
    /// Mean squared difference between two equally sized groups.
    Equality(Group, Group),
    /// Squared Frobenius norm of the batch cross-covariance.
    Independence(Group, Group),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub id: String,
    pub term: ConstraintTerm,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}", self.id, self.term)
    }
}

/// Active penalties for one base generator kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSet {
    pub kind: BaseGeneratorKind,
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    /// | kind    | C1      | C2                                   |
    /// |---------|---------|--------------------------------------|
    /// | CondVAE | y = w   |                                      |
    /// | SemiVAE | z ⊥ y   | y = w                                |
    /// | CSVAE   | z ⊥ w   | (x given w) ⊥ y, as z ⊥ y            |
    /// | PCVAE   | z ⊥ w   | x ⊥ y given w, as z ⊥ y              |
    ///
    /// Kinds with a learned `w` also carry `M`, tying the encoder's `w` to
    /// `m_gamma(y)` so the property encoder is trained on seen data.
    pub fn for_kind(kind: BaseGeneratorKind) -> Self {
        use ConstraintTerm::*;
        use Group::*;
        let c = |id: &str, term| Constraint { id: id.to_string(), term };
        let constraints = match kind {
            BaseGeneratorKind::CondVae => vec![c("C1", Equality(Y, W))],
            BaseGeneratorKind::SemiVae => vec![c("C1", Independence(Z, Y)), c("C2", Equality(Y, W))],
            BaseGeneratorKind::CsVae | BaseGeneratorKind::PcVae => {
                vec![c("C1", Independence(Z, W)), c("C2", Independence(Z, Y)), c("M", Equality(W, MappedY))]
            }
        };
        ConstraintSet { kind, constraints }
    }
}

/// Tape handles for the groups of one batch, all `[B, *]`.
#[derive(Clone, Copy, Debug)]
pub struct ConstraintContext {
    pub z: Var,
    pub w: Var,
    pub y: Var,
    pub mapped_y: Option<Var>,
}

impl ConstraintContext {
    fn group(&self, g: Group) -> Result<Var> {
        match g {
            Group::Z => Ok(self.z),
            Group::W => Ok(self.w),
            Group::Y => Ok(self.y),
            Group::MappedY => self
                .mapped_y
                .ok_or_else(|| Error::InvalidArgument("constraint needs m(y) but none was supplied".into())),
        }
    }
}

/// Record every constraint of `set` on the tape; returns `(id, value)` in
/// set order.
pub fn constraint_penalties(
    tape: &mut Tape,
    set: &ConstraintSet,
    ctx: &ConstraintContext,
) -> Result<Vec<(String, Var)>> {
    set.constraints
        .iter()
        .map(|c| {
            let v = match c.term {
                ConstraintTerm::Equality(a, b) => equality_penalty(tape, ctx.group(a)?, ctx.group(b)?)?,
                ConstraintTerm::Independence(a, b) => cross_covariance_penalty(tape, ctx.group(a)?, ctx.group(b)?)?,
            };
            Ok((c.id.clone(), v))
        })
        .collect()
}

/// Mean over the batch of the squared distance between rows.
pub fn equality_penalty(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!("equality {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    if a == b {
        // Structurally tied: identically zero.
        return Ok(tape.scalar(0.0));
    }
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    let per_row = tape.sum_axis(sq, 1)?;
    tape.mean(per_row)
}

/// `||cov(a, b)||_F^2` over the batch, population normalization.
pub fn cross_covariance_penalty(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::shape(format!("cross-covariance {sa:?} vs {sb:?}")));
    }
    let n = sa[0] as f64;
    let center = |tape: &mut Tape, v: Var| -> Result<Var> {
        let m = tape.mean_axis(v, 0)?;
        tape.sub(v, m)
    };
    let ac = center(tape, a)?;
    let bc = center(tape, b)?;
    let at = tape.transpose(ac)?;
    let cov = tape.matmul(at, bc)?;
    let cov = tape.scale(cov, 1.0 / n)?;
    let sq = tape.square(cov)?;
    tape.sum(sq)
}

/// Mean squared error over all elements.
pub fn mse_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!("mse {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Batch mean of `sum_d 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kl_tape(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = tape.square(mu)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_ls)?;
    let one = tape.scalar(1.0);
    let c = tape.sub(b, one)?;
    let half = tape.scale(c, 0.5)?;
    let per_row = if tape.shape(half).len() == 2 { tape.sum_axis(half, 1)? } else { tape.sum(half)? };
    tape.mean(per_row)
}

/// `L4` on a crossed grid. `f_values` is `[n_y * n_z, K]` and `z_encoded`
/// is `[n_y * n_z, dim_z]`, both row-major over `(i, j)` with `i` indexing
/// property targets and `j` indexing prior draws.
///
/// Returns `(var_y_term, var_z_term)`: the mean over targets of the
/// population variance across draws of `f`, and the mean over draws of the
/// population variance across targets of the encoded `z`. Variances of
/// vectors are averaged over coordinates.
pub fn disentangle_tape(tape: &mut Tape, f_values: Var, z_encoded: Var, n_y: usize, n_z: usize) -> Result<(Var, Var)> {
    if n_y < 2 || n_z < 2 {
        return Err(Error::GridTooSmall { n_y, n_z });
    }
    let k = tape.shape(f_values)[1];
    let dz = tape.shape(z_encoded)[1];
    let f3 = tape.reshape(f_values, &[n_y, n_z, k])?;
    let var_f = tape.variance_axis(f3, 1)?;
    let var_y = tape.mean(var_f)?;
    let z3 = tape.reshape(z_encoded, &[n_y, n_z, dz])?;
    let var_zs = tape.variance_axis(z3, 0)?;
    let var_z = tape.mean(var_zs)?;
    Ok((var_y, var_z))
}

// Plain-value forms of the same terms.

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).item())
}

/// `L1` for one image pair.
pub fn loss_recon(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(format!("{} pixels vs {} pixels", x.len(), x_hat.len())));
    }
    eval_scalar(|t| {
        let a = t.constant(Tensor::vector(x.to_vec()));
        let b = t.constant(Tensor::vector(x_hat.to_vec()));
        mse_tape(t, a, b)
    })
}

/// Building block of `L2`: MSE over the `K` properties.
pub fn loss_property(y_target: &PropertyVector, y_measured: &PropertyVector) -> Result<f64> {
    if y_target.len() != y_measured.len() {
        return Err(Error::LengthMismatch { expected: y_target.len(), got: y_measured.len() });
    }
    eval_scalar(|t| {
        let a = t.constant(Tensor::vector(y_target.as_slice().to_vec()));
        let b = t.constant(Tensor::vector(y_measured.as_slice().to_vec()));
        mse_tape(t, a, b)
    })
}

/// `L3` for a single posterior.
pub fn loss_kl(p: &PosteriorParams) -> Result<f64> {
    if p.mu.len() != p.log_sigma.len() {
        return Err(Error::LengthMismatch { expected: p.mu.len(), got: p.log_sigma.len() });
    }
    eval_scalar(|t| {
        let mu = t.constant(Tensor::vector(p.mu.clone()));
        let ls = t.constant(Tensor::vector(p.log_sigma.clone()));
        kl_tape(t, mu, ls)
    })
}

/// `L4` from explicit grids: `f_values[i][j]` and `z_encoded[i][j]` for
/// target `i` and prior draw `j`. Same estimator as [`disentangle_tape`].
pub fn loss_disentangle(f_values: &[Vec<PropertyVector>], z_encoded: &[Vec<Vec<f64>>]) -> Result<(f64, f64)> {
    let n_y = f_values.len();
    let n_z = f_values.first().map_or(0, Vec::len);
    if n_y < 2 || n_z < 2 {
        return Err(Error::GridTooSmall { n_y, n_z });
    }
    if z_encoded.len() != n_y || f_values.iter().any(|r| r.len() != n_z) || z_encoded.iter().any(|r| r.len() != n_z) {
        return Err(Error::shape("ragged disentanglement grid"));
    }
    // Shifted by the first value so a constant column is exactly 0.
    let pop_var = |vals: &mut dyn Iterator<Item = f64>| {
        let raw: Vec<f64> = vals.collect();
        let v: Vec<f64> = raw.iter().map(|x| x - raw[0]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
    };

    let k = f_values[0][0].len();
    let mut var_y = 0.0;
    for row in f_values {
        let mut acc = 0.0;
        for c in 0..k {
            acc += pop_var(&mut row.iter().map(|p| p[c]));
        }
        var_y += acc / k as f64;
    }
    var_y /= n_y as f64;

    let dz = z_encoded[0][0].len();
    let mut var_z = 0.0;
    for j in 0..n_z {
        let mut acc = 0.0;
        for c in 0..dz {
            acc += pop_var(&mut z_encoded.iter().map(|row| row[j][c]));
        }
        var_z += acc / dz as f64;
    }
    var_z /= n_z as f64;
    Ok((var_y, var_z))
}
