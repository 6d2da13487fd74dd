//! Dimensional-rationale weight, projection heads and the contrastive and
//! redundancy-reduction objectives.

use std::fs;
use std::path::Path;

use drgcl_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::GinEncoder;
use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::params::{glorot, two_layer, zero_bias, ParamSet};

/// Stabilizer added to the standard deviation in [`normalize_instance_dim`].
pub const NORM_EPS: f64 = 1e-12;

/// Per-dimension rationale weight. Raw values are stored; the effective
/// weight is their clamp to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DrWeight {
    raw: Vec<f64>,
}

impl DrWeight {
    pub fn ones(dim: usize) -> Self {
        Self { raw: vec![1.0; dim] }
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self { raw: vec![value; dim] }
    }

    pub fn from_raw(raw: Vec<f64>) -> Self {
        Self { raw }
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn effective(&self) -> Vec<f64> {
        self.raw.iter().map(|w| w.clamp(0.0, 1.0)).collect()
    }

    /// Effective weight as a `[1, D]` row.
    pub fn row(&self) -> Tensor {
        Tensor::matrix(1, self.dim(), self.effective()).expect("sized by dim")
    }

    /// `raw -= lr * grad`, then clamp the stored values to `[0, 1]`.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.raw.len() {
            return Err(Error::Width(format!(
                "gradient of width {} for weight of width {}",
                grad.len(),
                self.raw.len()
            )));
        }
        for (w, g) in self.raw.iter_mut().zip(grad) {
            *w = (*w - lr * g).clamp(0.0, 1.0);
        }
        Ok(())
    }

    pub fn stats(&self) -> DrStats {
        let eff = self.effective();
        let d = eff.len().max(1) as f64;
        DrStats {
            min: eff.iter().copied().fold(f64::INFINITY, f64::min),
            mean: eff.iter().sum::<f64>() / d,
            max: eff.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            at_zero: eff.iter().filter(|&&w| w == 0.0).count() as f64 / d,
            at_one: eff.iter().filter(|&&w| w == 1.0).count() as f64 / d,
        }
    }

    pub fn to_text(&self) -> String {
        self.raw.iter().map(|w| format!("{w:?}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let raw = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Checkpoint(format!("line {}: bad weight `{l}`", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { raw })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub at_zero: f64,
    pub at_one: f64,
}

/// Affine, ReLU, affine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionHead {
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
}

impl ProjectionHead {
    pub fn new(input_dim: usize, hidden: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(Error::Invalid("projection head widths must be positive".into()));
        }
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w1", glorot(self.input_dim, self.hidden, rng));
        p.push("b1", zero_bias(self.hidden));
        p.push("w2", glorot(self.hidden, self.output_dim, rng));
        p.push("b2", zero_bias(self.output_dim));
        p
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let expected = [
            [self.input_dim, self.hidden],
            [1, self.hidden],
            [self.hidden, self.output_dim],
            [1, self.output_dim],
        ];
        if params.len() != 4 || params.tensors().iter().zip(&expected).any(|(t, e)| t.shape() != e) {
            return Err(Error::Width(format!(
                "head parameters do not match {} -> {} -> {}",
                self.input_dim, self.hidden, self.output_dim
            )));
        }
        Ok(())
    }

    pub fn project(&self, h: &Var, params: &[Var]) -> Result<Var> {
        if h.shape().get(1) != Some(&self.input_dim) || params.len() != 4 {
            return Err(Error::Width(format!(
                "head expects width {}, got {:?}",
                self.input_dim,
                h.shape()
            )));
        }
        two_layer(h, params)
    }
}

/// `h ⊙ ω` with `ω` broadcast over rows.
pub fn apply_dr(h: &Var, r: &Var) -> Result<Var> {
    let (hs, rs) = (h.shape(), r.shape());
    let width = rs.last().copied();
    if hs.len() != 2 || width != Some(hs[1]) || rs.iter().product::<usize>() != hs[1] {
        return Err(Error::Width(format!("embedding {hs:?} vs rationale weight {rs:?}")));
    }
    Ok(h.mul(r)?)
}

/// Which pairs enter the contrastive denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Negatives {
    /// Only `n' != n`.
    #[default]
    Exclusive,
    /// All `n'`, including the positive pair.
    Inclusive,
}

fn row_norms(z: &Var, tape: &Tape) -> Result<Var> {
    let p = z.shape()[1];
    let ones = tape.constant(Tensor::ones(&[p, 1]));
    Ok(z.mul(z)?.matmul(&ones)?.sqrt()?)
}

/// Summed cosine-similarity InfoNCE between paired rows of `zi` and `zj`.
pub fn infonce(zi: &Var, zj: &Var, tau: f64, negatives: Negatives) -> Result<Var> {
    let (si, sj) = (zi.shape(), zj.shape());
    if si.len() != 2 || si != sj {
        return Err(Error::Width(format!("view embeddings {si:?} vs {sj:?}")));
    }
    let n = si[0];
    if n < 2 {
        return Err(Error::Invalid("contrastive loss needs at least 2 rows".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let tape = zi.tape().clone();
    let dots = zi.matmul(&zj.t()?)?;
    let norms = row_norms(zi, &tape)?.matmul(&row_norms(zj, &tape)?.t()?)?;
    let logits = dots.div(&norms)?.scale(1.0 / tau)?;

    let mut eye = Tensor::zeros(&[n, n]);
    for k in 0..n {
        eye.data_mut()[k * n + k] = 1.0;
    }
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let positive = logits.mul(&tape.constant(eye.clone()))?.sum()?;
    let weights = match negatives {
        Negatives::Exclusive => eye.map(|x| 1.0 - x),
        Negatives::Inclusive => Tensor::ones(&[n, n]),
    };
    let denom = logits.exp()?.mul(&tape.constant(weights))?.matmul(&ones)?;
    Ok(denom.log()?.sum()?.sub(&positive)?)
}

/// Per column, `(z - mean) / (std * sqrt(N))` with the population standard deviation.
pub fn normalize_instance_dim(z: &Var) -> Result<Var> {
    let shape = z.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Invalid(format!("normalization needs at least 2 rows, got {shape:?}")));
    }
    let n = shape[0] as f64;
    let centered = z.sub(&z.mean_rows()?)?;
    let std = centered.mul(&centered)?.mean_rows()?.sqrt()?;
    Ok(centered.div_eps(&std.scale(n.sqrt())?, NORM_EPS)?)
}

/// Invariance and decorrelation terms on normalized views.
pub fn rr_loss(zi: &Var, zj: &Var) -> Result<(Var, Var)> {
    let (si, sj) = (zi.shape(), zj.shape());
    if si.len() != 2 || si != sj {
        return Err(Error::Width(format!("normalized views {si:?} vs {sj:?}")));
    }
    let p = si[1];
    let tape = zi.tape().clone();
    let mut eye = Tensor::zeros(&[p, p]);
    for k in 0..p {
        eye.data_mut()[k * p + k] = 1.0;
    }
    let eye = tape.constant(eye);
    let diff = zi.sub(zj)?;
    let invariance = diff.mul(&diff)?.sum()?;
    let off = |z: &Var| -> Result<Var> {
        let c = z.t()?.matmul(z)?.sub(&eye)?;
        Ok(c.mul(&c)?.sum()?)
    };
    let decorrelation = off(zi)?.add(&off(zj)?)?;
    Ok((invariance, decorrelation))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub negatives: Negatives,
    pub enable_rr: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.001,
            alpha: 10.0,
            negatives: Negatives::Exclusive,
            enable_rr: true,
        }
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub drin: f64,
    pub rr_invariance: f64,
    pub rr_decorrelation: f64,
    pub combined: f64,
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// Taped pieces of the objective for one pair of views.
pub struct LossGraph {
    pub drin: Var,
    pub rr: Option<(Var, Var)>,
    pub combined: Var,
    cfg: LossConfig,
}

impl LossGraph {
    pub fn terms(&self) -> Result<LossTerms> {
        let (inv, dec) = match &self.rr {
            Some((i, d)) => (i.item()?, d.item()?),
            None => (0.0, 0.0),
        };
        Ok(LossTerms {
            drin: self.drin.item()?,
            rr_invariance: inv,
            rr_decorrelation: dec,
            combined: self.combined.item()?,
            tau: self.cfg.tau,
            lambda: self.cfg.lambda,
            alpha: self.cfg.alpha,
        })
    }
}

/// Model shapes shared by the training objective.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Model {
    pub encoder: GinEncoder,
    pub drin_head: ProjectionHead,
    pub rr_head: ProjectionHead,
}

impl Model {
    pub fn new(input_dim: usize, hidden: Vec<usize>, projection: [usize; 2]) -> Result<Self> {
        let encoder = GinEncoder::new(input_dim, hidden)?;
        let d = encoder.output_dim();
        Ok(Self {
            drin_head: ProjectionHead::new(d, projection[0], projection[1])?,
            rr_head: ProjectionHead::new(d, projection[0], projection[1])?,
            encoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Contrastive term for already-encoded views.
    pub fn drin_from_embeddings(
        &self,
        h: (&Var, &Var),
        drin: &[Var],
        r: Option<&Var>,
        cfg: &LossConfig,
    ) -> Result<Var> {
        let (hi, hj) = match r {
            Some(r) => (apply_dr(h.0, r)?, apply_dr(h.1, r)?),
            None => (h.0.clone(), h.1.clone()),
        };
        let zi = self.drin_head.project(&hi, drin)?;
        let zj = self.drin_head.project(&hj, drin)?;
        infonce(&zi, &zj, cfg.tau, cfg.negatives)
    }

    /// Contrastive term only, from raw views.
    pub fn drin_loss(
        &self,
        views: (&Batch, &Batch),
        theta: &[Var],
        drin: &[Var],
        r: Option<&Var>,
        cfg: &LossConfig,
        tape: &Tape,
    ) -> Result<Var> {
        let hi = self.encoder.encode(views.0, theta, tape)?;
        let hj = self.encoder.encode(views.1, theta, tape)?;
        self.drin_from_embeddings((&hi, &hj), drin, r, cfg)
    }

    /// Full objective; `r = None` skips the rationale product entirely.
    #[allow(clippy::too_many_arguments)]
    pub fn combined_loss(
        &self,
        views: (&Batch, &Batch),
        theta: &[Var],
        drin: &[Var],
        rr: &[Var],
        r: Option<&Var>,
        cfg: &LossConfig,
        tape: &Tape,
    ) -> Result<LossGraph> {
        let hi = self.encoder.encode(views.0, theta, tape)?;
        let hj = self.encoder.encode(views.1, theta, tape)?;
        let (hi, hj) = match r {
            Some(r) => (apply_dr(&hi, r)?, apply_dr(&hj, r)?),
            None => (hi, hj),
        };
        let drin_loss = self.drin_from_embeddings((&hi, &hj), drin, None, cfg)?;
        let weighted = drin_loss.scale(cfg.alpha)?;
        if !cfg.enable_rr {
            return Ok(LossGraph {
                drin: drin_loss,
                rr: None,
                combined: weighted,
                cfg: *cfg,
            });
        }
        let zi = normalize_instance_dim(&self.rr_head.project(&hi, rr)?)?;
        let zj = normalize_instance_dim(&self.rr_head.project(&hj, rr)?)?;
        let (inv, dec) = rr_loss(&zi, &zj)?;
        let combined = inv.add(&dec.scale(cfg.lambda)?)?.add(&weighted)?;
        Ok(LossGraph {
            drin: drin_loss,
            rr: Some((inv, dec)),
            combined,
            cfg: *cfg,
        })
    }
}
