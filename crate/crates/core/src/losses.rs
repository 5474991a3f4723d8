//! Reconstruction and latent contrastive objectives with analytic gradients.
//!
//! The encoders are deterministic, so a latent "distribution" is a per-channel
//! Gaussian fitted over the spatial positions of one embedding. KL terms are
//! closed-form Gaussian KLs averaged over channels, computed per sample and
//! averaged over the batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::LatentTriple;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Reconstruction vs latent trade-off.
    pub alpha: f64,
    /// Shape consistency vs latent orthogonality trade-off.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.2, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.alpha) && (0.0..=1.0).contains(&self.beta),
            Config,
            "loss weights must lie in [0, 1], got alpha={} beta={}",
            self.alpha,
            self.beta
        );
        Ok(())
    }
}

/// Objective variant; the ablations drop one or both latent terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_LOL", alias = "no_lol")]
    NoLol,
    #[serde(rename = "no_SCL", alias = "no_scl")]
    NoScl,
    #[serde(rename = "no_LCL", alias = "no_lcl")]
    NoLcl,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Full, LossMode::NoLol, LossMode::NoScl, LossMode::NoLcl];

    pub fn needs_latents(self) -> bool {
        self != LossMode::NoLcl
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Full => "full",
            LossMode::NoLol => "no_LOL",
            LossMode::NoScl => "no_SCL",
            LossMode::NoLcl => "no_LCL",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(LossMode::Full),
            "no_lol" => Ok(LossMode::NoLol),
            "no_scl" => Ok(LossMode::NoScl),
            "no_lcl" => Ok(LossMode::NoLcl),
            _ => Err(Error::Config(format!("unknown loss mode '{s}'"))),
        }
    }
}

/// Per-channel Gaussian fitted to one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution<T> {
    pub mean: Vec<T>,
    /// Population variance, floored at [`VARIANCE_FLOOR`].
    pub var: Vec<T>,
}

/// Mean of absolute differences over all elements.
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<T> {
    ensure!(
        x.shape == x_rec.shape,
        Shape,
        "reconstruction {:?} does not match input {:?}",
        x_rec.shape,
        x.shape
    );
    let n = T::of_count(x.data.len());
    Ok(x.data.iter().zip(&x_rec.data).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n)
}

fn reconstruction_grad<T: Scalar>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Tensor<T> {
    let inv_n = T::one() / T::of_count(x.data.len());
    Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&x_rec.data)
            .map(|(&a, &b)| {
                if b > a {
                    inv_n
                } else if b < a {
                    -inv_n
                } else {
                    T::zero()
                }
            })
            .collect(),
    }
}

/// Fits per-channel Gaussians to an embedding laid out channel-major
/// (`channels × positions`).
pub fn fit_latent_distribution<T: Scalar>(z: &[T], channels: usize) -> Result<LatentDistribution<T>> {
    ensure!(
        channels > 0 && z.len().is_multiple_of(channels),
        Shape,
        "embedding of {} values cannot hold {channels} channels",
        z.len()
    );
    let positions = z.len() / channels;
    ensure!(
        positions >= 2,
        Shape,
        "need at least 2 positions per channel, got {positions}"
    );
    let p = T::of_count(positions);
    let floor = T::c(VARIANCE_FLOOR);
    let mut mean = Vec::with_capacity(channels);
    let mut var = Vec::with_capacity(channels);
    for ch in z.chunks_exact(positions) {
        let m = ch.iter().copied().sum::<T>() / p;
        let v = ch.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / p;
        mean.push(m);
        var.push(v.max(floor));
    }
    Ok(LatentDistribution { mean, var })
}

/// KL(fit(a) ‖ fit(b)) averaged over channels, with gradients w.r.t. both embeddings.
fn kl_with_grad<T: Scalar>(a: &[T], b: &[T], channels: usize) -> Result<(T, Vec<T>, Vec<T>)> {
    ensure!(
        a.len() == b.len(),
        Shape,
        "embeddings differ in size: {} vs {}",
        a.len(),
        b.len()
    );
    let da = fit_latent_distribution(a, channels)?;
    let db = fit_latent_distribution(b, channels)?;
    let positions = a.len() / channels;
    let p = T::of_count(positions);
    let c = T::of_count(channels);
    let half = T::c(0.5);
    let two = T::c(2.0);
    let floor = T::c(VARIANCE_FLOOR);
    let mut total = T::zero();
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for k in 0..channels {
        let (ma, va, mb, vb) = (da.mean[k], da.var[k], db.mean[k], db.var[k]);
        let diff = ma - mb;
        total += half * ((vb / va).ln() + (va + diff * diff) / vb - T::one());
        // partials of the per-channel KL, already divided by the channel count
        let d_ma = diff / vb / c;
        let d_mb = -d_ma;
        let d_va = half * (T::one() / vb - T::one() / va) / c;
        let d_vb = half * (T::one() / vb - (va + diff * diff) / (vb * vb)) / c;
        // floored variances pass no gradient
        let d_va = if va > floor { d_va } else { T::zero() };
        let d_vb = if vb > floor { d_vb } else { T::zero() };
        let range = k * positions..(k + 1) * positions;
        for (g, &x) in ga[range.clone()].iter_mut().zip(&a[range.clone()]) {
            *g = d_ma / p + d_va * two * (x - ma) / p;
        }
        for (g, &x) in gb[range.clone()].iter_mut().zip(&b[range]) {
            *g = d_mb / p + d_vb * two * (x - mb) / p;
        }
    }
    Ok((total / c, ga, gb))
}

/// Mean over channels of the closed-form KL between the fitted Gaussians of
/// two embeddings, in argument order.
pub fn kl_embedding<T: Scalar>(z_a: &[T], z_b: &[T], channels: usize) -> Result<T> {
    Ok(kl_with_grad(z_a, z_b, channels)?.0)
}

/// Batch-averaged latent terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentTerms<T> {
    /// KL(z_S ‖ z_γS).
    pub scl: T,
    /// max(0, 1 − KL(z_A ‖ z_S)).
    pub lol: T,
    pub lcl: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub rec: T,
    pub scl: T,
    pub lol: T,
    pub lcl: T,
    pub total: T,
}

/// Gradients of the total loss w.r.t. the reconstruction and the latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads<T> {
    pub x_rec: Tensor<T>,
    pub z_s: Option<Tensor<T>>,
    pub z_a: Option<Tensor<T>>,
    pub z_gs: Option<Tensor<T>>,
}

fn check_triple<T: Scalar>(t: &LatentTriple<T>) -> Result<()> {
    ensure!(
        t.z_s.shape == t.z_gs.shape,
        Shape,
        "z_S {:?} and z_γS {:?} differ",
        t.z_s.shape,
        t.z_gs.shape
    );
    ensure!(
        t.z_a.shape == t.z_s.shape,
        Shape,
        "z_A {:?} and z_S {:?} must have equal channel counts",
        t.z_a.shape,
        t.z_s.shape
    );
    Ok(())
}

/// Term weights (w_scl, w_lol) inside the latent contrastive loss for a mode.
fn lcl_weights(mode: LossMode, beta: f64) -> (f64, f64) {
    match mode {
        LossMode::Full => (beta, 1.0 - beta),
        LossMode::NoLol => (1.0, 0.0),
        LossMode::NoScl => (0.0, 1.0),
        LossMode::NoLcl => (0.0, 0.0),
    }
}

fn latent_terms_with_grad<T: Scalar>(
    triple: &LatentTriple<T>,
    w_scl: f64,
    w_lol: f64,
) -> Result<(LatentTerms<T>, [Tensor<T>; 3])> {
    check_triple(triple)?;
    let n = triple.z_s.batch();
    let c = triple.z_s.channels();
    let nf = T::of_count(n);
    let (ws, wl) = (T::c(w_scl), T::c(w_lol));
    let mut g_s = Tensor::zeros(triple.z_s.shape);
    let mut g_a = Tensor::zeros(triple.z_a.shape);
    let mut g_gs = Tensor::zeros(triple.z_gs.shape);
    let (mut scl, mut lol) = (T::zero(), T::zero());
    for i in 0..n {
        let (kl_s, gs_s, gs_gs) = kl_with_grad(triple.z_s.sample(i), triple.z_gs.sample(i), c)?;
        let (kl_o, go_a, go_s) = kl_with_grad(triple.z_a.sample(i), triple.z_s.sample(i), c)?;
        scl += kl_s / nf;
        let active = T::one() - kl_o > T::zero();
        if active {
            lol += (T::one() - kl_o) / nf;
        }
        let lol_scale = if active { -wl / nf } else { T::zero() };
        for (j, g) in g_s.sample_mut(i).iter_mut().enumerate() {
            *g = ws / nf * gs_s[j] + lol_scale * go_s[j];
        }
        for (g, v) in g_gs.sample_mut(i).iter_mut().zip(&gs_gs) {
            *g = ws / nf * *v;
        }
        for (g, v) in g_a.sample_mut(i).iter_mut().zip(&go_a) {
            *g = lol_scale * *v;
        }
    }
    let lcl = ws * scl + wl * lol;
    Ok((LatentTerms { scl, lol, lcl }, [g_s, g_a, g_gs]))
}

/// β·SCL + (1−β)·LOL, batch averaged, with the components for logging.
pub fn latent_contrastive_loss<T: Scalar>(triple: &LatentTriple<T>, beta: f64) -> Result<LatentTerms<T>> {
    ensure!(
        (0.0..=1.0).contains(&beta),
        Config,
        "beta must lie in [0, 1], got {beta}"
    );
    Ok(latent_terms_with_grad(triple, beta, 1.0 - beta)?.0)
}

/// Combined objective and its gradients.
///
/// `full`: α·L_Rec + (1−α)·(β·SCL + (1−β)·LOL); `no_LOL` and `no_SCL` keep a
/// single latent term at full weight; `no_LCL` is L_Rec alone.
pub fn total_loss_with_grad<T: Scalar>(
    x: &Tensor<T>,
    x_rec: &Tensor<T>,
    triple: Option<&LatentTriple<T>>,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(LossTerms<T>, LossGrads<T>)> {
    weights.validate()?;
    let rec = reconstruction_loss(x, x_rec)?;
    let rec_grad = reconstruction_grad(x, x_rec);
    if mode == LossMode::NoLcl {
        let terms = LossTerms {
            rec,
            scl: T::zero(),
            lol: T::zero(),
            lcl: T::zero(),
            total: rec,
        };
        return Ok((
            terms,
            LossGrads {
                x_rec: rec_grad,
                z_s: None,
                z_a: None,
                z_gs: None,
            },
        ));
    }
    let triple = triple.ok_or_else(|| Error::Config(format!("loss mode {mode} needs the latent triple")))?;
    let (w_scl, w_lol) = lcl_weights(mode, weights.beta);
    let (lt, [g_s, g_a, g_gs]) = latent_terms_with_grad(triple, w_scl, w_lol)?;
    let alpha = T::c(weights.alpha);
    let rest = T::one() - alpha;
    let scale = |mut t: Tensor<T>, s: T| {
        t.data.iter_mut().for_each(|v| *v *= s);
        t
    };
    Ok((
        LossTerms {
            rec,
            scl: lt.scl,
            lol: lt.lol,
            lcl: lt.lcl,
            total: alpha * rec + rest * lt.lcl,
        },
        LossGrads {
            x_rec: scale(rec_grad, alpha),
            z_s: Some(scale(g_s, rest)),
            z_a: Some(scale(g_a, rest)),
            z_gs: Some(scale(g_gs, rest)),
        },
    ))
}

pub fn total_loss<T: Scalar>(
    x: &Tensor<T>,
    x_rec: &Tensor<T>,
    triple: Option<&LatentTriple<T>>,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<LossTerms<T>> {
    Ok(total_loss_with_grad(x, x_rec, triple, weights, mode)?.0)
}
