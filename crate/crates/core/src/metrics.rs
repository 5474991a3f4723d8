//! Segmentation, reconstruction and disentanglement metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::BinaryMask;
use crate::model::{gamma_augment, Autoencoder, ModelParams};
use crate::phantom::ClientDataset;
use crate::scalar::Scalar;
use crate::seeds::derive_seed_str;
use crate::tensor::Tensor;

/// 2|P∩G| / (|P|+|G|); two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    ensure!(
        pred.same_dims(gt),
        Shape,
        "prediction {}x{} vs ground truth {}x{}",
        pred.height,
        pred.width,
        gt.height,
        gt.width
    );
    let (p, g) = (pred.count(), gt.count());
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection_count(gt) as f64 / (p + g) as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window<T: Scalar>() -> Vec<T> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| T::c(v / s)).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid<T: Scalar>(img: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![T::zero(); h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ 1.5), K₁ = 0.01,
/// K₂ = 0.03 and dynamic range 1, over all fully covered window positions.
pub fn ssim<T: Scalar>(x: &[T], y: &[T], height: usize, width: usize) -> Result<T> {
    ensure!(
        x.len() == height * width && y.len() == height * width,
        Shape,
        "ssim inputs must both hold {height}x{width} values"
    );
    ensure!(
        height >= SSIM_WINDOW && width >= SSIM_WINDOW,
        Config,
        "image {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
    );
    let k = gaussian_window::<T>();
    let c1 = T::c((SSIM_K1 * 1.0).powi(2));
    let c2 = T::c((SSIM_K2 * 1.0).powi(2));
    let prod = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&p, &q)| p * q).collect() };
    let mx = filter_valid(x, height, width, &k);
    let my = filter_valid(y, height, width, &k);
    let mxx = filter_valid(&prod(x, x), height, width, &k);
    let myy = filter_valid(&prod(y, y), height, width, &k);
    let mxy = filter_valid(&prod(x, y), height, width, &k);
    let two = T::c(2.0);
    let mut sum = T::zero();
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        sum += ((two * ux * uy + c1) * (two * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(sum / T::of_count(mx.len()))
}

/// (a − b) / b.
pub fn relative_improvement(a: f64, b: f64) -> Result<f64> {
    if b == 0.0 {
        return Err(Error::Input(
            "relative improvement over a zero baseline is undefined".into(),
        ));
    }
    Ok((a - b) / b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution, Q(λ) = P(K > λ).
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // P(K <= λ) = √(2π)/λ Σ exp(−(2k−1)²π²/(8λ²)), fast for small λ
        let pi2 = std::f64::consts::PI.powi(2);
        let s: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-(j * j) * pi2 / (8.0 * lambda * lambda)).exp()
            })
            .sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// Q(√(nm/(n+m))·D).
pub fn ks_test<T: Scalar>(sample_a: &[T], sample_b: &[T]) -> Result<KsResult> {
    ensure!(
        !sample_a.is_empty() && !sample_b.is_empty(),
        Input,
        "KS test needs two nonempty samples ({} and {} values given)",
        sample_a.len(),
        sample_b.len()
    );
    ensure!(
        sample_a.iter().chain(sample_b).all(|v| !v.is_nan()),
        Input,
        "KS test samples contain NaN"
    );
    let mut a: Vec<f64> = sample_a.iter().map(|v| v.as_f64()).collect();
    let mut b: Vec<f64> = sample_b.iter().map(|v| v.as_f64()).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = a[i].min(b[j]);
        while i < n && a[i] <= v {
            i += 1;
        }
        while j < m && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(en * d),
    })
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        None
    } else {
        Some(dot / (na * nb))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Shape,
    Appearance,
    ShapeGamma,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Shape => "shape",
            EmbeddingKind::Appearance => "appearance",
            EmbeddingKind::ShapeGamma => "shape_gamma",
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub client_id: String,
    pub slice_id: String,
    pub kind: EmbeddingKind,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    /// Mean cos(z_S, z_A); lower means more orthogonal.
    pub sas: f64,
    /// Mean cos(z_S, z_γS); higher means more consistent.
    pub scs: f64,
    /// Pairs dropped because a vector had zero norm.
    pub excluded: usize,
}

/// SAS and SCS over per-slice flattened embeddings.
pub fn shape_appearance_similarity(records: &[EmbeddingRecord]) -> Result<SimilaritySummary> {
    let mut by_slice: BTreeMap<(&str, &str), BTreeMap<EmbeddingKind, &[f64]>> = BTreeMap::new();
    for r in records {
        by_slice
            .entry((&r.client_id, &r.slice_id))
            .or_default()
            .insert(r.kind, &r.vector);
    }
    let (mut sas, mut scs) = (Vec::new(), Vec::new());
    let mut excluded = 0;
    for ((client, slice), kinds) in &by_slice {
        let get = |k| {
            kinds
                .get(&k)
                .copied()
                .ok_or_else(|| Error::Input(format!("slice {client}/{slice} lacks a {k} embedding")))
        };
        let (s, a, g) = (
            get(EmbeddingKind::Shape)?,
            get(EmbeddingKind::Appearance)?,
            get(EmbeddingKind::ShapeGamma)?,
        );
        match cosine_similarity(s, a) {
            Some(v) => sas.push(v),
            None => excluded += 1,
        }
        match cosine_similarity(s, g) {
            Some(v) => scs.push(v),
            None => excluded += 1,
        }
    }
    ensure!(!sas.is_empty() && !scs.is_empty(), Input, "no usable embedding triples");
    if excluded > 0 {
        log::warn!("{excluded} zero-norm embedding pairs excluded from SAS/SCS");
    }
    Ok(SimilaritySummary {
        sas: sas.iter().sum::<f64>() / sas.len() as f64,
        scs: scs.iter().sum::<f64>() / scs.len() as f64,
        excluded,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketDice {
    /// Inclusive lower bound in mm².
    pub lower_mm2: f64,
    /// Exclusive upper bound; `None` for the last, open bucket.
    pub upper_mm2: Option<f64>,
    /// `None` when no slice falls into the bucket.
    pub dice: Option<MeanStd>,
}

/// DICE grouped by ground-truth lesion area per slice.
///
/// `thresholds_mm2` (ascending) delimit buckets `[t_i, t_{i+1})`, the last one
/// open-ended; slices below the first threshold are not counted.
pub fn stratified_dice(
    results: &[(BinaryMask, BinaryMask)],
    thresholds_mm2: &[f64],
    pixel_area_mm2: f64,
) -> Result<Vec<BucketDice>> {
    ensure!(
        !thresholds_mm2.is_empty(),
        Input,
        "at least one bucket threshold is required"
    );
    ensure!(
        thresholds_mm2.windows(2).all(|w| w[0] < w[1]),
        Input,
        "bucket thresholds must be strictly increasing"
    );
    ensure!(pixel_area_mm2 > 0.0, Input, "pixel area must be positive");
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); thresholds_mm2.len()];
    for (pred, gt) in results {
        let area = gt.count() as f64 * pixel_area_mm2;
        if let Some(b) = thresholds_mm2.iter().rposition(|&t| area >= t) {
            groups[b].push(dice(pred, gt)?);
        }
    }
    Ok(thresholds_mm2
        .iter()
        .enumerate()
        .map(|(i, &lo)| BucketDice {
            lower_mm2: lo,
            upper_mm2: thresholds_mm2.get(i + 1).copied(),
            dice: MeanStd::of(&groups[i]),
        })
        .collect())
}

/// Gamma applied to a slice when exporting its shape-gamma embedding.
pub fn export_gamma(seed: u64, client_id: &str, slice_index: usize, range: (f64, f64)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(seed, "export_gamma", client_id) ^ slice_index as u64);
    rng.random_range(range.0..=range.1)
}

/// Flattened z_S, z_A and z_γS of every test slice, in evaluation mode.
pub fn export_embeddings<T: Scalar>(
    params: &ModelParams<T>,
    datasets: &[ClientDataset<T>],
    gamma_range: (f64, f64),
    seed: u64,
) -> Result<Vec<EmbeddingRecord>> {
    let net = Autoencoder::for_params(params)?;
    let mut out = Vec::new();
    for d in datasets {
        for (i, s) in d.test.iter().enumerate() {
            let gamma = export_gamma(seed, &d.client_id, i, gamma_range);
            let shifted = gamma_augment(s, T::c(gamma))?;
            let (z_s, z_a) = net.encode(params, &s.to_tensor())?;
            let (z_gs, _) = net.encode(params, &shifted.to_tensor())?;
            let flat = |t: &Tensor<T>| t.data.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
            for (kind, z) in [
                (EmbeddingKind::Shape, &z_s),
                (EmbeddingKind::Appearance, &z_a),
                (EmbeddingKind::ShapeGamma, &z_gs),
            ] {
                out.push(EmbeddingRecord {
                    client_id: d.client_id.clone(),
                    slice_id: s.slice_id.clone(),
                    kind,
                    vector: flat(z),
                });
            }
        }
    }
    Ok(out)
}

/// Writes records as CSV: `client_id,slice_id,kind,v0..v{d-1}`.
pub fn write_embeddings_csv(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let dim = records.iter().map(|r| r.vector.len()).max().unwrap_or(0);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = vec!["client_id".to_string(), "slice_id".into(), "kind".into()];
    header.extend((0..dim).map(|i| format!("v{i}")));
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for r in records {
        let mut line = format!("{},{},{}", r.client_id, r.slice_id, r.kind);
        for v in &r.vector {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let kind = match &row[2] {
            "shape" => EmbeddingKind::Shape,
            "appearance" => EmbeddingKind::Appearance,
            "shape_gamma" => EmbeddingKind::ShapeGamma,
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("unknown embedding kind '{other}'"),
                })
            }
        };
        let vector = row
            .iter()
            .skip(3)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            client_id: row[0].to_string(),
            slice_id: row[1].to_string(),
            kind,
            vector,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
