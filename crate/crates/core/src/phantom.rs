//! Synthetic multi-site brain-like phantoms.
//!
//! Every client draws anatomy from one shared shape family; sites differ only
//! through their [`AppearanceProfile`]. Anatomy and noise streams are seeded
//! per slice from the dataset seed, never from the client identity.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::BinaryMask;
use crate::scalar::Scalar;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

/// One 2D grayscale scan with its brain mask and, on test slices, a lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSlice<T> {
    pub slice_id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<T>,
    pub brain_mask: BinaryMask,
    pub lesion_mask: Option<BinaryMask>,
}

impl<T: Scalar> ScanSlice<T> {
    pub fn new(slice_id: impl Into<String>, pixels: Vec<T>, brain_mask: BinaryMask) -> Result<Self> {
        ensure!(
            pixels.len() == brain_mask.height * brain_mask.width,
            Shape,
            "pixel grid of {} values does not match a {}x{} mask",
            pixels.len(),
            brain_mask.height,
            brain_mask.width
        );
        Ok(Self {
            slice_id: slice_id.into(),
            height: brain_mask.height,
            width: brain_mask.width,
            pixels,
            brain_mask,
            lesion_mask: None,
        })
    }

    /// `[1, 1, H, W]` tensor of the pixels.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor {
            shape: [1, 1, self.height, self.width],
            data: self.pixels.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ScanSlice<U> {
        ScanSlice {
            slice_id: self.slice_id.clone(),
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| U::c(v.as_f64())).collect(),
            brain_mask: self.brain_mask.clone(),
            lesion_mask: self.lesion_mask.clone(),
        }
    }

    /// Pixel values inside the brain mask.
    pub fn in_mask_values(&self) -> Vec<T> {
        self.pixels
            .iter()
            .zip(&self.brain_mask.data)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect()
    }
}

/// Site-specific intensity transform.
///
/// Applied in a fixed order: smoothing, contrast/brightness, gamma, additive
/// Gaussian noise, clipping to `[0, 1]`. Pixels outside the brain stay 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceProfile {
    pub brightness_offset: f64,
    pub contrast_gain: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub smoothing_radius: f64,
}

impl Default for AppearanceProfile {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AppearanceProfile {
    pub const IDENTITY: Self = Self {
        brightness_offset: 0.0,
        contrast_gain: 1.0,
        gamma: 1.0,
        noise_sigma: 0.0,
        smoothing_radius: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.gamma > 0.0 && self.gamma.is_finite(),
            Config,
            "profile gamma must be positive, got {}",
            self.gamma
        );
        ensure!(self.noise_sigma >= 0.0, Config, "noise_sigma must be >= 0");
        ensure!(self.smoothing_radius >= 0.0, Config, "smoothing_radius must be >= 0");
        ensure!(
            self.contrast_gain.is_finite() && self.brightness_offset.is_finite(),
            Config,
            "profile gain and offset must be finite"
        );
        Ok(())
    }

    /// Applies the profile to an `[0,1]` image. `noise_seed` drives the noise stream.
    pub fn apply(&self, pixels: &[f64], mask: &BinaryMask, noise_seed: u64) -> Vec<f64> {
        let (h, w) = (mask.height, mask.width);
        let mut out: Vec<f64> = pixels
            .iter()
            .zip(&mask.data)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        if self.smoothing_radius > 0.0 {
            out = gaussian_blur(&out, h, w, self.smoothing_radius);
        }
        if self.contrast_gain != 1.0 || self.brightness_offset != 0.0 {
            for v in &mut out {
                *v = self.contrast_gain * *v + self.brightness_offset;
            }
        }
        if self.gamma != 1.0 {
            for v in &mut out {
                *v = v.clamp(0.0, 1.0).powf(self.gamma);
            }
        }
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma validated");
            for (v, &m) in out.iter_mut().zip(&mask.data) {
                if m {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        for (v, &m) in out.iter_mut().zip(&mask.data) {
            *v = if m { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        out
    }
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (rr, cc) = if horizontal { (r, c + d) } else { (r + d, c) };
                    if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                        acc += kv * src[rr as usize * w + cc as usize];
                    }
                }
                dst[r as usize * w + c as usize] = acc / norm;
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    /// Inclusive range of lesion blobs per slice.
    pub count_range: (usize, usize),
    /// Inclusive range of blob radii in pixels.
    pub radius_range_px: (f64, f64),
    /// Fraction of the gap to 1.0 added to lesion pixels, in `[0, 1]`.
    pub hyperintensity: f64,
}

impl Default for LesionSpec {
    fn default() -> Self {
        Self {
            count_range: (1, 3),
            radius_range_px: (2.0, 4.0),
            hyperintensity: 0.5,
        }
    }
}

/// Record of a lesion injection, kept in the dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub seed: u64,
    pub spec: LesionSpec,
}

/// One site's healthy train/val/test scans.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub client_id: String,
    pub seed: u64,
    pub profile: AppearanceProfile,
    pub train: Vec<ScanSlice<T>>,
    pub val: Vec<ScanSlice<T>>,
    pub test: Vec<ScanSlice<T>>,
    /// N_j, the number of training slices.
    pub n_train: usize,
    pub lesions: Option<LesionRecord>,
}

impl<T: Scalar> ClientDataset<T> {
    pub fn splits(&self) -> [(&'static str, &[ScanSlice<T>]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    pub fn cast<U: Scalar>(&self) -> ClientDataset<U> {
        let c = |v: &[ScanSlice<T>]| v.iter().map(ScanSlice::cast).collect();
        ClientDataset {
            client_id: self.client_id.clone(),
            seed: self.seed,
            profile: self.profile,
            train: c(&self.train),
            val: c(&self.val),
            test: c(&self.test),
            n_train: self.n_train,
            lesions: self.lesions,
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Rotated ellipse in pixel coordinates.
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius; 1.0 on the boundary.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        (u * u + v * v).sqrt()
    }
}

/// Healthy anatomy in `[0,1]` and its brain mask.
fn render_anatomy(h: usize, w: usize, seed: u64) -> (Vec<f64>, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let brain = Ellipse {
        cx: wf / 2.0 + rng.random_range(-0.02..0.02) * wf,
        cy: hf / 2.0 + rng.random_range(-0.02..0.02) * hf,
        ax: wf * rng.random_range(0.36..0.40),
        ay: hf * rng.random_range(0.40..0.44),
        angle: rng.random_range(-0.1..0.1),
    };

    // Sub-structures: a symmetric pair of dark ventricles plus 1-4 bright deep nuclei.
    let mut blobs: Vec<(Ellipse, f64)> = Vec::new();
    let vent_off = brain.ax * rng.random_range(0.12..0.2);
    let vent_ax = brain.ax * rng.random_range(0.08..0.13);
    let vent_ay = brain.ay * rng.random_range(0.22..0.32);
    let vent_tilt = rng.random_range(0.05..0.25);
    for side in [-1.0, 1.0] {
        blobs.push((
            Ellipse {
                cx: brain.cx + side * vent_off,
                cy: brain.cy - brain.ay * 0.05,
                ax: vent_ax,
                ay: vent_ay,
                angle: brain.angle + side * vent_tilt,
            },
            0.12,
        ));
    }
    let nuclei = rng.random_range(1..=4usize);
    for _ in 0..nuclei {
        let r = rng.random_range(0.25..0.6);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        blobs.push((
            Ellipse {
                cx: brain.cx + r * brain.ax * t.cos(),
                cy: brain.cy + r * brain.ay * t.sin(),
                ax: brain.ax * rng.random_range(0.07..0.16),
                ay: brain.ay * rng.random_range(0.07..0.16),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
            rng.random_range(0.6..0.72),
        ));
    }
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let mut pixels = vec![0.0; h * w];
    let mut mask = BinaryMask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let rho = brain.rho(x, y);
            if rho > 1.0 {
                continue;
            }
            mask.set(r, c, true);
            // white matter core, grey-matter rim near the boundary
            let mut v = 0.45 + 0.27 * smoothstep(0.78, 0.9, rho);
            for (e, level) in &blobs {
                let weight = 1.0 - smoothstep(0.8, 1.0, e.rho(x, y));
                v += weight * (level - v);
            }
            for &(fx, fy, phase) in &waves {
                v += 0.015 * (fx * x + fy * y + phase).sin();
            }
            pixels[r * w + c] = v.clamp(0.0, 1.0);
        }
    }
    (pixels, mask)
}

fn check_size(size: (usize, usize)) -> Result<()> {
    let (h, w) = size;
    ensure!(
        h > 0 && w > 0 && h % 16 == 0 && w % 16 == 0,
        Config,
        "image size {h}x{w} must be positive and divisible by 16"
    );
    Ok(())
}

/// Generates one client's healthy dataset; a pure function of its arguments
/// (the client id only labels the result).
pub fn generate_phantom_client<T: Scalar>(
    client_id: &str,
    seed: u64,
    profile: &AppearanceProfile,
    counts: SplitCounts,
    size: (usize, usize),
) -> Result<ClientDataset<T>> {
    check_size(size)?;
    profile.validate()?;
    ensure!(
        counts.train > 0 && counts.val > 0 && counts.test > 0,
        Config,
        "split counts must be positive, got {counts:?}"
    );
    let (h, w) = size;
    let mut index = 0u64;
    let mut make = |split: &str, n: usize| -> Result<Vec<ScanSlice<T>>> {
        (0..n)
            .map(|i| {
                let anatomy_seed = derive_seed(seed, "anatomy", index);
                let noise_seed = derive_seed(seed, "noise", index);
                index += 1;
                let (raw, mask) = render_anatomy(h, w, anatomy_seed);
                let pixels = profile.apply(&raw, &mask, noise_seed);
                ScanSlice::new(format!("{split}-{i:04}"), pixels.into_iter().map(T::c).collect(), mask)
            })
            .collect()
    };
    let train = make("train", counts.train)?;
    let val = make("val", counts.val)?;
    let test = make("test", counts.test)?;
    Ok(ClientDataset {
        client_id: client_id.to_string(),
        seed,
        profile: *profile,
        n_train: train.len(),
        train,
        val,
        test,
        lesions: None,
    })
}

/// Adds hyper-intense lesion blobs to every test slice. Train and validation
/// slices are left untouched.
pub fn inject_lesions<T: Scalar>(dataset: &ClientDataset<T>, seed: u64, spec: &LesionSpec) -> Result<ClientDataset<T>> {
    let (cmin, cmax) = spec.count_range;
    let (rmin, rmax) = spec.radius_range_px;
    ensure!(
        cmin >= 1 && cmin <= cmax,
        Config,
        "lesion count range {:?} must satisfy 1 <= min <= max",
        spec.count_range
    );
    ensure!(
        rmin > 0.0 && rmin <= rmax,
        Config,
        "lesion radius range {:?} must satisfy 0 < min <= max",
        spec.radius_range_px
    );
    ensure!(
        (0.0..=1.0).contains(&spec.hyperintensity),
        Config,
        "hyperintensity must lie in [0, 1], got {}",
        spec.hyperintensity
    );
    let mut out = dataset.clone();
    let hyper = T::c(spec.hyperintensity);
    for (i, slice) in out.test.iter_mut().enumerate() {
        let (r0, c0, r1, c1) = slice
            .brain_mask
            .bounding_box()
            .ok_or_else(|| Error::Generation(format!("slice {} has an empty brain", slice.slice_id)))?;
        let extent = (r1 - r0 + 1).min(c1 - c0 + 1) as f64;
        if 2.0 * rmax >= extent {
            return Err(Error::Generation(format!(
                "lesion radius {rmax} px does not fit a brain of extent {extent} px"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lesion", i as u64));
        let count = rng.random_range(cmin..=cmax);
        let mut lesion = BinaryMask::empty(slice.height, slice.width);
        for _ in 0..count {
            let radius = if rmin == rmax {
                rmin
            } else {
                rng.random_range(rmin..=rmax)
            };
            // centers far enough from the boundary that the disk stays inside the brain
            let inner = slice.brain_mask.erode_cross(radius.ceil() as usize);
            let candidates: Vec<usize> = (0..inner.data.len()).filter(|&p| inner.data[p]).collect();
            if candidates.is_empty() {
                return Err(Error::Generation(format!(
                    "no room for a lesion of radius {radius} px in slice {}",
                    slice.slice_id
                )));
            }
            let center = candidates[rng.random_range(0..candidates.len())];
            let (cr, cc) = ((center / slice.width) as f64, (center % slice.width) as f64);
            for r in 0..slice.height {
                for c in 0..slice.width {
                    let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                    if dr * dr + dc * dc <= radius * radius && slice.brain_mask.get(r, c) {
                        lesion.set(r, c, true);
                    }
                }
            }
        }
        for (p, &l) in slice.pixels.iter_mut().zip(&lesion.data) {
            if l {
                *p = *p + hyper * (T::one() - *p);
            }
        }
        slice.lesion_mask = Some(lesion);
    }
    out.lesions = Some(LesionRecord { seed, spec: *spec });
    Ok(out)
}

/// Min-max scales in-mask pixels to `[0,1]`; out-of-mask pixels become 0.
/// A constant in-mask image maps to all zeros.
pub fn normalize<T: Scalar>(slice: &ScanSlice<T>) -> ScanSlice<T> {
    let inside = slice.in_mask_values();
    let mut out = slice.clone();
    let (lo, hi) = inside.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    for (p, &m) in out.pixels.iter_mut().zip(&slice.brain_mask.data) {
        *p = if m && range > T::zero() {
            (*p - lo) / range
        } else {
            T::zero()
        };
    }
    out
}

// --- persistence -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    client_id: String,
    seed: u64,
    height: usize,
    width: usize,
    profile: AppearanceProfile,
    n_train: usize,
    lesions: Option<LesionRecord>,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

pub(crate) fn write_gray16(path: &Path, h: usize, w: usize, pixels: &[f64]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = pixels[y as usize * w + x as usize].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    img.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}

pub(crate) fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((
        h as usize,
        w as usize,
        img.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
    ))
}

/// Writes a 1-bit PBM mask.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<u8> = mask.data.iter().map(|&b| b as u8).collect();
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Bitmap(SampleEncoding::Binary))
        .write_image(
            &raw,
            mask.width as u32,
            mask.height as u32,
            image::ExtendedColorType::L8,
        )?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::from_vec(h as usize, w as usize, img.as_raw().iter().map(|&v| v > 0).collect())
}

/// Persists a dataset as 16-bit PGM slices, PBM masks and a JSON manifest.
pub fn save_dataset<T: Scalar>(dataset: &ClientDataset<T>, dir: &Path) -> Result<()> {
    let first = dataset
        .train
        .first()
        .ok_or_else(|| Error::Input("cannot save a dataset without training slices".into()))?;
    for (split, slices) in dataset.splits() {
        let sd = dir.join(split);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for s in slices {
            let px: Vec<f64> = s.pixels.iter().map(|v| v.as_f64()).collect();
            write_gray16(&sd.join(format!("{}.pgm", s.slice_id)), s.height, s.width, &px)?;
            write_mask(&sd.join(format!("{}.brain.pbm", s.slice_id)), &s.brain_mask)?;
            if let Some(l) = &s.lesion_mask {
                write_mask(&sd.join(format!("{}.lesion.pbm", s.slice_id)), l)?;
            }
        }
    }
    let ids = |v: &[ScanSlice<T>]| v.iter().map(|s| s.slice_id.clone()).collect();
    let manifest = DatasetManifest {
        client_id: dataset.client_id.clone(),
        seed: dataset.seed,
        height: first.height,
        width: first.width,
        profile: dataset.profile,
        n_train: dataset.n_train,
        lesions: dataset.lesions,
        train: ids(&dataset.train),
        val: ids(&dataset.val),
        test: ids(&dataset.test),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<ClientDataset<T>> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)?;
    let load_split = |split: &str, ids: &[String]| -> Result<Vec<ScanSlice<T>>> {
        ids.iter()
            .map(|id| {
                let sd = dir.join(split);
                let (h, w, px) = read_gray16(&sd.join(format!("{id}.pgm")))?;
                if (h, w) != (m.height, m.width) {
                    return Err(Error::Format {
                        path: sd.join(format!("{id}.pgm")),
                        msg: format!("expected {}x{}, found {h}x{w}", m.height, m.width),
                    });
                }
                let brain = read_mask(&sd.join(format!("{id}.brain.pbm")))?;
                let mut s = ScanSlice::new(id.clone(), px.into_iter().map(T::c).collect(), brain)?;
                let lp = sd.join(format!("{id}.lesion.pbm"));
                if lp.exists() {
                    s.lesion_mask = Some(read_mask(&lp)?);
                }
                Ok(s)
            })
            .collect()
    };
    let train = load_split("train", &m.train)?;
    if train.len() != m.n_train {
        return Err(Error::Format {
            path,
            msg: "n_train does not match the training split".into(),
        });
    }
    Ok(ClientDataset {
        client_id: m.client_id,
        seed: m.seed,
        profile: m.profile,
        n_train: m.n_train,
        val: load_split("val", &m.val)?,
        test: load_split("test", &m.test)?,
        train,
        lesions: m.lesions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ks_test;

    const COUNTS: SplitCounts = SplitCounts {
        train: 4,
        val: 2,
        test: 2,
    };

    fn gen(profile: &AppearanceProfile, seed: u64) -> ClientDataset<f64> {
        generate_phantom_client("site", seed, profile, COUNTS, (64, 64)).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let p = AppearanceProfile {
            noise_sigma: 0.02,
            smoothing_radius: 0.7,
            ..AppearanceProfile::IDENTITY
        };
        assert_eq!(gen(&p, 11), gen(&p, 11));
    }

    #[test]
    fn split_bookkeeping() {
        let d = gen(&AppearanceProfile::IDENTITY, 3);
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (4, 2, 2));
        assert_eq!(d.n_train, 4);
        let mut ids: Vec<&str> = d
            .splits()
            .iter()
            .flat_map(|(_, s)| s.iter().map(|x| x.slice_id.as_str()))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 8);
        assert!(d
            .splits()
            .iter()
            .all(|(_, s)| s.iter().all(|x| x.lesion_mask.is_none())));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_16() {
        let r = generate_phantom_client::<f64>("a", 1, &AppearanceProfile::IDENTITY, COUNTS, (60, 64));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn pixels_stay_in_unit_range_and_background_is_zero() {
        let p = AppearanceProfile {
            brightness_offset: 0.3,
            contrast_gain: 1.5,
            gamma: 0.5,
            noise_sigma: 0.1,
            smoothing_radius: 1.0,
        };
        let d = gen(&p, 5);
        for s in &d.train {
            for (&v, &m) in s.pixels.iter().zip(&s.brain_mask.data) {
                assert!((0.0..=1.0).contains(&v));
                if !m {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn identity_profile_is_a_no_op() {
        let mask = BinaryMask::from_vec(2, 2, vec![true, true, true, false]).unwrap();
        let px = [0.1, 0.5, 0.9, 0.0];
        assert_eq!(AppearanceProfile::IDENTITY.apply(&px, &mask, 1), px.to_vec());
    }

    #[test]
    fn shape_family_is_client_independent() {
        let a = generate_phantom_client::<f64>("a", 9, &AppearanceProfile::IDENTITY, COUNTS, (64, 64)).unwrap();
        let b = generate_phantom_client::<f64>("b", 9, &AppearanceProfile::IDENTITY, COUNTS, (64, 64)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn gamma_profile_shifts_histogram_but_not_anatomy() {
        let a = gen(&AppearanceProfile::IDENTITY, 21);
        let g = gen(
            &AppearanceProfile {
                gamma: 2.0,
                ..AppearanceProfile::IDENTITY
            },
            21,
        );
        let mut va = Vec::new();
        let mut vg = Vec::new();
        for (sa, sg) in a.train.iter().zip(&g.train) {
            assert_eq!(sa.brain_mask, sg.brain_mask);
            va.extend(sa.in_mask_values());
            vg.extend(sg.in_mask_values());
        }
        let ks = ks_test(&va, &vg).unwrap();
        assert!(ks.statistic > 0.2, "KS statistic {}", ks.statistic);
    }

    #[test]
    fn anatomy_has_substructures() {
        let d = gen(&AppearanceProfile::IDENTITY, 2);
        let v = d.train[0].in_mask_values();
        let dark = v.iter().filter(|&&x| x < 0.25).count();
        let bright = v.iter().filter(|&&x| x > 0.6).count();
        assert!(dark > 10 && bright > 10, "dark {dark} bright {bright}");
    }

    #[test]
    fn lesions_stay_inside_brain_and_are_hyperintense() {
        let d = gen(&AppearanceProfile::IDENTITY, 4);
        let spec = LesionSpec {
            count_range: (1, 3),
            radius_range_px: (2.0, 4.0),
            hyperintensity: 0.5,
        };
        let l = inject_lesions(&d, 77, &spec).unwrap();
        assert_eq!(l.train, d.train);
        assert_eq!(l.val, d.val);
        let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0, 0.0, 0);
        for s in &l.test {
            let lm = s.lesion_mask.as_ref().unwrap();
            assert!(!lm.is_empty());
            assert!(lm.is_subset_of(&s.brain_mask));
            for ((&v, &b), &les) in s.pixels.iter().zip(&s.brain_mask.data).zip(&lm.data) {
                if les {
                    in_sum += v;
                    in_n += 1;
                } else if b {
                    out_sum += v;
                    out_n += 1;
                }
            }
        }
        assert!(in_sum / in_n as f64 > out_sum / out_n as f64);
    }

    #[test]
    fn zero_hyperintensity_records_mask_only() {
        let d = gen(&AppearanceProfile::IDENTITY, 4);
        let spec = LesionSpec {
            hyperintensity: 0.0,
            ..LesionSpec::default()
        };
        let l = inject_lesions(&d, 1, &spec).unwrap();
        for (a, b) in l.test.iter().zip(&d.test) {
            assert_eq!(a.pixels, b.pixels);
            assert!(a.lesion_mask.is_some());
        }
    }

    #[test]
    fn oversized_lesions_are_rejected() {
        let d = gen(&AppearanceProfile::IDENTITY, 4);
        let spec = LesionSpec {
            radius_range_px: (5.0, 40.0),
            ..LesionSpec::default()
        };
        assert!(matches!(inject_lesions(&d, 1, &spec), Err(Error::Generation(_))));
    }

    #[test]
    fn normalize_min_max_in_mask() {
        let mask = BinaryMask::from_vec(1, 4, vec![true, true, true, false]).unwrap();
        let s = ScanSlice::new("x", vec![2.0, 4.0, 6.0, 9.0], mask.clone()).unwrap();
        assert_eq!(normalize(&s).pixels, vec![0.0, 0.5, 1.0, 0.0]);

        let unit = ScanSlice::new("u", vec![0.0, 0.25, 1.0, 0.0], mask.clone()).unwrap();
        assert_eq!(normalize(&unit).pixels, unit.pixels);

        let flat = ScanSlice::new("c", vec![3.0, 3.0, 3.0, 0.0], mask).unwrap();
        assert_eq!(normalize(&flat).pixels, vec![0.0; 4]);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let d = inject_lesions(
            &gen(
                &AppearanceProfile {
                    gamma: 1.3,
                    ..AppearanceProfile::IDENTITY
                },
                8,
            ),
            3,
            &LesionSpec::default(),
        )
        .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_dataset(&d, tmp.path()).unwrap();
        let back: ClientDataset<f64> = load_dataset(tmp.path()).unwrap();
        assert_eq!(back.client_id, d.client_id);
        assert_eq!(back.lesions, d.lesions);
        for (a, b) in back.test.iter().zip(&d.test) {
            assert_eq!(a.brain_mask, b.brain_mask);
            assert_eq!(a.lesion_mask, b.lesion_mask);
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
    }
}
