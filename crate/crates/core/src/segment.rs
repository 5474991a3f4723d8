//! Residual post-processing into binary anomaly masks.
//!
//! Order: erode the brain mask and zero the residual outside it, keep
//! positive residuals, median filter, threshold at a per-image percentile of
//! the in-mask values (strict `>`), label connected components and drop the
//! small ones.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::BinaryMask;
use crate::model::{Autoencoder, ModelParams};
use crate::phantom::ScanSlice;
use crate::scalar::Scalar;

/// Signed residual `x − x_rec` of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap<T> {
    pub slice_id: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    /// Erosions of the brain mask with a 3×3 cross.
    pub erosion_iterations: usize,
    /// Odd median window side.
    pub median_size: usize,
    pub percentile: f64,
    pub min_area: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            erosion_iterations: 1,
            median_size: 3,
            percentile: 99.0,
            min_area: 4,
            connectivity: Connectivity::Eight,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.percentile > 0.0 && self.percentile < 100.0,
            Config,
            "percentile must lie in (0, 100), got {}",
            self.percentile
        );
        ensure!(self.min_area >= 1, Config, "min_area must be at least 1");
        ensure!(
            self.median_size % 2 == 1,
            Config,
            "median window must be odd, got {}",
            self.median_size
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub label: usize,
    pub area: usize,
    /// (min_row, min_col, max_row, max_col), inclusive.
    pub bbox: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStatus {
    Ok,
    /// The eroded brain mask was empty; nothing could be segmented.
    EmptyBrainMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub mask: BinaryMask,
    pub components: Vec<Component>,
    pub status: SegmentStatus,
}

pub fn residual<T: Scalar>(x: &ScanSlice<T>, x_rec: &[T]) -> Result<ResidualMap<T>> {
    ensure!(
        x_rec.len() == x.pixels.len(),
        Shape,
        "reconstruction has {} pixels, slice {} has {}",
        x_rec.len(),
        x.slice_id,
        x.pixels.len()
    );
    Ok(ResidualMap {
        slice_id: x.slice_id.clone(),
        height: x.height,
        width: x.width,
        values: x.pixels.iter().zip(x_rec).map(|(&a, &b)| a - b).collect(),
    })
}

/// Index after symmetric reflection about the border (−1 → 0, n → n−1).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Square median filter with reflect padding.
pub fn median_filter<T: Scalar>(values: &[T], height: usize, width: usize, size: usize) -> Vec<T> {
    let r = (size / 2) as isize;
    let mut window = Vec::with_capacity(size * size);
    let mut out = Vec::with_capacity(values.len());
    for row in 0..height as isize {
        for col in 0..width as isize {
            window.clear();
            for dr in -r..=r {
                for dc in -r..=r {
                    window.push(values[reflect(row + dr, height) * width + reflect(col + dc, width)]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite residuals"));
            out.push(*m);
        }
    }
    out
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile<T: Scalar>(values: &[T], q: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::c(pos - lo as f64);
    Some(v[lo] + frac * (v[hi] - v[lo]))
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Per-pixel labels (0 = background, components numbered from 1 in raster
/// order of their first pixel) and the component table.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<usize>, Vec<Component>) {
    let (h, w) = (mask.height, mask.width);
    let mut ds = DisjointSet {
        parent: (0..h * w).collect(),
    };
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            for &(dr, dc) in back {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= 0 && nc >= 0 && (nc as usize) < w && mask.get(nr as usize, nc as usize) {
                    ds.union(r * w + c, nr as usize * w + nc as usize);
                }
            }
        }
    }
    let mut labels = vec![0; h * w];
    let mut root_label = vec![0; h * w];
    let mut comps: Vec<Component> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let root = ds.find(r * w + c);
            if root_label[root] == 0 {
                comps.push(Component {
                    label: comps.len() + 1,
                    area: 0,
                    bbox: (r, c, r, c),
                });
                root_label[root] = comps.len();
            }
            let l = root_label[root];
            labels[r * w + c] = l;
            let comp = &mut comps[l - 1];
            comp.area += 1;
            comp.bbox = (
                comp.bbox.0.min(r),
                comp.bbox.1.min(c),
                comp.bbox.2.max(r),
                comp.bbox.3.max(c),
            );
        }
    }
    (labels, comps)
}

pub fn postprocess<T: Scalar>(
    r: &ResidualMap<T>,
    brain_mask: &BinaryMask,
    config: &PostprocessConfig,
) -> Result<SegmentationMask> {
    config.validate()?;
    let (h, w) = (r.height, r.width);
    ensure!(
        brain_mask.height == h && brain_mask.width == w && r.values.len() == h * w,
        Shape,
        "residual {}x{} and brain mask {}x{} differ",
        h,
        w,
        brain_mask.height,
        brain_mask.width
    );
    let eroded = brain_mask.erode_cross(config.erosion_iterations);
    if eroded.is_empty() {
        log::warn!("slice {}: eroded brain mask is empty", r.slice_id);
        return Ok(SegmentationMask {
            mask: BinaryMask::empty(h, w),
            components: Vec::new(),
            status: SegmentStatus::EmptyBrainMask,
        });
    }
    let gated: Vec<T> = r
        .values
        .iter()
        .zip(&eroded.data)
        .map(|(&v, &m)| if m { v.max(T::zero()) } else { T::zero() })
        .collect();
    let filtered = median_filter(&gated, h, w, config.median_size);
    let inside: Vec<T> = filtered
        .iter()
        .zip(&eroded.data)
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    let threshold = percentile(&inside, config.percentile).expect("eroded mask is nonempty");
    let binary = BinaryMask::from_vec(
        h,
        w,
        filtered
            .iter()
            .zip(&eroded.data)
            .map(|(&v, &m)| m && v > threshold)
            .collect(),
    )?;
    let (labels, comps) = label_components(&binary, config.connectivity);
    let mut keep = vec![false; comps.len() + 1];
    let mut components = Vec::new();
    for c in comps.into_iter().filter(|c| c.area >= config.min_area) {
        keep[c.label] = true;
        components.push(Component {
            label: components.len() + 1,
            ..c
        });
    }
    let mask = BinaryMask::from_vec(h, w, labels.iter().map(|&l| keep[l]).collect())?;
    Ok(SegmentationMask {
        mask,
        components,
        status: SegmentStatus::Ok,
    })
}

/// Reconstructs `x` in evaluation mode and post-processes its residual.
pub fn segment_slice<T: Scalar>(
    params: &ModelParams<T>,
    x: &ScanSlice<T>,
    config: &PostprocessConfig,
) -> Result<SegmentationMask> {
    let net = Autoencoder::for_params(params)?;
    let rec = net.reconstruct(params, &x.to_tensor())?;
    postprocess(&residual(x, &rec.data)?, &x.brain_mask, config)
}
