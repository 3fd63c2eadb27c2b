//! Intensity preprocessing: brain masks, per-volume z-normalization over the
//! brain region, and masked histogram matching between time points.

use crate::error::{Error, Result};
use crate::volume::{BrainMask, Contrast, MultiContrastStudy, Volume3D};

pub const DEFAULT_HISTOGRAM_BINS: usize = 256;

/// Voxels with `|value| > threshold`.
pub fn brain_mask_with_threshold(vol: &Volume3D, threshold: f32) -> Result<BrainMask> {
    let data: Vec<bool> = vol.data().iter().map(|v| v.abs() > threshold).collect();
    if !data.iter().any(|&b| b) {
        return Err(Error::EmptyMask);
    }
    BrainMask::new(*vol.grid(), data)
}

/// Nonzero voxels; challenge data is skull-stripped with a zero background.
pub fn brain_mask(vol: &Volume3D) -> Result<BrainMask> {
    brain_mask_with_threshold(vol, 0.0)
}

fn masked_moments(vol: &Volume3D, mask: &BrainMask) -> (usize, f64, f64) {
    let vals = mask.select(vol);
    let n = vals.len();
    let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n.max(1) as f64;
    let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    (n, mean, var.sqrt())
}

/// Subtracts the masked mean and divides by the masked (population) standard
/// deviation; background voxels become 0.
pub fn znorm_brain(vol: &Volume3D, mask: &BrainMask) -> Result<Volume3D> {
    if !vol.grid().same_shape(mask.grid()) {
        return Err(Error::ShapeMismatch("mask and volume grids differ".into()));
    }
    let (n, mean, std) = masked_moments(vol, mask);
    if n < 2 {
        return Err(Error::EmptyMask);
    }
    if !(std > 0.0) {
        return Err(Error::ConstantRegion);
    }
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m { ((v as f64 - mean) / std) as f32 } else { 0.0 })
        .collect();
    vol.with_data(data)
}

/// Binned empirical CDF evaluated at bin centres.
struct BinnedCdf {
    centers: Vec<f64>,
    cdf: Vec<f64>,
}

impl BinnedCdf {
    fn new(values: &[f32], nbins: usize) -> Self {
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let width = (hi - lo) / nbins as f64;
        let mut counts = vec![0usize; nbins];
        for &v in values {
            let b = if width > 0.0 {
                (((v as f64 - lo) / width) as usize).min(nbins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        let n = values.len() as f64;
        let mut cum = 0usize;
        let mut cdf = Vec::with_capacity(nbins);
        for &c in &counts {
            // Mid-bin cumulative mass.
            cdf.push((cum as f64 + 0.5 * c as f64) / n);
            cum += c;
        }
        let centers = (0..nbins).map(|i| lo + (i as f64 + 0.5) * width).collect();
        Self { centers, cdf }
    }
}

/// Piecewise-linear interpolation through nondecreasing `xs`, clamped at the
/// ends.
fn interp(t: f64, xs: &[f64], ys: &[f64]) -> f64 {
    let j = xs.partition_point(|&x| x < t);
    if j == 0 {
        return ys[0];
    }
    if j == xs.len() {
        return ys[xs.len() - 1];
    }
    let (x0, x1) = (xs[j - 1], xs[j]);
    if x1 <= x0 {
        return ys[j];
    }
    ys[j - 1] + (ys[j] - ys[j - 1]) * (t - x0) / (x1 - x0)
}

/// Maps masked `src` intensities through `src`'s CDF and the inverse of
/// `reference`'s CDF (both over masked voxels, `nbins` bins). Voxels outside
/// `mask_src` are left unchanged.
pub fn histogram_match(
    src: &Volume3D,
    reference: &Volume3D,
    mask_src: &BrainMask,
    mask_ref: &BrainMask,
    nbins: usize,
) -> Result<Volume3D> {
    if nbins < 2 {
        return Err(Error::InvalidBins(nbins));
    }
    if !src.grid().same_shape(mask_src.grid()) || !reference.grid().same_shape(mask_ref.grid()) {
        return Err(Error::ShapeMismatch("mask and volume grids differ".into()));
    }
    let sv = mask_src.select(src);
    let rv = mask_ref.select(reference);
    if sv.is_empty() || rv.is_empty() {
        return Err(Error::EmptyMask);
    }
    let s = BinnedCdf::new(&sv, nbins);
    let r = BinnedCdf::new(&rv, nbins);
    let data = src
        .data()
        .iter()
        .zip(mask_src.data())
        .map(|(&v, &m)| {
            if !m {
                return v;
            }
            let q = interp(v as f64, &s.centers, &s.cdf);
            interp(q, &r.cdf, &r.centers) as f32
        })
        .collect();
    src.with_data(data)
}

/// Z-normalizes every contrast of both studies over its own brain mask, then
/// histogram-matches each post-op contrast to the pre-op one.
pub fn preprocess_pair(pre: &MultiContrastStudy, post: &MultiContrastStudy) -> Result<(MultiContrastStudy, MultiContrastStudy)> {
    let norm = |study: &MultiContrastStudy| study.try_map(|_, v| znorm_brain(v, &brain_mask(v)?));
    let pre_n = norm(pre)?;
    let post_n = norm(post)?;
    let post_m = post_n.try_map(|c: Contrast, v| {
        let r = pre_n.get(c);
        histogram_match(v, r, &brain_mask(post.get(c))?, &brain_mask(pre.get(c))?, DEFAULT_HISTOGRAM_BINS)
    })?;
    Ok((pre_n, post_m))
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f32], b: &[f32]) -> f64 {
    let mut a: Vec<f32> = a.to_vec();
    let mut b: Vec<f32> = b.to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
