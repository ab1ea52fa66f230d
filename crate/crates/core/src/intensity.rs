//! Intensity synthesis: per-label Gaussian sampling, partial-volume blur,
//! multiplicative bias field, gamma augmentation and min-max normalization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{check_range, GenConfig};
use crate::deform::draw_uniform;
use crate::error::{Error, Result};
use crate::volume::{upscale_trilinear, Dims, LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: f64,
    pub sigma: f64,
}

/// Per-label Gaussian intensity parameters, keyed by label id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GmmParams(pub BTreeMap<u16, Gaussian>);

impl GmmParams {
    pub fn get(&self, label: u16) -> Option<Gaussian> {
        self.0.get(&label).copied()
    }

    pub fn insert(&mut self, label: u16, g: Gaussian) {
        self.0.insert(label, g);
    }

    pub fn labels(&self) -> impl Iterator<Item = u16> + '_ {
        self.0.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, Gaussian)> + '_ {
        self.0.iter().map(|(&l, &g)| (l, g))
    }

    /// Smallest pairwise distance between means over `labels`, and the largest sigma.
    pub fn separation(&self, labels: &[u16]) -> Option<(f64, f64)> {
        let gs: Vec<Gaussian> = labels.iter().map(|&l| self.get(l)).collect::<Option<_>>()?;
        let mut min_gap = f64::INFINITY;
        for a in 0..gs.len() {
            for b in a + 1..gs.len() {
                min_gap = min_gap.min((gs[a].mu - gs[b].mu).abs());
            }
        }
        let max_sigma = gs.iter().map(|g| g.sigma).fold(0.0, f64::max);
        Some((min_gap, max_sigma))
    }
}

/// Gaussian hyperprior over one label's mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelHyperprior {
    pub mean_mu: f64,
    pub std_mu: f64,
    pub mean_sigma: f64,
    pub std_sigma: f64,
}

/// Hyperpriors for every label under one named contrast.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContrastHyperprior(pub BTreeMap<u16, LabelHyperprior>);

impl ContrastHyperprior {
    pub fn validate(&self) -> Result<()> {
        for (label, h) in &self.0 {
            let vals = [h.mean_mu, h.std_mu, h.mean_sigma, h.std_sigma];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("hyperprior"));
            }
            if h.std_mu < 0.0 || h.std_sigma < 0.0 {
                return Err(Error::invalid(
                    format!("hyperprior for label {label}"),
                    "standard deviations must be >= 0",
                ));
            }
        }
        Ok(())
    }
}

/// Coarse log-domain bias grid: `size^3` nodes, x-fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasParams {
    pub size: usize,
    pub sigma_b: f64,
    pub data: Vec<f64>,
}

impl BiasParams {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            sigma_b: 0.0,
            data: vec![0.0; size * size * size],
        }
    }

    /// `exp(upscale(grid))` on `dims`.
    pub fn field(&self, dims: Dims) -> Result<Volume> {
        let n = self.size;
        if n < 2 {
            return Err(Error::invalid("c_b", "control grid needs at least 2 nodes"));
        }
        if self.data.len() != n * n * n {
            return Err(Error::invalid("bias grid", "length is not size^3"));
        }
        let coarse = Volume::new(Dims::cube(n), self.data.iter().map(|&v| v as f32).collect())?;
        let log_bias = upscale_trilinear(&coarse, dims)?;
        Ok(log_bias.map(|v| (v as f64).exp() as f32))
    }
}

/// Independent uniform `(mu, sigma)` per label, drawn in the order given.
pub fn sample_gmm_params<R: Rng + ?Sized>(
    labels: &[u16],
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<GmmParams> {
    check_range("mu", cfg.a_mu, cfg.b_mu)?;
    check_range("sigma", cfg.a_sigma, cfg.b_sigma)?;
    if cfg.a_sigma < 0.0 {
        return Err(Error::invalid("a_sigma", "must be >= 0"));
    }
    let mut g = GmmParams::default();
    for &l in labels {
        let mu = draw_uniform(rng, cfg.a_mu, cfg.b_mu);
        let sigma = draw_uniform(rng, cfg.a_sigma, cfg.b_sigma);
        g.insert(l, Gaussian { mu, sigma });
    }
    Ok(g)
}

/// Picks one contrast uniformly, then draws each label's `(mu, sigma)` from its hyperprior.
pub fn sample_gmm_params_rule<R: Rng + ?Sized>(
    priors: &BTreeMap<String, ContrastHyperprior>,
    rng: &mut R,
) -> Result<(String, GmmParams)> {
    if priors.is_empty() {
        return Err(Error::Empty("contrast hyperprior set"));
    }
    let pick = rng.random_range(0..priors.len());
    let (name, prior) = priors.iter().nth(pick).expect("index in range");
    let mut g = GmmParams::default();
    for (&l, h) in &prior.0 {
        let z_mu: f64 = rng.sample(StandardNormal);
        let z_sigma: f64 = rng.sample(StandardNormal);
        g.insert(
            l,
            Gaussian {
                mu: h.mean_mu + h.std_mu * z_mu,
                sigma: (h.mean_sigma + h.std_sigma * z_sigma).max(0.0),
            },
        );
    }
    Ok((name.clone(), g))
}

/// Draws every voxel independently from its label's Gaussian, in voxel order.
pub fn sample_gmm_image<R: Rng + ?Sized>(l: &LabelMap, g: &GmmParams, rng: &mut R) -> Result<Volume> {
    let mut table = vec![None; u16::MAX as usize + 1];
    for (label, gauss) in g.iter() {
        table[label as usize] = Some(gauss);
    }
    for label in l.label_set() {
        if table[label as usize].is_none() {
            return Err(Error::MissingLabel(label));
        }
    }
    let data = l
        .labels()
        .iter()
        .map(|&label| {
            let gauss = table[label as usize].expect("coverage checked");
            let z: f64 = rng.sample(StandardNormal);
            (gauss.mu + gauss.sigma * z) as f32
        })
        .collect();
    Ok(Volume::from_raw(l.dims(), data).with_voxel_size(l.voxel_size))
}

/// Normalized discrete Gaussian taps for offsets `-r..=r`, `r = max(1, ceil(3 sigma))`.
pub fn blur_kernel(sigma: f64) -> Vec<f64> {
    let r = ((3.0 * sigma).ceil() as usize).max(1);
    let w: Vec<f64> = (-(r as i64)..=r as i64)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Half-sample symmetric reflection into `0..n`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_axis(v: &Volume, taps: &[f64], axis: usize) -> Volume {
    let dims = v.dims();
    let n = dims.as_array();
    let r = (taps.len() / 2) as i64;
    let (lo, hi) = v.min_max();
    let src = v.data();
    let plane = dims.nx * dims.ny;
    let mut out = vec![0.0f32; dims.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let ijk = [i, j, k];
                let center = src[dims.index(i, j, k)] as f64;
                let mut acc = 0.0f64;
                for (t, &w) in taps.iter().enumerate() {
                    let off = t as i64 - r;
                    if off == 0 {
                        continue;
                    }
                    let mut q = ijk;
                    q[axis] = reflect(ijk[axis] as i64 + off, n[axis]);
                    acc += w * (src[dims.index(q[0], q[1], q[2])] as f64 - center);
                }
                // Center-relative sum keeps constants exact; the clamp keeps the range.
                slab[i + j * dims.nx] = ((center + acc) as f32).clamp(lo, hi);
            }
        }
    });
    Volume::from_raw(dims, out).with_voxel_size(v.voxel_size)
}

/// Separable Gaussian blur with reflect padding. `sigma` in voxels.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid("sigma_blur", format!("must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let taps = blur_kernel(sigma);
    let x = blur_axis(v, &taps, 0);
    let y = blur_axis(&x, &taps, 1);
    Ok(blur_axis(&y, &taps, 2))
}

/// Draws the coarse log-bias grid, i.i.d. `N(0, sigma_b^2)`.
pub fn sample_bias_params<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<BiasParams> {
    if cfg.c_b < 2 {
        return Err(Error::invalid("c_b", "control grid needs at least 2 nodes"));
    }
    if !(cfg.sigma_b >= 0.0) {
        return Err(Error::invalid("sigma_b", "must be >= 0"));
    }
    let n = cfg.c_b.pow(3);
    let data = (0..n)
        .map(|_| cfg.sigma_b * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(BiasParams {
        size: cfg.c_b,
        sigma_b: cfg.sigma_b,
        data,
    })
}

/// Smooth, strictly positive multiplicative bias field on `dims`.
pub fn sample_bias<R: Rng + ?Sized>(cfg: &GenConfig, dims: Dims, rng: &mut R) -> Result<Volume> {
    sample_bias_params(cfg, rng)?.field(dims)
}

pub fn apply_bias(v: &Volume, b: &Volume) -> Result<Volume> {
    v.dims().ensure_same(b.dims())?;
    if let Some(&bad) = b.data().iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::NonPositiveBias(bad));
    }
    let data = v
        .data()
        .par_iter()
        .zip(b.data().par_iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Volume::from_raw(v.dims(), data).with_voxel_size(v.voxel_size))
}

/// Min-max rescale to [0, 1], then raise to the power `exp(gamma)`.
///
/// A constant input maps to all zeros.
pub fn gamma_normalize(v: &Volume, gamma: f64) -> Volume {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return v.map(|_| 0.0);
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let range = hi - lo;
    let exponent = gamma.exp();
    v.map(|x| {
        let t = (x as f64 - lo) / range;
        let t = if exponent == 1.0 { t } else { t.powf(exponent) };
        t.clamp(0.0, 1.0) as f32
    })
}

/// With probability `p_strip`, relabels every listed extracerebral label to
/// background. Returns the map and whether stripping happened.
pub fn strip_extracerebral<R: Rng + ?Sized>(
    l: &LabelMap,
    extracerebral: &[u16],
    rng: &mut R,
    p_strip: f64,
) -> (LabelMap, bool) {
    let strip = rng.random::<f64>() < p_strip;
    (apply_strip(l, extracerebral, strip), strip)
}

pub(crate) fn apply_strip(l: &LabelMap, extracerebral: &[u16], strip: bool) -> LabelMap {
    if !strip || extracerebral.is_empty() {
        return l.clone();
    }
    let mut drop = vec![false; u16::MAX as usize + 1];
    for &e in extracerebral {
        drop[e as usize] = true;
    }
    let labels = l
        .labels()
        .iter()
        .map(|&x| if drop[x as usize] { 0 } else { x })
        .collect();
    LabelMap::from_raw(l.dims(), labels).with_voxel_size(l.voxel_size)
}
