//! Bayesian segmentation by inverting the generative model: a probabilistic
//! atlas prior, an unsupervised per-label Gaussian likelihood fitted by EM, and
//! an optional smooth polynomial bias field in the log domain.
//!
//! The atlas is assumed to be spatially aligned with the image.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::intensity::{gaussian_blur, Gaussian, GmmParams};
use crate::volume::{one_hot, Dims, LabelMap, Volume};

/// Probability floor added to every atlas channel before renormalization.
pub const ATLAS_FLOOR: f64 = 1e-6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const BLOCK: usize = 4096;

/// Per-voxel label probabilities, one channel per label in `ordering`.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    ordering: Vec<u16>,
    channels: Vec<Volume>,
}

impl Atlas {
    /// Validates that channels share dims, lie in [0, 1] and sum to 1 (±1e-5).
    pub fn new(ordering: Vec<u16>, channels: Vec<Volume>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Empty("atlas channels"));
        }
        if channels.len() != ordering.len() {
            return Err(Error::ChannelMismatch {
                atlas: channels.len(),
                expected: ordering.len(),
            });
        }
        let unique: BTreeSet<u16> = ordering.iter().copied().collect();
        if unique.len() != ordering.len() {
            return Err(Error::invalid("atlas ordering", "duplicate label"));
        }
        let dims = channels[0].dims();
        for c in &channels {
            dims.ensure_same(c.dims())?;
        }
        for idx in 0..dims.len() {
            let mut s = 0.0f64;
            for c in &channels {
                let p = c.data()[idx];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::invalid("atlas", format!("probability {p} outside [0, 1]")));
                }
                s += p as f64;
            }
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::invalid("atlas", format!("channels sum to {s} at voxel {idx}")));
            }
        }
        Ok(Self { ordering, channels })
    }

    /// Hard one-hot atlas of a single map, without the probability floor.
    pub fn one_hot(map: &LabelMap) -> Result<Self> {
        let ordering: Vec<u16> = map.label_set().into_iter().collect();
        let channels = one_hot(map, &ordering)?;
        Ok(Self { ordering, channels })
    }

    pub fn dims(&self) -> Dims {
        self.channels[0].dims()
    }

    pub fn ordering(&self) -> &[u16] {
        &self.ordering
    }

    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Voxelwise argmax label, ties to the lowest label id.
    pub fn argmax(&self) -> LabelMap {
        let dims = self.dims();
        let labels = (0..dims.len())
            .map(|j| argmax_label(&self.ordering, |k| self.channels[k].data()[j] as f64))
            .collect();
        LabelMap::from_raw(dims, labels)
    }
}

#[inline]
fn argmax_label(ordering: &[u16], value: impl Fn(usize) -> f64) -> u16 {
    let mut best = 0usize;
    let mut best_v = value(0);
    for k in 1..ordering.len() {
        let v = value(k);
        if v > best_v || (v == best_v && ordering[k] < ordering[best]) {
            best = k;
            best_v = v;
        }
    }
    ordering[best]
}

/// Averaged one-hot encodings, blurred by `smoothing_sigma` voxels, floored
/// at [`ATLAS_FLOOR`] and renormalized.
pub fn build_atlas(maps: &[LabelMap], smoothing_sigma: f64) -> Result<Atlas> {
    build_atlas_with_floor(maps, smoothing_sigma, ATLAS_FLOOR)
}

pub fn build_atlas_with_floor(maps: &[LabelMap], smoothing_sigma: f64, floor: f64) -> Result<Atlas> {
    let first = maps.first().ok_or(Error::Empty("label map list"))?;
    let dims = first.dims();
    for m in maps {
        dims.ensure_same(m.dims())?;
    }
    let ordering: Vec<u16> = maps
        .iter()
        .flat_map(|m| m.label_set())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut sums = vec![vec![0.0f64; dims.len()]; ordering.len()];
    for m in maps {
        for (k, ch) in one_hot(m, &ordering)?.into_iter().enumerate() {
            for (s, &v) in sums[k].iter_mut().zip(ch.data()) {
                *s += v as f64;
            }
        }
    }
    let inv = 1.0 / maps.len() as f64;
    let mut channels = Vec::with_capacity(ordering.len());
    for s in sums {
        let mean = Volume::from_raw(dims, s.into_iter().map(|v| (v * inv) as f32).collect());
        channels.push(gaussian_blur(&mean, smoothing_sigma)?);
    }
    let mut data: Vec<Vec<f32>> = channels.into_iter().map(Volume::into_data).collect();
    for j in 0..dims.len() {
        let total: f64 = data.iter().map(|c| c[j] as f64 + floor).sum();
        for c in data.iter_mut() {
            c[j] = ((c[j] as f64 + floor) / total) as f32;
        }
    }
    let channels = data
        .into_iter()
        .map(|d| Volume::from_raw(dims, d).with_voxel_size(first.voxel_size))
        .collect();
    Atlas::new(ordering, channels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tol: f64,
    /// Estimate a polynomial bias field in the log domain.
    pub bias: bool,
    /// Total degree of the bias polynomial (0..=4).
    pub bias_order: u32,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
            bias: false,
            bias_order: 3,
        }
    }
}

/// Fitted polynomial log-bias field.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasFit {
    /// Monomial exponents `[a, b, c]` for `x^a y^b z^c` in centered coordinates scaled to [-1, 1].
    pub exponents: Vec<[u32; 3]>,
    /// Coefficients after zero-meaning the field.
    pub coeffs: Vec<f64>,
    /// Coefficients of the raw least-squares solution.
    pub raw_coeffs: Vec<f64>,
    /// Zero-mean evaluated log-bias.
    pub field: Volume,
    /// Set when the normal equations were singular; the field is then zero.
    pub singular: bool,
}

impl BiasFit {
    /// Coefficient of one monomial, if part of the basis.
    pub fn coeff(&self, exponent: [u32; 3]) -> Option<f64> {
        self.exponents
            .iter()
            .position(|&e| e == exponent)
            .map(|i| self.coeffs[i])
    }
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub labels: LabelMap,
    pub posteriors: Vec<Volume>,
    pub ordering: Vec<u16>,
    /// Gaussian parameters in the working intensity domain (log domain when bias is on).
    pub fitted: GmmParams,
    pub bias: Option<BiasFit>,
    pub ll_trace: Vec<f64>,
    pub log_domain: bool,
}

/// Maps a [0, 1] image to the working log domain, `ln(255 I + 1)`.
pub fn to_log_domain(v: f32) -> f64 {
    (255.0 * v as f64 + 1.0).ln()
}

/// Working state of one EM run. Posteriors are stored channel-major.
struct EmState<'a> {
    y: Vec<f64>,
    log_prior: Vec<Vec<f64>>,
    ordering: &'a [u16],
    mu: Vec<f64>,
    var: Vec<f64>,
    bias: Vec<f64>,
    post: Vec<Vec<f32>>,
    var_floor: f64,
}

impl EmState<'_> {
    fn k(&self) -> usize {
        self.ordering.len()
    }

    /// E-step: posteriors and the marginal log-likelihood at the current parameters.
    fn e_step(&mut self) -> f64 {
        let k_count = self.k();
        let n = self.y.len();
        let log_norm: Vec<f64> = self.var.iter().map(|v| -0.5 * v.ln() - LN_SQRT_2PI).collect();
        let mut post_t = vec![0.0f32; n * k_count];
        let partial: Vec<f64> = post_t
            .par_chunks_mut(BLOCK * k_count)
            .enumerate()
            .map(|(b, out)| {
                let start = b * BLOCK;
                let mut ll = 0.0;
                let mut lp = vec![0.0f64; k_count];
                for (o, w) in out.chunks_mut(k_count).enumerate() {
                    let j = start + o;
                    let yj = self.y[j] - self.bias[j];
                    let mut m = f64::NEG_INFINITY;
                    for k in 0..k_count {
                        let d = yj - self.mu[k];
                        lp[k] = self.log_prior[k][j] + log_norm[k] - 0.5 * d * d / self.var[k];
                        m = m.max(lp[k]);
                    }
                    let mut s = 0.0;
                    for v in lp.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    for k in 0..k_count {
                        w[k] = (lp[k] / s) as f32;
                    }
                    ll += m + s.ln();
                }
                ll
            })
            .collect();
        for k in 0..k_count {
            let dst = &mut self.post[k];
            for j in 0..n {
                dst[j] = post_t[j * k_count + k];
            }
        }
        partial.iter().sum()
    }

    /// M-step for means and variances on the bias-corrected intensities.
    fn m_step(&mut self) {
        for k in 0..self.k() {
            let w = &self.post[k];
            let (mut sw, mut swy) = (0.0f64, 0.0f64);
            for j in 0..self.y.len() {
                let wj = w[j] as f64;
                sw += wj;
                swy += wj * (self.y[j] - self.bias[j]);
            }
            if sw <= 1e-12 {
                continue;
            }
            let mu = swy / sw;
            let mut s2 = 0.0;
            for j in 0..self.y.len() {
                let d = self.y[j] - self.bias[j] - mu;
                s2 += w[j] as f64 * d * d;
            }
            self.mu[k] = mu;
            self.var[k] = (s2 / sw).max(self.var_floor);
        }
    }
}

/// Segments `img` with EM under the atlas prior.
pub fn em_segment(img: &Volume, atlas: &Atlas, opts: &EmOptions) -> Result<EmResult> {
    img.dims().ensure_same(atlas.dims())?;
    if atlas.ordering.len() != atlas.channels.len() {
        return Err(Error::ChannelMismatch {
            atlas: atlas.channels.len(),
            expected: atlas.ordering.len(),
        });
    }
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image"));
    }
    if opts.bias && opts.bias_order > 4 {
        return Err(Error::invalid("bias_order", "must be in 0..=4"));
    }
    let dims = img.dims();
    let y: Vec<f64> = if opts.bias {
        img.data().iter().map(|&v| to_log_domain(v)).collect()
    } else {
        img.data().iter().map(|&v| v as f64).collect()
    };
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let sigma_min = ((hi - lo) * 1e-3).max(1e-12);
    let log_prior: Vec<Vec<f64>> = atlas
        .channels
        .iter()
        .map(|c| c.data().iter().map(|&p| (p as f64).ln()).collect())
        .collect();
    let k_count = atlas.len();
    let mut st = EmState {
        y,
        log_prior,
        ordering: &atlas.ordering,
        mu: vec![0.0; k_count],
        var: vec![1.0; k_count],
        bias: vec![0.0; dims.len()],
        post: vec![vec![0.0f32; dims.len()]; k_count],
        var_floor: sigma_min * sigma_min,
    };
    initialize(&mut st, atlas);

    let mut ll_trace = Vec::new();
    let mut bias_fit = None;
    for it in 0..=opts.max_iter {
        let ll = st.e_step();
        let converged = ll_trace
            .last()
            .is_some_and(|&prev: &f64| ((ll - prev) / prev.abs().max(1e-300)).abs() < opts.tol);
        ll_trace.push(ll);
        if converged || it == opts.max_iter {
            break;
        }
        st.m_step();
        if opts.bias {
            let fit = fit_bias(&st.y, &st.post, &st.mu, &st.var, dims, opts.bias_order);
            if !fit.singular {
                // The zero-meaned field moves its mean into the class means.
                let shift = fit.raw_coeffs[0] - fit.coeffs[0];
                for m in st.mu.iter_mut() {
                    *m += shift;
                }
                st.bias = fit.field.data().iter().map(|&v| v as f64).collect();
            }
            bias_fit = Some(fit);
        }
    }

    let labels = (0..dims.len())
        .map(|j| argmax_label(&atlas.ordering, |k| st.post[k][j] as f64))
        .collect();
    let fitted = GmmParams(
        atlas
            .ordering
            .iter()
            .enumerate()
            .map(|(k, &l)| (l, Gaussian { mu: st.mu[k], sigma: st.var[k].sqrt() }))
            .collect(),
    );
    let posteriors = st
        .post
        .into_iter()
        .map(|p| Volume::from_raw(dims, p).with_voxel_size(img.voxel_size))
        .collect();
    Ok(EmResult {
        labels: LabelMap::from_raw(dims, labels).with_voxel_size(img.voxel_size),
        posteriors,
        ordering: atlas.ordering.clone(),
        fitted,
        bias: bias_fit,
        ll_trace,
        log_domain: opts.bias,
    })
}

/// Atlas-weighted moments. Classes the atlas cannot tell apart (identical
/// weighted means) are separated by a deterministic 1D k-means over the
/// intensities they share.
fn initialize(st: &mut EmState<'_>, atlas: &Atlas) {
    let k_count = st.k();
    for k in 0..k_count {
        let a = atlas.channels[k].data();
        let (mut sw, mut swy) = (0.0f64, 0.0f64);
        for (j, &p) in a.iter().enumerate() {
            sw += p as f64;
            swy += p as f64 * st.y[j];
        }
        let mu = if sw > 0.0 { swy / sw } else { 0.0 };
        let mut s2 = 0.0;
        for (j, &p) in a.iter().enumerate() {
            let d = st.y[j] - mu;
            s2 += p as f64 * d * d;
        }
        st.mu[k] = mu;
        st.var[k] = if sw > 0.0 { (s2 / sw).max(st.var_floor) } else { st.var_floor };
    }
    let spread = st.var.iter().cloned().fold(0.0, f64::max).sqrt();
    let tol = 1e-3 * spread.max(st.var_floor.sqrt());
    let mut order: Vec<usize> = (0..k_count).collect();
    order.sort_by(|&a, &b| st.mu[a].total_cmp(&st.mu[b]).then(a.cmp(&b)));
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && st.mu[order[end]] - st.mu[order[start]] <= tol {
            end += 1;
        }
        if end - start > 1 {
            let group = &order[start..end];
            let (mu, var) = split_group(st, atlas, group);
            for (r, &k) in group.iter().enumerate() {
                st.mu[k] = mu[r];
                st.var[k] = var[r].max(st.var_floor);
            }
        }
        start = end;
    }
}

/// Lloyd iterations on a weighted intensity histogram, centers started evenly
/// across the range. Returns ascending means and per-cluster variances.
fn split_group(st: &EmState<'_>, atlas: &Atlas, group: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = group.len();
    const BINS: usize = 1024;
    let (lo, hi) = st
        .y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let width = ((hi - lo) / BINS as f64).max(1e-300);
    let mut hist = vec![[0.0f64; 3]; BINS];
    for (j, &y) in st.y.iter().enumerate() {
        let w: f64 = group.iter().map(|&k| atlas.channels[k].data()[j] as f64).sum();
        let b = (((y - lo) / width) as usize).min(BINS - 1);
        hist[b][0] += w;
        hist[b][1] += w * y;
        hist[b][2] += w * y * y;
    }
    let mut centers: Vec<f64> = (0..n).map(|r| lo + (hi - lo) * (r as f64 + 0.5) / n as f64).collect();
    let mut stats = vec![[0.0f64; 3]; n];
    for _ in 0..50 {
        stats.iter_mut().for_each(|s| *s = [0.0; 3]);
        for h in hist.iter().filter(|h| h[0] > 0.0) {
            let m = h[1] / h[0];
            let c = (0..n)
                .min_by(|&a, &b| (m - centers[a]).abs().total_cmp(&(m - centers[b]).abs()))
                .unwrap();
            for t in 0..3 {
                stats[c][t] += h[t];
            }
        }
        let next: Vec<f64> = (0..n)
            .map(|c| if stats[c][0] > 0.0 { stats[c][1] / stats[c][0] } else { centers[c] })
            .collect();
        if next == centers {
            break;
        }
        centers = next;
    }
    let var = (0..n)
        .map(|c| {
            if stats[c][0] > 0.0 {
                stats[c][2] / stats[c][0] - centers[c].powi(2)
            } else {
                ((hi - lo) / (2.0 * n as f64)).powi(2)
            }
        })
        .collect();
    (centers, var)
}

/// Marginal log-likelihood `sum_j log sum_k A_jk N(I_j; mu_k, sigma_k^2)`
/// on raw intensities. Sigmas are floored at 1e-12.
pub fn log_likelihood(img: &Volume, atlas: &Atlas, g: &GmmParams) -> Result<f64> {
    img.dims().ensure_same(atlas.dims())?;
    let params: Vec<Gaussian> = atlas
        .ordering
        .iter()
        .map(|&l| g.get(l).ok_or(Error::MissingLabel(l)))
        .collect::<Result<_>>()?;
    let k_count = params.len();
    let mut total = 0.0;
    let mut lp = vec![0.0f64; k_count];
    for (j, &v) in img.data().iter().enumerate() {
        let mut m = f64::NEG_INFINITY;
        for (k, p) in params.iter().enumerate() {
            let sigma = p.sigma.max(1e-12);
            let d = (v as f64 - p.mu) / sigma;
            lp[k] = (atlas.channels[k].data()[j] as f64).ln() - sigma.ln() - LN_SQRT_2PI - 0.5 * d * d;
            m = m.max(lp[k]);
        }
        let s: f64 = lp.iter().map(|&x| (x - m).exp()).sum();
        total += m + s.ln();
    }
    Ok(total)
}

fn monomials(order: u32, dims: Dims) -> Vec<[u32; 3]> {
    let live = dims.as_array().map(|n| n > 1);
    let mut out = Vec::new();
    for total in 0..=order {
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                let c = total - a - b;
                let e = [a, b, c];
                if (0..3).all(|ax| live[ax] || e[ax] == 0) {
                    out.push(e);
                }
            }
        }
    }
    out
}

/// Per-axis coordinates centered and scaled to [-1, 1].
fn axis_coords(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let h = c.max(1.0);
    (0..n).map(|i| (i as f64 - c) / h).collect()
}

fn powers(x: &[f64], max: u32) -> Vec<Vec<f64>> {
    x.iter()
        .map(|&v| {
            let mut p = Vec::with_capacity(max as usize + 1);
            let mut acc = 1.0;
            for _ in 0..=max {
                p.push(acc);
                acc *= v;
            }
            p
        })
        .collect()
}

/// Weighted least-squares polynomial fit of the precision-weighted residual.
fn fit_bias(
    y: &[f64],
    post: &[Vec<f32>],
    mu: &[f64],
    var: &[f64],
    dims: Dims,
    order: u32,
) -> BiasFit {
    let n = dims.len();
    let mut weight = vec![0.0f64; n];
    let mut resid = vec![0.0f64; n];
    for j in 0..n {
        let (mut w, mut wr) = (0.0, 0.0);
        for k in 0..mu.len() {
            let p = post[k][j] as f64 / var[k];
            w += p;
            wr += p * (y[j] - mu[k]);
        }
        weight[j] = w;
        resid[j] = if w > 0.0 { wr / w } else { 0.0 };
    }
    solve_bias(&weight, &resid, dims, order)
}

fn solve_bias(weight: &[f64], resid: &[f64], dims: Dims, order: u32) -> BiasFit {
    let exps = monomials(order, dims);
    let p = exps.len();
    let m2 = 2 * order;
    let px = powers(&axis_coords(dims.nx), m2);
    let py = powers(&axis_coords(dims.ny), m2);
    let pz = powers(&axis_coords(dims.nz), m2);
    let side = m2 as usize + 1;
    // moments[a][b][c] = sum W x^a y^b z^c, rhs_m[a][b][c] = sum W r x^a y^b z^c
    let mut mom = vec![0.0f64; side * side * side];
    let mut rmom = vec![0.0f64; side * side * side];
    let at = |a: usize, b: usize, c: usize| a + side * (b + side * c);
    let mut line_w = vec![0.0f64; side];
    let mut line_r = vec![0.0f64; side];
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            line_w.iter_mut().for_each(|v| *v = 0.0);
            line_r.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..dims.nx {
                let idx = dims.index(i, j, k);
                let w = weight[idx];
                let wr = w * resid[idx];
                for a in 0..side {
                    line_w[a] += w * px[i][a];
                    line_r[a] += wr * px[i][a];
                }
            }
            for c in 0..side {
                for b in 0..side - c {
                    let yz = py[j][b] * pz[k][c];
                    for a in 0..side - b - c {
                        mom[at(a, b, c)] += line_w[a] * yz;
                        rmom[at(a, b, c)] += line_r[a] * yz;
                    }
                }
            }
        }
    }
    let mut normal = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p];
    for (r, er) in exps.iter().enumerate() {
        rhs[r] = rmom[at(er[0] as usize, er[1] as usize, er[2] as usize)];
        for (c, ec) in exps.iter().enumerate() {
            normal[r * p + c] = mom[at(
                (er[0] + ec[0]) as usize,
                (er[1] + ec[1]) as usize,
                (er[2] + ec[2]) as usize,
            )];
        }
    }
    let Some(raw) = cholesky_solve(&mut normal, &rhs, p) else {
        return BiasFit {
            coeffs: vec![0.0; p],
            raw_coeffs: vec![0.0; p],
            exponents: exps,
            field: Volume::filled(dims, 0.0),
            singular: true,
        };
    };
    let mut field = vec![0.0f64; dims.len()];
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let mut v = 0.0;
                for (e, &c) in exps.iter().zip(&raw) {
                    v += c * px[i][e[0] as usize] * py[j][e[1] as usize] * pz[k][e[2] as usize];
                }
                field[dims.index(i, j, k)] = v;
            }
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let mut coeffs = raw.clone();
    // exps[0] is the constant monomial
    coeffs[0] -= mean;
    BiasFit {
        exponents: exps,
        coeffs,
        raw_coeffs: raw,
        field: Volume::from_raw(dims, field.into_iter().map(|v| (v - mean) as f32).collect()),
        singular: false,
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, overwritten).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-12 * scale) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut z = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            z[i] -= a[i * n + k] * z[k];
        }
        z[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= a[k * n + i] * z[k];
        }
        z[i] /= a[i * n + i];
    }
    Some(z)
}

/// Polynomial log-bias fit from a log-domain image and EM posteriors.
///
/// `posteriors[k]` belongs to `ordering[k]`, whose Gaussian is looked up in `fitted`.
pub fn estimate_bias(
    log_img: &Volume,
    posteriors: &[Volume],
    ordering: &[u16],
    fitted: &GmmParams,
    order: u32,
) -> Result<BiasFit> {
    if order > 4 {
        return Err(Error::invalid("bias_order", "must be in 0..=4"));
    }
    if posteriors.len() != ordering.len() {
        return Err(Error::ChannelMismatch {
            atlas: posteriors.len(),
            expected: ordering.len(),
        });
    }
    let dims = log_img.dims();
    for p in posteriors {
        dims.ensure_same(p.dims())?;
    }
    let mut mu = Vec::with_capacity(ordering.len());
    let mut var = Vec::with_capacity(ordering.len());
    for &l in ordering {
        let g = fitted.get(l).ok_or(Error::MissingLabel(l))?;
        mu.push(g.mu);
        var.push(g.sigma.max(1e-12).powi(2));
    }
    let y: Vec<f64> = log_img.data().iter().map(|&v| v as f64).collect();
    let post: Vec<Vec<f32>> = posteriors.iter().map(|p| p.data().to_vec()).collect();
    Ok(fit_bias(&y, &post, &mu, &var, dims, order))
}
