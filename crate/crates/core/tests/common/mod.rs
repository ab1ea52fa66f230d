#![allow(dead_code)]

use mrisynth_core::deform::DeformField;
use mrisynth_core::{Dims, VectorField};
use rayon::prelude::*;

/// Interior voxels: at least `margin` voxels from every face.
pub fn interior(dims: Dims, margin: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for k in margin..dims.nz - margin {
        for j in margin..dims.ny - margin {
            for i in margin..dims.nx - margin {
                out.push((i, j, k));
            }
        }
    }
    out
}

/// Trajectories integrated together to hide lookup latency.
const LANES: usize = 16;

/// Edge-clamped trilinear velocity lookup with the three components
/// interleaved per voxel, for long Euler integrations.
pub struct FlowOracle {
    n: [usize; 3],
    data: Vec<[f32; 3]>,
}

impl FlowOracle {
    pub fn new(v: &VectorField) -> Self {
        let d = v.dims();
        let data = (0..d.len())
            .map(|i| {
                v.get(i)
            })
            .collect();
        Self { n: d.as_array(), data }
    }

    #[inline]
    fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let [nx, ny, nz] = self.n;
        let axis = |c: f64, n: usize, stride: usize| {
            let c = c.clamp(0.0, (n - 1) as f64);
            let lo = c as usize;
            (lo * stride, if lo + 1 < n { stride } else { 0 }, c - lo as f64)
        };
        let (bx, sx, tx) = axis(p[0], nx, 1);
        let (by, sy, ty) = axis(p[1], ny, nx);
        let (bz, sz, tz) = axis(p[2], nz, nx * ny);
        let b = bx + by + bz;
        let d = &self.data;
        let lerp = |a: &[f64; 3], c: &[f64; 3], t: f64| {
            [a[0] + t * (c[0] - a[0]), a[1] + t * (c[1] - a[1]), a[2] + t * (c[2] - a[2])]
        };
        let at = |i: usize| d[i].map(f64::from);
        let x00 = lerp(&at(b), &at(b + sx), tx);
        let x10 = lerp(&at(b + sy), &at(b + sy + sx), tx);
        let x01 = lerp(&at(b + sz), &at(b + sz + sx), tx);
        let x11 = lerp(&at(b + sz + sy), &at(b + sz + sy + sx), tx);
        lerp(&lerp(&x00, &x10, ty), &lerp(&x01, &x11, ty), tz)
    }

    /// [`FlowOracle::euler`] for several independent starts, stepped in lockstep.
    pub fn euler_many(&self, starts: &[[f64; 3]], steps: usize) -> Vec<[f64; 3]> {
        let dt = 1.0 / steps as f64;
        let mut ps = starts.to_vec();
        for _ in 0..steps {
            for p in ps.iter_mut() {
                let u = self.sample(*p);
                for a in 0..3 {
                    p[a] += dt * u[a];
                }
            }
        }
        ps
    }

    /// Endpoint of `dx/dt = v(x)` over unit time by explicit Euler.
    pub fn euler(&self, start: [f64; 3], steps: usize) -> [f64; 3] {
        let dt = 1.0 / steps as f64;
        let mut p = start;
        for _ in 0..steps {
            let u = self.sample(p);
            for a in 0..3 {
                p[a] += dt * u[a];
            }
        }
        p
    }
}

/// Max and mean Euclidean distance between `phi` and the Euler flow over `pts`.
pub fn flow_error(phi: &DeformField, v: &VectorField, pts: &[(usize, usize, usize)], steps: usize) -> (f64, f64) {
    let oracle = FlowOracle::new(v);
    let errs: Vec<f64> = pts
        .par_chunks(LANES)
        .flat_map_iter(|chunk| {
            let starts: Vec<[f64; 3]> = chunk.iter().map(|&(i, j, k)| [i as f64, j as f64, k as f64]).collect();
            let ends = oracle.euler_many(&starts, steps);
            chunk.iter().zip(ends).map(|(&(i, j, k), want)| {
                let got = phi.source(i, j, k);
                (0..3).map(|a| (got[a] - want[a]).powi(2)).sum::<f64>().sqrt()
            }).collect::<Vec<_>>()
        })
        .collect();
    let max = errs.iter().cloned().fold(0.0, f64::max);
    (max, errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Mean and max displacement magnitude of `phi` over `pts`.
pub fn displacement_norm(phi: &DeformField, pts: &[(usize, usize, usize)]) -> (f64, f64) {
    let dims = phi.dims();
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for &(i, j, k) in pts {
        let u = phi.displacement().get(dims.index(i, j, k));
        let n = u.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
        sum += n;
        max = max.max(n);
    }
    (sum / pts.len() as f64, max)
}
