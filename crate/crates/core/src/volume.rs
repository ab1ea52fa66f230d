//! Dense 3D grids and the resampling primitives every other module builds on.
//!
//! All grids are stored row-major with x varying fastest:
//! `index = i + j * nx + k * nx * ny`. File I/O and the stream protocol use
//! the same ordering.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub const fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (i, j, k)
    }

    /// Geometric center in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        [
            (self.nx as f64 - 1.0) / 2.0,
            (self.ny as f64 - 1.0) / 2.0,
            (self.nz as f64 - 1.0) / 2.0,
        ]
    }

    pub(crate) fn ensure_same(self, other: Dims) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                left: self,
                right: other,
            })
        }
    }

    pub(crate) fn ensure_nonempty(self) -> Result<()> {
        if self.is_empty() {
            Err(Error::BadDims(self, "every axis must be positive"))
        } else {
            Ok(())
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Dense scalar grid: intensities, probabilities or one field component.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
    pub voxel_size: [f32; 3],
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.ensure_nonempty()?;
        if data.len() != dims.len() {
            return Err(Error::BadDims(dims, "data length does not match dims"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(Self {
            dims,
            data,
            voxel_size: [1.0; 3],
        })
    }

    /// Builds a volume without the finiteness scan. Callers guarantee the invariants.
    pub(crate) fn from_raw(dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self {
            dims,
            data,
            voxel_size: [1.0; 3],
        }
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self::from_raw(dims, vec![value; dims.len()])
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let data = (0..dims.len())
            .map(|idx| {
                let (i, j, k) = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self::from_raw(dims, data)
    }

    pub fn with_voxel_size(mut self, voxel_size: [f32; 3]) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }


    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.dims.index(i, j, k)]
    }

    /// `(min, max)` over all voxels.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Volume {
        let data = self.data.par_iter().map(|&v| f(v)).collect();
        Volume {
            dims: self.dims,
            data,
            voxel_size: self.voxel_size,
        }
    }
}

/// Dense integer grid of anatomical labels. Label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    labels: Vec<u16>,
    pub voxel_size: [f32; 3],
}

impl LabelMap {
    pub fn new(dims: Dims, labels: Vec<u16>) -> Result<Self> {
        dims.ensure_nonempty()?;
        if labels.len() != dims.len() {
            return Err(Error::BadDims(dims, "label count does not match dims"));
        }
        Ok(Self::from_raw(dims, labels))
    }

    pub(crate) fn from_raw(dims: Dims, labels: Vec<u16>) -> Self {
        debug_assert_eq!(labels.len(), dims.len());
        Self {
            dims,
            labels,
            voxel_size: [1.0; 3],
        }
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> u16) -> Self {
        let labels = (0..dims.len())
            .map(|idx| {
                let (i, j, k) = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self::from_raw(dims, labels)
    }

    pub fn with_voxel_size(mut self, voxel_size: [f32; 3]) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u16> {
        self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.labels[self.dims.index(i, j, k)]
    }

    /// The distinct labels present, ascending.
    pub fn label_set(&self) -> BTreeSet<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(l, _)| l as u16)
            .collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Center crop (or identity when `target` equals the current dims).
    pub fn center_crop(&self, target: Dims) -> Result<LabelMap> {
        let off = crop_offset(self.dims, target)?;
        let out = LabelMap::from_fn(target, |i, j, k| {
            self.get(i + off[0], j + off[1], k + off[2])
        });
        Ok(out.with_voxel_size(self.voxel_size))
    }
}

fn crop_offset(from: Dims, to: Dims) -> Result<[usize; 3]> {
    to.ensure_nonempty()?;
    let f = from.as_array();
    let t = to.as_array();
    if (0..3).any(|a| t[a] > f[a]) {
        return Err(Error::BadDims(to, "crop larger than source"));
    }
    Ok([(f[0] - t[0]) / 2, (f[1] - t[1]) / 2, (f[2] - t[2]) / 2])
}

/// Three scalar components per voxel (displacement or velocity, voxel units).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    comps: [Volume; 3],
}

impl VectorField {
    pub fn new(x: Volume, y: Volume, z: Volume) -> Result<Self> {
        x.dims().ensure_same(y.dims())?;
        x.dims().ensure_same(z.dims())?;
        Ok(Self { comps: [x, y, z] })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            comps: [
                Volume::filled(dims, 0.0),
                Volume::filled(dims, 0.0),
                Volume::filled(dims, 0.0),
            ],
        }
    }

    pub fn constant(dims: Dims, v: [f32; 3]) -> Self {
        Self {
            comps: [
                Volume::filled(dims, v[0]),
                Volume::filled(dims, v[1]),
                Volume::filled(dims, v[2]),
            ],
        }
    }

    pub fn dims(&self) -> Dims {
        self.comps[0].dims()
    }

    pub fn component(&self, axis: usize) -> &Volume {
        &self.comps[axis]
    }


    pub fn into_components(self) -> [Volume; 3] {
        self.comps
    }

    #[inline]
    pub fn get(&self, idx: usize) -> [f32; 3] {
        [
            self.comps[0].data[idx],
            self.comps[1].data[idx],
            self.comps[2].data[idx],
        ]
    }

    /// Largest absolute component value.
    pub fn max_abs(&self) -> f32 {
        self.comps
            .iter()
            .flat_map(|c| c.data.iter())
            .fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f32) -> VectorField {
        Self {
            comps: [
                self.comps[0].map(|v| v * s),
                self.comps[1].map(|v| v * s),
                self.comps[2].map(|v| v * s),
            ],
        }
    }

    /// Trilinear sample of all three components at a continuous point.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let w = TrilinearWeights::new(self.dims(), p);
        [
            w.apply(&self.comps[0].data),
            w.apply(&self.comps[1].data),
            w.apply(&self.comps[2].data),
        ]
    }
}

/// Precomputed corner indices and weights of an edge-clamped trilinear lookup.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TrilinearWeights {
    idx: [usize; 8],
    t: [f64; 3],
}

impl TrilinearWeights {
    #[inline]
    pub(crate) fn new(dims: Dims, p: [f64; 3]) -> Self {
        let n = dims.as_array();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let max = (n[a] - 1) as f64;
            // NaN clamps to 0 through `max(0.0)`.
            let c = p[a].max(0.0).min(max);
            // c >= 0, so truncation is floor without a libm call
            lo[a] = c as usize;
            hi[a] = (lo[a] + 1).min(n[a] - 1);
            t[a] = c - lo[a] as f64;
        }
        let stride_y = n[0];
        let stride_z = n[0] * n[1];
        let mut idx = [0usize; 8];
        for (corner, slot) in idx.iter_mut().enumerate() {
            let i = if corner & 1 == 0 { lo[0] } else { hi[0] };
            let j = if corner & 2 == 0 { lo[1] } else { hi[1] };
            let k = if corner & 4 == 0 { lo[2] } else { hi[2] };
            *slot = i + j * stride_y + k * stride_z;
        }
        Self { idx, t }
    }

    #[inline]
    pub(crate) fn apply(&self, data: &[f32]) -> f64 {
        let [tx, ty, tz] = self.t;
        let v = |c: usize| data[self.idx[c]] as f64;
        let x00 = v(0) * (1.0 - tx) + v(1) * tx;
        let x10 = v(2) * (1.0 - tx) + v(3) * tx;
        let x01 = v(4) * (1.0 - tx) + v(5) * tx;
        let x11 = v(6) * (1.0 - tx) + v(7) * tx;
        let y0 = x00 * (1.0 - ty) + x10 * ty;
        let y1 = x01 * (1.0 - ty) + x11 * ty;
        y0 * (1.0 - tz) + y1 * tz
    }
}

/// Trilinear interpolation at a continuous voxel coordinate.
///
/// Points outside the grid are clamped to the nearest face, so the function
/// is total and never overshoots the range of its support.
#[inline]
pub fn trilinear_sample(v: &Volume, p: [f64; 3]) -> f64 {
    TrilinearWeights::new(v.dims, p).apply(&v.data)
}

/// Label of the nearest grid node (round half up per axis); 0 outside the grid.
#[inline]
pub fn nearest_sample(m: &LabelMap, p: [f64; 3]) -> u16 {
    let n = m.dims.as_array();
    let mut ijk = [0usize; 3];
    for a in 0..3 {
        let r = (p[a] + 0.5).floor();
        if !(r >= 0.0 && r < n[a] as f64) {
            return 0;
        }
        ijk[a] = r as usize;
    }
    m.get(ijk[0], ijk[1], ijk[2])
}

/// Align-corners resampling: coarse corner voxels land on fine corner voxels.
pub fn upscale_trilinear(coarse: &Volume, target: Dims) -> Result<Volume> {
    let c = coarse.dims.as_array();
    if c.iter().any(|&n| n < 2) {
        return Err(Error::BadDims(coarse.dims, "coarse grid needs >= 2 nodes per axis"));
    }
    let t = target.as_array();
    if t.iter().any(|&n| n < 2) {
        return Err(Error::BadDims(target, "target needs >= 2 voxels per axis"));
    }
    let scale: [f64; 3] = std::array::from_fn(|a| (c[a] - 1) as f64 / (t[a] - 1) as f64);
    let mut data = vec![0.0f32; target.len()];
    let plane = target.nx * target.ny;
    data.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        let z = k as f64 * scale[2];
        for j in 0..target.ny {
            let y = j as f64 * scale[1];
            for i in 0..target.nx {
                let x = i as f64 * scale[0];
                slab[i + j * target.nx] = trilinear_sample(coarse, [x, y, z]) as f32;
            }
        }
    });
    Ok(Volume::from_raw(target, data))
}

/// Component-wise [`upscale_trilinear`].
pub fn upscale_field(coarse: &VectorField, target: Dims) -> Result<VectorField> {
    Ok(VectorField {
        comps: [
            upscale_trilinear(&coarse.comps[0], target)?,
            upscale_trilinear(&coarse.comps[1], target)?,
            upscale_trilinear(&coarse.comps[2], target)?,
        ],
    })
}

/// One binary channel per entry of `ordering`.
pub fn one_hot(m: &LabelMap, ordering: &[u16]) -> Result<Vec<Volume>> {
    let mut slot = vec![usize::MAX; u16::MAX as usize + 1];
    for (k, &l) in ordering.iter().enumerate() {
        slot[l as usize] = k;
    }
    let mut channels = vec![vec![0.0f32; m.dims.len()]; ordering.len()];
    for (idx, &l) in m.labels.iter().enumerate() {
        let k = slot[l as usize];
        if k == usize::MAX {
            return Err(Error::MissingLabel(l));
        }
        channels[k][idx] = 1.0;
    }
    Ok(channels
        .into_iter()
        .map(|c| Volume::from_raw(m.dims, c).with_voxel_size(m.voxel_size))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corners() -> Volume {
        // value at corner (i,j,k) is i + 2j + 4k
        Volume::from_fn(Dims::cube(2), |i, j, k| (i + 2 * j + 4 * k) as f32)
    }

    #[test]
    fn constant_field_samples_constant() {
        let v = Volume::filled(Dims::new(4, 3, 2), 5.0);
        assert_eq!(trilinear_sample(&v, [2.3, 1.7, 0.5]), 5.0);
    }

    #[test]
    fn cube_center_is_corner_average() {
        assert!((trilinear_sample(&corners(), [0.5, 0.5, 0.5]) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn nodes_reproduce_values() {
        let v = Volume::from_fn(Dims::new(3, 4, 5), |i, j, k| (i * 7 + j * 3 + k) as f32 * 0.37);
        for k in 0..5 {
            for j in 0..4 {
                for i in 0..3 {
                    let s = trilinear_sample(&v, [i as f64, j as f64, k as f64]);
                    assert_eq!(s as f32, v.get(i, j, k));
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_clamps_to_edge() {
        let v = corners();
        assert_eq!(trilinear_sample(&v, [-3.0, -1.0, -9.0]), 0.0);
        assert_eq!(trilinear_sample(&v, [5.0, 5.0, 5.0]), 7.0);
    }

    #[test]
    fn nearest_rules() {
        let mut m = LabelMap::from_fn(Dims::new(4, 1, 1), |_, _, _| 0);
        m.labels[1] = 7;
        m.labels[2] = 9;
        assert_eq!(nearest_sample(&m, [1.0, 0.0, 0.0]), 7);
        assert_eq!(nearest_sample(&m, [1.49, 0.0, 0.0]), 7);
        assert_eq!(nearest_sample(&m, [1.5, 0.0, 0.0]), 9);
        assert_eq!(nearest_sample(&m, [-5.0, -5.0, -5.0]), 0);
        assert_eq!(nearest_sample(&m, [3.6, 0.0, 0.0]), 0);
    }

    #[test]
    fn upscale_linear_ramp() {
        let coarse = Volume::from_fn(Dims::cube(2), |i, _, _| i as f32);
        let fine = upscale_trilinear(&coarse, Dims::new(5, 2, 2)).unwrap();
        let row: Vec<f32> = (0..5).map(|i| fine.get(i, 1, 0)).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn upscale_identity_and_constant() {
        let v = Volume::from_fn(Dims::new(3, 4, 2), |i, j, k| (i * j + k) as f32);
        assert_eq!(upscale_trilinear(&v, v.dims()).unwrap().data(), v.data());
        let c = Volume::filled(Dims::cube(4), 2.5);
        let f = upscale_trilinear(&c, Dims::new(9, 7, 11)).unwrap();
        assert!(f.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn upscale_rejects_small_target() {
        let c = Volume::filled(Dims::cube(4), 1.0);
        assert!(matches!(
            upscale_trilinear(&c, Dims::new(1, 8, 8)),
            Err(Error::BadDims(..))
        ));
    }

    #[test]
    fn one_hot_checkerboard() {
        let m = LabelMap::from_fn(Dims::cube(4), |i, j, k| if (i + j + k) % 2 == 0 { 3 } else { 8 });
        let ch = one_hot(&m, &[3, 8]).unwrap();
        for idx in 0..m.dims().len() {
            assert_eq!(ch[0].data()[idx] + ch[1].data()[idx], 1.0);
            assert_eq!(ch[0].data()[idx] == 1.0, m.labels()[idx] == 3);
        }
        let single = LabelMap::from_fn(Dims::cube(3), |_, _, _| 5);
        let ch = one_hot(&single, &[5]).unwrap();
        assert!(ch[0].data().iter().all(|&v| v == 1.0));
        assert!(matches!(one_hot(&m, &[3]), Err(Error::MissingLabel(8))));
    }

    #[test]
    fn label_set_and_crop() {
        let m = LabelMap::from_fn(Dims::new(6, 4, 2), |i, _, _| if i < 3 { 0 } else { 4 });
        assert_eq!(m.label_set().into_iter().collect::<Vec<_>>(), vec![0, 4]);
        let c = m.center_crop(Dims::new(2, 2, 2)).unwrap();
        assert_eq!(c.labels(), &[0, 4, 0, 4, 0, 4, 0, 4]);
        assert!(m.center_crop(Dims::new(7, 1, 1)).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Volume::new(Dims::cube(1), vec![f32::NAN]).is_err());
        assert!(Volume::new(Dims::cube(2), vec![0.0; 7]).is_err());
    }

    fn small_volume() -> impl Strategy<Value = Volume> {
        (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(nx, ny, nz)| {
            prop::collection::vec(-100.0f32..100.0, nx * ny * nz)
                .prop_map(move |d| Volume::new(Dims::new(nx, ny, nz), d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn trilinear_never_overshoots(v in small_volume(), p in prop::array::uniform3(-2.0f64..6.0)) {
            let s = trilinear_sample(&v, p);
            let (lo, hi) = v.min_max();
            prop_assert!(s >= lo as f64 - 1e-9 && s <= hi as f64 + 1e-9);
        }

        #[test]
        fn one_hot_partition_of_unity(labels in prop::collection::vec(0u16..4, 27)) {
            let m = LabelMap::new(Dims::cube(3), labels).unwrap();
            let ch = one_hot(&m, &[0, 1, 2, 3]).unwrap();
            for idx in 0..27 {
                let s: f32 = ch.iter().map(|c| c.data()[idx]).sum();
                prop_assert_eq!(s, 1.0);
            }
        }

        #[test]
        fn upscale_hits_coarse_nodes(
            data in prop::collection::vec(-5.0f32..5.0, 27),
            f in 1usize..4,
        ) {
            // Fine spacing divides the coarse spacing, so every coarse node has a fine node.
            let coarse = Volume::new(Dims::cube(3), data).unwrap();
            let n = 2 * f + 1;
            let fine = upscale_trilinear(&coarse, Dims::cube(n)).unwrap();
            for k in 0..3 {
                for j in 0..3 {
                    for i in 0..3 {
                        let p = [(i * f) as f64, (j * f) as f64, (k * f) as f64];
                        let s = trilinear_sample(&fine, p);
                        prop_assert!((s - coarse.get(i, j, k) as f64).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
