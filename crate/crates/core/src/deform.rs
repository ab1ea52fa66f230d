//! Random spatial transforms: affine sampling, stationary velocity fields,
//! scaling-and-squaring integration, composition and pull-back warping.
//!
//! Every map here is a pull-back (gather) map: `output(x) = input(phi(x))`,
//! with `phi(x)` expressed in voxel coordinates of the input grid.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{check_range, GenConfig};
use crate::error::{Error, Result};
use crate::volume::{
    nearest_sample, upscale_field, Dims, LabelMap, TrilinearWeights, VectorField, Volume,
};

/// Homogeneous 4x4 matrix acting on voxel coordinates.
pub type Mat4 = [[f64; 4]; 4];

pub const IDENTITY: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Twelve affine parameters. Rotations in degrees, translations in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotations: [f64; 3],
    pub scalings: [f64; 3],
    pub shears: [f64; 3],
    pub translations: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotations: [0.0; 3],
            scalings: [1.0; 3],
            shears: [0.0; 3],
            translations: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scalings.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("scalings", "must be strictly positive"));
        }
        let all = self
            .rotations
            .iter()
            .chain(&self.shears)
            .chain(&self.translations);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine parameters"));
        }
        Ok(())
    }
}

/// Coarse velocity control grid: `size^3` nodes, three components each.
///
/// `data` holds the x, y and z component grids back to back, each x-fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvfParams {
    pub size: usize,
    pub sigma_svf: f64,
    pub data: Vec<f64>,
}

impl SvfParams {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            sigma_svf: 0.0,
            data: vec![0.0; 3 * size * size * size],
        }
    }

    pub fn coarse_field(&self) -> Result<VectorField> {
        let n = self.size;
        if n < 2 {
            return Err(Error::invalid("c_v", "control grid needs at least 2 nodes"));
        }
        if self.data.len() != 3 * n * n * n {
            return Err(Error::invalid("svf grid", "length is not 3 * size^3"));
        }
        let dims = Dims::cube(n);
        let comp = |c: usize| {
            let d = self.data[c * dims.len()..(c + 1) * dims.len()]
                .iter()
                .map(|&v| v as f32)
                .collect();
            Volume::new(dims, d)
        };
        VectorField::new(comp(0)?, comp(1)?, comp(2)?)
    }

    /// Dense velocity field on `dims`.
    pub fn upscale(&self, dims: Dims) -> Result<VectorField> {
        upscale_field(&self.coarse_field()?, dims)
    }
}

/// Pull-back coordinate map, stored as a displacement: `phi(x) = x + u(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformField {
    disp: VectorField,
}

impl DeformField {
    pub fn identity(dims: Dims) -> Self {
        Self {
            disp: VectorField::zeros(dims),
        }
    }

    pub fn from_displacement(disp: VectorField) -> Self {
        Self { disp }
    }

    pub fn dims(&self) -> Dims {
        self.disp.dims()
    }

    pub fn displacement(&self) -> &VectorField {
        &self.disp
    }

    /// Source coordinate of voxel `(i, j, k)`.
    #[inline]
    pub fn source(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let u = self.disp.get(self.dims().index(i, j, k));
        [i as f64 + u[0] as f64, j as f64 + u[1] as f64, k as f64 + u[2] as f64]
    }

    /// `phi(p)` at a continuous point, trilinearly interpolating the displacement.
    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let u = self.disp.sample(p);
        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
    }
}

#[inline]
fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

pub(crate) fn draw_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    uniform(rng, lo, hi)
}

/// Draws the twelve affine parameters independently from their ranges.
pub fn sample_affine<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<AffineParams> {
    check_range("rot", cfg.a_rot, cfg.b_rot)?;
    check_range("sc", cfg.a_sc, cfg.b_sc)?;
    check_range("sh", cfg.a_sh, cfg.b_sh)?;
    check_range("tr", cfg.a_tr, cfg.b_tr)?;
    let mut draw3 = |lo, hi| -> [f64; 3] { std::array::from_fn(|_| uniform(rng, lo, hi)) };
    let p = AffineParams {
        rotations: draw3(cfg.a_rot, cfg.b_rot),
        scalings: draw3(cfg.a_sc, cfg.b_sc),
        shears: draw3(cfg.a_sh, cfg.b_sh),
        translations: draw3(cfg.a_tr, cfg.b_tr),
    };
    p.validate()?;
    Ok(p)
}

pub fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

#[inline]
pub fn mat_apply(m: &Mat4, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3])
}

fn translation(t: [f64; 3]) -> Mat4 {
    let mut m = IDENTITY;
    m[0][3] = t[0];
    m[1][3] = t[1];
    m[2][3] = t[2];
    m
}

fn rotation(axis: usize, degrees: f64) -> Mat4 {
    let (s, c) = degrees.to_radians().sin_cos();
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut m = IDENTITY;
    m[a][a] = c;
    m[a][b] = -s;
    m[b][a] = s;
    m[b][b] = c;
    m
}

/// `Center^-1 * T * Rz * Ry * Rx * Shear * Scale * Center`, where `Center`
/// moves the grid center to the origin.
pub fn affine_matrix(p: &AffineParams, dims: Dims) -> Mat4 {
    let c = dims.center();
    let to_origin = translation([-c[0], -c[1], -c[2]]);
    let back = translation(c);
    let mut scale = IDENTITY;
    for a in 0..3 {
        scale[a][a] = p.scalings[a];
    }
    let mut shear = IDENTITY;
    shear[0][1] = p.shears[0];
    shear[0][2] = p.shears[1];
    shear[1][2] = p.shears[2];
    let chain = [
        back,
        translation(p.translations),
        rotation(2, p.rotations[2]),
        rotation(1, p.rotations[1]),
        rotation(0, p.rotations[0]),
        shear,
        scale,
        to_origin,
    ];
    chain.iter().fold(IDENTITY, |acc, m| mat_mul(&acc, m))
}

/// Draws the coarse velocity grid: i.i.d. `N(0, sigma_svf^2)` per node and component.
pub fn sample_svf_params<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<SvfParams> {
    if cfg.c_v < 2 {
        return Err(Error::invalid("c_v", "control grid needs at least 2 nodes"));
    }
    let n = 3 * cfg.c_v.pow(3);
    let data = (0..n)
        .map(|_| cfg.sigma_svf * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(SvfParams {
        size: cfg.c_v,
        sigma_svf: cfg.sigma_svf,
        data,
    })
}

/// Dense smooth velocity field on `dims`.
pub fn sample_svf<R: Rng + ?Sized>(cfg: &GenConfig, dims: Dims, rng: &mut R) -> Result<VectorField> {
    sample_svf_params(cfg, rng)?.upscale(dims)
}

/// Builds a vector field by evaluating `f` at every voxel, slab-parallel.
pub(crate) fn field_from_fn(
    dims: Dims,
    f: impl Fn(usize, usize, usize) -> [f64; 3] + Sync,
) -> VectorField {
    let plane = dims.nx * dims.ny;
    let mut comps = [
        vec![0.0f32; dims.len()],
        vec![0.0f32; dims.len()],
        vec![0.0f32; dims.len()],
    ];
    let [cx, cy, cz] = &mut comps;
    cx.par_chunks_mut(plane)
        .zip(cy.par_chunks_mut(plane))
        .zip(cz.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(k, ((sx, sy), sz))| {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    let v = f(i, j, k);
                    let o = i + j * dims.nx;
                    sx[o] = v[0] as f32;
                    sy[o] = v[1] as f32;
                    sz[o] = v[2] as f32;
                }
            }
        });
    let [x, y, z] = comps;
    VectorField::new(
        Volume::from_raw(dims, x),
        Volume::from_raw(dims, y),
        Volume::from_raw(dims, z),
    )
    .expect("components share dims")
}

/// Number of squarings for a field whose largest component is `max_abs`
/// voxels: enough halvings to bring it under half a voxel, within `[4, 8]`.
pub fn squaring_steps(max_abs: f64) -> u32 {
    if !(max_abs > 0.0) {
        return 4;
    }
    let n = (max_abs / 0.5).log2().ceil();
    n.clamp(4.0, 8.0) as u32
}

/// `exp(svf)` by scaling and squaring with the adaptive step count.
pub fn integrate_svf(svf: &VectorField) -> Result<DeformField> {
    integrate_svf_steps(svf, squaring_steps(svf.max_abs() as f64))
}

/// `exp(svf)` with an explicit number of squarings.
pub fn integrate_svf_steps(svf: &VectorField, steps: u32) -> Result<DeformField> {
    if !svf.max_abs().is_finite() {
        return Err(Error::NonFinite("velocity field"));
    }
    let dims = svf.dims();
    let mut u = svf.scaled(1.0 / (1u64 << steps) as f32);
    for _ in 0..steps {
        let prev = &u;
        u = field_from_fn(dims, |i, j, k| {
            let here = prev.get(dims.index(i, j, k));
            let p = [
                i as f64 + here[0] as f64,
                j as f64 + here[1] as f64,
                k as f64 + here[2] as f64,
            ];
            let there = prev.sample(p);
            [
                here[0] as f64 + there[0],
                here[1] as f64 + there[1],
                here[2] as f64 + there[2],
            ]
        });
    }
    Ok(DeformField { disp: u })
}

/// `x -> aff * phi_v(x)`: the velocity warp is applied first, then the affine.
pub fn compose(aff: &Mat4, phi_v: &DeformField) -> DeformField {
    let dims = phi_v.dims();
    let disp = field_from_fn(dims, |i, j, k| {
        let s = mat_apply(aff, phi_v.source(i, j, k));
        [s[0] - i as f64, s[1] - j as f64, s[2] - k as f64]
    });
    DeformField { disp }
}

/// The pure affine map on `dims` as a dense field.
pub fn affine_field(aff: &Mat4, dims: Dims) -> DeformField {
    compose(aff, &DeformField::identity(dims))
}

/// `x -> outer(inner(x))`.
pub fn compose_fields(outer: &DeformField, inner: &DeformField) -> Result<DeformField> {
    outer.dims().ensure_same(inner.dims())?;
    let dims = inner.dims();
    let disp = field_from_fn(dims, |i, j, k| {
        let s = outer.apply(inner.source(i, j, k));
        [s[0] - i as f64, s[1] - j as f64, s[2] - k as f64]
    });
    Ok(DeformField { disp })
}

/// Nearest-neighbour pull-back of a label map onto `phi`'s grid.
///
/// Source points that fall outside `s` become background, so the output
/// never contains a label absent from the input (other than 0).
pub fn warp_labels(s: &LabelMap, phi: &DeformField) -> LabelMap {
    let dims = phi.dims();
    let plane = dims.nx * dims.ny;
    let mut out = vec![0u16; dims.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                slab[i + j * dims.nx] = nearest_sample(s, phi.source(i, j, k));
            }
        }
    });
    LabelMap::from_raw(dims, out).with_voxel_size(s.voxel_size)
}

/// Trilinear pull-back of a scalar volume.
pub fn warp_volume(v: &Volume, phi: &DeformField) -> Result<Volume> {
    v.dims().ensure_same(phi.dims())?;
    let dims = phi.dims();
    let plane = dims.nx * dims.ny;
    let mut out = vec![0.0f32; dims.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let w = TrilinearWeights::new(dims, phi.source(i, j, k));
                slab[i + j * dims.nx] = w.apply(v.data()) as f32;
            }
        }
    });
    Ok(Volume::from_raw(dims, out).with_voxel_size(v.voxel_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det3(m: &Mat4) -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[test]
    fn identity_params_give_identity_matrix() {
        let m = affine_matrix(&AffineParams::identity(), Dims::new(17, 20, 9));
        assert_eq!(m, IDENTITY);
        for p in [[0.0, 0.0, 0.0], [3.7, -2.25, 100.5]] {
            assert_eq!(mat_apply(&m, p), p);
        }
    }

    #[test]
    fn scaling_determinant() {
        let p = AffineParams {
            scalings: [0.9, 1.0, 1.1],
            ..AffineParams::identity()
        };
        let m = affine_matrix(&p, Dims::cube(32));
        assert!((det3(&m) - 0.99).abs() < 1e-12);
        // rotations and shears keep the volume
        let p = AffineParams {
            rotations: [7.0, -3.0, 9.5],
            shears: [0.01, -0.01, 0.005],
            ..AffineParams::identity()
        };
        assert!((det3(&affine_matrix(&p, Dims::cube(32))) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn translation_offsets_points() {
        let p = AffineParams {
            translations: [3.0, 0.0, 0.0],
            ..AffineParams::identity()
        };
        let m = affine_matrix(&p, Dims::cube(16));
        let c = Dims::cube(16).center();
        let out = mat_apply(&m, c);
        assert_eq!(out, [c[0] + 3.0, c[1], c[2]]);
        assert_eq!(mat_apply(&m, [0.0; 3]), [3.0, 0.0, 0.0]);
    }

    #[test]
    fn rotation_about_center_fixes_center() {
        let p = AffineParams {
            rotations: [0.0, 0.0, 90.0],
            ..AffineParams::identity()
        };
        let dims = Dims::cube(11);
        let m = affine_matrix(&p, dims);
        let c = dims.center();
        let out = mat_apply(&m, c);
        for a in 0..3 {
            assert!((out[a] - c[a]).abs() < 1e-12);
        }
        // +x offset rotates to +y about z
        let out = mat_apply(&m, [c[0] + 1.0, c[1], c[2]]);
        assert!((out[0] - c[0]).abs() < 1e-12 && (out[1] - (c[1] + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn sample_affine_ranges() {
        let cfg = GenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let p = sample_affine(&cfg, &mut rng).unwrap();
            assert!(p.rotations.iter().all(|r| (-10.0..=10.0).contains(r)));
            assert!(p.scalings.iter().all(|s| (0.9..=1.1).contains(s)));
            assert!(p.shears.iter().all(|s| (-0.01..=0.01).contains(s)));
            assert!(p.translations.iter().all(|t| (-20.0..=20.0).contains(t)));
        }
    }

    #[test]
    fn degenerate_affine_ranges() {
        let cfg = GenConfig {
            a_rot: 4.0,
            b_rot: 4.0,
            a_sc: 1.05,
            b_sc: 1.05,
            a_sh: 0.0,
            b_sh: 0.0,
            a_tr: -2.0,
            b_tr: -2.0,
            ..GenConfig::default()
        };
        for seed in 0..5 {
            let p = sample_affine(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(p.rotations, [4.0; 3]);
            assert_eq!(p.scalings, [1.05; 3]);
            assert_eq!(p.translations, [-2.0; 3]);
        }
        let ident = GenConfig::disabled(100.0);
        let p = sample_affine(&ident, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(affine_matrix(&p, Dims::cube(8)), IDENTITY);
    }

    #[test]
    fn inverted_affine_range_rejected() {
        let cfg = GenConfig {
            a_tr: 1.0,
            b_tr: -1.0,
            ..GenConfig::default()
        };
        assert!(matches!(
            sample_affine(&cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InvertedRange { .. })
        ));
    }

    #[test]
    fn zero_sigma_svf_is_zero() {
        let cfg = GenConfig {
            sigma_svf: 0.0,
            ..GenConfig::default()
        };
        let f = sample_svf(&cfg, Dims::cube(12), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn coarse_svf_statistics() {
        let cfg = GenConfig::default();
        let p = sample_svf_params(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(p.size, 10);
        assert_eq!(p.data.len(), 3000);
        let mean = p.data.iter().sum::<f64>() / 3000.0;
        assert!(mean.abs() < 5.0 * 3.0 / 3000f64.sqrt());
        let var = p.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2999.0;
        assert!((var.sqrt() - 3.0).abs() < 0.2);
    }

    #[test]
    fn zero_svf_integrates_to_identity() {
        let phi = integrate_svf(&VectorField::zeros(Dims::cube(8))).unwrap();
        assert_eq!(phi, DeformField::identity(Dims::cube(8)));
        assert_eq!(phi.source(3, 4, 5), [3.0, 4.0, 5.0]);
    }

    #[test]
    fn constant_svf_is_translation() {
        let dims = Dims::cube(20);
        let phi = integrate_svf(&VectorField::constant(dims, [2.0, 0.0, 0.0])).unwrap();
        for k in 4..16 {
            for j in 4..16 {
                for i in 4..14 {
                    let s = phi.source(i, j, k);
                    assert!((s[0] - (i as f64 + 2.0)).abs() < 1e-5, "{s:?}");
                    assert!((s[1] - j as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn step_rule() {
        assert_eq!(squaring_steps(0.0), 4);
        assert_eq!(squaring_steps(1.0), 4);
        assert_eq!(squaring_steps(11.0), 5);
        assert_eq!(squaring_steps(20.0), 6);
        assert_eq!(squaring_steps(1e6), 8);
    }

    #[test]
    fn compose_identities() {
        let dims = Dims::cube(6);
        let phi_v = DeformField::from_displacement(VectorField::constant(dims, [0.5, -1.0, 0.25]));
        assert_eq!(compose(&IDENTITY, &phi_v), phi_v);
        let p = AffineParams {
            rotations: [3.0, 1.0, -2.0],
            ..AffineParams::identity()
        };
        let m = affine_matrix(&p, dims);
        let r = compose(&m, &DeformField::identity(dims));
        let want = mat_apply(&m, [1.0, 2.0, 3.0]);
        let got = r.source(1, 2, 3);
        for a in 0..3 {
            assert!((want[a] - got[a]).abs() < 1e-5);
        }
        let t = affine_matrix(
            &AffineParams {
                translations: [1.0, 2.0, -3.0],
                ..AffineParams::identity()
            },
            dims,
        );
        let r = compose(&t, &phi_v);
        for idx in 0..dims.len() {
            let u = r.displacement().get(idx);
            assert_eq!(u, [1.5, 1.0, -2.75]);
        }
    }

    #[test]
    fn warp_labels_identity_and_shift() {
        let dims = Dims::new(6, 5, 4);
        let s = LabelMap::from_fn(dims, |i, j, k| (1 + i + j * 2 + k) as u16);
        assert_eq!(warp_labels(&s, &DeformField::identity(dims)), s);
        let phi = DeformField::from_displacement(VectorField::constant(dims, [2.0, 0.0, 0.0]));
        let w = warp_labels(&s, &phi);
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..6 {
                    let want = if i + 2 < 6 { s.get(i + 2, j, k) } else { 0 };
                    assert_eq!(w.get(i, j, k), want);
                }
            }
        }
    }

    #[test]
    fn warp_volume_identity_and_constant() {
        let dims = Dims::cube(7);
        let v = Volume::from_fn(dims, |i, j, k| (i * j) as f32 - k as f32);
        assert_eq!(warp_volume(&v, &DeformField::identity(dims)).unwrap(), v);
        let svf = sample_svf(&GenConfig::default(), dims, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let phi = integrate_svf(&svf).unwrap();
        let c = Volume::filled(dims, 3.25);
        assert!(warp_volume(&c, &phi).unwrap().data().iter().all(|&x| x == 3.25));
        assert!(warp_volume(&Volume::filled(Dims::cube(6), 0.0), &phi).is_err());
    }

    #[test]
    fn warp_never_invents_labels() {
        let dims = Dims::cube(24);
        let s = LabelMap::from_fn(dims, |i, j, _| if i < 12 { 3 } else if j < 6 { 5 } else { 9 });
        let cfg = GenConfig::default();
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let aff = affine_matrix(&sample_affine(&cfg, &mut rng).unwrap(), dims);
            let phi = compose(&aff, &integrate_svf(&sample_svf(&cfg, dims, &mut rng).unwrap()).unwrap());
            let out = warp_labels(&s, &phi).label_set();
            assert!(out.iter().all(|l| [0, 3, 5, 9].contains(l)));
        }
    }
}
