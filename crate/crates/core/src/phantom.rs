//! Procedural head-like label maps for tests, demos and benchmarks.
//!
//! Nested ellipsoidal shells (scalp/skull, CSF, cortex, white matter) with a
//! smooth random surface wobble, two ventricles and a pair of deep gray nuclei.
//! Label ids follow the FreeSurfer lookup table where one applies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::{Dims, LabelMap};

pub const BACKGROUND: u16 = 0;
pub const WHITE_MATTER: u16 = 2;
pub const CORTEX: u16 = 3;
pub const LEFT_VENTRICLE: u16 = 4;
pub const LEFT_THALAMUS: u16 = 10;
pub const CSF: u16 = 24;
pub const EXTRACEREBRAL: u16 = 30;
pub const RIGHT_VENTRICLE: u16 = 43;
pub const RIGHT_THALAMUS: u16 = 49;

/// All labels a phantom may contain.
pub const PHANTOM_LABELS: [u16; 9] = [
    BACKGROUND,
    WHITE_MATTER,
    CORTEX,
    LEFT_VENTRICLE,
    LEFT_THALAMUS,
    CSF,
    EXTRACEREBRAL,
    RIGHT_VENTRICLE,
    RIGHT_THALAMUS,
];

/// Left/right structure pairs for contralateral averaging.
pub const CONTRALATERAL_PAIRS: [(u16, u16); 2] =
    [(LEFT_VENTRICLE, RIGHT_VENTRICLE), (LEFT_THALAMUS, RIGHT_THALAMUS)];

struct Wobble {
    amp: [f64; 3],
    freq: [f64; 3],
    phase: [f64; 3],
}

impl Wobble {
    fn new(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        Self {
            amp: std::array::from_fn(|_| amp * rng.random_range(0.3..1.0)),
            freq: std::array::from_fn(|_| rng.random_range(2.0..5.0)),
            phase: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }

    /// Relative radius perturbation along unit direction `d`.
    fn at(&self, d: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| self.amp[a] * (self.freq[a] * d[(a + 1) % 3] + self.phase[a]).sin())
            .sum()
    }
}

/// A head-like label map; `seed` varies shape and proportions slightly.
pub fn phantom_head(dims: Dims, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_4EAD);
    let c = dims.center();
    let half = [dims.nx as f64 / 2.0, dims.ny as f64 / 2.0, dims.nz as f64 / 2.0];
    let jitter = |rng: &mut ChaCha8Rng, r: f64| r * rng.random_range(0.95..1.05);
    let head = [jitter(&mut rng, 0.92), jitter(&mut rng, 0.92), jitter(&mut rng, 0.9)];
    let brain_outer = 0.78;
    let csf_inner = 0.68;
    let wm_outer = 0.5 * rng.random_range(0.95..1.05);
    let wobble = Wobble::new(&mut rng, 0.05);
    let vent_r = [0.1, jitter(&mut rng, 0.2), 0.12];
    let vent_dx = jitter(&mut rng, 0.13);
    let thal_r = jitter(&mut rng, 0.12);
    let thal_dx = 0.22;
    let thal_dy = -0.12;

    LabelMap::from_fn(dims, |i, j, k| {
        let p = [
            (i as f64 - c[0]) / half[0],
            (j as f64 - c[1]) / half[1],
            (k as f64 - c[2]) / half[2],
        ];
        let q = [p[0] / head[0], p[1] / head[1], p[2] / head[2]];
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if rho > 1.0 {
            return BACKGROUND;
        }
        let dir = if rho > 0.0 { [q[0] / rho, q[1] / rho, q[2] / rho] } else { [0.0; 3] };
        let w = 1.0 + wobble.at(dir);
        if rho > brain_outer {
            return EXTRACEREBRAL;
        }
        if rho > csf_inner {
            return CSF;
        }
        if rho > wm_outer * w {
            return CORTEX;
        }
        let ell = |center: [f64; 3], r: [f64; 3]| {
            (0..3).map(|a| ((p[a] - center[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
        };
        if ell([-vent_dx, 0.05, 0.0], vent_r) {
            return LEFT_VENTRICLE;
        }
        if ell([vent_dx, 0.05, 0.0], vent_r) {
            return RIGHT_VENTRICLE;
        }
        if ell([-thal_dx, thal_dy, 0.0], [thal_r; 3]) {
            return LEFT_THALAMUS;
        }
        if ell([thal_dx, thal_dy, 0.0], [thal_r; 3]) {
            return RIGHT_THALAMUS;
        }
        WHITE_MATTER
    })
}
