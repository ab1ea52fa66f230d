//! End-to-end sampling of `{image, target}` training pairs.
//!
//! Generation is split in two pure stages. [`Generator::sample_parameters`]
//! draws every random parameter of one sample from its per-stage streams, and
//! [`Generator::render`] turns a [`ParameterRecord`] into the pair. A pair is
//! therefore a function of `(maps, cfg, sample_index)` alone, and a stored
//! record regenerates its pair bit for bit.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ContrastMode, GenConfig};
use crate::deform::{
    affine_matrix, compose, draw_uniform, integrate_svf, sample_affine, sample_svf_params,
    warp_labels, AffineParams, SvfParams,
};
use crate::error::{Error, Result};
use crate::intensity::{
    apply_bias, apply_strip, gamma_normalize, gaussian_blur, sample_bias_params,
    sample_gmm_image, sample_gmm_params, sample_gmm_params_rule, BiasParams, GmmParams,
};
use crate::rng::{sample_seed, stage_rng, Stage};
use crate::volume::{Dims, LabelMap, Volume};

/// Every random quantity drawn for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecord {
    pub sample_index: u64,
    /// Seed of the per-sample streams; the voxel noise is re-drawn from it.
    pub sample_seed: u64,
    pub map_index: usize,
    pub affine: AffineParams,
    pub svf: SvfParams,
    /// Contrast name in rule mode.
    pub contrast: Option<String>,
    pub gmm: GmmParams,
    pub bias: BiasParams,
    pub gamma: f64,
    pub stripped: bool,
}

impl ParameterRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::StreamRecord(e.to_string()))
    }
}

/// One synthetic image with its segmentation and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// Intensities in [0, 1].
    pub image: Volume,
    pub target: LabelMap,
    pub record: ParameterRecord,
}

/// The exact parameters that produced `pair`.
pub fn record_parameters(pair: &TrainingPair) -> &ParameterRecord {
    &pair.record
}

/// Label maps plus configuration, validated once.
#[derive(Clone, Debug)]
pub struct Generator {
    maps: Vec<LabelMap>,
    cfg: GenConfig,
    labels: Vec<u16>,
}

impl Generator {
    pub fn new(maps: Vec<LabelMap>, cfg: GenConfig) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty("label map list"));
        }
        cfg.validate()?;
        let mut universe: BTreeSet<u16> = maps.iter().flat_map(|m| m.label_set()).collect();
        universe.insert(0);
        if cfg.mode == ContrastMode::Rule {
            for (name, prior) in &cfg.contrasts {
                if let Some(&l) = universe.iter().find(|l| !prior.0.contains_key(l)) {
                    return Err(Error::invalid(
                        format!("contrasts.{name}"),
                        format!("no hyperprior for label {l}"),
                    ));
                }
            }
        }
        Ok(Self {
            maps,
            cfg,
            labels: universe.into_iter().collect(),
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn maps(&self) -> &[LabelMap] {
        &self.maps
    }

    /// Union of all input labels and background, ascending.
    pub fn label_universe(&self) -> &[u16] {
        &self.labels
    }

    /// Draws all random parameters of sample `index`.
    pub fn sample_parameters(&self, index: u64) -> Result<ParameterRecord> {
        let cfg = &self.cfg;
        let seed = sample_seed(cfg.seed, index);
        let map_index = stage_rng(seed, Stage::MapChoice).random_range(0..self.maps.len());
        let affine = sample_affine(cfg, &mut stage_rng(seed, Stage::Affine))?;
        let svf = sample_svf_params(cfg, &mut stage_rng(seed, Stage::Svf))?;
        let stripped = stage_rng(seed, Stage::Strip).random::<f64>() < cfg.p_strip;
        let (contrast, gmm) = match cfg.mode {
            ContrastMode::Agnostic => (
                None,
                sample_gmm_params(&self.labels, cfg, &mut stage_rng(seed, Stage::Gmm))?,
            ),
            ContrastMode::Rule => {
                let (name, g) =
                    sample_gmm_params_rule(&cfg.contrasts, &mut stage_rng(seed, Stage::Gmm))?;
                (Some(name), g)
            }
        };
        let bias = sample_bias_params(cfg, &mut stage_rng(seed, Stage::Bias))?;
        let gamma = draw_uniform(&mut stage_rng(seed, Stage::Gamma), cfg.a_gamma, cfg.b_gamma);
        Ok(ParameterRecord {
            sample_index: index,
            sample_seed: seed,
            map_index,
            affine,
            svf,
            contrast,
            gmm,
            bias,
            gamma,
            stripped,
        })
    }

    /// The deformed, cropped and possibly stripped label map of a record.
    pub fn render_target(&self, record: &ParameterRecord) -> Result<LabelMap> {
        let map = self.maps.get(record.map_index).ok_or_else(|| {
            Error::invalid("map_index", format!("{} out of {} maps", record.map_index, self.maps.len()))
        })?;
        record.affine.validate()?;
        let dims = map.dims();
        let phi_v = integrate_svf(&record.svf.upscale(dims)?)?;
        let phi = compose(&affine_matrix(&record.affine, dims), &phi_v);
        let mut target = warp_labels(map, &phi);
        if let Some(d) = self.cfg.output_dims {
            target = target.center_crop(Dims::new(d[0], d[1], d[2]))?;
        }
        Ok(apply_strip(&target, &self.cfg.extracerebral_labels, record.stripped))
    }

    /// Deterministically rebuilds the pair described by `record`.
    pub fn render(&self, record: &ParameterRecord) -> Result<TrainingPair> {
        let target = self.render_target(record)?;
        let mut noise = stage_rng(record.sample_seed, Stage::Noise);
        let g = sample_gmm_image(&target, &record.gmm, &mut noise)?;
        let blurred = gaussian_blur(&g, self.cfg.sigma_blur)?;
        let bias = record.bias.field(target.dims())?;
        let biased = apply_bias(&blurred, &bias)?;
        let image = gamma_normalize(&biased, record.gamma).with_voxel_size(target.voxel_size);
        Ok(TrainingPair {
            image,
            target,
            record: record.clone(),
        })
    }

    pub fn pair(&self, index: u64) -> Result<TrainingPair> {
        self.render(&self.sample_parameters(index)?)
    }

    /// Lazily yields pairs `0, 1, 2, ...` (up to `count` when given), generated
    /// in parallel blocks but always presented in index order.
    pub fn stream(self: Arc<Self>, count: Option<u64>) -> PairStream {
        PairStream {
            gen: self,
            next: 0,
            end: count,
            block: rayon::current_num_threads().max(1) as u64,
            ready: VecDeque::new(),
        }
    }
}

/// Single pair for `sample_index`.
pub fn generate_pair(maps: &[LabelMap], cfg: &GenConfig, sample_index: u64) -> Result<TrainingPair> {
    Generator::new(maps.to_vec(), cfg.clone())?.pair(sample_index)
}

/// Lazy, index-ordered pair sequence.
pub fn generate_stream(maps: Vec<LabelMap>, cfg: GenConfig, count: Option<u64>) -> Result<PairStream> {
    Ok(Arc::new(Generator::new(maps, cfg)?).stream(count))
}

pub struct PairStream {
    gen: Arc<Generator>,
    next: u64,
    end: Option<u64>,
    block: u64,
    ready: VecDeque<Result<TrainingPair>>,
}

impl PairStream {
    pub fn with_block_size(mut self, block: u64) -> Self {
        self.block = block.max(1);
        self
    }

    /// Skips ahead so the first yielded pair is `start`; `count` still bounds the end index.
    pub fn starting_at(mut self, start: u64) -> Self {
        self.ready.clear();
        self.next = start;
        self
    }

    fn refill(&mut self) {
        let stop = match self.end {
            Some(end) => end.min(self.next + self.block),
            None => self.next + self.block,
        };
        let gen = &self.gen;
        let batch: Vec<Result<TrainingPair>> =
            (self.next..stop).into_par_iter().map(|i| gen.pair(i)).collect();
        self.next = stop;
        self.ready.extend(batch);
    }
}

impl Iterator for PairStream {
    type Item = Result<TrainingPair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.ready.is_empty() {
            if self.end.is_some_and(|end| self.next >= end) {
                return None;
            }
            self.refill();
        }
        self.ready.pop_front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::phantom_head;

    fn maps(n: usize, size: usize) -> Vec<LabelMap> {
        (0..n).map(|s| phantom_head(Dims::cube(size), s as u64)).collect()
    }

    #[test]
    fn disabled_augmentation_reproduces_input() {
        let m = maps(1, 16);
        let mut cfg = GenConfig::disabled(0.0);
        cfg.a_mu = 0.0;
        cfg.b_mu = 200.0;
        let pair = generate_pair(&m, &cfg, 0).unwrap();
        assert_eq!(pair.target, m[0]);
        let g = &pair.record.gmm;
        let (lo, hi) = m[0]
            .label_set()
            .iter()
            .map(|&l| g.get(l).unwrap().mu)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        for (&v, &l) in pair.image.data().iter().zip(m[0].labels()) {
            let want = ((g.get(l).unwrap().mu as f32 as f64 - lo as f32 as f64)
                / (hi as f32 as f64 - lo as f32 as f64)) as f32;
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_and_replayable() {
        let m = maps(3, 20);
        let cfg = GenConfig {
            seed: 42,
            ..GenConfig::default()
        };
        let gen = Generator::new(m, cfg).unwrap();
        let a = gen.pair(5).unwrap();
        let b = gen.pair(5).unwrap();
        assert_eq!(a, b);
        let rec = ParameterRecord::from_json(&record_parameters(&a).to_json()).unwrap();
        assert_eq!(&rec, record_parameters(&a));
        assert_eq!(gen.render(&rec).unwrap(), a);
        assert_ne!(gen.pair(6).unwrap().image, a.image);
    }

    #[test]
    fn record_in_ranges() {
        let gen = Generator::new(maps(2, 16), GenConfig::default()).unwrap();
        for i in 0..20 {
            let r = gen.sample_parameters(i).unwrap();
            assert!((-0.3..=0.3).contains(&r.gamma));
            for (_, g) in r.gmm.iter() {
                assert!((25.0..=225.0).contains(&g.mu) && (5.0..=25.0).contains(&g.sigma));
            }
            assert_eq!(r.gmm.labels().collect::<Vec<_>>(), gen.label_universe());
        }
    }

    #[test]
    fn stream_matches_pairs() {
        let gen = Arc::new(Generator::new(maps(2, 12), GenConfig::default()).unwrap());
        assert_eq!(gen.clone().stream(Some(0)).count(), 0);
        let s: Vec<_> = gen.clone().stream(Some(5)).with_block_size(2).map(|p| p.unwrap()).collect();
        assert_eq!(s.len(), 5);
        for (i, p) in s.iter().enumerate() {
            assert_eq!(p, &gen.pair(i as u64).unwrap());
        }
        let mut unbounded = gen.clone().stream(None);
        assert_eq!(unbounded.nth(7).unwrap().unwrap().record.sample_index, 7);
    }

    #[test]
    fn crop_and_strip() {
        let m = maps(1, 20);
        let cfg = GenConfig {
            output_dims: Some([16, 12, 10]),
            extracerebral_labels: vec![crate::phantom::EXTRACEREBRAL],
            p_strip: 1.0,
            ..GenConfig::default()
        };
        let p = generate_pair(&m, &cfg, 1).unwrap();
        assert_eq!(p.target.dims(), Dims::new(16, 12, 10));
        assert_eq!(p.image.dims(), Dims::new(16, 12, 10));
        assert!(p.record.stripped);
        assert!(!p.target.label_set().contains(&crate::phantom::EXTRACEREBRAL));
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(Generator::new(vec![], GenConfig::default()), Err(Error::Empty(_))));
        let cfg = GenConfig {
            a_gamma: 1.0,
            b_gamma: 0.0,
            ..GenConfig::default()
        };
        assert!(Generator::new(maps(1, 8), cfg).is_err());
    }
}
