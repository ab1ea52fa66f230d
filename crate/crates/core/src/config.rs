//! Generator hyperparameters and their JSON configuration file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::ContrastHyperprior;

/// How Gaussian intensity parameters are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastMode {
    /// Independent uniform draws per label (the wide, unrealistic prior).
    #[default]
    Agnostic,
    /// Pick one registered contrast, then draw from its Gaussian hyperprior.
    Rule,
}

/// Every hyperparameter of the generator plus a few engineering knobs.
///
/// Angles are degrees, spatial quantities voxels, and intensity quantities
/// assume the [0, 255] convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub a_rot: f64,
    pub b_rot: f64,
    pub a_sc: f64,
    pub b_sc: f64,
    pub a_sh: f64,
    pub b_sh: f64,
    pub a_tr: f64,
    pub b_tr: f64,
    pub sigma_svf: f64,
    pub a_mu: f64,
    pub b_mu: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub sigma_blur: f64,
    pub sigma_b: f64,
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub c_v: usize,
    pub c_b: usize,
    /// Probability of relabeling the extracerebral labels to background.
    pub p_strip: f64,
    pub extracerebral_labels: Vec<u16>,
    /// Optional center crop applied to the deformed label map.
    pub output_dims: Option<[usize; 3]>,
    pub seed: u64,
    pub mode: ContrastMode,
    pub contrasts: BTreeMap<String, ContrastHyperprior>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            a_rot: -10.0,
            b_rot: 10.0,
            a_sc: 0.9,
            b_sc: 1.1,
            a_sh: -0.01,
            b_sh: 0.01,
            a_tr: -20.0,
            b_tr: 20.0,
            sigma_svf: 3.0,
            a_mu: 25.0,
            b_mu: 225.0,
            a_sigma: 5.0,
            b_sigma: 25.0,
            sigma_blur: 0.3,
            sigma_b: 0.5,
            a_gamma: -0.3,
            b_gamma: 0.3,
            c_v: 10,
            c_b: 4,
            p_strip: 0.2,
            extracerebral_labels: Vec::new(),
            output_dims: None,
            seed: 0,
            mode: ContrastMode::Agnostic,
            contrasts: BTreeMap::new(),
        }
    }
}

impl GenConfig {
    /// All spatial and intensity augmentation switched off: identity
    /// transform, zero-variance GMM draws at `mu`, no blur, no bias, no gamma.
    pub fn disabled(mu: f64) -> Self {
        Self {
            a_rot: 0.0,
            b_rot: 0.0,
            a_sc: 1.0,
            b_sc: 1.0,
            a_sh: 0.0,
            b_sh: 0.0,
            a_tr: 0.0,
            b_tr: 0.0,
            sigma_svf: 0.0,
            a_mu: mu,
            b_mu: mu,
            a_sigma: 0.0,
            b_sigma: 0.0,
            sigma_blur: 0.0,
            sigma_b: 0.0,
            a_gamma: 0.0,
            b_gamma: 0.0,
            p_strip: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rot", self.a_rot, self.b_rot),
            ("sc", self.a_sc, self.b_sc),
            ("sh", self.a_sh, self.b_sh),
            ("tr", self.a_tr, self.b_tr),
            ("mu", self.a_mu, self.b_mu),
            ("sigma", self.a_sigma, self.b_sigma),
            ("gamma", self.a_gamma, self.b_gamma),
        ];
        for (name, lo, hi) in ranges {
            check_range(name, lo, hi)?;
        }
        if self.a_sc <= 0.0 {
            return Err(Error::invalid("a_sc", "scalings must be strictly positive"));
        }
        let sigmas = [
            ("a_sigma", self.a_sigma),
            ("sigma_svf", self.sigma_svf),
            ("sigma_blur", self.sigma_blur),
            ("sigma_b", self.sigma_b),
        ];
        for (name, s) in sigmas {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {s}")));
            }
        }
        if self.c_v < 2 {
            return Err(Error::invalid("c_v", "control grid needs at least 2 nodes"));
        }
        if self.c_b < 2 {
            return Err(Error::invalid("c_b", "control grid needs at least 2 nodes"));
        }
        if !(0.0..=1.0).contains(&self.p_strip) {
            return Err(Error::invalid("p_strip", format!("{} not in [0, 1]", self.p_strip)));
        }
        if let Some(d) = self.output_dims {
            if d.iter().any(|&n| n < 2) {
                return Err(Error::invalid("output_dims", "every axis must be >= 2"));
            }
        }
        if self.mode == ContrastMode::Rule && self.contrasts.is_empty() {
            return Err(Error::invalid("contrasts", "rule mode needs at least one contrast"));
        }
        for (name, prior) in &self.contrasts {
            prior.validate().map_err(|e| Error::invalid(format!("contrasts.{name}"), e.to_string()))?;
        }
        Ok(())
    }

    /// Parses and validates JSON text; missing keys take the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let text = text.trim();
        let value: serde_json::Value = if text.is_empty() {
            serde_json::Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?
        };
        let obj = value
            .as_object()
            .ok_or_else(|| Error::ConfigParse("top level must be an object".into()))?;
        let known = known_keys();
        if let Some(k) = obj.keys().find(|k| !known.contains(k)) {
            return Err(Error::ConfigUnknownKey(k.clone()));
        }
        let cfg: GenConfig =
            serde_json::from_value(value).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn known_keys() -> Vec<String> {
    match serde_json::to_value(GenConfig::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("config serializes to an object"),
    }
}

pub(crate) fn check_range(name: &str, lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid(name, "range bounds must be finite"));
    }
    if lo > hi {
        return Err(Error::InvertedRange {
            name: name.to_string(),
            lo,
            hi,
        });
    }
    Ok(())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<GenConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GenConfig::from_json_str(&text)
}
