//! Dice overlap and the soft-Dice training loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

/// Smoothing term of the soft Dice.
pub const SOFT_DICE_EPS: f64 = 1e-6;

/// Per-label voxel counts `(|A|, |B|, |A ∩ B|)` for every label id.
fn overlap_counts(a: &LabelMap, b: &LabelMap) -> Result<Vec<[usize; 3]>> {
    a.dims().ensure_same(b.dims())?;
    let mut c = vec![[0usize; 3]; u16::MAX as usize + 1];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        c[x as usize][0] += 1;
        c[y as usize][1] += 1;
        if x == y {
            c[x as usize][2] += 1;
        }
    }
    Ok(c)
}

fn dice_from_counts([na, nb, inter]: [usize; 3]) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// `2|A ∩ B| / (|A| + |B|)` for one label; 1 when the label is absent from both.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u16) -> Result<f64> {
    a.dims().ensure_same(b.dims())?;
    let mut c = [0usize; 3];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        c[0] += ia as usize;
        c[1] += ib as usize;
        c[2] += (ia && ib) as usize;
    }
    Ok(dice_from_counts(c))
}

/// Squared-denominator soft Dice per channel; `ordering[k]` is channel k's label.
pub fn soft_dice_per_label(pred: &[Volume], target: &LabelMap, ordering: &[u16]) -> Result<Vec<f64>> {
    if pred.len() != ordering.len() {
        return Err(Error::ChannelMismatch {
            atlas: pred.len(),
            expected: ordering.len(),
        });
    }
    for p in pred {
        p.dims().ensure_same(target.dims())?;
    }
    let mut slot = vec![usize::MAX; u16::MAX as usize + 1];
    for (k, &l) in ordering.iter().enumerate() {
        slot[l as usize] = k;
    }
    let k_count = ordering.len();
    let mut inter = vec![0.0f64; k_count];
    let mut p_sq = vec![0.0f64; k_count];
    let mut t_count = vec![0.0f64; k_count];
    for (j, &l) in target.labels().iter().enumerate() {
        let k = slot[l as usize];
        if k == usize::MAX {
            return Err(Error::MissingLabel(l));
        }
        t_count[k] += 1.0;
        inter[k] += pred[k].data()[j] as f64;
    }
    for (k, p) in pred.iter().enumerate() {
        p_sq[k] = p.data().iter().map(|&x| (x as f64) * (x as f64)).sum();
    }
    Ok((0..k_count)
        .map(|k| (2.0 * inter[k] + SOFT_DICE_EPS) / (p_sq[k] + t_count[k] + SOFT_DICE_EPS))
        .collect())
}

/// `1 - mean_k softdice_k`.
pub fn soft_dice_loss(pred: &[Volume], target: &LabelMap, ordering: &[u16]) -> Result<f64> {
    let d = soft_dice_per_label(pred, target, ordering)?;
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok((1.0 - mean).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub per_label: BTreeMap<u16, f64>,
    /// `(|A_k|, |B_k|)` per label.
    pub counts: BTreeMap<u16, (usize, usize)>,
    /// Arithmetic mean of `per_label`.
    pub mean: f64,
    /// Per-label Dice with each contralateral pair averaged under its first label.
    pub merged: BTreeMap<u16, f64>,
}

impl DiceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,dice,count_pred,count_truth\n");
        for (l, d) in &self.per_label {
            let (a, b) = self.counts[l];
            let _ = writeln!(s, "{l},{d},{a},{b}");
        }
        let _ = writeln!(s, "mean,{},,", self.mean);
        s
    }
}

/// Dice for every label in `labels`, their mean, and contralateral averages.
pub fn dice_report(
    a: &LabelMap,
    b: &LabelMap,
    labels: &[u16],
    pairs: &[(u16, u16)],
) -> Result<DiceReport> {
    let c = overlap_counts(a, b)?;
    let mut per_label = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for &l in labels {
        let cl = c[l as usize];
        per_label.insert(l, dice_from_counts(cl));
        counts.insert(l, (cl[0], cl[1]));
    }
    let mean = if per_label.is_empty() {
        1.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    let mut merged = per_label.clone();
    for &(left, right) in pairs {
        if let (Some(&dl), Some(&dr)) = (per_label.get(&left), per_label.get(&right)) {
            merged.insert(left, 0.5 * (dl + dr));
            merged.remove(&right);
        }
    }
    Ok(DiceReport {
        per_label,
        counts,
        mean,
        merged,
    })
}
