use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::{LabelMask, LESION, ORGAN};

/// Hard Dice `2|P∩G| / (|P|+|G|)` over voxels whose label is at least `label`.
///
/// `label = 1` scores the organ region including lesions, `label = 2` the lesion
/// alone. Two empty sets score 1.
pub fn dice_score(pred: &LabelMask, gt: &LabelMask, label: u8) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("pred {:?} vs gt {:?}", pred.dims(), gt.dims())));
    }
    if label == 0 {
        return Err(Error::Misuse("dice_score label must be >= 1".into()));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (ia, ib) = (a >= label, b >= label);
        p += usize::from(ia);
        g += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

pub fn kidney_dice(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    dice_score(pred, gt, ORGAN)
}

pub fn tumor_dice(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    dice_score(pred, gt, LESION)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDice {
    pub case_id: String,
    pub kidney_dice: f64,
    pub tumor_dice: f64,
}

impl CaseDice {
    pub fn score(case_id: impl Into<String>, pred: &LabelMask, gt: &LabelMask) -> Result<Self> {
        Ok(Self {
            case_id: case_id.into(),
            kidney_dice: kidney_dice(pred, gt)?,
            tumor_dice: tumor_dice(pred, gt)?,
        })
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Mean of the per-case kidney mean and the per-case tumor mean.
pub fn composite_dice(cases: &[CaseDice]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Misuse("composite_dice of no cases".into()));
    }
    let k = mean(cases.iter().map(|c| c.kidney_dice));
    let t = mean(cases.iter().map(|c| c.tumor_dice));
    Ok(0.5 * (k + t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseDice>,
    pub mean_kidney_dice: f64,
    pub mean_tumor_dice: f64,
    pub composite_dice: f64,
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseDice>) -> Result<Self> {
        if let Some(bad) = cases
            .iter()
            .find(|c| !((0.0..=1.0).contains(&c.kidney_dice) && (0.0..=1.0).contains(&c.tumor_dice)))
        {
            return Err(Error::Misuse(format!("Dice outside [0, 1] for case {}", bad.case_id)));
        }
        let composite = composite_dice(&cases)?;
        Ok(Self {
            mean_kidney_dice: mean(cases.iter().map(|c| c.kidney_dice)),
            mean_tumor_dice: mean(cases.iter().map(|c| c.tumor_dice)),
            composite_dice: composite,
            cases,
        })
    }

    /// One row per case, then the aggregate lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("case_id\tkidney_dice\ttumor_dice\n");
        for c in &self.cases {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", c.case_id, c.kidney_dice, c.tumor_dice);
        }
        let _ = writeln!(s, "mean\t{:.6}\t{:.6}", self.mean_kidney_dice, self.mean_tumor_dice);
        let _ = writeln!(s, "composite\t{:.6}", self.composite_dice);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
