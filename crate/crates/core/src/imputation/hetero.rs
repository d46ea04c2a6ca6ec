//! Effects on either side of a within-country median split, estimated from a
//! fit with side-specific period effects, and their difference.

use serde::Serialize;

use super::{
    inference, CohortMap, EffectEstimate, Imputation, ImputationSample, TreatedCell, VarianceOptions, WeightScheme,
};
use crate::error::{Error, Result};
use crate::fe::FeMethod;
use crate::panel::{GroupAssignment, Side};

#[derive(Debug, Clone, Serialize)]
pub struct HeterogeneityResult {
    pub attribute: String,
    pub above: EffectEstimate,
    pub below: EffectEstimate,
    /// Above minus below.
    pub contrast: EffectEstimate,
    pub contrast_p: f64,
    pub n_above_units: usize,
    pub n_below_units: usize,
    pub warnings: Vec<String>,
}

/// Split base weights into side-specific weights (each summing to one) and
/// the `+1/−1` contrast.
pub fn split_weights(base: &[f64], cells: &[TreatedCell], sides: &[Side]) -> Result<[Vec<f64>; 3]> {
    let mut total = [0.0; 2];
    for (w, c) in base.iter().zip(cells) {
        total[sides[c.unit].index()] += w;
    }
    if total.iter().any(|&t| t <= 0.0) {
        return Err(Error::EmptySupport("a side of the split has no treated cells".into()));
    }
    let mut above = vec![0.0; base.len()];
    let mut below = vec![0.0; base.len()];
    for (k, (w, c)) in base.iter().zip(cells).enumerate() {
        match sides[c.unit] {
            Side::Above => above[k] = w / total[1],
            Side::Below => below[k] = w / total[0],
        }
    }
    let contrast = above.iter().zip(&below).map(|(a, b)| a - b).collect();
    Ok([above, below, contrast])
}

pub fn heterogeneity(
    sample: &ImputationSample,
    groups: &GroupAssignment,
    base: &WeightScheme,
    cohorts: &CohortMap,
    method: FeMethod,
    opts: &VarianceOptions,
) -> Result<HeterogeneityResult> {
    if groups.side.len() != sample.panel.n_units() {
        return Err(Error::invalid("group split does not match the sample"));
    }
    let imp = Imputation::new(sample, Some(&groups.side), false, method)?;
    let w = imp.weights(base)?;
    let [above_w, below_w, contrast_w] = split_weights(&w, &imp.effects.cells, &groups.side)?;
    let above = imp.estimate_weights(&format!("{}_above", base.name), &above_w, cohorts, opts)?;
    let below = imp.estimate_weights(&format!("{}_below", base.name), &below_w, cohorts, opts)?;
    let mut contrast = imp.estimate_weights(&format!("{}_contrast", base.name), &contrast_w, cohorts, opts)?;
    let df = opts.t_inference.then(|| sample.panel.n_units() as f64 - 1.0);
    let (_, p) = inference(contrast.tau_hat, contrast.se, df);
    contrast.p_value = p;
    let mut warnings = groups.warnings.clone();
    warnings.extend(cohorts.warnings.iter().cloned());
    Ok(HeterogeneityResult {
        attribute: groups.attribute.clone(),
        above,
        below,
        contrast,
        contrast_p: p,
        n_above_units: groups.count(Side::Above),
        n_below_units: groups.count(Side::Below),
        warnings,
    })
}
