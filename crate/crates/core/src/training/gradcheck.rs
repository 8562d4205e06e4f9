use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, Gradients, Model, ParamGroup};
use crate::numerics::SeededRng;

/// Models at or above this many parameters are refused.
pub const GRADCHECK_MAX_PARAMS: usize = 100_000;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_relative_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }

    pub fn group(&self, group: ParamGroup) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == group)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε`. Up to `samples_per_group` coordinates are
/// checked per parameter group (all of them when the group is smaller);
/// embedding coordinates are drawn from the rows the example touches.
pub fn gradient_check(model: &Model, example: &Example, epsilon: f64, samples_per_group: usize, seed: u64) -> Result<GradCheckReport> {
    gradient_check_with(model, example, epsilon, samples_per_group, seed, |_| {})
}

/// As [`gradient_check`], but `tamper` may alter the analytic gradients
/// before comparison (negative controls).
pub fn gradient_check_with(
    model: &Model,
    example: &Example,
    epsilon: f64,
    samples_per_group: usize,
    seed: u64,
    tamper: impl Fn(&mut Gradients),
) -> Result<GradCheckReport> {
    let n = model.param_count();
    if n >= GRADCHECK_MAX_PARAMS {
        return Err(Error::Usage(format!(
            "gradient check is limited to models under {GRADCHECK_MAX_PARAMS} parameters, this one has {n}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Usage(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, mut grads) = model.loss_and_gradients(&example.input, example.gold)?;
    tamper(&mut grads);

    let layout = model.param_layout();
    let analytic: Vec<Vec<f64>> = {
        let mut out = Vec::with_capacity(layout.len());
        let mut dense = grads.dense.iter();
        for info in &layout {
            if info.group == ParamGroup::Embedding {
                out.push(grads.embedding.to_dense(info.rows, info.cols));
            } else {
                out.push(dense.next().cloned().unwrap_or_default());
            }
        }
        out
    };

    let used_rows: Vec<usize> = match &example.input {
        crate::model::Input::Tokens { ids, mask } => {
            let mut rows: Vec<usize> = ids
                .iter()
                .zip(mask)
                .filter(|&(&i, &m)| m && i != crate::embedding::PAD)
                .map(|(&i, _)| i)
                .collect();
            rows.sort_unstable();
            rows.dedup();
            rows
        }
        crate::model::Input::Layers(_) => Vec::new(),
    };

    let mut coords: BTreeMap<ParamGroup, Vec<(usize, usize)>> = BTreeMap::new();
    for (t, info) in layout.iter().enumerate() {
        let entry = coords.entry(info.group).or_default();
        if info.group == ParamGroup::Embedding {
            for &r in &used_rows {
                entry.extend((0..info.cols).map(|c| (t, r * info.cols + c)));
            }
        } else {
            entry.extend((0..info.rows * info.cols).map(|k| (t, k)));
        }
    }

    let mut rng = SeededRng::new(seed);
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for (group, mut all) in coords {
        if all.len() > samples_per_group {
            rng.shuffle(&mut all);
            all.truncate(samples_per_group);
        }
        let mut report = GroupReport {
            group,
            checked: all.len(),
            max_relative_error: 0.0,
            worst: None,
        };
        for (t, k) in all {
            let original = probe.param_slices()[t][k];
            probe.param_slices_mut()[t][k] = original + epsilon;
            let plus = loss_of(&probe, example)?;
            probe.param_slices_mut()[t][k] = original - epsilon;
            let minus = loss_of(&probe, example)?;
            probe.param_slices_mut()[t][k] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[t][k], numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((layout[t].name.clone(), k));
            }
        }
        groups.push(report);
    }
    Ok(GradCheckReport { epsilon, groups })
}

fn loss_of(model: &Model, example: &Example) -> Result<f64> {
    let trace = model.forward(&example.input)?;
    model.loss(&trace, example.gold)
}
