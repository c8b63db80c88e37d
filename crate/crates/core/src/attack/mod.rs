//! Targeted gradient attacks on model inputs: hardest-target selection,
//! projected gradient ascent inside an L-infinity ball, minimum-radius
//! search over a fixed ladder, and the paired robustness protocol.

mod report;

use serde::{Deserialize, Serialize};

pub use report::{
    robustness_report, select_cases, CaseRecord, ModelSummary, ProtocolConfig, ReportModel,
    RobustnessReport, TargetMode,
};

use crate::error::{dim_err, invalid, Error, Result};
use crate::models::{ClassifierModel, RunMode};
use crate::tensor::{Graph, Real, Tensor};

/// Radii tried by the minimum-epsilon search: 0.001..0.009, 0.01..0.09 and
/// 0.1..0.9.
pub fn default_ladder() -> Vec<f64> {
    let mut out = Vec::with_capacity(27);
    for scale in [1e-3, 1e-2, 1e-1] {
        for k in 1..=9 {
            out.push(k as f64 * scale);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub step_size: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Value range enforced after each step; `[0, 1]` for occupancy.
    pub clamp: Option<[f64; 2]>,
    /// Step along the gradient sign instead of the raw gradient.
    #[serde(default)]
    pub sign_step: bool,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid!("attack step size must be positive"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid!("attack radius must be non-negative"));
        }
        if self.max_iterations == 0 {
            return Err(invalid!("attack needs at least one iteration"));
        }
        if let Some([lo, hi]) = self.clamp {
            if !(lo <= hi) {
                return Err(invalid!("attack clamp range [{lo}, {hi}] is empty"));
            }
        }
        Ok(())
    }
}

/// Outcome of attacking one input towards one target class.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome<F> {
    pub target: usize,
    pub success: bool,
    /// Radius at which the attack succeeded.
    pub epsilon: Option<f64>,
    /// Gradient steps taken before the target was reached.
    pub iterations: Option<usize>,
    /// Final input, shaped like the original (batch axis of 1).
    pub perturbed: Tensor<F>,
    /// Predicted class on `perturbed`.
    pub predicted: usize,
}

impl<F: Real> AttackOutcome<F> {
    /// Largest absolute coordinate change from `original`.
    pub fn linf(&self, original: &Tensor<F>) -> f64 {
        linf(original.data(), self.perturbed.data())
    }
}

pub(crate) fn linf<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn check_logits<F: Real>(logits: &Tensor<F>) -> Result<()> {
    if logits.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("model logits".into()))
    }
}

/// Class with the lowest logit per row; ties go to the lowest index.
pub fn hardest_targets<F: Real>(model: &ClassifierModel<F>, batch: &Tensor<F>) -> Result<Vec<usize>> {
    let logits = model.logits(batch)?;
    check_logits(&logits)?;
    Ok(logits.argmin_rows())
}

pub fn hardest_target<F: Real>(model: &ClassifierModel<F>, input: &Tensor<F>) -> Result<usize> {
    Ok(hardest_targets(model, input)?[0])
}

/// One input to attack: a single sample with a leading batch axis of 1.
#[derive(Clone, Debug)]
pub struct AttackCase<F> {
    pub input: Tensor<F>,
    pub target: usize,
}

struct Active<F> {
    case: usize,
    current: Vec<F>,
}

fn stack<F: Real>(sample_shape: &[usize], rows: &[&[F]]) -> Result<Tensor<F>> {
    let mut shape = sample_shape.to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// Targeted projected gradient ascent on the target logit for each case.
/// After every step the input is clipped to the L-infinity ball of radius
/// `epsilon` around the original and then to `clamp`. A case stops as soon
/// as its prediction equals the target. Cases share forward passes but do
/// not interact: every model in eval mode treats batch rows independently.
pub fn iterative_attack<F: Real>(
    model: &ClassifierModel<F>,
    cases: &[AttackCase<F>],
    config: &AttackConfig,
) -> Result<Vec<AttackOutcome<F>>> {
    config.validate()?;
    let Some(first) = cases.first() else {
        return Ok(Vec::new());
    };
    let sample_shape = first.input.shape().to_vec();
    if sample_shape.first() != Some(&1) {
        return Err(dim_err!("attack inputs need a batch axis of 1, got {sample_shape:?}"));
    }
    let classes = model.num_classes();
    for c in cases {
        if c.input.shape() != sample_shape.as_slice() {
            return Err(dim_err!("attack inputs differ in shape"));
        }
        if c.target >= classes {
            return Err(invalid!("target class {} out of range", c.target));
        }
    }
    let eps = F::of(config.epsilon);
    let alpha = F::of(config.step_size);
    let clamp = config.clamp.map(|[lo, hi]| (F::of(lo), F::of(hi)));

    let mut outcomes: Vec<Option<AttackOutcome<F>>> = vec![None; cases.len()];
    let mut active: Vec<Active<F>> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| Active {
            case: i,
            current: c.input.to_vec(),
        })
        .collect();

    let finish = |a: &Active<F>, success: bool, steps: usize, predicted: usize| -> Result<AttackOutcome<F>> {
        Ok(AttackOutcome {
            target: cases[a.case].target,
            success,
            epsilon: success.then_some(config.epsilon),
            iterations: success.then_some(steps),
            perturbed: Tensor::new(sample_shape.clone(), a.current.clone())?,
            predicted,
        })
    };

    for step in 0..=config.max_iterations {
        if active.is_empty() {
            break;
        }
        let x = stack(&sample_shape, &active.iter().map(|a| a.current.as_slice()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, false);
        let input = g.param(x);
        let pass = model.run(&mut g, &bound, input, RunMode::EVAL)?;
        let logits = g.value(pass.logits).clone();
        let predicted = logits.argmax_rows();

        let mut mask = vec![F::zero(); active.len() * classes];
        for (row, a) in active.iter().enumerate() {
            mask[row * classes + cases[a.case].target] = F::one();
        }
        let picked = g.mul_const(pass.logits, Tensor::new(vec![active.len(), classes], mask)?)?;
        let total = g.sum(picked)?;
        g.backward(total)?;
        let grad = g.grad(input).ok_or_else(|| Error::Graph("input has no gradient".into()))?;
        let per = grad.len() / active.len();

        let mut keep = Vec::with_capacity(active.len());
        for (row, mut a) in std::mem::take(&mut active).into_iter().enumerate() {
            let target = cases[a.case].target;
            if !logits.data()[row * classes..(row + 1) * classes].iter().all(|v| v.is_finite()) {
                outcomes[a.case] = Some(finish(&a, false, step, predicted[row])?);
                continue;
            }
            if predicted[row] == target {
                outcomes[a.case] = Some(finish(&a, true, step, predicted[row])?);
                continue;
            }
            let gr = &grad.data()[row * per..(row + 1) * per];
            if step == config.max_iterations || gr.iter().any(|v| !v.is_finite()) {
                outcomes[a.case] = Some(finish(&a, false, step, predicted[row])?);
                continue;
            }
            let original = cases[a.case].input.data();
            let mut moved = false;
            for ((x, &g0), &s) in a.current.iter_mut().zip(gr).zip(original) {
                let delta = if config.sign_step {
                    if g0 > F::zero() {
                        alpha
                    } else if g0 < F::zero() {
                        -alpha
                    } else {
                        F::zero()
                    }
                } else {
                    alpha * g0
                };
                let mut v = (*x + delta).min(s + eps).max(s - eps);
                if let Some((lo, hi)) = clamp {
                    v = v.min(hi).max(lo);
                }
                moved |= v != *x;
                *x = v;
            }
            if !moved {
                // A fixed point of the update: every later iterate is the same.
                outcomes[a.case] = Some(finish(&a, false, step, predicted[row])?);
                continue;
            }
            keep.push(a);
        }
        active = keep;
    }
    Ok(outcomes.into_iter().map(|o| o.expect("every case finishes")).collect())
}

/// Runs the attack at each radius of `ladder` in increasing order and
/// keeps, per case, the first success.
pub fn min_epsilon_search<F: Real>(
    model: &ClassifierModel<F>,
    cases: &[AttackCase<F>],
    ladder: &[f64],
    config: &AttackConfig,
) -> Result<Vec<AttackOutcome<F>>> {
    if ladder.is_empty() {
        return Err(invalid!("epsilon ladder is empty"));
    }
    if ladder.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid!("epsilon ladder must be strictly increasing"));
    }
    let mut results: Vec<Option<AttackOutcome<F>>> = vec![None; cases.len()];
    let mut pending: Vec<usize> = (0..cases.len()).collect();
    for &eps in ladder {
        if pending.is_empty() {
            break;
        }
        let rung = AttackConfig {
            epsilon: eps,
            ..*config
        };
        let subset: Vec<AttackCase<F>> = pending.iter().map(|&i| cases[i].clone()).collect();
        let outcomes = iterative_attack(model, &subset, &rung)?;
        let mut still = Vec::new();
        for (&i, o) in pending.iter().zip(outcomes) {
            if !o.success {
                still.push(i);
            }
            results[i] = Some(o);
        }
        log::debug!("epsilon {eps}: {} of {} cases still unsolved", still.len(), cases.len());
        pending = still;
    }
    Ok(results.into_iter().map(|o| o.expect("ladder is non-empty")).collect())
}
