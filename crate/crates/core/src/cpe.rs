//! Counterfactual policy evaluation from logged trajectories: importance
//! sampling (IS), step-wise weighted importance sampling with clipping
//! (SWIS), per-step doubly robust (DR), and backward-recursive sequential
//! doubly robust (Seq-DR).
//!
//! All four report the estimate relative to the behavior policy's empirical
//! value: a score of 1.0 means the target and the logged policy match in
//! performance. Aggregation is a fixed-order reduction over trajectories,
//! so results are bit-deterministic and independent of parallel scheduling.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};
use crate::features::{DecisionContext, PageOutcome};
use crate::logged::SessionRecord;
use crate::metrics::mean_std;
use crate::policy::{probability_of, Policy, PolicyError};

#[derive(Debug, Error)]
pub enum CpeError {
    #[error("no trajectories")]
    NoTrajectories,
    #[error("trajectory {mdp_id} step {step}: behavior propensity {value} outside (0, 1]")]
    Propensity { mdp_id: String, step: usize, value: f64 },
    #[error("behavior value is 0, relative estimate undefined")]
    RelativeUndefined,
    #[error("invalid clip interval [{lo}, {hi}]")]
    Clip { lo: f64, hi: f64 },
    #[error("step {step}: total propensity mass is 0, weights undefined")]
    ZeroWeightMass { step: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("value model failure: {0}")]
    Model(String),
    #[error("serialization failure: {0}")]
    Serialization(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One logged decision with its behavior propensity and realized reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub ctx: DecisionContext,
    pub action: ItemId,
    pub behavior_prob: f64,
    pub reward: f64,
    pub action_mask: Vec<ItemId>,
}

/// A logged episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub mdp_id: String,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut g = 0.0;
        let mut d = 1.0;
        for step in &self.steps {
            g += d * step.reward;
            d *= gamma;
        }
        g
    }
}

/// Model of the expected immediate reward, `r_hat(s, a)`.
pub trait RewardModel {
    fn expected_reward(&self, ctx: &DecisionContext, action: ItemId) -> Result<f64, CpeError>;
}

/// Model of the action value, `Q_hat(s, a)`.
pub trait ActionValueModel {
    fn q_value(&self, ctx: &DecisionContext, action: ItemId) -> Result<f64, CpeError>;
}

/// One estimator's output: absolute value, its standard error, and the
/// value relative to the behavior policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub value: f64,
    pub std_error: f64,
    pub relative: f64,
    pub relative_std_error: f64,
}

/// All four estimators on one target policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpeReport {
    pub behavior_value: f64,
    pub trajectories: usize,
    pub is: EstimateSummary,
    pub swis: EstimateSummary,
    pub dr: EstimateSummary,
    pub seq_dr: EstimateSummary,
}

fn summarize(per_trajectory: &[f64], behavior: f64) -> Result<EstimateSummary, CpeError> {
    if behavior == 0.0 {
        return Err(CpeError::RelativeUndefined);
    }
    let (mean, std) = mean_std(per_trajectory);
    let se = std / (per_trajectory.len() as f64).sqrt();
    Ok(EstimateSummary {
        value: mean,
        std_error: se,
        relative: mean / behavior,
        relative_std_error: se / behavior.abs(),
    })
}

fn validate_propensity(traj: &Trajectory) -> Result<(), CpeError> {
    for (t, step) in traj.steps.iter().enumerate() {
        if !(step.behavior_prob > 0.0 && step.behavior_prob <= 1.0) {
            return Err(CpeError::Propensity {
                mdp_id: traj.mdp_id.clone(),
                step: t,
                value: step.behavior_prob,
            });
        }
    }
    Ok(())
}

/// Empirical mean discounted return of the logged behavior policy.
pub fn behavior_value(trajectories: &[Trajectory], gamma: f64) -> Result<f64, CpeError> {
    if trajectories.is_empty() {
        return Err(CpeError::NoTrajectories);
    }
    let total: f64 = trajectories.iter().map(|t| t.discounted_return(gamma)).sum();
    Ok(total / trajectories.len() as f64)
}

// ── Importance sampling ─────────────────────────────────────────────────

/// Per-trajectory IS value: the full propensity-ratio product times the
/// discounted return.
pub fn is_trajectory_value(
    traj: &Trajectory,
    target: &dyn Policy,
    catalog: &Catalog,
    gamma: f64,
) -> Result<f64, CpeError> {
    validate_propensity(traj)?;
    let mut ratio = 1.0;
    for step in &traj.steps {
        let e = probability_of(target, &step.ctx, &step.action_mask, step.action, catalog)?;
        ratio *= e / step.behavior_prob;
    }
    Ok(ratio * traj.discounted_return(gamma))
}

/// Unweighted trajectory-level importance sampling, relative to behavior.
pub fn is_estimate(
    trajectories: &[Trajectory],
    target: &dyn Policy,
    catalog: &Catalog,
    gamma: f64,
) -> Result<EstimateSummary, CpeError> {
    let behavior = behavior_value(trajectories, gamma)?;
    let values: Vec<f64> = trajectories
        .iter()
        .map(|t| is_trajectory_value(t, target, catalog, gamma))
        .collect::<Result<_, _>>()?;
    summarize(&values, behavior)
}

// ── Step-wise weighted importance sampling ──────────────────────────────

/// A single step ratio after clipping to `[lo, hi]`.
pub fn clipped_ratio(target_prob: f64, behavior_prob: f64, clip: (f64, f64)) -> f64 {
    (target_prob / behavior_prob).clamp(clip.0, clip.1)
}

fn validate_clip(clip: (f64, f64)) -> Result<(), CpeError> {
    let (lo, hi) = clip;
    if !(lo >= 0.0 && lo < hi) {
        return Err(CpeError::Clip { lo, hi });
    }
    Ok(())
}

/// Cumulative clipped ratio products, one row per trajectory, carried
/// forward to the longest horizon so every step has a full column.
pub fn cumulative_clipped_ratios(
    trajectories: &[Trajectory],
    target: &dyn Policy,
    catalog: &Catalog,
    clip: (f64, f64),
) -> Result<Vec<Vec<f64>>, CpeError> {
    validate_clip(clip)?;
    let horizon = trajectories.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        validate_propensity(traj)?;
        let mut row = Vec::with_capacity(horizon);
        let mut cum = 1.0;
        for step in &traj.steps {
            let e = probability_of(target, &step.ctx, &step.action_mask, step.action, catalog)?;
            cum *= clipped_ratio(e, step.behavior_prob, clip);
            row.push(cum);
        }
        // finished trajectories keep their final mass
        while row.len() < horizon {
            row.push(cum);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Per-step self-normalized weights `w[t][trajectory]`; each column sums
/// to 1.
pub fn swis_step_weights(
    trajectories: &[Trajectory],
    target: &dyn Policy,
    catalog: &Catalog,
    clip: (f64, f64),
) -> Result<Vec<Vec<f64>>, CpeError> {
    let ratios = cumulative_clipped_ratios(trajectories, target, catalog, clip)?;
    let horizon = ratios.first().map(|r| r.len()).unwrap_or(0);
    let mut weights = vec![vec![0.0; trajectories.len()]; horizon];
    for t in 0..horizon {
        let total: f64 = ratios.iter().map(|row| row[t]).sum();
        if total <= 0.0 {
            return Err(CpeError::ZeroWeightMass { step: t });
        }
        for (tau, row) in ratios.iter().enumerate() {
            weights[t][tau] = row[t] / total;
        }
    }
    Ok(weights)
}

/// Step-wise weighted importance sampling with per-step ratio clipping
/// (defaults to `[0.1, 10]`), relative to behavior.
pub fn swis_estimate(
    trajectories: &[Trajectory],
    target: &dyn Policy,
    catalog: &Catalog,
    gamma: f64,
    clip: (f64, f64),
) -> Result<EstimateSummary, CpeError> {
    let behavior = behavior_value(trajectories, gamma)?;
    let weights = swis_step_weights(trajectories, target, catalog, clip)?;
    let n = trajectories.len() as f64;

    // per-trajectory pseudo-values, so the mean matches the estimate and a
    // trajectory-level standard error is defined
    let mut values = vec![0.0; trajectories.len()];
    let mut discount = 1.0;
    for (t, step_weights) in weights.iter().enumerate() {
        for (tau, traj) in trajectories.iter().enumerate() {
            let reward = traj.steps.get(t).map_or(0.0, |s| s.reward);
            values[tau] += discount * n * step_weights[tau] * reward;
        }
        discount *= gamma;
    }
    summarize(&values, behavior)
}

/// Default SWIS clip interval.
pub const DEFAULT_SWIS_CLIP: (f64, f64) = (0.1, 10.0);

// ── Doubly robust ───────────────────────────────────────────────────────

/// Per-trajectory per-step bandit DR value:
/// `sum_t gamma^t [ r_hat(s_t, pi) + rho_t (r_t - r_hat(s_t, a_t)) ]`.
pub fn dr_trajectory_value(
    traj: &Trajectory,
    target: &dyn Policy,
    catalog: &Catalog,
    gamma: f64,
    reward_model: &dyn RewardModel,
) -> Result<f64, CpeError> {
    validate_propensity(traj)?;
    let mut total = 0.0;
    let mut discount = 1.0;
    for step in &traj.steps {
        let probs = target.action_probabilities(&step.ctx, &step.action_mask, catalog)?;
        let mut direct = 0.0;
        for (&id, &p) in step.action_mask.iter().zip(&probs) {
            if p > 0.0 {
                direct += p * reward_model.expected_reward(&step.ctx, id)?;
            }
        }
        let e = probability_of(target, &step.ctx, &step.action_mask, step.action, catalog)?;
        let rho = e / step.behavior_prob;
        let baseline = reward_model.expected_reward(&step.ctx, step.action)?;
        total += discount * (direct + rho * (step.reward - baseline));
        discount *= gamma;
    }
    Ok(total)
}

/// Per-step bandit doubly robust estimate, relative to behavior.
pub fn dr_estimate(
    trajectories: &[Trajectory],
    target: &dyn Policy,
    catalog: &Catalog,
    gamma: f64,
    reward_model: &dyn RewardModel,
) -> Result<EstimateSummary, CpeError> {
    let behavior = behavior_value(trajectories, gamma)?;
    let values: Vec<f64> = trajectories
        .iter()
        .map(|t| dr_trajectory_value(t, target, catalog, gamma, reward_model))
        .collect::<Result<_, _>>()?;
    summarize(&values, behavior)
}

// ── Sequential doubly robust ────────────────────────────────────────────

/// Per-trajectory Seq-DR value by backward recursion with base 0:
/// `V_t = V_hat(s_t) + rho_t (r_t + gamma V_{t+1} - Q_hat(s_t, a_t))`,
/// where `V_hat(s) = sum_a pi_e(a|s) Q_hat(s, a)`.
pub fn seq_dr_trajectory_value(
    traj: &Trajectory,
    target: &dyn Policy,
    catalog: &Catalog,
    gamma: f64,
    q_model: &dyn ActionValueModel,
) -> Result<f64, CpeError> {
    validate_propensity(traj)?;
    let mut value = 0.0;
    for step in traj.steps.iter().rev() {
        let probs = target.action_probabilities(&step.ctx, &step.action_mask, catalog)?;
        let mut v_hat = 0.0;
        for (&id, &p) in step.action_mask.iter().zip(&probs) {
            if p > 0.0 {
                v_hat += p * q_model.q_value(&step.ctx, id)?;
            }
        }
        let e = probability_of(target, &step.ctx, &step.action_mask, step.action, catalog)?;
        let rho = e / step.behavior_prob;
        let q = q_model.q_value(&step.ctx, step.action)?;
        value = v_hat + rho * (step.reward + gamma * value - q);
    }
    Ok(value)
}

/// Sequential doubly robust estimate, relative to behavior.
pub fn seq_dr_estimate(
    trajectories: &[Trajectory],
    target: &dyn Policy,
    catalog: &Catalog,
    gamma: f64,
    q_model: &dyn ActionValueModel,
) -> Result<EstimateSummary, CpeError> {
    let behavior = behavior_value(trajectories, gamma)?;
    let values: Vec<f64> = trajectories
        .iter()
        .map(|t| seq_dr_trajectory_value(t, target, catalog, gamma, q_model))
        .collect::<Result<_, _>>()?;
    summarize(&values, behavior)
}

/// Run all four estimators on one target policy.
#[allow(clippy::too_many_arguments)]
pub fn cpe_report(
    trajectories: &[Trajectory],
    target: &dyn Policy,
    catalog: &Catalog,
    gamma: f64,
    clip: (f64, f64),
    reward_model: &dyn RewardModel,
    q_model: &dyn ActionValueModel,
) -> Result<CpeReport, CpeError> {
    Ok(CpeReport {
        behavior_value: behavior_value(trajectories, gamma)?,
        trajectories: trajectories.len(),
        is: is_estimate(trajectories, target, catalog, gamma)?,
        swis: swis_estimate(trajectories, target, catalog, gamma, clip)?,
        dr: dr_estimate(trajectories, target, catalog, gamma, reward_model)?,
        seq_dr: seq_dr_estimate(trajectories, target, catalog, gamma, q_model)?,
    })
}

/// Human-readable table with one row per evaluated policy, relative scores
/// with trajectory-level standard errors.
pub fn render_cpe_table(rows: &[(String, CpeReport)]) -> String {
    let mut out = String::from("policy\tIS\tSWIS\tDR\tSeq. DR\n");
    for (name, report) in rows {
        let cell = |e: &EstimateSummary| format!("{:.2}(\u{b1}{:.2})", e.relative, e.relative_std_error);
        out.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\n",
            cell(&report.is),
            cell(&report.swis),
            cell(&report.dr),
            cell(&report.seq_dr),
        ));
    }
    out
}

// ── Trajectory construction and files ───────────────────────────────────

/// Build logged trajectories from padded sessions; one trajectory per
/// session, behavior propensities copied from the log.
pub fn trajectories_from_sessions(
    sessions: &[SessionRecord],
    catalog: &Catalog,
) -> Result<Vec<Trajectory>, CpeError> {
    let mut out = Vec::with_capacity(sessions.len());
    for session in sessions {
        let user = session.user_context();
        let mut steps = Vec::new();
        let mut completed: Vec<PageOutcome> = Vec::new();
        for page in &session.pages {
            for (pos, &action) in page.exposed_items.iter().enumerate() {
                let ctx = DecisionContext {
                    user: user.clone(),
                    completed_pages: completed.clone(),
                    chosen: page.exposed_items[..pos].to_vec(),
                };
                let mask: Vec<ItemId> =
                    catalog.ids().filter(|id| !ctx.chosen.contains(id)).collect();
                let utility = catalog
                    .utility(action)
                    .map_err(|e| CpeError::Model(e.to_string()))?;
                steps.push(TrajectoryStep {
                    ctx,
                    action,
                    behavior_prob: page.behavior_action_probs[pos],
                    reward: page.user_feedback[pos] as f64 * utility,
                    action_mask: mask,
                });
            }
            completed.push(PageOutcome {
                items: page.exposed_items.clone(),
                feedback: page.user_feedback.clone(),
            });
        }
        out.push(Trajectory { mdp_id: session.session_id.clone(), steps });
    }
    Ok(out)
}

/// One trajectory per line.
pub fn write_trajectories<W: Write>(
    trajectories: &[Trajectory],
    mut writer: W,
) -> Result<(), CpeError> {
    for traj in trajectories {
        let line =
            serde_json::to_string(traj).map_err(|e| CpeError::Serialization(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn read_trajectories<R: BufRead>(reader: R) -> Result<Vec<Trajectory>, CpeError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CpeError::Serialization(e.to_string()))?,
        );
    }
    Ok(out)
}
