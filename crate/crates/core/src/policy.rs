//! Policy abstraction and lightweight learners: behavior cloning, batch
//! Q-learning with a BCQ-style action filter, online REINFORCE, and online
//! policy evaluation.
//!
//! Every learner shares the feature pipeline of [`crate::features`]: a
//! policy or Q-function scores `(state, action)` pairs as a linear function
//! of `state_block ++ action_block`, so anything trained from samples can
//! score unseen candidates through the catalog.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, ItemId};
use crate::env::{self, EnvError, EpisodeConfig, SlateState, UserResponseModel};
use crate::features::{
    add_pair_features, pair_features_from_state, pair_norm_sq, pair_score, state_features,
    DecisionContext, FeatureError, FeatureScaling, FeatureSpec, PageOutcome,
};
use crate::logged::MdpSample;
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("action mask is empty")]
    EmptyMask,
    #[error("no training data")]
    NoData,
    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state vector has dimension {got}, feature spec expects {expected}")]
    StateDimMismatch { got: usize, expected: usize },
}

/// A stochastic policy over valid items.
///
/// Returned probabilities are aligned with `mask`, sum to 1 over it, and
/// are implicitly zero for every item outside it.
pub trait Policy: Sync {
    fn action_probabilities(
        &self,
        ctx: &DecisionContext,
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError>;
}

/// Probability the policy assigns to `action`; 0 when `action` is masked out.
pub fn probability_of(
    policy: &dyn Policy,
    ctx: &DecisionContext,
    mask: &[ItemId],
    action: ItemId,
    catalog: &Catalog,
) -> Result<f64, PolicyError> {
    match mask.iter().position(|&id| id == action) {
        Some(idx) => Ok(policy.action_probabilities(ctx, mask, catalog)?[idx]),
        None => Ok(0.0),
    }
}

/// Draw an action from the policy's distribution over the mask.
pub fn sample_action(
    policy: &dyn Policy,
    ctx: &DecisionContext,
    mask: &[ItemId],
    catalog: &Catalog,
    rng: &mut ChaCha8Rng,
) -> Result<ItemId, PolicyError> {
    if mask.is_empty() {
        return Err(PolicyError::EmptyMask);
    }
    let probs = policy.action_probabilities(ctx, mask, catalog)?;
    let mut u = rng.gen::<f64>();
    for (&id, &p) in mask.iter().zip(&probs) {
        u -= p;
        if u <= 0.0 {
            return Ok(id);
        }
    }
    Ok(*mask.last().expect("nonempty mask"))
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Uniform distribution over the mask.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn action_probabilities(
        &self,
        _ctx: &DecisionContext,
        mask: &[ItemId],
        _catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError> {
        if mask.is_empty() {
            return Err(PolicyError::EmptyMask);
        }
        Ok(vec![1.0 / mask.len() as f64; mask.len()])
    }
}

/// Softmax-linear policy over shared `(state, action)` features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    pub spec: FeatureSpec,
    pub theta: Vec<f64>,
    pub scaling: FeatureScaling,
}

impl LinearSoftmaxPolicy {
    pub fn zeroed(spec: FeatureSpec) -> Self {
        let theta = vec![0.0; spec.pair_dim()];
        let scaling = FeatureScaling::identity(spec.pair_dim());
        Self { spec, theta, scaling }
    }

    /// Distribution over `mask` given a precomputed state block.
    pub fn probabilities_from_state(
        &self,
        state: &[f64],
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError> {
        if mask.is_empty() {
            return Err(PolicyError::EmptyMask);
        }
        if state.len() != self.spec.state_dim() {
            return Err(PolicyError::StateDimMismatch {
                got: state.len(),
                expected: self.spec.state_dim(),
            });
        }
        let scores: Vec<f64> = mask
            .iter()
            .map(|&id| {
                let item = catalog.get(id)?;
                let idx = catalog.index_of(id)?;
                Ok::<f64, CatalogError>(pair_score(&self.theta, &self.scaling, state, item, idx, &self.spec))
            })
            .collect::<Result<_, _>>()?;
        Ok(softmax(&scores))
    }
}

impl Policy for LinearSoftmaxPolicy {
    fn action_probabilities(
        &self,
        ctx: &DecisionContext,
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError> {
        let state = state_features(ctx, ctx.position(), &self.spec, catalog)?;
        self.probabilities_from_state(&state, mask, catalog)
    }
}

/// Deterministic argmax of an inner policy's distribution (first maximum in
/// mask order on ties).
pub struct GreedyPolicy<P>(pub P);

impl<P: Policy> Policy for GreedyPolicy<P> {
    fn action_probabilities(
        &self,
        ctx: &DecisionContext,
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError> {
        let inner = self.0.action_probabilities(ctx, mask, catalog)?;
        let best = argmax(&inner);
        let mut out = vec![0.0; inner.len()];
        out[best] = 1.0;
        Ok(out)
    }
}

/// Epsilon mixture of two policies: `(1 - epsilon) * primary + epsilon *
/// fallback`. With a uniform fallback this keeps every propensity bounded
/// away from zero, which logged-data consumers rely on.
pub struct MixturePolicy<A, B> {
    pub primary: A,
    pub fallback: B,
    pub epsilon: f64,
}

impl<A: Policy, B: Policy> Policy for MixturePolicy<A, B> {
    fn action_probabilities(
        &self,
        ctx: &DecisionContext,
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError> {
        let a = self.primary.action_probabilities(ctx, mask, catalog)?;
        let b = self.fallback.action_probabilities(ctx, mask, catalog)?;
        Ok(a.iter().zip(&b).map(|(&pa, &pb)| (1.0 - self.epsilon) * pa + self.epsilon * pb).collect())
    }
}

/// Linear action-value function over shared `(state, action)` features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearQ {
    pub spec: FeatureSpec,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scaling: FeatureScaling,
}

impl LinearQ {
    pub fn zeroed(spec: FeatureSpec) -> Self {
        let weights = vec![0.0; spec.pair_dim()];
        let scaling = FeatureScaling::identity(spec.pair_dim());
        Self { spec, weights, bias: 0.0, scaling }
    }

    pub fn q_from_state(
        &self,
        state: &[f64],
        id: ItemId,
        catalog: &Catalog,
    ) -> Result<f64, PolicyError> {
        let item = catalog.get(id)?;
        let idx = catalog.index_of(id)?;
        Ok(self.bias + pair_score(&self.weights, &self.scaling, state, item, idx, &self.spec))
    }
}

/// Batch-constrained greedy policy: argmax of Q over the actions the cloned
/// behavior policy deems sufficiently likely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcqPolicy {
    pub q: LinearQ,
    pub bc: LinearSoftmaxPolicy,
    /// Action-flexibility fraction of the maximum cloned probability.
    pub threshold: f64,
}

impl BcqPolicy {
    /// Indices into `mask` that pass the behavior-support filter. Always
    /// contains the cloned argmax for thresholds <= 1.
    pub fn filtered_indices(
        &self,
        state: &[f64],
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<usize>, PolicyError> {
        let bc_probs = self.bc.probabilities_from_state(state, mask, catalog)?;
        let max_p = bc_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let passing: Vec<usize> =
            (0..mask.len()).filter(|&i| bc_probs[i] >= self.threshold * max_p).collect();
        if passing.is_empty() {
            // over-tight threshold: fall back to the cloned argmax
            return Ok(vec![argmax(&bc_probs)]);
        }
        Ok(passing)
    }

    fn greedy_index(
        &self,
        state: &[f64],
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<usize, PolicyError> {
        let candidates = self.filtered_indices(state, mask, catalog)?;
        let mut best = candidates[0];
        let mut best_q = self.q.q_from_state(state, mask[best], catalog)?;
        for &i in &candidates[1..] {
            let q = self.q.q_from_state(state, mask[i], catalog)?;
            if q > best_q {
                best = i;
                best_q = q;
            }
        }
        Ok(best)
    }
}

impl Policy for BcqPolicy {
    fn action_probabilities(
        &self,
        ctx: &DecisionContext,
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError> {
        if mask.is_empty() {
            return Err(PolicyError::EmptyMask);
        }
        let state = state_features(ctx, ctx.position(), &self.q.spec, catalog)?;
        let best = self.greedy_index(&state, mask, catalog)?;
        let mut out = vec![0.0; mask.len()];
        out[best] = 1.0;
        Ok(out)
    }
}

// ── Learner configuration ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub seed: u64,
    /// BCQ action flexibility: fraction of the maximum cloned probability
    /// an action needs to stay eligible.
    pub bcq_threshold: f64,
    pub fqi_iterations: usize,
    /// Episodes per REINFORCE batch.
    pub pg_batch_episodes: usize,
    /// Entropy bonus keeping the REINFORCE policy from determinizing into
    /// a zero-reward absorbing state.
    pub entropy_coef: f64,
    /// L2 cap on each REINFORCE batch update (after curvature scaling), so
    /// one lucky high-variance batch cannot collapse the policy.
    pub grad_clip: f64,
    pub l2: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 40,
            gamma: 1.0,
            seed: 0,
            bcq_threshold: 0.3,
            fqi_iterations: 25,
            pg_batch_episodes: 16,
            entropy_coef: 0.01,
            grad_clip: 10.0,
            l2: 1e-4,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.learning_rate > 0.0) {
            return Err(PolicyError::Config("learning rate must be > 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PolicyError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.bcq_threshold) {
            return Err(PolicyError::Config(format!(
                "bcq_threshold {} outside [0, 1]",
                self.bcq_threshold
            )));
        }
        Ok(())
    }
}

// ── Episode machinery ───────────────────────────────────────────────────

/// One decision step of a rolled-out episode. `reward` is the per-position
/// reward `feedback * utility`, filled in when the page completes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub ctx: DecisionContext,
    pub mask: Vec<ItemId>,
    pub action: ItemId,
    pub action_prob: f64,
    pub reward: f64,
}

/// A completed episode rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub user: Vec<f64>,
    pub steps: Vec<TraceStep>,
    pub pages: Vec<PageOutcome>,
}

impl EpisodeTrace {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// `sum_t gamma^t r_t` over per-position rewards.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut total = 0.0;
        let mut d = 1.0;
        for step in &self.steps {
            total += d * step.reward;
            d *= gamma;
        }
        total
    }

    /// Per-step discounted return-to-go.
    pub fn returns_to_go(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut acc = 0.0;
        for (i, step) in self.steps.iter().enumerate().rev() {
            acc = step.reward + gamma * acc;
            out[i] = acc;
        }
        out
    }
}

/// Samples the user context starting an episode.
pub trait UserSampler: Sync {
    fn sample_user(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

/// Every episode starts from the same user context.
#[derive(Debug, Clone)]
pub struct FixedUser(pub Vec<f64>);

impl UserSampler for FixedUser {
    fn sample_user(&self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.0.clone()
    }
}

/// An episode source: environment geometry, catalog, response model, and
/// user population. Instances are independent; models are shared read-only.
pub struct Simulator<'a> {
    pub config: EpisodeConfig,
    pub catalog: &'a Catalog,
    pub model: &'a dyn UserResponseModel,
    pub users: &'a dyn UserSampler,
}

impl Simulator<'_> {
    /// Roll one episode under `policy`. The single per-episode stream
    /// drives, in order: the user draw, then for each step the policy's
    /// action draw followed by the environment's feedback/continue draws.
    pub fn run_episode(&self, policy: &dyn Policy, seed: u64) -> Result<EpisodeTrace, PolicyError> {
        let mut rng = stream_rng(seed, "sim-episode", 0);
        let user = self.users.sample_user(&mut rng);
        self.run_episode_for_user(policy, user, &mut rng)
    }

    pub fn run_episode_for_user(
        &self,
        policy: &dyn Policy,
        user: Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<EpisodeTrace, PolicyError> {
        let mut state = SlateState::initial(user.clone());
        let mut steps: Vec<TraceStep> = Vec::new();
        let mut pages = Vec::new();
        let mut page_start = 0;
        loop {
            let mask = env::action_mask(&state, self.catalog, &self.config);
            let probs = policy.action_probabilities(&state.ctx, &mask, self.catalog)?;
            let mut u = rng.gen::<f64>();
            let mut pick = mask.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                u -= p;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            let action = mask[pick];
            steps.push(TraceStep {
                ctx: state.ctx.clone(),
                mask,
                action,
                action_prob: probs[pick],
                reward: 0.0,
            });

            let result = env::step(&state, action, &self.config, self.catalog, self.model, rng)?;
            state = result.next_state;
            if let Some(feedback) = result.info {
                let page = state.ctx.completed_pages.last().expect("page just completed");
                for (offset, (&f, &id)) in feedback.iter().zip(&page.items).enumerate() {
                    steps[page_start + offset].reward = f as f64 * self.catalog.utility(id)?;
                }
                pages.push(PageOutcome { items: page.items.clone(), feedback });
                page_start = steps.len();
            }
            if result.done {
                break;
            }
        }
        Ok(EpisodeTrace { user, steps, pages })
    }
}

// ── Behavior cloning ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitCurve {
    pub epochs_run: usize,
    pub losses: Vec<f64>,
}

impl FitCurve {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Mean squared `(state, action)` feature norm over logged pairs; the
/// softmax-loss curvature is bounded by it, so dividing the learning rate
/// by `0.25 * (this + 1)` keeps first-order updates stable regardless of
/// feature scale.
fn mean_pair_norm_sq(
    samples: &[MdpSample],
    catalog: &Catalog,
    spec: &FeatureSpec,
    scaling: &FeatureScaling,
) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for sample in samples {
        let item = catalog.get(sample.action)?;
        total += pair_norm_sq(scaling, &sample.state, item, catalog.index_of(sample.action)?, spec);
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Cross-entropy fit of a masked softmax policy to the logged actions.
pub fn bc_fit(
    samples: &[MdpSample],
    spec: &FeatureSpec,
    catalog: &Catalog,
    config: &LearnerConfig,
) -> Result<(LinearSoftmaxPolicy, FitCurve), PolicyError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(PolicyError::NoData);
    }
    let mut policy = LinearSoftmaxPolicy::zeroed(spec.clone());
    policy.scaling = scaling_from_samples(samples, spec, catalog)?;
    let mut losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let step = config.learning_rate
        / (0.25 * (mean_pair_norm_sq(samples, catalog, spec, &policy.scaling)? + 1.0));

    for epoch in 0..config.epochs {
        let mut rng = stream_rng(config.seed, "bc-epoch", epoch as u64);
        shuffle(&mut order, &mut rng);
        let mut nll = 0.0;
        for &idx in &order {
            let sample = &samples[idx];
            let probs =
                policy.probabilities_from_state(&sample.state, &sample.action_mask, catalog)?;
            let logged =
                sample.action_mask.iter().position(|&id| id == sample.action).ok_or_else(|| {
                    PolicyError::Config(format!(
                        "logged action {} missing from its own mask",
                        sample.action
                    ))
                })?;
            nll -= probs[logged].max(1e-300).ln();

            // grad of log pi(a|s): phi(s, a) - E_pi[phi(s, .)]
            apply_pair_features(&mut policy.theta, &policy.scaling, &sample.state, sample.action, catalog, spec, step)?;
            for (i, &id) in sample.action_mask.iter().enumerate() {
                apply_pair_features(&mut policy.theta, &policy.scaling, &sample.state, id, catalog, spec, -step * probs[i])?;
            }
        }
        let loss = nll / samples.len() as f64;
        if !loss.is_finite() {
            return Err(PolicyError::Divergence { epoch, message: format!("loss {loss}") });
        }
        losses.push(loss);
    }
    Ok((policy, FitCurve { epochs_run: config.epochs, losses }))
}

fn apply_pair_features(
    theta: &mut [f64],
    scaling: &FeatureScaling,
    state: &[f64],
    id: ItemId,
    catalog: &Catalog,
    spec: &FeatureSpec,
    coef: f64,
) -> Result<(), PolicyError> {
    let item = catalog.get(id)?;
    let idx = catalog.index_of(id)?;
    add_pair_features(theta, scaling, state, item, idx, spec, coef);
    Ok(())
}

/// Max-abs feature scaling fitted from the logged `(state, action)` pairs.
fn scaling_from_samples(
    samples: &[MdpSample],
    spec: &FeatureSpec,
    catalog: &Catalog,
) -> Result<FeatureScaling, PolicyError> {
    let mut pairs = Vec::with_capacity(samples.len());
    for sample in samples {
        let item = catalog.get(sample.action)?;
        let idx = catalog.index_of(sample.action)?;
        pairs.push(pair_features_from_state(&sample.state, item, idx, spec)?);
    }
    Ok(FeatureScaling::fit_max_abs(&pairs, spec.pair_dim()))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

// ── Batch-constrained Q-learning ────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QLearnReport {
    pub iterations: usize,
    pub bellman_errors: Vec<f64>,
    /// Times the support filter came up empty and fell back to the cloned
    /// argmax while computing targets.
    pub filter_fallbacks: usize,
    pub bc_curve: FitCurve,
}

/// Fitted Q iteration with the target argmax restricted to actions whose
/// cloned-behavior probability clears `bcq_threshold` times the maximum.
pub fn batch_q_learn(
    samples: &[MdpSample],
    spec: &FeatureSpec,
    catalog: &Catalog,
    config: &LearnerConfig,
) -> Result<(BcqPolicy, QLearnReport), PolicyError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(PolicyError::NoData);
    }
    let (bc, bc_curve) = bc_fit(samples, spec, catalog, config)?;
    let mut q = LinearQ::zeroed(spec.clone());
    q.scaling = bc.scaling.clone();
    let mut bellman_errors = Vec::with_capacity(config.fqi_iterations);
    let mut filter_fallbacks = 0usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for iteration in 0..config.fqi_iterations {
        // freeze targets against the previous iterate
        let mut targets = Vec::with_capacity(samples.len());
        for sample in samples {
            let bootstrap = if sample.terminal == 1 || sample.next_action_mask.is_empty() {
                0.0
            } else {
                let bc_probs = bc.probabilities_from_state(
                    &sample.next_state,
                    &sample.next_action_mask,
                    catalog,
                )?;
                let max_p = bc_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut candidates: Vec<usize> = (0..sample.next_action_mask.len())
                    .filter(|&i| bc_probs[i] >= config.bcq_threshold * max_p)
                    .collect();
                if candidates.is_empty() {
                    filter_fallbacks += 1;
                    candidates.push(argmax(&bc_probs));
                }
                let mut best = f64::NEG_INFINITY;
                for &i in &candidates {
                    let v =
                        q.q_from_state(&sample.next_state, sample.next_action_mask[i], catalog)?;
                    if v > best {
                        best = v;
                    }
                }
                best
            };
            targets.push(sample.reward + config.gamma * bootstrap);
        }

        // one regression pass toward the frozen targets, with normalized
        // least-mean-squares steps so feature scale cannot destabilize it
        let mut rng = stream_rng(config.seed, "fqi-iteration", iteration as u64);
        shuffle(&mut order, &mut rng);
        let mut squared = 0.0;
        for &idx in &order {
            let sample = &samples[idx];
            let pred = q.q_from_state(&sample.state, sample.action, catalog)?;
            let err = targets[idx] - pred;
            squared += err * err;
            let item = catalog.get(sample.action)?;
            let norm_sq =
                pair_norm_sq(&q.scaling, &sample.state, item, catalog.index_of(sample.action)?, spec);
            let step = config.learning_rate * err / (1.0 + norm_sq);
            apply_pair_features(&mut q.weights, &q.scaling, &sample.state, sample.action, catalog, spec, step)?;
            q.bias += step;
            for w in q.weights.iter_mut() {
                *w -= config.learning_rate * config.l2 * *w;
            }
        }
        let mse = squared / samples.len() as f64;
        if !mse.is_finite() {
            return Err(PolicyError::Divergence {
                epoch: iteration,
                message: format!("Bellman MSE {mse}"),
            });
        }
        bellman_errors.push(mse);
    }

    let policy = BcqPolicy { q, bc, threshold: config.bcq_threshold };
    let report = QLearnReport {
        iterations: config.fqi_iterations,
        bellman_errors,
        filter_fallbacks,
        bc_curve,
    };
    Ok((policy, report))
}

// ── REINFORCE ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgReport {
    pub batches: usize,
    /// Mean undiscounted episode reward per batch.
    pub reward_curve: Vec<f64>,
}

/// Accumulate `scale * grad log pi(action | ctx)` into `grad`.
pub fn add_log_prob_gradient(
    grad: &mut [f64],
    policy: &LinearSoftmaxPolicy,
    ctx: &DecisionContext,
    mask: &[ItemId],
    action: ItemId,
    catalog: &Catalog,
    scale: f64,
) -> Result<(), PolicyError> {
    let state = state_features(ctx, ctx.position(), &policy.spec, catalog)?;
    let probs = policy.probabilities_from_state(&state, mask, catalog)?;
    apply_pair_features(grad, &policy.scaling, &state, action, catalog, &policy.spec, scale)?;
    for (i, &id) in mask.iter().enumerate() {
        apply_pair_features(grad, &policy.scaling, &state, id, catalog, &policy.spec, -scale * probs[i])?;
    }
    Ok(())
}

/// Feature spec a policy learner uses against a simulator.
pub fn simulator_feature_spec(sim: &Simulator<'_>) -> FeatureSpec {
    FeatureSpec {
        user_dim: sim.model.user_dim(),
        page_size: sim.config.page_size,
        max_pages: sim.config.max_pages,
        item_feature_dim: sim.catalog.feature_dim(),
        include_exposure_history: sim.config.max_pages > 1,
        include_exposure_cross: sim.config.max_pages > 1 && sim.catalog.len() <= 32,
        catalog_size: sim.catalog.len(),
    }
}

/// Fit max-abs feature scaling from seeded uniform-policy warmup episodes.
fn reinforce_warmup_scaling(
    sim: &Simulator<'_>,
    spec: &FeatureSpec,
    config: &LearnerConfig,
) -> Result<FeatureScaling, PolicyError> {
    let mut pairs = Vec::new();
    for i in 0..config.pg_batch_episodes.max(8) {
        let seed = crate::rng::stream_seed(config.seed, "pg-scale", i as u64);
        let trace = sim.run_episode(&UniformPolicy, seed)?;
        for step in &trace.steps {
            let state = state_features(&step.ctx, step.ctx.position(), spec, sim.catalog)?;
            for &id in &step.mask {
                let item = sim.catalog.get(id)?;
                pairs.push(pair_features_from_state(&state, item, sim.catalog.index_of(id)?, spec)?);
            }
        }
    }
    Ok(FeatureScaling::fit_max_abs(&pairs, spec.pair_dim()))
}

/// Episodic REINFORCE with a mean-return baseline against a simulator.
/// `config.epochs` counts gradient batches of `config.pg_batch_episodes`
/// episodes each.
pub fn reinforce_online(
    sim: &Simulator<'_>,
    config: &LearnerConfig,
) -> Result<(LinearSoftmaxPolicy, PgReport), PolicyError> {
    config.validate()?;
    let mut policy = LinearSoftmaxPolicy::zeroed(simulator_feature_spec(sim));
    policy.scaling = reinforce_warmup_scaling(sim, &policy.spec, config)?;
    let mut reward_curve = Vec::with_capacity(config.epochs);
    let mut episode_counter = 0u64;

    for batch in 0..config.epochs {
        let mut traces = Vec::with_capacity(config.pg_batch_episodes);
        for _ in 0..config.pg_batch_episodes {
            let seed = crate::rng::stream_seed(config.seed, "pg-episode", episode_counter);
            episode_counter += 1;
            traces.push(sim.run_episode(&policy, seed)?);
        }

        let returns: Vec<f64> = traces.iter().map(|t| t.discounted_return(config.gamma)).collect();
        let baseline = returns.iter().sum::<f64>() / returns.len() as f64;

        let mut grad = vec![0.0; policy.theta.len()];
        let mut batch_norm_sq = 0.0;
        let mut visited = 0usize;
        for trace in &traces {
            let to_go = trace.returns_to_go(config.gamma);
            for (step, g_t) in trace.steps.iter().zip(to_go) {
                let item = sim.catalog.get(step.action)?;
                let state = state_features(&step.ctx, step.ctx.position(), &policy.spec, sim.catalog)?;
                batch_norm_sq +=
                    pair_norm_sq(&policy.scaling, &state, item, sim.catalog.index_of(step.action)?, &policy.spec);
                visited += 1;
                let probs = policy.probabilities_from_state(&state, &step.mask, sim.catalog)?;
                let pick = step
                    .mask
                    .iter()
                    .position(|&id| id == step.action)
                    .expect("trace action comes from its own mask");

                // advantage term plus the entropy bonus
                // grad H = -sum_a pi_a log pi_a (phi_a - phi_mean)
                let mut mean_coef = 0.0;
                for (i, &id) in step.mask.iter().enumerate() {
                    let log_p = probs[i].max(1e-300).ln();
                    let mut coef = -config.entropy_coef * probs[i] * log_p;
                    if i == pick {
                        coef += g_t - baseline;
                    }
                    mean_coef += coef;
                    let mask_item = sim.catalog.get(id)?;
                    add_pair_features(
                        &mut grad,
                        &policy.scaling,
                        &state,
                        mask_item,
                        sim.catalog.index_of(id)?,
                        &policy.spec,
                        coef,
                    );
                }
                // subtract the probability-weighted mean feature
                for (i, &id) in step.mask.iter().enumerate() {
                    let mask_item = sim.catalog.get(id)?;
                    add_pair_features(
                        &mut grad,
                        &policy.scaling,
                        &state,
                        mask_item,
                        sim.catalog.index_of(id)?,
                        &policy.spec,
                        -mean_coef * probs[i],
                    );
                }
            }
        }
        let curvature = 0.25 * (batch_norm_sq / visited.max(1) as f64 + 1.0);
        let mut scale = config.learning_rate / (curvature * config.pg_batch_episodes as f64);
        if config.grad_clip > 0.0 {
            let norm = (grad.iter().map(|g| g * g).sum::<f64>()).sqrt() * scale;
            if norm > config.grad_clip {
                scale *= config.grad_clip / norm;
            }
        }
        for (w, g) in policy.theta.iter_mut().zip(&grad) {
            *w += scale * g;
            if !w.is_finite() {
                return Err(PolicyError::Divergence {
                    epoch: batch,
                    message: "non-finite policy weight".into(),
                });
            }
        }
        reward_curve
            .push(traces.iter().map(|t| t.total_reward()).sum::<f64>() / traces.len() as f64);
    }
    Ok((policy, PgReport { batches: config.epochs, reward_curve }))
}

// ── Checkpoints ─────────────────────────────────────────────────────────

/// A serializable policy, for checkpoint files. Delegates scoring to the
/// wrapped implementation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "policy", content = "params", rename_all = "kebab-case")]
pub enum PolicySpec {
    Uniform,
    LinearSoftmax(LinearSoftmaxPolicy),
    Bcq(BcqPolicy),
}

impl Policy for PolicySpec {
    fn action_probabilities(
        &self,
        ctx: &DecisionContext,
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError> {
        match self {
            PolicySpec::Uniform => UniformPolicy.action_probabilities(ctx, mask, catalog),
            PolicySpec::LinearSoftmax(p) => p.action_probabilities(ctx, mask, catalog),
            PolicySpec::Bcq(p) => p.action_probabilities(ctx, mask, catalog),
        }
    }
}

const POLICY_CHECKPOINT_KIND: &str = "slate-rl policy";
const POLICY_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PolicyCheckpoint {
    kind: String,
    version: u32,
    spec: PolicySpec,
}

/// Self-describing JSON checkpoint; round-trips are bit-exact.
pub fn save_policy<W: std::io::Write>(
    spec: &PolicySpec,
    mut writer: W,
) -> Result<(), PolicyError> {
    let record = PolicyCheckpoint {
        kind: POLICY_CHECKPOINT_KIND.into(),
        version: POLICY_CHECKPOINT_VERSION,
        spec: spec.clone(),
    };
    let text = serde_json::to_string_pretty(&record)
        .map_err(|e| PolicyError::Config(format!("checkpoint serialization: {e}")))?;
    writer
        .write_all(text.as_bytes())
        .and_then(|()| writer.write_all(b"\n"))
        .map_err(|e| PolicyError::Config(format!("checkpoint write: {e}")))
}

pub fn load_policy<R: std::io::BufRead>(mut reader: R) -> Result<PolicySpec, PolicyError> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| PolicyError::Config(format!("checkpoint read: {e}")))?;
    let record: PolicyCheckpoint = serde_json::from_str(&text)
        .map_err(|e| PolicyError::Config(format!("checkpoint parse: {e}")))?;
    if record.kind != POLICY_CHECKPOINT_KIND {
        return Err(PolicyError::Config(format!("unexpected checkpoint kind {:?}", record.kind)));
    }
    if record.version != POLICY_CHECKPOINT_VERSION {
        return Err(PolicyError::Config(format!(
            "unsupported checkpoint version {}",
            record.version
        )));
    }
    Ok(record.spec)
}

// ── Online evaluation ───────────────────────────────────────────────────

/// Mean and spread of episode returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

impl std::fmt::Display for EvalResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1}(\u{b1}{:.1})", self.mean, self.std)
    }
}

/// Run `episodes` seeded episodes and report the mean and sample standard
/// deviation of the discounted return.
pub fn evaluate_online(
    policy: &dyn Policy,
    sim: &Simulator<'_>,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult, PolicyError> {
    if episodes == 0 {
        return Err(PolicyError::Config("episodes must be >= 1".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let episode_seed = crate::rng::stream_seed(seed, "eval-episode", i as u64);
        let trace = sim.run_episode(policy, episode_seed).map_err(|e| match e {
            PolicyError::Env(inner) => PolicyError::Config(format!("episode {i}: {inner}")),
            other => other,
        })?;
        returns.push(trace.discounted_return(sim.config.gamma));
    }
    let (mean, std) = crate::metrics::mean_std(&returns);
    Ok(EvalResult { mean, std, episodes })
}
