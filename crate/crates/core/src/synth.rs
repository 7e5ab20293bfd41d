//! Synthetic ground-truth worlds: configurable cross-item (decoy) and
//! cross-step (long-term) purchase effects, behavior-policy log generation
//! with recorded propensities, and exact enumeration oracles for testing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, Item, ItemId};
use crate::cpe::{Trajectory, TrajectoryStep};
use crate::env::{EpisodeConfig, EnvError, ResponseModelError, UserResponseModel};
use crate::features::{DecisionContext, PageOutcome};
use crate::logged::{LoggedDataError, LoggedRow};
use crate::policy::{Policy, PolicyError, Simulator, UserSampler};
use crate::rng::{stream_rng, stream_seed};
use crate::unlock::pattern_distribution;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("instance too large for enumeration: {got}, bound is {bound}")]
    TooLarge { got: String, bound: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ResponseModelError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Logged(#[from] LoggedDataError),
}

/// What activates cross-page boosts: showing the predecessor, or the
/// user actually buying it (the book-to-sequel pattern).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoostTrigger {
    Exposure,
    Purchase,
}

/// One user archetype with its population weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCluster {
    pub features: Vec<f64>,
    pub weight: f64,
}

/// A fully specified ground-truth world. Purchase log-odds of catalog
/// index `j` are
///
/// ```text
/// attraction[cluster][j]
///   + decoy_coef * (mean utility of co-displayed items - utility_j) / mean utility
///   + longterm_coef * sum over earlier exposures e of boost[e][j]
/// ```
///
/// and feedback is drawn row-conditionally under the unlock rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub catalog: Catalog,
    pub clusters: Vec<UserCluster>,
    /// Base attraction logits, indexed `[cluster][catalog index]`.
    pub attraction: Vec<Vec<f64>>,
    pub decoy_coef: f64,
    pub longterm_coef: f64,
    /// `boost[i][j]`: catalog index `i` on an earlier page shifts the
    /// logit of catalog index `j` by this much (times `longterm_coef`).
    pub boost: Vec<Vec<f64>>,
    /// Whether boosts fire on exposure or on purchase of the predecessor.
    pub boost_trigger: BoostTrigger,
    /// Probability the user requests another page.
    pub continue_prob: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn user_dim(&self) -> usize {
        self.clusters[0].features.len()
    }

    /// Nearest cluster by squared distance (first on ties).
    pub fn cluster_of(&self, user: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, cluster) in self.clusters.iter().enumerate() {
            let d: f64 =
                cluster.features.iter().zip(user).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    fn mean_utility(&self) -> f64 {
        let total: f64 = self.catalog.items().iter().map(|i| i.utility).sum();
        (total / self.catalog.len() as f64).max(1e-9)
    }

    /// Ground-truth per-slot purchase probabilities for a completed slate.
    pub fn purchase_probs(
        &self,
        user: &[f64],
        prior_pages: &[PageOutcome],
        slate: &[ItemId],
    ) -> Result<Vec<f64>, CatalogError> {
        let cluster = self.cluster_of(user);
        let mean_u = self.mean_utility();
        let slate_utils: Vec<f64> =
            slate.iter().map(|&id| self.catalog.utility(id)).collect::<Result<_, _>>()?;
        let total_util: f64 = slate_utils.iter().sum();

        let mut exposure = vec![0.0; self.catalog.len()];
        for page in prior_pages {
            for (pos, &id) in page.items.iter().enumerate() {
                let triggered = match self.boost_trigger {
                    BoostTrigger::Exposure => true,
                    BoostTrigger::Purchase => page.feedback.get(pos).copied().unwrap_or(0) == 1,
                };
                if triggered {
                    exposure[self.catalog.index_of(id)?] += 1.0;
                }
            }
        }

        let mut probs = Vec::with_capacity(slate.len());
        for (pos, &id) in slate.iter().enumerate() {
            let j = self.catalog.index_of(id)?;
            let mut logit = self.attraction[cluster][j];
            if slate.len() > 1 {
                let others = (total_util - slate_utils[pos]) / (slate.len() - 1) as f64;
                logit += self.decoy_coef * (others - slate_utils[pos]) / mean_u;
            }
            if self.longterm_coef != 0.0 {
                let mut b = 0.0;
                for (i, &count) in exposure.iter().enumerate() {
                    if count > 0.0 {
                        b += count * self.boost[i][j];
                    }
                }
                logit += self.longterm_coef * b;
            }
            probs.push(sigmoid(logit));
        }
        Ok(probs)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl UserResponseModel for WorldSpec {
    fn user_dim(&self) -> usize {
        self.user_dim()
    }

    fn feedback_distribution(
        &self,
        user: &[f64],
        prior_pages: &[PageOutcome],
        slate: &[ItemId],
        row_len: usize,
        _catalog: &Catalog,
    ) -> Result<Vec<(Vec<u8>, f64)>, ResponseModelError> {
        let probs = self.purchase_probs(user, prior_pages, slate)?;
        Ok(pattern_distribution(&probs, row_len))
    }

    fn continue_probability(
        &self,
        _user: &[f64],
        _completed: &[PageOutcome],
        _catalog: &Catalog,
    ) -> Result<f64, ResponseModelError> {
        Ok(self.continue_prob)
    }
}

impl UserSampler for WorldSpec {
    fn sample_user(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let total: f64 = self.clusters.iter().map(|c| c.weight).sum();
        let mut u = rng.gen::<f64>() * total;
        for cluster in &self.clusters {
            u -= cluster.weight;
            if u <= 0.0 {
                return cluster.features.clone();
            }
        }
        self.clusters.last().expect("nonempty clusters").features.clone()
    }
}

/// Myopic softmax over the world's base attraction: the classic
/// supervised-learning-style behavior policy, blind to decoy and long-term
/// effects.
pub struct AttractionPolicy<'a> {
    pub world: &'a WorldSpec,
    pub temperature: f64,
}

impl Policy for AttractionPolicy<'_> {
    fn action_probabilities(
        &self,
        ctx: &DecisionContext,
        mask: &[ItemId],
        catalog: &Catalog,
    ) -> Result<Vec<f64>, PolicyError> {
        if mask.is_empty() {
            return Err(PolicyError::EmptyMask);
        }
        let cluster = self.world.cluster_of(&ctx.user);
        let t = self.temperature.max(1e-9);
        let scores: Vec<f64> = mask
            .iter()
            .map(|&id| catalog.index_of(id).map(|j| self.world.attraction[cluster][j] / t))
            .collect::<Result<_, _>>()?;
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }
}

// ── World generation ────────────────────────────────────────────────────

/// Size and effect knobs for [`generate_world`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldGenParams {
    pub seed: u64,
    pub catalog_size: usize,
    pub item_feature_dim: usize,
    pub user_dim: usize,
    pub clusters: usize,
    pub utility_low: f64,
    pub utility_high: f64,
    /// Base attraction logits are drawn uniformly from
    /// `attraction_bias ± attraction_scale`.
    pub attraction_bias: f64,
    pub attraction_scale: f64,
    pub decoy_coef: f64,
    pub longterm_coef: f64,
    /// Items are linked into exposure chains of this length...
    pub chain_length: usize,
    /// ...where each link adds this logit boost to its successor.
    pub chain_boost: f64,
    /// With chains active, successors start from this base logit, so they
    /// only sell after their predecessor was shown.
    pub chain_successor_bias: f64,
    /// Base logit of chain starters: high enough that the teaser actually
    /// sells when shown, which is what makes the chain observable in logs.
    pub chain_starter_bias: f64,
    pub boost_trigger: BoostTrigger,
    /// Leading non-chain items lifted to this many logits above the bias,
    /// giving greedy strategies an attractive myopic path.
    pub hot_items: usize,
    pub hot_lift: f64,
    pub continue_prob: f64,
}

impl Default for WorldGenParams {
    fn default() -> Self {
        Self {
            seed: 0,
            catalog_size: 24,
            item_feature_dim: 4,
            user_dim: 6,
            clusters: 3,
            utility_low: 2.0,
            utility_high: 20.0,
            attraction_bias: -0.5,
            attraction_scale: 1.5,
            decoy_coef: 0.3,
            longterm_coef: 0.0,
            chain_length: 4,
            chain_boost: 4.0,
            chain_successor_bias: -3.5,
            chain_starter_bias: 0.5,
            boost_trigger: BoostTrigger::Exposure,
            hot_items: 4,
            hot_lift: 1.5,
            continue_prob: 0.8,
        }
    }
}

/// Frozen world presets used by the diagnostics and acceptance suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorldPreset {
    /// No cross-step effects: the greedy strategy is near-optimal.
    Myopic,
    /// Strong exposure chains: early low-reward picks unlock later value.
    LongTerm,
}

impl WorldPreset {
    pub fn params(self) -> WorldGenParams {
        match self {
            WorldPreset::Myopic => {
                WorldGenParams { seed: 101, longterm_coef: 0.0, ..Default::default() }
            }
            WorldPreset::LongTerm => WorldGenParams {
                seed: 202,
                longterm_coef: 1.0,
                attraction_bias: -1.0,
                chain_boost: 12.0,
                chain_successor_bias: -3.5,
                chain_starter_bias: 0.5,
                boost_trigger: BoostTrigger::Purchase,
                hot_items: 4,
                hot_lift: 3.0,
                ..Default::default()
            },
        }
    }
}

impl std::str::FromStr for WorldPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "myopic" => Ok(WorldPreset::Myopic),
            "long-term" | "longterm" => Ok(WorldPreset::LongTerm),
            other => Err(format!("unknown world preset {other:?}")),
        }
    }
}

/// Deterministically generate a world from size and effect parameters.
pub fn generate_world(params: &WorldGenParams) -> Result<WorldSpec, SynthError> {
    if params.catalog_size == 0 || params.clusters == 0 || params.user_dim == 0 {
        return Err(SynthError::Config("catalog, clusters, and user_dim must be nonzero".into()));
    }
    if !(params.continue_prob >= 0.0 && params.continue_prob <= 1.0) {
        return Err(SynthError::Config(format!(
            "continue_prob {} outside [0, 1]",
            params.continue_prob
        )));
    }
    if !params.chain_boost.is_finite() || !params.longterm_coef.is_finite() {
        return Err(SynthError::Config("effect parameters must be finite".into()));
    }
    let mut rng = stream_rng(params.seed, "world-gen", 0);

    let items: Vec<Item> = (0..params.catalog_size)
        .map(|j| Item {
            id: ItemId(j as u32 + 1),
            utility: rng.gen_range(params.utility_low..=params.utility_high).round(),
            features: (0..params.item_feature_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        })
        .collect();
    let catalog = Catalog::new(items)?;

    let clusters: Vec<UserCluster> = (0..params.clusters)
        .map(|_| UserCluster {
            features: (0..params.user_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            weight: 1.0 / params.clusters as f64,
        })
        .collect();

    let attraction: Vec<Vec<f64>> = (0..params.clusters)
        .map(|_| {
            (0..params.catalog_size)
                .map(|_| {
                    params.attraction_bias
                        + rng.gen_range(-params.attraction_scale..=params.attraction_scale)
                })
                .collect()
        })
        .collect();

    let mut attraction = attraction;
    let mut boost = vec![vec![0.0; params.catalog_size]; params.catalog_size];
    if params.longterm_coef != 0.0 && params.chain_length > 1 {
        // the first `hot_items` stay chain-free with lifted attraction:
        // the myopically attractive path. Chains cover the remainder, and
        // every successor's base logit drops so it only sells when its
        // predecessor was exposed on an earlier page.
        let chain_zone = params.hot_items.min(params.catalog_size);
        for row in &mut attraction {
            for (j, a) in row.iter_mut().enumerate().take(chain_zone) {
                *a = params.attraction_bias + params.hot_lift + (j as f64) * 0.05;
            }
        }
        for start in (chain_zone..params.catalog_size).step_by(params.chain_length) {
            let end = (start + params.chain_length).min(params.catalog_size);
            for row in &mut attraction {
                row[start] = params.chain_starter_bias;
            }
            for i in start..end - 1 {
                boost[i][i + 1] = params.chain_boost;
                for row in &mut attraction {
                    row[i + 1] = params.chain_successor_bias;
                }
            }
        }
    }

    Ok(WorldSpec {
        catalog,
        clusters,
        attraction,
        decoy_coef: params.decoy_coef,
        longterm_coef: params.longterm_coef,
        boost,
        boost_trigger: params.boost_trigger,
        continue_prob: params.continue_prob,
        seed: params.seed,
    })
}

// ── Log generation ──────────────────────────────────────────────────────

/// Shape of a generated log batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub sessions: usize,
    pub max_pages: usize,
    pub page_size: usize,
    pub row_len: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Recorded as `behavior_policy_id`; the prefix before `-` doubles as
    /// the policy-era tag for sl/rl splits.
    pub policy_id: String,
    pub session_prefix: String,
    /// Leading entries of the user context logged as `user_portrait`; the
    /// rest land in `click_history`.
    pub portrait_dim: usize,
    pub start_timestamp: i64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sessions: 1000,
            max_pages: 1,
            page_size: 9,
            row_len: 3,
            gamma: 0.95,
            seed: 0,
            policy_id: "sl-softmax".into(),
            session_prefix: "sess".into(),
            portrait_dim: 4,
            start_timestamp: 1_600_000_000,
        }
    }
}

/// Summary statistics of a generated (or parsed) log batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStats {
    pub sessions: usize,
    pub users: usize,
    pub items: usize,
    pub items_per_session: f64,
    pub purchases_per_session: f64,
    pub rewards_per_session: f64,
}

impl std::fmt::Display for LogStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Users\t{}", self.users)?;
        writeln!(f, "Items\t{}", self.items)?;
        writeln!(f, "Sessions\t{}", self.sessions)?;
        writeln!(f, "Items per session\t{:.1}", self.items_per_session)?;
        writeln!(f, "Purchases per session\t{:.2}", self.purchases_per_session)?;
        write!(f, "Rewards per session\t{:.1}", self.rewards_per_session)
    }
}

/// Sample sessions from the world under a behavior policy, recording the
/// policy's step propensities exactly as used.
pub fn simulate_logs(
    world: &WorldSpec,
    behavior: &dyn Policy,
    gen: &GenConfig,
) -> Result<(Vec<LoggedRow>, LogStats), SynthError> {
    if gen.sessions == 0 {
        return Err(SynthError::Config("sessions must be >= 1".into()));
    }
    if gen.portrait_dim > world.user_dim() {
        return Err(SynthError::Config(format!(
            "portrait_dim {} exceeds user dimension {}",
            gen.portrait_dim,
            world.user_dim()
        )));
    }
    let config = EpisodeConfig {
        gamma: gen.gamma,
        page_size: gen.page_size,
        row_len: gen.row_len,
        max_pages: gen.max_pages,
        distinct_within_page: true,
    };
    config.validate()?;
    let sim = Simulator { config, catalog: &world.catalog, model: world, users: world };

    let mut rows = Vec::new();
    let mut purchases = 0usize;
    let mut rewards = 0.0;
    let mut items_shown = 0usize;
    let mut seen_users = std::collections::BTreeSet::new();

    for s in 0..gen.sessions {
        let episode_seed = stream_seed(gen.seed, "gen-session", s as u64);
        let trace = sim.run_episode(behavior, episode_seed)?;
        seen_users.insert(format!("{:?}", trace.user));
        let session_id = format!("{}{s:06}", gen.session_prefix);
        let (portrait, click) = trace.user.split_at(gen.portrait_dim);

        for (page_idx, page) in trace.pages.iter().enumerate() {
            let step_base = page_idx * gen.page_size;
            let probs: Vec<f64> = (0..gen.page_size)
                .map(|i| trace.steps[step_base + i].action_prob)
                .collect();
            let mut item_features = Vec::with_capacity(gen.page_size * world.catalog.feature_dim());
            for &id in &page.items {
                item_features.extend_from_slice(&world.catalog.get(id)?.features);
            }
            purchases += page.feedback.iter().filter(|&&f| f == 1).count();
            for (&f, &id) in page.feedback.iter().zip(&page.items) {
                rewards += f as f64 * world.catalog.utility(id)?;
            }
            items_shown += gen.page_size;

            rows.push(LoggedRow {
                timestamp: gen.start_timestamp + (s * gen.max_pages + page_idx) as i64,
                session_id: session_id.clone(),
                sequence_id: page_idx as u32 + 1,
                exposed_items: page.items.clone(),
                user_feedback: page.feedback.clone(),
                user_portrait: portrait.to_vec(),
                click_history: click.to_vec(),
                item_features,
                behavior_policy_id: gen.policy_id.clone(),
                behavior_action_probs: probs,
            });
        }
    }

    let n = gen.sessions as f64;
    let stats = LogStats {
        sessions: gen.sessions,
        users: seen_users.len(),
        items: world.catalog.len(),
        items_per_session: items_shown as f64 / n,
        purchases_per_session: purchases as f64 / n,
        rewards_per_session: rewards / n,
    };
    Ok((rows, stats))
}

impl crate::user_model::SlatePredictor for WorldSpec {
    fn predict_slate(
        &self,
        user: &[f64],
        prior_pages: &[PageOutcome],
        slate: &[ItemId],
        row_len: usize,
        _catalog: &Catalog,
    ) -> Result<crate::user_model::SlatePrediction, crate::user_model::UserModelError> {
        let probs = self.purchase_probs(user, prior_pages, slate)?;
        let class_distribution = pattern_distribution(&probs, row_len);
        let item_probs = crate::unlock::pattern_marginals(&class_distribution);
        Ok(crate::user_model::SlatePrediction {
            item_probs,
            class_distribution,
            continue_prob: self.continue_prob,
        })
    }
}

/// The idealized sequence model of a world: what the data-understanding
/// fit would recover with unlimited logs and full exposure coverage. Base
/// attractions become next-item biases and active boosts become
/// transition weights, so the decode-score diagnostics can be read off
/// the ground truth directly.
pub fn oracle_seq_model(world: &WorldSpec, horizon: usize) -> crate::understand::SeqModel {
    let n = world.catalog.len();
    let mut model = crate::understand::SeqModel::zeroed(
        world.user_dim(),
        world.catalog.ids().collect(),
        horizon,
    );
    let clusters = world.clusters.len() as f64;
    for j in 0..n {
        model.bias[j] =
            world.attraction.iter().map(|row| row[j]).sum::<f64>() / clusters;
    }
    for i in 0..n {
        for j in 0..n {
            model.transition[i][j] = world.longterm_coef * world.boost[i][j];
        }
    }
    model
}

// ── Exact enumeration oracles ───────────────────────────────────────────

const ORACLE_MAX_CATALOG: usize = 4;
const ORACLE_MAX_PAGE: usize = 2;
const ORACLE_MAX_PAGES: usize = 2;

fn check_enumerable(world: &WorldSpec, config: &EpisodeConfig) -> Result<(), SynthError> {
    if world.catalog.len() > ORACLE_MAX_CATALOG
        || config.page_size > ORACLE_MAX_PAGE
        || config.max_pages > ORACLE_MAX_PAGES
    {
        return Err(SynthError::TooLarge {
            got: format!(
                "catalog {}, page_size {}, max_pages {}",
                world.catalog.len(),
                config.page_size,
                config.max_pages
            ),
            bound: format!(
                "catalog <= {ORACLE_MAX_CATALOG}, page_size <= {ORACLE_MAX_PAGE}, max_pages <= {ORACLE_MAX_PAGES}"
            ),
        });
    }
    Ok(())
}

/// Every behavior trajectory of an enumerable world with its exact
/// probability: action draws, feedback draws, and continue/leave draws all
/// expanded. Per-step rewards follow the per-position convention
/// `feedback * utility`.
pub fn enumerate_trajectories(
    world: &WorldSpec,
    policy: &dyn Policy,
    config: &EpisodeConfig,
) -> Result<Vec<(f64, Trajectory)>, SynthError> {
    check_enumerable(world, config)?;
    config.validate()?;
    let mut out = Vec::new();
    let mut counter = 0usize;
    for cluster in &world.clusters {
        let weight = cluster.weight / world.clusters.iter().map(|c| c.weight).sum::<f64>();
        let ctx = DecisionContext::fresh(cluster.features.clone());
        expand(world, policy, config, ctx, weight, Vec::new(), &mut counter, &mut out)?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn expand(
    world: &WorldSpec,
    policy: &dyn Policy,
    config: &EpisodeConfig,
    ctx: DecisionContext,
    prob: f64,
    steps: Vec<TrajectoryStep>,
    counter: &mut usize,
    out: &mut Vec<(f64, Trajectory)>,
) -> Result<(), SynthError> {
    if prob == 0.0 {
        return Ok(());
    }
    let mask: Vec<ItemId> =
        world.catalog.ids().filter(|id| !ctx.chosen.contains(id)).collect();
    let probs = policy.action_probabilities(&ctx, &mask, &world.catalog)?;

    for (pick, &action) in mask.iter().enumerate() {
        let p_action = probs[pick];
        if p_action == 0.0 {
            continue;
        }
        let mut next_ctx = ctx.clone();
        next_ctx.chosen.push(action);
        let mut next_steps = steps.clone();
        next_steps.push(TrajectoryStep {
            ctx: ctx.clone(),
            action,
            behavior_prob: p_action,
            reward: 0.0,
            action_mask: mask.clone(),
        });
        let branch_prob = prob * p_action;

        if next_ctx.chosen.len() < config.page_size {
            expand(world, policy, config, next_ctx, branch_prob, next_steps, counter, out)?;
            continue;
        }

        // page complete: expand feedback outcomes
        let slate = std::mem::take(&mut next_ctx.chosen);
        let dist = world.feedback_distribution(
            &next_ctx.user,
            &next_ctx.completed_pages,
            &slate,
            config.row_len,
            &world.catalog,
        )?;
        let page_start = next_steps.len() - config.page_size;
        for (pattern, p_feedback) in dist {
            if p_feedback == 0.0 {
                continue;
            }
            let mut fb_ctx = next_ctx.clone();
            let mut fb_steps = next_steps.clone();
            for (offset, &f) in pattern.iter().enumerate() {
                fb_steps[page_start + offset].reward =
                    f as f64 * world.catalog.utility(slate[offset])?;
            }
            fb_ctx
                .completed_pages
                .push(PageOutcome { items: slate.clone(), feedback: pattern.clone() });
            let fb_prob = branch_prob * p_feedback;

            if fb_ctx.completed_pages.len() >= config.max_pages {
                *counter += 1;
                out.push((fb_prob, Trajectory { mdp_id: format!("enum{counter:05}"), steps: fb_steps }));
            } else {
                let p_continue = world.continue_prob;
                if p_continue < 1.0 {
                    *counter += 1;
                    out.push((
                        fb_prob * (1.0 - p_continue),
                        Trajectory { mdp_id: format!("enum{counter:05}"), steps: fb_steps.clone() },
                    ));
                }
                if p_continue > 0.0 {
                    expand(
                        world,
                        policy,
                        config,
                        fb_ctx,
                        fb_prob * p_continue,
                        fb_steps,
                        counter,
                        out,
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Exact expected discounted return of `policy` on an enumerable world.
pub fn oracle_value(
    world: &WorldSpec,
    policy: &dyn Policy,
    config: &EpisodeConfig,
) -> Result<f64, SynthError> {
    let trajectories = enumerate_trajectories(world, policy, config)?;
    let mut value = 0.0;
    for (prob, trajectory) in &trajectories {
        let mut g = 0.0;
        let mut d = 1.0;
        for step in &trajectory.steps {
            g += d * step.reward;
            d *= config.gamma;
        }
        value += prob * g;
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logged::{parse_log, write_log, SchemaConfig};
    use crate::policy::{evaluate_online, UniformPolicy};

    /// Hand-built enumerable world: 2 items, utilities 10 and 0, purchase
    /// probability forced to 1 (logit 50 saturates the sigmoid).
    pub(crate) fn certain_bandit_world() -> WorldSpec {
        let catalog = Catalog::new(vec![
            Item { id: ItemId(1), utility: 10.0, features: vec![1.0, 0.0] },
            Item { id: ItemId(2), utility: 0.0, features: vec![0.0, 1.0] },
        ])
        .unwrap();
        WorldSpec {
            catalog,
            clusters: vec![UserCluster { features: vec![1.0], weight: 1.0 }],
            attraction: vec![vec![50.0, 50.0]],
            decoy_coef: 0.0,
            longterm_coef: 0.0,
            boost: vec![vec![0.0; 2]; 2],
            boost_trigger: BoostTrigger::Exposure,
            continue_prob: 0.0,
            seed: 0,
        }
    }

    pub(crate) fn bandit_config() -> EpisodeConfig {
        EpisodeConfig { gamma: 1.0, page_size: 1, row_len: 1, max_pages: 1, distinct_within_page: true }
    }

    #[test]
    fn world_generation_is_deterministic() {
        let params = WorldGenParams { seed: 9, ..Default::default() };
        assert_eq!(generate_world(&params).unwrap(), generate_world(&params).unwrap());
        let other = generate_world(&WorldGenParams { seed: 10, ..params }).unwrap();
        assert_ne!(generate_world(&WorldGenParams { seed: 9, ..Default::default() }).unwrap(), other);
    }

    #[test]
    fn large_catalogs_supported() {
        let params = WorldGenParams { catalog_size: 283, ..Default::default() };
        let world = generate_world(&params).unwrap();
        assert_eq!(world.catalog.len(), 283);
    }

    #[test]
    fn zero_longterm_coefficient_ignores_history() {
        let world =
            generate_world(&WorldGenParams { longterm_coef: 0.0, ..Default::default() }).unwrap();
        let user = world.clusters[0].features.clone();
        let slate: Vec<ItemId> = world.catalog.ids().take(9).collect();
        // chains boost each item's successor: exposing the slate itself
        // earlier must shift page-two probabilities when chains are active
        let prior = vec![PageOutcome { items: slate.clone(), feedback: vec![0; 9] }];
        let fresh = world.purchase_probs(&user, &[], &slate).unwrap();
        let seen = world.purchase_probs(&user, &prior, &slate).unwrap();
        assert_eq!(fresh, seen);

        let longterm =
            generate_world(&WorldGenParams { longterm_coef: 1.0, ..Default::default() }).unwrap();
        let fresh = longterm.purchase_probs(&user, &[], &slate).unwrap();
        let seen = longterm.purchase_probs(&user, &prior, &slate).unwrap();
        assert_ne!(fresh, seen, "chains make later pages depend on earlier exposure");
    }

    #[test]
    fn logs_are_reproducible_and_parse_clean() {
        let world = generate_world(&WorldPreset::Myopic.params()).unwrap();
        let behavior = AttractionPolicy { world: &world, temperature: 1.0 };
        let gen = GenConfig { sessions: 50, ..Default::default() };

        let (rows_a, stats_a) = simulate_logs(&world, &behavior, &gen).unwrap();
        let (rows_b, stats_b) = simulate_logs(&world, &behavior, &gen).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_log(&rows_a, &mut buf_a).unwrap();
        write_log(&rows_b, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b, "same seed, byte-identical log");
        assert_eq!(stats_a, stats_b);

        // parses back with zero validity errors and round-trips
        let parsed = parse_log(buf_a.as_slice(), &SchemaConfig::default()).unwrap();
        assert_eq!(parsed, rows_a);
        assert_eq!(stats_a.sessions, 50);
        assert!(stats_a.purchases_per_session > 0.0);

        let table = format!("{stats_a}");
        assert!(table.contains("Purchases per session"));
        assert!(table.contains("Rewards per session"));
    }

    #[test]
    fn zero_utilities_mean_zero_rewards() {
        let mut params = WorldPreset::Myopic.params();
        params.utility_low = 0.0;
        params.utility_high = 0.0;
        let world = generate_world(&params).unwrap();
        let behavior = AttractionPolicy { world: &world, temperature: 1.0 };
        let gen = GenConfig { sessions: 10, ..Default::default() };
        let (_, stats) = simulate_logs(&world, &behavior, &gen).unwrap();
        assert_eq!(stats.rewards_per_session, 0.0);
    }

    #[test]
    fn seqslate_logs_cover_multiple_pages() {
        let world = generate_world(&WorldPreset::LongTerm.params()).unwrap();
        let behavior = AttractionPolicy { world: &world, temperature: 1.0 };
        let gen = GenConfig { sessions: 40, max_pages: 4, ..Default::default() };
        let (rows, stats) = simulate_logs(&world, &behavior, &gen).unwrap();
        assert!(stats.items_per_session > 9.0, "continue_prob 0.8 should yield multi-page sessions");
        let max_seq = rows.iter().map(|r| r.sequence_id).max().unwrap();
        assert!(max_seq > 1);
        assert!(parse_log_ok(&rows));
    }

    fn parse_log_ok(rows: &[LoggedRow]) -> bool {
        let mut buf = Vec::new();
        write_log(rows, &mut buf).unwrap();
        parse_log(buf.as_slice(), &SchemaConfig::default()).is_ok()
    }

    #[test]
    fn oracle_value_on_certain_bandit() {
        let world = certain_bandit_world();
        let config = bandit_config();
        // uniform policy: half the mass on utility 10, half on 0
        let value = oracle_value(&world, &UniformPolicy, &config).unwrap();
        assert!((value - 5.0).abs() < 1e-12);

        // trajectory probabilities sum to one
        let trajectories = enumerate_trajectories(&world, &UniformPolicy, &config).unwrap();
        let total: f64 = trajectories.iter().map(|(p, _)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_world_and_policy_reduce_to_one_trajectory() {
        let world = certain_bandit_world();
        let config = bandit_config();
        struct AlwaysFirst;
        impl Policy for AlwaysFirst {
            fn action_probabilities(
                &self,
                _ctx: &crate::features::DecisionContext,
                mask: &[ItemId],
                _catalog: &Catalog,
            ) -> Result<Vec<f64>, crate::policy::PolicyError> {
                let mut out = vec![0.0; mask.len()];
                out[0] = 1.0;
                Ok(out)
            }
        }
        let trajectories = enumerate_trajectories(&world, &AlwaysFirst, &config).unwrap();
        assert_eq!(trajectories.len(), 1, "a deterministic world and policy yield one trajectory");
        let (prob, traj) = &trajectories[0];
        assert!((prob - 1.0).abs() < 1e-12);
        let value = oracle_value(&world, &AlwaysFirst, &config).unwrap();
        assert_eq!(value, traj.steps.iter().map(|s| s.reward).sum::<f64>());
        assert_eq!(value, 10.0);
    }

    #[test]
    fn oracle_rejects_oversized_instances() {
        let world = generate_world(&WorldGenParams::default()).unwrap();
        let config = EpisodeConfig::slate();
        assert!(matches!(
            oracle_value(&world, &UniformPolicy, &config),
            Err(SynthError::TooLarge { .. })
        ));
    }

    #[test]
    fn oracle_matches_monte_carlo() {
        // stochastic two-page toy world
        let catalog = Catalog::new(vec![
            Item { id: ItemId(1), utility: 10.0, features: vec![1.0, 0.0] },
            Item { id: ItemId(2), utility: 5.0, features: vec![0.0, 1.0] },
            Item { id: ItemId(3), utility: 1.0, features: vec![1.0, 1.0] },
        ])
        .unwrap();
        let world = WorldSpec {
            catalog,
            clusters: vec![UserCluster { features: vec![1.0], weight: 1.0 }],
            attraction: vec![vec![0.5, -0.2, 0.1]],
            decoy_coef: 0.4,
            longterm_coef: 1.0,
            boost: vec![
                vec![0.0, 2.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.0],
            ],
            boost_trigger: BoostTrigger::Exposure,
            continue_prob: 0.7,
            seed: 0,
        };
        let config = EpisodeConfig {
            gamma: 0.9,
            page_size: 2,
            row_len: 1,
            max_pages: 2,
            distinct_within_page: true,
        };
        let exact = oracle_value(&world, &UniformPolicy, &config).unwrap();

        let sim = Simulator { config: config.clone(), catalog: &world.catalog, model: &world, users: &world };
        let episodes = 10_000;
        let mut returns = Vec::with_capacity(episodes);
        for i in 0..episodes {
            let seed = stream_seed(77, "oracle-mc", i as u64);
            let trace = sim.run_episode(&UniformPolicy, seed).unwrap();
            returns.push(trace.discounted_return(config.gamma));
        }
        let (mean, std) = crate::metrics::mean_std(&returns);
        let sigma = std / (episodes as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * sigma,
            "MC mean {mean} vs oracle {exact} (3 sigma {})",
            3.0 * sigma
        );

        // and the library-level evaluator agrees with the raw loop
        let eval = evaluate_online(&UniformPolicy, &sim, 2000, 12).unwrap();
        assert!((eval.mean - exact).abs() <= 3.0 * eval.std / (2000f64).sqrt() + 1e-9);
    }

    #[test]
    fn empirical_pattern_frequencies_match_world_distribution() {
        // chi-squared sanity check at 1e4 draws for a fixed user and slate
        let world = generate_world(&WorldPreset::Myopic.params()).unwrap();
        let user = world.clusters[0].features.clone();
        let slate: Vec<ItemId> = world.catalog.ids().take(9).collect();
        let dist = world.feedback_distribution(&user, &[], &slate, 3, &world.catalog).unwrap();

        let mut env = crate::env::SlateEnv::new(EpisodeConfig::slate(), &world.catalog, &world).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        let draws = 10_000;
        for seed in 0..draws {
            env.reset(&user, seed).unwrap();
            let mut last = None;
            for &item in &slate {
                last = Some(env.step(item).unwrap());
            }
            *counts.entry(last.unwrap().info.unwrap()).or_insert(0usize) += 1;
        }
        let mut chi2 = 0.0;
        for (pattern, p) in &dist {
            let expected = p * draws as f64;
            if expected < 1.0 {
                continue;
            }
            let observed = counts.get(pattern).copied().unwrap_or(0) as f64;
            chi2 += (observed - expected).powi(2) / expected;
        }
        // df = 21, p = 0.001 critical value 46.8
        assert!(chi2 < 46.8, "chi-squared statistic {chi2}");
    }

    #[test]
    fn enumeration_is_order_invariant() {
        let world = certain_bandit_world();
        let config = EpisodeConfig { page_size: 2, max_pages: 1, ..bandit_config() };
        let v1 = oracle_value(&world, &UniformPolicy, &config).unwrap();
        // same value recomputed from the trajectory list in reverse order
        let mut trajectories = enumerate_trajectories(&world, &UniformPolicy, &config).unwrap();
        trajectories.reverse();
        let v2: f64 = trajectories
            .iter()
            .map(|(p, t)| {
                p * t.steps.iter().enumerate().map(|(i, s)| config.gamma.powi(i as i32) * s.reward).sum::<f64>()
            })
            .sum();
        assert!((v1 - v2).abs() < 1e-12);
    }
}
