//! The slate MDP environment.
//!
//! Transitions are deterministic item concatenation; all stochasticity is
//! confined to the feedback draw when a page completes and to the
//! continue/leave draw between pages. The user response comes from a
//! plugged [`UserResponseModel`] (a fitted simulator or a synthetic
//! ground-truth world).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, ItemId};
use crate::features::{DecisionContext, PageOutcome};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error("user context has dimension {got}, model expects {expected}")]
    UserDimMismatch { got: usize, expected: usize },
    #[error("invalid action {action}: {reason}")]
    InvalidAction { action: ItemId, reason: String },
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("environment not reset")]
    NotReset,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("user model failure: {0}")]
    Model(#[from] ResponseModelError),
}

/// Failure raised by a plugged user response model.
#[derive(Debug, Error)]
pub enum ResponseModelError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("{0}")]
    Invalid(String),
}

/// Episode geometry: one page of 9 for the slate scenario, up to 4 pages
/// for the sequential-slate scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub gamma: f64,
    pub page_size: usize,
    /// Items per unlock row; `page_size` must be a multiple.
    pub row_len: usize,
    pub max_pages: usize,
    pub distinct_within_page: bool,
}

impl EpisodeConfig {
    /// Single-page production geometry (9 items, 3x3).
    pub fn slate() -> Self {
        Self { gamma: 0.95, page_size: 9, row_len: 3, max_pages: 1, distinct_within_page: true }
    }

    /// Sequential-slate production geometry (up to 4 pages of 9).
    pub fn seqslate() -> Self {
        Self { gamma: 0.95, page_size: 9, row_len: 3, max_pages: 4, distinct_within_page: true }
    }

    pub fn max_steps(&self) -> usize {
        self.page_size * self.max_pages
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EnvError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.page_size == 0 || self.max_pages == 0 {
            return Err(EnvError::Config("page_size and max_pages must be >= 1".into()));
        }
        if self.row_len == 0 || !self.page_size.is_multiple_of(self.row_len) {
            return Err(EnvError::Config(format!(
                "page_size {} must be a positive multiple of row_len {}",
                self.page_size, self.row_len
            )));
        }
        if self.page_size > 16 {
            return Err(EnvError::Config("page_size above 16 is unsupported".into()));
        }
        Ok(())
    }
}

/// Environment state: the decision context plus a finished flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlateState {
    pub ctx: DecisionContext,
    pub finished: bool,
}

impl SlateState {
    pub fn initial(user_context: Vec<f64>) -> Self {
        Self { ctx: DecisionContext::fresh(user_context), finished: false }
    }

    pub fn user_context(&self) -> &[f64] {
        &self.ctx.user
    }

    pub fn chosen_items(&self) -> &[ItemId] {
        &self.ctx.chosen
    }

    pub fn page_index(&self) -> usize {
        self.ctx.page_index()
    }

    pub fn step_index(&self, page_size: usize) -> usize {
        self.ctx.step_index(page_size)
    }

    pub fn history(&self) -> &[PageOutcome] {
        &self.ctx.completed_pages
    }
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_state: SlateState,
    /// 0 mid-page; the discounted page reward when a page completes.
    pub reward: f64,
    pub done: bool,
    /// Realized feedback vector when a page completes.
    pub info: Option<Vec<u8>>,
}

/// User response model plugged into the environment.
///
/// Implementations must be usable concurrently for read-only prediction.
pub trait UserResponseModel: Sync {
    /// Dimension of the user context vector the model expects.
    fn user_dim(&self) -> usize;

    /// Distribution over unlock-valid feedback patterns for a completed
    /// slate, conditioned on the user and the pages shown so far.
    fn feedback_distribution(
        &self,
        user: &[f64],
        prior_pages: &[PageOutcome],
        slate: &[ItemId],
        row_len: usize,
        catalog: &Catalog,
    ) -> Result<Vec<(Vec<u8>, f64)>, ResponseModelError>;

    /// Probability that the user requests another page after the given
    /// completed pages.
    fn continue_probability(
        &self,
        user: &[f64],
        completed_pages: &[PageOutcome],
        catalog: &Catalog,
    ) -> Result<f64, ResponseModelError>;
}

/// Expected page reward `sum_i gamma^i * p_i * r_i`.
pub fn page_reward(probabilities: &[f64], utilities: &[f64], gamma: f64) -> Result<f64, EnvError> {
    if probabilities.len() != utilities.len() {
        return Err(EnvError::LengthMismatch(format!(
            "{} probabilities vs {} utilities",
            probabilities.len(),
            utilities.len()
        )));
    }
    let mut total = 0.0;
    let mut discount = 1.0;
    for (&p, &r) in probabilities.iter().zip(utilities) {
        if !(0.0..=1.0).contains(&p) {
            return Err(EnvError::ProbabilityOutOfRange(p));
        }
        total += discount * p * r;
        discount *= gamma;
    }
    Ok(total)
}

/// Valid actions at `state`: the catalog minus items already placed on the
/// current page (when `distinct_within_page` is set).
pub fn action_mask(state: &SlateState, catalog: &Catalog, config: &EpisodeConfig) -> Vec<ItemId> {
    if !config.distinct_within_page {
        return catalog.ids().collect();
    }
    catalog.ids().filter(|id| !state.ctx.chosen.contains(id)).collect()
}

fn sample_pattern(dist: &[(Vec<u8>, f64)], rng: &mut ChaCha8Rng) -> Result<Vec<u8>, EnvError> {
    let total: f64 = dist.iter().map(|(_, p)| p).sum();
    if !(total > 0.0) {
        return Err(ResponseModelError::Invalid("feedback distribution has zero mass".into()).into());
    }
    let mut u = rng.gen::<f64>() * total;
    for (pattern, p) in dist {
        u -= p;
        if u <= 0.0 {
            return Ok(pattern.clone());
        }
    }
    Ok(dist.last().expect("nonempty distribution").0.clone())
}

/// Advance `state` by one action. Pure in the state (the input is not
/// mutated); stochastic draws come from `rng` in a fixed order: feedback
/// first, then the continue draw when another page is allowed.
pub fn step(
    state: &SlateState,
    action: ItemId,
    config: &EpisodeConfig,
    catalog: &Catalog,
    model: &dyn UserResponseModel,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult, EnvError> {
    if state.finished {
        return Err(EnvError::EpisodeFinished);
    }
    if !catalog.contains(action) {
        return Err(EnvError::InvalidAction { action, reason: "not in catalog".into() });
    }
    if config.distinct_within_page && state.ctx.chosen.contains(&action) {
        return Err(EnvError::InvalidAction { action, reason: "already placed on this page".into() });
    }

    let mut next = state.clone();
    next.ctx.chosen.push(action);

    if next.ctx.chosen.len() < config.page_size {
        return Ok(StepResult { next_state: next, reward: 0.0, done: false, info: None });
    }

    // page complete: draw feedback conditioned on the whole slate
    let slate = std::mem::take(&mut next.ctx.chosen);
    let dist = model.feedback_distribution(
        &next.ctx.user,
        &next.ctx.completed_pages,
        &slate,
        config.row_len,
        catalog,
    )?;
    let feedback = sample_pattern(&dist, rng)?;

    let utilities: Vec<f64> =
        slate.iter().map(|&id| catalog.utility(id)).collect::<Result<_, _>>()?;
    let realized: Vec<f64> = feedback.iter().map(|&f| f as f64).collect();
    let reward = page_reward(&realized, &utilities, config.gamma)?;

    next.ctx.completed_pages.push(PageOutcome { items: slate, feedback: feedback.clone() });

    let done = if next.ctx.completed_pages.len() >= config.max_pages {
        true
    } else {
        let p_continue =
            model.continue_probability(&next.ctx.user, &next.ctx.completed_pages, catalog)?;
        !(rng.gen::<f64>() < p_continue)
    };
    next.finished = done;

    Ok(StepResult { next_state: next, reward, done, info: Some(feedback) })
}

/// Step a batch of independent (state, action) pairs, each under its own
/// seed. Errors are reported per index without aborting the rest.
pub fn batch_step(
    states: &[SlateState],
    actions: &[ItemId],
    seeds: &[u64],
    config: &EpisodeConfig,
    catalog: &Catalog,
    model: &dyn UserResponseModel,
) -> Result<Vec<Result<StepResult, EnvError>>, EnvError> {
    if states.len() != actions.len() || states.len() != seeds.len() {
        return Err(EnvError::LengthMismatch(format!(
            "{} states, {} actions, {} seeds",
            states.len(),
            actions.len(),
            seeds.len()
        )));
    }
    Ok(states
        .iter()
        .zip(actions.iter().zip(seeds))
        .map(|(state, (&action, &seed))| {
            let mut rng = stream_rng(seed, "batch-step", 0);
            step(state, action, config, catalog, model, &mut rng)
        })
        .collect())
}

/// A stateful episode handle around the pure [`step`] function.
pub struct SlateEnv<'a> {
    pub config: EpisodeConfig,
    catalog: &'a Catalog,
    model: &'a dyn UserResponseModel,
    rng: ChaCha8Rng,
    state: Option<SlateState>,
}

impl<'a> SlateEnv<'a> {
    pub fn new(
        config: EpisodeConfig,
        catalog: &'a Catalog,
        model: &'a dyn UserResponseModel,
    ) -> Result<Self, EnvError> {
        config.validate()?;
        if config.distinct_within_page && catalog.len() < config.page_size {
            return Err(EnvError::Config(format!(
                "catalog of {} cannot fill a distinct page of {}",
                catalog.len(),
                config.page_size
            )));
        }
        Ok(Self { config, catalog, model, rng: stream_rng(0, "episode", 0), state: None })
    }

    pub fn catalog(&self) -> &Catalog {
        self.catalog
    }

    pub fn model(&self) -> &dyn UserResponseModel {
        self.model
    }

    /// Start a fresh episode. The seed fixes every subsequent stochastic
    /// draw of this episode.
    pub fn reset(&mut self, user_context: &[f64], seed: u64) -> Result<&SlateState, EnvError> {
        if user_context.len() != self.model.user_dim() {
            return Err(EnvError::UserDimMismatch {
                got: user_context.len(),
                expected: self.model.user_dim(),
            });
        }
        self.rng = stream_rng(seed, "episode", 0);
        self.state = Some(SlateState::initial(user_context.to_vec()));
        Ok(self.state.as_ref().expect("state just set"))
    }

    pub fn state(&self) -> Result<&SlateState, EnvError> {
        self.state.as_ref().ok_or(EnvError::NotReset)
    }

    pub fn action_mask(&self) -> Result<Vec<ItemId>, EnvError> {
        Ok(action_mask(self.state()?, self.catalog, &self.config))
    }

    pub fn step(&mut self, action: ItemId) -> Result<StepResult, EnvError> {
        let state = self.state.as_ref().ok_or(EnvError::NotReset)?;
        let result = step(state, action, &self.config, self.catalog, self.model, &mut self.rng)?;
        self.state = Some(result.next_state.clone());
        Ok(result)
    }
}
