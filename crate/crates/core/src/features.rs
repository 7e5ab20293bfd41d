//! Shared featurization for user models, value functions, and policies.
//!
//! A single feature pipeline backs every function approximator in the
//! toolkit. A state block encodes the user context plus the dynamic page
//! context; an action block encodes the candidate item. The state block is
//! exactly what lands in the `state` field of training samples, so learners
//! can score any candidate as `state ++ action_features(candidate)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, Item, ItemId};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("user context has dimension {got}, feature spec expects {expected}")]
    UserDimMismatch { got: usize, expected: usize },
    #[error("position {position} outside page of size {page_size}")]
    PositionOutOfRange { position: usize, page_size: usize },
    #[error("page index {page_index} outside configured maximum {max_pages}")]
    PageOutOfRange { page_index: usize, max_pages: usize },
    #[error("invalid feature spec: {0}")]
    InvalidSpec(String),
}

/// Items shown on a completed page together with the realized feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageOutcome {
    pub items: Vec<ItemId>,
    pub feedback: Vec<u8>,
}

/// Everything a policy or model can condition on at one decision step:
/// the user context, the pages already completed, and the items already
/// placed on the current page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub user: Vec<f64>,
    pub completed_pages: Vec<PageOutcome>,
    pub chosen: Vec<ItemId>,
}

impl DecisionContext {
    pub fn fresh(user: Vec<f64>) -> Self {
        Self { user, completed_pages: Vec::new(), chosen: Vec::new() }
    }

    pub fn page_index(&self) -> usize {
        self.completed_pages.len()
    }

    /// Position of the next decision within the current page.
    pub fn position(&self) -> usize {
        self.chosen.len()
    }

    pub fn step_index(&self, page_size: usize) -> usize {
        self.page_index() * page_size + self.position()
    }

    /// Items exposed on all completed pages, in exposure order.
    pub fn exposed_prior(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.completed_pages.iter().flat_map(|p| p.items.iter().copied())
    }
}

/// Dimensions and switches of the feature layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub user_dim: usize,
    pub page_size: usize,
    pub max_pages: usize,
    pub item_feature_dim: usize,
    /// Include a per-item exposure count over completed pages. Lets linear
    /// models pick up cross-page effects; costs `catalog_size` slots.
    pub include_exposure_history: bool,
    /// Cross the exposure counts with the candidate item (a bilinear
    /// block of `catalog_size^2` slots, nonzero only in the candidate's
    /// row). Linear scorers need it to express "exposing item i earlier
    /// changes item j's value now"; affordable for small catalogs.
    pub include_exposure_cross: bool,
    pub catalog_size: usize,
}

impl FeatureSpec {
    pub fn state_dim(&self) -> usize {
        let history = if self.include_exposure_history { self.catalog_size } else { 0 };
        // user + page one-hot + position one-hot + [fill, mean utility, max utility]
        self.user_dim + self.max_pages + self.page_size + 3 + history
    }

    pub fn action_dim(&self) -> usize {
        self.item_feature_dim + 1
    }

    pub fn cross_dim(&self) -> usize {
        if self.include_exposure_cross {
            self.catalog_size * self.catalog_size
        } else {
            0
        }
    }

    pub fn pair_dim(&self) -> usize {
        self.state_dim() + self.action_dim() + self.cross_dim()
    }

    /// Offset of the exposure-count block inside the state vector.
    pub fn exposure_offset(&self) -> usize {
        self.user_dim + self.max_pages + self.page_size + 3
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.include_exposure_cross && !self.include_exposure_history {
            return Err(FeatureError::InvalidSpec(
                "exposure cross features require exposure history".into(),
            ));
        }
        Ok(())
    }
}

/// State block for one decision context. `position` is the page slot being
/// scored; policies pass `ctx.position()`, while slate-conditioned user
/// models score slot `i` against the co-displayed rest of the page.
pub fn state_features(
    ctx: &DecisionContext,
    position: usize,
    spec: &FeatureSpec,
    catalog: &Catalog,
) -> Result<Vec<f64>, FeatureError> {
    if ctx.user.len() != spec.user_dim {
        return Err(FeatureError::UserDimMismatch { got: ctx.user.len(), expected: spec.user_dim });
    }
    if position >= spec.page_size {
        return Err(FeatureError::PositionOutOfRange { position, page_size: spec.page_size });
    }
    let page_index = ctx.page_index();
    if page_index >= spec.max_pages {
        return Err(FeatureError::PageOutOfRange { page_index, max_pages: spec.max_pages });
    }

    let mut out = Vec::with_capacity(spec.state_dim());
    out.extend_from_slice(&ctx.user);

    let mut page_onehot = vec![0.0; spec.max_pages];
    page_onehot[page_index] = 1.0;
    out.extend_from_slice(&page_onehot);

    let mut pos_onehot = vec![0.0; spec.page_size];
    pos_onehot[position] = 1.0;
    out.extend_from_slice(&pos_onehot);

    // co-displayed-so-far aggregates: fill ratio, mean utility, max utility
    let mut mean_u = 0.0;
    let mut max_u = 0.0;
    if !ctx.chosen.is_empty() {
        let mut sum = 0.0;
        for &id in &ctx.chosen {
            let u = catalog.utility(id)?;
            sum += u;
            if u > max_u {
                max_u = u;
            }
        }
        mean_u = sum / ctx.chosen.len() as f64;
    }
    out.push(ctx.chosen.len() as f64 / spec.page_size as f64);
    out.push(mean_u);
    out.push(max_u);

    if spec.include_exposure_history {
        let mut counts = vec![0.0; spec.catalog_size];
        for id in ctx.exposed_prior() {
            counts[catalog.index_of(id)?] += 1.0;
        }
        out.extend_from_slice(&counts);
    }

    debug_assert_eq!(out.len(), spec.state_dim());
    Ok(out)
}

/// Action block for a candidate item: raw features plus the utility.
pub fn action_features(item: &Item) -> Vec<f64> {
    let mut out = Vec::with_capacity(item.features.len() + 1);
    out.extend_from_slice(&item.features);
    out.push(item.utility);
    out
}

/// Assemble the full pair vector from a precomputed state block:
/// `state ++ action block ++ optional exposure-cross block`.
pub fn pair_features_from_state(
    state: &[f64],
    item: &Item,
    item_index: usize,
    spec: &FeatureSpec,
) -> Result<Vec<f64>, FeatureError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.pair_dim());
    out.extend_from_slice(state);
    out.extend(action_features(item));
    if spec.include_exposure_cross {
        let counts = &state[spec.exposure_offset()..spec.exposure_offset() + spec.catalog_size];
        let mut cross = vec![0.0; spec.catalog_size * spec.catalog_size];
        cross[item_index * spec.catalog_size..(item_index + 1) * spec.catalog_size]
            .copy_from_slice(counts);
        out.extend(cross);
    }
    debug_assert_eq!(out.len(), spec.pair_dim());
    Ok(out)
}

/// Per-dimension feature scaling (`1 / max abs value` seen in training
/// data, 1 for never-observed dimensions). Dividing out the scale keeps
/// any one raw dimension (a large utility, say) from dominating linear
/// learners, while zeros stay zero so sparse scoring still works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub inv: Vec<f64>,
}

impl FeatureScaling {
    pub fn identity(dim: usize) -> Self {
        Self { inv: vec![1.0; dim] }
    }

    /// Fit from observed pair vectors by the max-abs rule.
    pub fn fit_max_abs(pairs: &[Vec<f64>], dim: usize) -> Self {
        let mut max_abs = vec![0.0f64; dim];
        for pair in pairs {
            for (m, v) in max_abs.iter_mut().zip(pair) {
                if v.abs() > *m {
                    *m = v.abs();
                }
            }
        }
        Self { inv: max_abs.iter().map(|&m| if m > 1e-9 { 1.0 / m } else { 1.0 }).collect() }
    }
}

/// Dot of a weight vector with the scaled (virtual) pair features,
/// computed without materializing the cross block.
pub fn pair_score(
    weights: &[f64],
    scaling: &FeatureScaling,
    state: &[f64],
    item: &Item,
    item_index: usize,
    spec: &FeatureSpec,
) -> f64 {
    let inv = &scaling.inv;
    let mut s = 0.0;
    let mut slot = 0;
    for x in state.iter().chain(&action_features(item)) {
        s += weights[slot] * x * inv[slot];
        slot += 1;
    }
    if spec.include_exposure_cross {
        let base = spec.state_dim() + spec.action_dim() + item_index * spec.catalog_size;
        let counts = &state[spec.exposure_offset()..spec.exposure_offset() + spec.catalog_size];
        for (i, &c) in counts.iter().enumerate() {
            if c != 0.0 {
                s += weights[base + i] * c * inv[base + i];
            }
        }
    }
    s
}

/// Accumulate `coef * scaled pair_features` into `acc` without
/// materializing the cross block.
pub fn add_pair_features(
    acc: &mut [f64],
    scaling: &FeatureScaling,
    state: &[f64],
    item: &Item,
    item_index: usize,
    spec: &FeatureSpec,
    coef: f64,
) {
    let inv = &scaling.inv;
    let mut slot = 0;
    for x in state.iter().chain(&action_features(item)) {
        acc[slot] += coef * x * inv[slot];
        slot += 1;
    }
    if spec.include_exposure_cross {
        let base = spec.state_dim() + spec.action_dim() + item_index * spec.catalog_size;
        let counts = &state[spec.exposure_offset()..spec.exposure_offset() + spec.catalog_size];
        for (i, &c) in counts.iter().enumerate() {
            if c != 0.0 {
                acc[base + i] += coef * c * inv[base + i];
            }
        }
    }
}

/// Squared norm of the scaled pair features.
pub fn pair_norm_sq(
    scaling: &FeatureScaling,
    state: &[f64],
    item: &Item,
    item_index: usize,
    spec: &FeatureSpec,
) -> f64 {
    let inv = &scaling.inv;
    let mut s = 0.0;
    let mut slot = 0;
    for x in state.iter().chain(&action_features(item)) {
        let v = x * inv[slot];
        s += v * v;
        slot += 1;
    }
    if spec.include_exposure_cross {
        let base = spec.state_dim() + spec.action_dim() + item_index * spec.catalog_size;
        let counts = &state[spec.exposure_offset()..spec.exposure_offset() + spec.catalog_size];
        for (i, &c) in counts.iter().enumerate() {
            let v = c * inv[base + i];
            s += v * v;
        }
    }
    s
}

/// Full `(state, action)` feature vector for scoring `candidate` at page
/// slot `position` of the decision point described by `ctx`.
pub fn featurize(
    ctx: &DecisionContext,
    candidate: ItemId,
    position: usize,
    spec: &FeatureSpec,
    catalog: &Catalog,
) -> Result<Vec<f64>, FeatureError> {
    let state = state_features(ctx, position, spec, catalog)?;
    pair_features_from_state(&state, catalog.get(candidate)?, catalog.index_of(candidate)?, spec)
}

/// Maps a state block to the observation stored with training samples.
pub trait ObservationEncoder {
    fn encode(&self, state: &[f64]) -> Vec<f64>;
}

/// Default encoder: the observation is the raw state block.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl ObservationEncoder for IdentityEncoder {
    fn encode(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }
}
