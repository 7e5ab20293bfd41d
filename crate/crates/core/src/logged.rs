//! Logged interaction data: parsing, validation, sessionization, padding,
//! MDP-sample transformation, and dataset splits.
//!
//! The raw log is UTF-8 text, one exposure event per line, tab-separated
//! fields with space-delimited lists inside a field, and a mandatory header
//! line. Sessions are padded to a fixed page count with zero-feedback pages
//! so user exit needs no explicit transition modeling; the padding sampler's
//! probabilities are recorded so propensities stay well-defined on padded
//! steps.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, ItemId};
use crate::features::{
    action_features, state_features, DecisionContext, FeatureError, FeatureSpec,
    ObservationEncoder, PageOutcome,
};
use crate::rng::{stream_rng_str, stream_seed_str};
use crate::unlock::{validate_pattern, FeedbackError};

pub use crate::unlock::validate_feedback;

/// Column order of the raw log file.
pub const LOG_COLUMNS: [&str; 10] = [
    "timestamp",
    "session_id",
    "sequence_id",
    "exposed_items",
    "user_feedback",
    "user_portrait",
    "click_history",
    "item_features",
    "behavior_policy_id",
    "behavior_action_probs",
];

#[derive(Debug, Error)]
pub enum LoggedDataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: invalid feedback pattern: {source}")]
    Validity {
        line: usize,
        #[source]
        source: FeedbackError,
    },
    #[error("session {session_id}: integrity error: {message}")]
    Integrity { session_id: String, message: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate split: {train} train vs {test} test sessions")]
    DegenerateSplit { train: usize, test: usize },
}

/// Expected shape of a raw log. `None` dimensions are inferred from the
/// first row and then enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub page_size: usize,
    pub row_len: usize,
    pub user_portrait_dim: Option<usize>,
    pub click_history_dim: Option<usize>,
    pub item_features_dim: Option<usize>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            page_size: 9,
            row_len: 3,
            user_portrait_dim: None,
            click_history_dim: None,
            item_features_dim: None,
        }
    }
}

/// One exposure event: a page of items, the user's feedback, and the
/// behavior policy's recorded action propensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRow {
    pub timestamp: i64,
    pub session_id: String,
    pub sequence_id: u32,
    pub exposed_items: Vec<ItemId>,
    pub user_feedback: Vec<u8>,
    pub user_portrait: Vec<f64>,
    pub click_history: Vec<f64>,
    pub item_features: Vec<f64>,
    pub behavior_policy_id: String,
    pub behavior_action_probs: Vec<f64>,
}

/// One page within a session record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPage {
    pub exposed_items: Vec<ItemId>,
    pub user_feedback: Vec<u8>,
    pub behavior_action_probs: Vec<f64>,
    pub padded: bool,
}

/// A grouped, padded user session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub start_timestamp: i64,
    pub behavior_policy_id: String,
    pub user_portrait: Vec<f64>,
    pub click_history: Vec<f64>,
    pub pages: Vec<SessionPage>,
    pub padded_page_count: usize,
}

impl SessionRecord {
    /// User context vector: portrait followed by click history.
    pub fn user_context(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.user_portrait.len() + self.click_history.len());
        v.extend_from_slice(&self.user_portrait);
        v.extend_from_slice(&self.click_history);
        v
    }

    pub fn real_page_count(&self) -> usize {
        self.pages.len() - self.padded_page_count
    }
}

/// One consecutive state/action training tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSample {
    pub mdp_id: String,
    pub sequence_id: u32,
    pub state: Vec<f64>,
    pub observation: Vec<f64>,
    pub action: ItemId,
    pub action_features: Vec<f64>,
    pub action_probability: f64,
    pub action_mask: Vec<ItemId>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_observation: Vec<f64>,
    pub next_action: Option<ItemId>,
    pub next_action_probability: Option<f64>,
    pub next_action_mask: Vec<ItemId>,
    pub terminal: u8,
}

// ── Parsing ─────────────────────────────────────────────────────────────

fn parse_list<T: std::str::FromStr>(
    field: &str,
    name: &str,
    line: usize,
) -> Result<Vec<T>, LoggedDataError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(' ')
        .map(|tok| {
            tok.parse::<T>().map_err(|_| LoggedDataError::Parse {
                line,
                message: format!("non-numeric value {tok:?} in {name}"),
            })
        })
        .collect()
}

fn check_dim(
    observed: usize,
    expected: &mut Option<usize>,
    name: &str,
    line: usize,
) -> Result<(), LoggedDataError> {
    match *expected {
        Some(dim) if dim != observed => Err(LoggedDataError::Schema {
            line,
            message: format!("{name} has {observed} entries, expected {dim}"),
        }),
        Some(_) => Ok(()),
        None => {
            *expected = Some(observed);
            Ok(())
        }
    }
}

/// Parse a raw log from a character stream. Row order is preserved and
/// every returned row satisfies the schema and the unlock rule.
pub fn parse_log<R: BufRead>(
    reader: R,
    schema: &SchemaConfig,
) -> Result<Vec<LoggedRow>, LoggedDataError> {
    if schema.row_len == 0 || schema.page_size % schema.row_len != 0 {
        return Err(LoggedDataError::Config(format!(
            "page_size {} must be a positive multiple of row_len {}",
            schema.page_size, schema.row_len
        )));
    }
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| LoggedDataError::Schema { line: 1, message: "missing header line".into() })??;
    let expected_header = LOG_COLUMNS.join("\t");
    if header != expected_header {
        return Err(LoggedDataError::Schema {
            line: 1,
            message: format!("header {header:?} does not match {expected_header:?}"),
        });
    }

    let mut portrait_dim = schema.user_portrait_dim;
    let mut click_dim = schema.click_history_dim;
    let mut item_feat_dim = schema.item_features_dim;

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != LOG_COLUMNS.len() {
            return Err(LoggedDataError::Parse {
                line: line_no,
                message: format!("expected {} fields, got {}", LOG_COLUMNS.len(), fields.len()),
            });
        }

        let timestamp: i64 = fields[0].parse().map_err(|_| LoggedDataError::Parse {
            line: line_no,
            message: format!("non-numeric timestamp {:?}", fields[0]),
        })?;
        let session_id = fields[1].to_string();
        let sequence_id: u32 = fields[2].parse().map_err(|_| LoggedDataError::Parse {
            line: line_no,
            message: format!("non-numeric sequence_id {:?}", fields[2]),
        })?;
        if sequence_id == 0 {
            return Err(LoggedDataError::Schema {
                line: line_no,
                message: "sequence_id must be >= 1".into(),
            });
        }

        let exposed_raw: Vec<u32> = parse_list(fields[3], "exposed_items", line_no)?;
        if exposed_raw.len() != schema.page_size {
            return Err(LoggedDataError::Schema {
                line: line_no,
                message: format!(
                    "exposed_items has {} entries, expected {}",
                    exposed_raw.len(),
                    schema.page_size
                ),
            });
        }
        let exposed_items: Vec<ItemId> = exposed_raw.iter().copied().map(ItemId).collect();
        for (a, id) in exposed_items.iter().enumerate() {
            if exposed_items[..a].contains(id) {
                return Err(LoggedDataError::Schema {
                    line: line_no,
                    message: format!("duplicate exposed item {id}"),
                });
            }
        }

        let user_feedback: Vec<u8> = parse_list(fields[4], "user_feedback", line_no)?;
        if user_feedback.len() != schema.page_size {
            return Err(LoggedDataError::Schema {
                line: line_no,
                message: format!(
                    "user_feedback has {} entries, expected {}",
                    user_feedback.len(),
                    schema.page_size
                ),
            });
        }
        validate_pattern(&user_feedback, schema.row_len)
            .map_err(|source| LoggedDataError::Validity { line: line_no, source })?;

        let user_portrait: Vec<f64> = parse_list(fields[5], "user_portrait", line_no)?;
        check_dim(user_portrait.len(), &mut portrait_dim, "user_portrait", line_no)?;
        let click_history: Vec<f64> = parse_list(fields[6], "click_history", line_no)?;
        check_dim(click_history.len(), &mut click_dim, "click_history", line_no)?;
        let item_features: Vec<f64> = parse_list(fields[7], "item_features", line_no)?;
        check_dim(item_features.len(), &mut item_feat_dim, "item_features", line_no)?;

        let behavior_policy_id = fields[8].to_string();
        let behavior_action_probs: Vec<f64> =
            parse_list(fields[9], "behavior_action_probs", line_no)?;
        if behavior_action_probs.len() != schema.page_size {
            return Err(LoggedDataError::Schema {
                line: line_no,
                message: format!(
                    "behavior_action_probs has {} entries, expected {}",
                    behavior_action_probs.len(),
                    schema.page_size
                ),
            });
        }
        for &p in &behavior_action_probs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(LoggedDataError::Schema {
                    line: line_no,
                    message: format!("behavior action probability {p} outside (0, 1]"),
                });
            }
        }

        rows.push(LoggedRow {
            timestamp,
            session_id,
            sequence_id,
            exposed_items,
            user_feedback,
            user_portrait,
            click_history,
            item_features,
            behavior_policy_id,
            behavior_action_probs,
        });
    }
    Ok(rows)
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Write rows in the raw log format, header included.
pub fn write_log<W: Write>(rows: &[LoggedRow], mut writer: W) -> Result<(), LoggedDataError> {
    writeln!(writer, "{}", LOG_COLUMNS.join("\t"))?;
    for row in rows {
        let items = row.exposed_items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        let feedback =
            row.user_feedback.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            row.timestamp,
            row.session_id,
            row.sequence_id,
            items,
            feedback,
            join_f64(&row.user_portrait),
            join_f64(&row.click_history),
            join_f64(&row.item_features),
            row.behavior_policy_id,
            join_f64(&row.behavior_action_probs),
        )?;
    }
    Ok(())
}

// ── Sessionization and padding ──────────────────────────────────────────

/// Group rows into sessions and pad each to `max_pages` pages. Padded pages
/// carry a uniformly drawn distinct slate, all-zero feedback, and the
/// padding sampler's own step probabilities. Padding draws are derived from
/// `(global_seed, session_id)` so they do not depend on dataset order.
pub fn sessionize_and_pad(
    rows: &[LoggedRow],
    max_pages: usize,
    catalog: &Catalog,
    global_seed: u64,
) -> Result<Vec<SessionRecord>, LoggedDataError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&LoggedRow>> = BTreeMap::new();
    for row in rows {
        let entry = groups.entry(&row.session_id).or_default();
        if entry.is_empty() {
            order.push(&row.session_id);
        }
        entry.push(row);
    }

    let mut sessions = Vec::with_capacity(order.len());
    for session_id in order {
        let mut group = groups.remove(session_id).expect("grouped above");
        group.sort_by_key(|r| r.sequence_id);
        let page_size = group[0].exposed_items.len();

        for (i, row) in group.iter().enumerate() {
            if row.sequence_id != (i + 1) as u32 {
                return Err(LoggedDataError::Integrity {
                    session_id: session_id.to_string(),
                    message: format!(
                        "sequence_id gap: expected {}, found {}",
                        i + 1,
                        row.sequence_id
                    ),
                });
            }
            if row.user_portrait != group[0].user_portrait
                || row.click_history != group[0].click_history
            {
                return Err(LoggedDataError::Integrity {
                    session_id: session_id.to_string(),
                    message: "conflicting user features within session".into(),
                });
            }
        }
        if group.len() > max_pages {
            return Err(LoggedDataError::Integrity {
                session_id: session_id.to_string(),
                message: format!("{} pages exceed max_pages {}", group.len(), max_pages),
            });
        }
        if catalog.len() < page_size {
            return Err(LoggedDataError::Config(format!(
                "catalog of {} cannot fill a page of {}",
                catalog.len(),
                page_size
            )));
        }

        let mut pages: Vec<SessionPage> = group
            .iter()
            .map(|row| SessionPage {
                exposed_items: row.exposed_items.clone(),
                user_feedback: row.user_feedback.clone(),
                behavior_action_probs: row.behavior_action_probs.clone(),
                padded: false,
            })
            .collect();

        let padded_page_count = max_pages - pages.len();
        let mut rng = stream_rng_str(global_seed, "session-pad", session_id);
        for _ in 0..padded_page_count {
            let mut remaining: Vec<ItemId> = catalog.ids().collect();
            let mut slate = Vec::with_capacity(page_size);
            let mut probs = Vec::with_capacity(page_size);
            for _ in 0..page_size {
                let pick = rng.gen_range(0..remaining.len());
                probs.push(1.0 / remaining.len() as f64);
                slate.push(remaining.swap_remove(pick));
            }
            pages.push(SessionPage {
                exposed_items: slate,
                user_feedback: vec![0; page_size],
                behavior_action_probs: probs,
                padded: true,
            });
        }

        sessions.push(SessionRecord {
            session_id: session_id.to_string(),
            start_timestamp: group.iter().map(|r| r.timestamp).min().expect("nonempty session"),
            behavior_policy_id: group[0].behavior_policy_id.clone(),
            user_portrait: group[0].user_portrait.clone(),
            click_history: group[0].click_history.clone(),
            pages,
            padded_page_count,
        });
    }
    Ok(sessions)
}

// ── MDP transformation ──────────────────────────────────────────────────

/// Options for [`to_mdp_samples`]. `gamma` is validated and recorded with
/// run outputs; per-step rewards themselves are stored undiscounted and
/// estimators apply the discount.
#[derive(Debug, Clone)]
pub struct TransformOptions {
    pub gamma: f64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self { gamma: 0.95 }
    }
}

fn decision_context(session: &SessionRecord, page: usize, position: usize) -> DecisionContext {
    DecisionContext {
        user: session.user_context(),
        completed_pages: session.pages[..page]
            .iter()
            .map(|p| PageOutcome { items: p.exposed_items.clone(), feedback: p.user_feedback.clone() })
            .collect(),
        chosen: session.pages[page].exposed_items[..position].to_vec(),
    }
}

fn mask_for(chosen: &[ItemId], catalog: &Catalog) -> Vec<ItemId> {
    catalog.ids().filter(|id| !chosen.contains(id)).collect()
}

/// Expand one padded session into per-decision MDP samples: one sample per
/// item slot, reward `feedback_i * utility_i`, terminal on the final step.
pub fn to_mdp_samples(
    session: &SessionRecord,
    options: &TransformOptions,
    encoder: &dyn ObservationEncoder,
    spec: &FeatureSpec,
    catalog: &Catalog,
) -> Result<Vec<MdpSample>, LoggedDataError> {
    if !(options.gamma > 0.0 && options.gamma <= 1.0) {
        return Err(LoggedDataError::Config(format!("gamma {} outside (0, 1]", options.gamma)));
    }
    if session.pages.is_empty() {
        return Err(LoggedDataError::Integrity {
            session_id: session.session_id.clone(),
            message: "session has no pages".into(),
        });
    }
    let page_size = session.pages[0].exposed_items.len();
    if spec.page_size != page_size || spec.max_pages < session.pages.len() {
        return Err(LoggedDataError::Config(format!(
            "feature spec ({} slots, {} pages) does not cover session ({} slots, {} pages)",
            spec.page_size,
            spec.max_pages,
            page_size,
            session.pages.len()
        )));
    }

    let total_steps = session.pages.len() * page_size;
    let mut samples = Vec::with_capacity(total_steps);
    for (page_idx, page) in session.pages.iter().enumerate() {
        for position in 0..page_size {
            let ctx = decision_context(session, page_idx, position);
            let state = state_features(&ctx, ctx.position(), spec, catalog)?;
            let observation = encoder.encode(&state);
            let action = page.exposed_items[position];
            let item = catalog.get(action)?;
            let step = (page_idx * page_size + position) as u32;
            let terminal = step as usize + 1 == total_steps;

            let (next_state, next_observation, next_action, next_prob, next_mask) = if terminal {
                (vec![0.0; state.len()], vec![0.0; observation.len()], None, None, Vec::new())
            } else {
                let (next_page, next_pos) = if position + 1 < page_size {
                    (page_idx, position + 1)
                } else {
                    (page_idx + 1, 0)
                };
                let next_ctx = decision_context(session, next_page, next_pos);
                let next_state = state_features(&next_ctx, next_ctx.position(), spec, catalog)?;
                let next_observation = encoder.encode(&next_state);
                let next_action = session.pages[next_page].exposed_items[next_pos];
                let next_prob = session.pages[next_page].behavior_action_probs[next_pos];
                let next_mask = mask_for(&next_ctx.chosen, catalog);
                (next_state, next_observation, Some(next_action), Some(next_prob), next_mask)
            };

            samples.push(MdpSample {
                mdp_id: session.session_id.clone(),
                sequence_id: step,
                state,
                observation,
                action,
                action_features: action_features(item),
                action_probability: page.behavior_action_probs[position],
                action_mask: mask_for(&ctx.chosen, catalog),
                reward: page.user_feedback[position] as f64 * item.utility,
                next_state,
                next_observation,
                next_action,
                next_action_probability: next_prob,
                next_action_mask: next_mask,
                terminal: u8::from(terminal),
            });
        }
    }
    Ok(samples)
}

/// Serialize samples as line-delimited records.
pub fn write_mdp_samples<W: Write>(
    samples: &[MdpSample],
    mut writer: W,
) -> Result<(), LoggedDataError> {
    for sample in samples {
        let line = serde_json::to_string(sample)
            .map_err(|e| LoggedDataError::Config(format!("serialization failure: {e}")))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn read_mdp_samples<R: BufRead>(reader: R) -> Result<Vec<MdpSample>, LoggedDataError> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line).map_err(|e| LoggedDataError::Parse {
            line: i + 1,
            message: format!("bad sample record: {e}"),
        })?);
    }
    Ok(samples)
}

// ── Dataset splits ──────────────────────────────────────────────────────

/// How to divide sessions into train and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitMode {
    /// Split on the behavior-policy era tag (the policy id up to the first
    /// `-`): `train_tag` sessions train, `test_tag` sessions test.
    SlRl { train_tag: String, test_tag: String },
    /// Deterministic per-session hash split.
    ByUser { test_fraction: f64, seed: u64 },
    /// Sessions starting strictly before `cutoff` train, the rest test.
    ByTime { cutoff: i64 },
}

impl SplitMode {
    pub fn sl_rl() -> Self {
        SplitMode::SlRl { train_tag: "sl".into(), test_tag: "rl".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SessionRecord>,
    pub test: Vec<SessionRecord>,
}

fn era_of(policy_id: &str) -> &str {
    policy_id.split('-').next().unwrap_or(policy_id)
}

/// Split sessions into disjoint train/test sets.
pub fn split_dataset(
    sessions: Vec<SessionRecord>,
    mode: &SplitMode,
) -> Result<DatasetSplit, LoggedDataError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    match mode {
        SplitMode::SlRl { train_tag, test_tag } => {
            for session in sessions {
                let era = era_of(&session.behavior_policy_id);
                if era == train_tag {
                    train.push(session);
                } else if era == test_tag {
                    test.push(session);
                } else {
                    return Err(LoggedDataError::Config(format!(
                        "session {} has policy era {era:?}, expected {train_tag:?} or {test_tag:?}",
                        session.session_id
                    )));
                }
            }
        }
        SplitMode::ByUser { test_fraction, seed } => {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(LoggedDataError::Config(format!(
                    "test_fraction {test_fraction} outside (0, 1)"
                )));
            }
            for session in sessions {
                let h = stream_seed_str(*seed, "split-by-user", &session.session_id);
                let u = h as f64 / u64::MAX as f64;
                if u < *test_fraction {
                    test.push(session);
                } else {
                    train.push(session);
                }
            }
        }
        SplitMode::ByTime { cutoff } => {
            for session in sessions {
                if session.start_timestamp < *cutoff {
                    train.push(session);
                } else {
                    test.push(session);
                }
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(LoggedDataError::DegenerateSplit { train: train.len(), test: test.len() });
    }
    Ok(DatasetSplit { train, test })
}
