//! Flat run configuration: loadable from TOML, overridable by flags,
//! echoed next to every run's outputs. Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use slate_rl::env::EpisodeConfig;
use slate_rl::logged::{SchemaConfig, SplitMode};
use slate_rl::policy::LearnerConfig;
use slate_rl::rng::stream_seed;
use slate_rl::synth::{GenConfig, WorldGenParams, WorldPreset};
use slate_rl::user_model::UserModelHyperParams;
use slate_rl::FeatureSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // world and log generation
    pub world_preset: String,
    pub scenario: String,
    pub sessions: usize,
    pub catalog_size: usize,
    pub user_clusters: usize,
    pub user_dim: usize,
    pub portrait_dim: usize,
    pub item_feature_dim: usize,
    pub behavior_temperature: f64,
    pub behavior_epsilon: f64,
    pub policy_era_tag: String,

    // episode geometry
    pub gamma: f64,
    pub page_size: usize,
    pub row_len: usize,

    // simulator fitting
    pub sim_epochs: usize,
    pub sim_learning_rate: f64,
    pub sim_hidden_width: usize,

    // policy learners
    pub learner_epochs: usize,
    pub learner_learning_rate: f64,
    pub learner_gamma: f64,
    pub bcq_threshold: f64,
    pub fqi_iterations: usize,
    pub pg_batches: usize,
    pub pg_batch_episodes: usize,
    pub pg_entropy_coef: f64,
    pub pg_grad_clip: f64,
    pub eval_episodes: usize,

    // data understanding
    pub understand_k: usize,
    pub beam_width: usize,
    pub hot_size: usize,
    pub understand_users: usize,
    pub understand_epochs: usize,
    pub understand_learning_rate: f64,
    pub understand_transition_decay: f64,

    // dataset splits
    pub split_mode: String,
    pub test_fraction: f64,
    pub time_cutoff: i64,

    // counterfactual policy evaluation
    pub swis_clip_lo: f64,
    pub swis_clip_hi: f64,
    pub cpe_rollouts: usize,
    pub cpe_max_trajectories: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_preset: "myopic".into(),
            scenario: "slate".into(),
            sessions: 600,
            catalog_size: 24,
            user_clusters: 3,
            user_dim: 6,
            portrait_dim: 4,
            item_feature_dim: 4,
            behavior_temperature: 1.0,
            behavior_epsilon: 0.2,
            policy_era_tag: "sl".into(),
            gamma: 0.95,
            page_size: 9,
            row_len: 3,
            sim_epochs: 60,
            sim_learning_rate: 1.0,
            sim_hidden_width: 0,
            learner_epochs: 30,
            learner_learning_rate: 1.0,
            learner_gamma: 1.0,
            bcq_threshold: 0.3,
            fqi_iterations: 20,
            pg_batches: 60,
            pg_batch_episodes: 16,
            pg_entropy_coef: 0.01,
            pg_grad_clip: 10.0,
            eval_episodes: 400,
            understand_k: 5,
            beam_width: 100,
            hot_size: 12,
            understand_users: 120,
            understand_epochs: 30,
            understand_learning_rate: 0.3,
            understand_transition_decay: 0.05,
            split_mode: "by-user".into(),
            test_fraction: 0.25,
            time_cutoff: 0,
            swis_clip_lo: 0.1,
            swis_clip_hi: 10.0,
            cpe_rollouts: 8,
            cpe_max_trajectories: 80,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.preset().is_err() {
            bail!("world_preset must be \"myopic\" or \"long-term\", got {:?}", self.world_preset);
        }
        match self.scenario.as_str() {
            "slate" | "seqslate" => {}
            other => bail!("scenario must be \"slate\" or \"seqslate\", got {other:?}"),
        }
        match self.split_mode.as_str() {
            "sl-rl" | "by-user" | "by-time" => {}
            other => bail!("split_mode must be sl-rl, by-user, or by-time, got {other:?}"),
        }
        if self.portrait_dim > self.user_dim {
            bail!("portrait_dim {} exceeds user_dim {}", self.portrait_dim, self.user_dim);
        }
        if self.page_size == 0 || self.row_len == 0 || !self.page_size.is_multiple_of(self.row_len) {
            bail!("page_size {} must be a positive multiple of row_len {}", self.page_size, self.row_len);
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<WorldPreset, String> {
        self.world_preset.parse()
    }

    pub fn max_pages(&self) -> usize {
        if self.scenario == "seqslate" {
            4
        } else {
            1
        }
    }

    pub fn world_params(&self) -> Result<WorldGenParams> {
        let preset = self.preset().map_err(anyhow::Error::msg)?;
        let mut params = preset.params();
        params.seed = stream_seed(self.seed, "world", 0);
        params.catalog_size = self.catalog_size;
        params.clusters = self.user_clusters;
        params.user_dim = self.user_dim;
        params.item_feature_dim = self.item_feature_dim;
        Ok(params)
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            gamma: self.gamma,
            page_size: self.page_size,
            row_len: self.row_len,
            max_pages: self.max_pages(),
            distinct_within_page: true,
        }
    }

    pub fn schema(&self) -> SchemaConfig {
        SchemaConfig {
            page_size: self.page_size,
            row_len: self.row_len,
            user_portrait_dim: Some(self.portrait_dim),
            click_history_dim: Some(self.user_dim - self.portrait_dim),
            item_features_dim: Some(self.page_size * self.item_feature_dim),
        }
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        let multi_page = self.max_pages() > 1;
        FeatureSpec {
            user_dim: self.user_dim,
            page_size: self.page_size,
            max_pages: self.max_pages(),
            item_feature_dim: self.item_feature_dim,
            include_exposure_history: multi_page,
            include_exposure_cross: multi_page && self.catalog_size <= 32,
            catalog_size: self.catalog_size,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            sessions: self.sessions,
            max_pages: self.max_pages(),
            page_size: self.page_size,
            row_len: self.row_len,
            gamma: self.gamma,
            seed: stream_seed(self.seed, "gen", 0),
            policy_id: format!("{}-softmax", self.policy_era_tag),
            session_prefix: format!("{}_", self.policy_era_tag),
            portrait_dim: self.portrait_dim,
            start_timestamp: 1_600_000_000,
        }
    }

    pub fn split(&self) -> SplitMode {
        match self.split_mode.as_str() {
            "sl-rl" => SplitMode::sl_rl(),
            "by-time" => SplitMode::ByTime { cutoff: self.time_cutoff },
            _ => SplitMode::ByUser {
                test_fraction: self.test_fraction,
                seed: stream_seed(self.seed, "split", 0),
            },
        }
    }

    pub fn sim_hyper_params(&self) -> UserModelHyperParams {
        UserModelHyperParams {
            learning_rate: self.sim_learning_rate,
            epochs: self.sim_epochs,
            seed: stream_seed(self.seed, "fit-sim", 0),
            hidden_width: if self.sim_hidden_width > 0 { Some(self.sim_hidden_width) } else { None },
            l2: 1e-6,
            fit_continue_head: self.max_pages() > 1,
        }
    }

    pub fn learner_config(&self, component: &str) -> LearnerConfig {
        LearnerConfig {
            learning_rate: self.learner_learning_rate,
            epochs: self.learner_epochs,
            gamma: self.learner_gamma,
            seed: stream_seed(self.seed, component, 0),
            bcq_threshold: self.bcq_threshold,
            fqi_iterations: self.fqi_iterations,
            pg_batch_episodes: self.pg_batch_episodes,
            entropy_coef: self.pg_entropy_coef,
            grad_clip: self.pg_grad_clip,
            l2: 1e-4,
        }
    }

    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }
}
