//! Implementations of the pipeline subcommands. Every task reads and
//! writes only documented file formats, derives all randomness from the
//! run seed, and emits the fully-resolved config next to its outputs.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use slate_rl::catalog::Catalog;
use slate_rl::cpe;
use slate_rl::env::UserResponseModel;
use slate_rl::features::IdentityEncoder;
use slate_rl::logged::{self, LoggedRow, MdpSample, SessionRecord};
use slate_rl::policy::{
    batch_q_learn, bc_fit, evaluate_online, load_policy, reinforce_online, save_policy,
    MixturePolicy, PolicySpec, Simulator, UniformPolicy,
};
use slate_rl::rng::stream_seed;
use slate_rl::synth::{generate_world, simulate_logs, AttractionPolicy, WorldSpec};
use slate_rl::understand::{fit_seq_model, understanding_report, SeqHyperParams};
use slate_rl::user_model::{
    evaluate_user_model, fit_user_model, load_user_model, save_user_model, HiddenStateEncoder,
    UserModelParams, ValueModel,
};

use crate::config::RunConfig;
use crate::io::{append_line, write_atomic};
use crate::server::{self, EnvService};

pub struct TaskContext {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

impl TaskContext {
    pub fn new(config: RunConfig, out_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let ctx = Self { config, out_dir };
        ctx.emit_resolved_config()?;
        Ok(ctx)
    }

    fn emit_resolved_config(&self) -> Result<()> {
        let text = self.config.resolved_toml()?;
        write_atomic(&self.out_dir.join("config.resolved.toml"), text.as_bytes())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn world(&self) -> Result<WorldSpec> {
        generate_world(&self.config.world_params()?).context("generating world")
    }

    fn read_rows(&self, input: &Path) -> Result<Vec<LoggedRow>> {
        let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
        logged::parse_log(BufReader::new(file), &self.config.schema())
            .with_context(|| format!("parsing {}", input.display()))
    }

    fn sessions_from(&self, input: &Path, catalog: &Catalog) -> Result<Vec<SessionRecord>> {
        let rows = self.read_rows(input)?;
        logged::sessionize_and_pad(
            &rows,
            self.config.max_pages(),
            catalog,
            stream_seed(self.config.seed, "session-padding", 0),
        )
        .context("sessionizing")
    }

    fn read_samples(&self, input: &Path) -> Result<Vec<MdpSample>> {
        let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
        logged::read_mdp_samples(BufReader::new(file)).context("reading samples")
    }

    fn load_model(&self, path: &Path) -> Result<UserModelParams> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        load_user_model(BufReader::new(file)).context("loading user model checkpoint")
    }

    fn load_policy_spec(&self, path: &Path) -> Result<PolicySpec> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        load_policy(BufReader::new(file)).context("loading policy checkpoint")
    }

    /// Response model for online evaluation: a fitted checkpoint when
    /// given, the ground-truth world otherwise.
    fn response_model(
        &self,
        model_path: Option<&Path>,
        world: WorldSpec,
    ) -> Result<Arc<dyn UserResponseModel + Send + Sync>> {
        Ok(match model_path {
            Some(path) => Arc::new(self.load_model(path)?),
            None => Arc::new(world),
        })
    }
}

// ── gen ─────────────────────────────────────────────────────────────────

pub fn gen(ctx: &TaskContext) -> Result<()> {
    let world = ctx.world()?;
    let behavior = MixturePolicy {
        primary: AttractionPolicy { world: &world, temperature: ctx.config.behavior_temperature },
        fallback: UniformPolicy,
        epsilon: ctx.config.behavior_epsilon,
    };
    let (rows, stats) = simulate_logs(&world, &behavior, &ctx.config.gen_config())?;
    let mut buf = Vec::new();
    logged::write_log(&rows, &mut buf)?;
    write_atomic(&ctx.out("logs.tsv"), &buf)?;
    write_atomic(&ctx.out("gen_stats.tsv"), format!("{stats}\n").as_bytes())?;
    println!("wrote {} rows from {} sessions", rows.len(), stats.sessions);
    Ok(())
}

// ── validate ────────────────────────────────────────────────────────────

pub fn validate(ctx: &TaskContext, input: &Path) -> Result<()> {
    let rows = ctx.read_rows(input)?;
    let sessions: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.session_id.as_str()).collect();
    let purchases: usize =
        rows.iter().map(|r| r.user_feedback.iter().filter(|&&f| f == 1).count()).sum();
    let report = format!(
        "status\tok\nrows\t{}\nsessions\t{}\npurchases\t{}\nfeedback_validity\t100%\n",
        rows.len(),
        sessions.len(),
        purchases,
    );
    write_atomic(&ctx.out("validate_report.txt"), report.as_bytes())?;
    println!("validated {} rows, all feedback unlock-valid", rows.len());
    Ok(())
}

// ── split ───────────────────────────────────────────────────────────────

pub fn split(ctx: &TaskContext, input: &Path) -> Result<()> {
    let world = ctx.world()?;
    let rows = ctx.read_rows(input)?;
    let sessions = ctx.sessions_from(input, &world.catalog)?;
    let result = logged::split_dataset(sessions, &ctx.config.split())?;

    let ids = |list: &[SessionRecord]| -> std::collections::BTreeSet<String> {
        list.iter().map(|s| s.session_id.clone()).collect()
    };
    let train_ids = ids(&result.train);
    let test_ids = ids(&result.test);
    for (name, keep) in [("train.tsv", &train_ids), ("test.tsv", &test_ids)] {
        let subset: Vec<LoggedRow> =
            rows.iter().filter(|r| keep.contains(&r.session_id)).cloned().collect();
        let mut buf = Vec::new();
        logged::write_log(&subset, &mut buf)?;
        write_atomic(&ctx.out(name), &buf)?;
    }
    let report = format!(
        "mode\t{}\ntrain_sessions\t{}\ntest_sessions\t{}\n",
        ctx.config.split_mode,
        result.train.len(),
        result.test.len()
    );
    write_atomic(&ctx.out("split_report.txt"), report.as_bytes())?;
    println!("split {} train / {} test sessions", result.train.len(), result.test.len());
    Ok(())
}

// ── transform ───────────────────────────────────────────────────────────

pub fn transform(ctx: &TaskContext, input: &Path, model_path: Option<&Path>) -> Result<()> {
    let world = ctx.world()?;
    let sessions = ctx.sessions_from(input, &world.catalog)?;
    let spec = ctx.config.feature_spec();
    let options = logged::TransformOptions { gamma: ctx.config.gamma };

    let hidden_model = model_path.map(|p| ctx.load_model(p)).transpose()?;
    let mut samples = Vec::new();
    for session in &sessions {
        let batch = match &hidden_model {
            Some(model) => logged::to_mdp_samples(
                session,
                &options,
                &HiddenStateEncoder(model),
                &spec,
                &world.catalog,
            )?,
            None => logged::to_mdp_samples(
                session,
                &options,
                &IdentityEncoder,
                &spec,
                &world.catalog,
            )?,
        };
        samples.extend(batch);
    }
    let mut buf = Vec::new();
    logged::write_mdp_samples(&samples, &mut buf)?;
    write_atomic(&ctx.out("samples.jsonl"), &buf)?;

    let trajectories = cpe::trajectories_from_sessions(&sessions, &world.catalog)?;
    let mut buf = Vec::new();
    cpe::write_trajectories(&trajectories, &mut buf)?;
    write_atomic(&ctx.out("trajectories.jsonl"), &buf)?;

    let report = format!(
        "sessions\t{}\nsamples\t{}\ntrajectories\t{}\nobservation\t{}\n",
        sessions.len(),
        samples.len(),
        trajectories.len(),
        if hidden_model.is_some() { "hidden" } else { "raw" },
    );
    write_atomic(&ctx.out("transform_report.txt"), report.as_bytes())?;
    println!("transformed {} sessions into {} samples", sessions.len(), samples.len());
    Ok(())
}

// ── fit-sim / eval-sim ──────────────────────────────────────────────────

pub fn fit_sim(ctx: &TaskContext, input: &Path) -> Result<()> {
    let world = ctx.world()?;
    let sessions = ctx.sessions_from(input, &world.catalog)?;
    let (model, report) = fit_user_model(
        &sessions,
        &ctx.config.feature_spec(),
        ctx.config.row_len,
        &world.catalog,
        &ctx.config.sim_hyper_params(),
    )?;
    let mut buf = Vec::new();
    save_user_model(&model, &mut buf)?;
    write_atomic(&ctx.out("user_model.json"), &buf)?;

    let mut text = format!(
        "epochs_run\t{}\nfinal_loss\t{:.6}\nsessions\t{}\n",
        report.epochs_run,
        report.final_loss,
        sessions.len()
    );
    text.push_str("epoch\tloss\n");
    for (i, loss) in report.loss_curve.iter().enumerate() {
        text.push_str(&format!("{i}\t{loss:.6}\n"));
    }
    write_atomic(&ctx.out("fit_report.txt"), text.as_bytes())?;
    println!("fitted user model on {} sessions, final loss {:.6}", sessions.len(), report.final_loss);
    Ok(())
}

pub fn eval_sim(ctx: &TaskContext, model_path: &Path, input: &Path) -> Result<()> {
    let world = ctx.world()?;
    let model = ctx.load_model(model_path)?;
    let sessions = ctx.sessions_from(input, &world.catalog)?;
    let metrics = evaluate_user_model(
        &model,
        &sessions,
        ctx.config.row_len,
        ctx.config.gamma,
        &world.catalog,
    )?;
    write_atomic(&ctx.out("sim_metrics.tsv"), format!("{metrics}\n").as_bytes())?;
    let record = serde_json::to_string_pretty(&metrics)?;
    write_atomic(&ctx.out("sim_metrics.json"), record.as_bytes())?;
    println!(
        "slate accuracy {:.3}, item AUC {:.3}, reward error {}",
        metrics.slate_accuracy, metrics.item_auc, metrics.reward_error
    );
    Ok(())
}

// ── understand ──────────────────────────────────────────────────────────

pub fn understand(ctx: &TaskContext, input: &Path) -> Result<()> {
    let world = ctx.world()?;
    let sessions = ctx.sessions_from(input, &world.catalog)?;
    if sessions.is_empty() {
        bail!("no sessions in {}", input.display());
    }
    // deterministic user holdout: shuffle session indices, report on the
    // first `understand_users`, fit on the rest
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut rng = slate_rl::rng::stream_rng(ctx.config.seed, "understand-split", 0);
    slate_rl::rng::shuffle(&mut order, &mut rng);
    let holdout = ctx.config.understand_users.min(sessions.len() / 5 + 1);
    let test_users: Vec<Vec<f64>> =
        order[..holdout].iter().map(|&i| sessions[i].user_context()).collect();
    let train: Vec<SessionRecord> =
        order[holdout..].iter().map(|&i| sessions[i].clone()).collect();

    let hp = SeqHyperParams {
        learning_rate: ctx.config.understand_learning_rate,
        epochs: ctx.config.understand_epochs,
        seed: stream_seed(ctx.config.seed, "understand-fit", 0),
        transition_decay: ctx.config.understand_transition_decay,
    };
    let (model, fit_report) =
        fit_seq_model(&train, ctx.config.understand_k, &hp, &world.catalog)?;
    let report = understanding_report(
        &model,
        &test_users,
        ctx.config.understand_k,
        ctx.config.beam_width,
        ctx.config.hot_size.min(world.catalog.len()),
        &world.catalog,
    )?;

    write_atomic(
        &ctx.out("understand_scores.tsv"),
        report.score_table(&ctx.config.world_preset).as_bytes(),
    )?;
    write_atomic(
        &ctx.out("understand_correlations.tsv"),
        report.correlation_table(&ctx.config.world_preset).as_bytes(),
    )?;
    let record = serde_json::to_string_pretty(&report)?;
    write_atomic(&ctx.out("understand.json"), record.as_bytes())?;
    println!(
        "greedy {:.2}, top-20% {:.2}, 1-Spearman {:.2} over {} users ({} skipped sessions)",
        report.greedy,
        report.top20pct,
        report.spearman.first().copied().unwrap_or(f64::NAN),
        report.users,
        fit_report.skipped_sessions,
    );
    Ok(())
}

// ── policy training ─────────────────────────────────────────────────────

pub fn train_bc(ctx: &TaskContext, samples_path: &Path) -> Result<()> {
    let world = ctx.world()?;
    let samples = ctx.read_samples(samples_path)?;
    let (policy, curve) = bc_fit(
        &samples,
        &ctx.config.feature_spec(),
        &world.catalog,
        &ctx.config.learner_config("train-bc"),
    )?;
    let spec = PolicySpec::LinearSoftmax(policy);
    let mut buf = Vec::new();
    save_policy(&spec, &mut buf)?;
    write_atomic(&ctx.out("bc_policy.json"), &buf)?;
    let text = format!(
        "samples\t{}\nepochs\t{}\nfinal_loss\t{:.6}\n",
        samples.len(),
        curve.epochs_run,
        curve.final_loss()
    );
    write_atomic(&ctx.out("bc_report.txt"), text.as_bytes())?;
    println!("cloned behavior from {} samples, final loss {:.6}", samples.len(), curve.final_loss());
    Ok(())
}

pub fn train_bcq(ctx: &TaskContext, samples_path: &Path) -> Result<()> {
    let world = ctx.world()?;
    let samples = ctx.read_samples(samples_path)?;
    let (policy, report) = batch_q_learn(
        &samples,
        &ctx.config.feature_spec(),
        &world.catalog,
        &ctx.config.learner_config("train-bcq"),
    )?;
    let spec = PolicySpec::Bcq(policy);
    let mut buf = Vec::new();
    save_policy(&spec, &mut buf)?;
    write_atomic(&ctx.out("bcq_policy.json"), &buf)?;
    let text = format!(
        "samples\t{}\niterations\t{}\nfinal_bellman_mse\t{:.6}\nfilter_fallbacks\t{}\n",
        samples.len(),
        report.iterations,
        report.bellman_errors.last().copied().unwrap_or(f64::NAN),
        report.filter_fallbacks,
    );
    write_atomic(&ctx.out("bcq_report.txt"), text.as_bytes())?;
    println!(
        "batch Q-learning done: Bellman MSE {:.6}, {} filter fallbacks",
        report.bellman_errors.last().copied().unwrap_or(f64::NAN),
        report.filter_fallbacks
    );
    Ok(())
}

pub fn train_pg(ctx: &TaskContext, model_path: Option<&Path>) -> Result<()> {
    let world = ctx.world()?;
    let catalog = world.catalog.clone();
    let model = ctx.response_model(model_path, world.clone())?;
    let sim = Simulator {
        config: ctx.config.episode_config(),
        catalog: &catalog,
        model: model.as_ref(),
        users: &world,
    };
    let mut learner = ctx.config.learner_config("train-pg");
    learner.epochs = ctx.config.pg_batches;
    let (policy, report) = reinforce_online(&sim, &learner)?;
    let spec = PolicySpec::LinearSoftmax(policy);
    let mut buf = Vec::new();
    save_policy(&spec, &mut buf)?;
    write_atomic(&ctx.out("pg_policy.json"), &buf)?;
    let mut text = String::from("batch\tmean_reward\n");
    for (i, reward) in report.reward_curve.iter().enumerate() {
        text.push_str(&format!("{i}\t{reward:.4}\n"));
    }
    write_atomic(&ctx.out("pg_curve.tsv"), text.as_bytes())?;
    println!(
        "policy-gradient training done, last-batch mean reward {:.2}",
        report.reward_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ── online evaluation ───────────────────────────────────────────────────

pub fn eval_online(ctx: &TaskContext, policy_path: &Path, model_path: Option<&Path>) -> Result<()> {
    let world = ctx.world()?;
    let catalog = world.catalog.clone();
    let policy = ctx.load_policy_spec(policy_path)?;
    let model = ctx.response_model(model_path, world.clone())?;
    let sim = Simulator {
        config: ctx.config.episode_config(),
        catalog: &catalog,
        model: model.as_ref(),
        users: &world,
    };
    let result = evaluate_online(
        &policy,
        &sim,
        ctx.config.eval_episodes,
        stream_seed(ctx.config.seed, "eval-online", 0),
    )?;
    let policy_name =
        policy_path.file_name().and_then(|n| n.to_str()).unwrap_or("policy").to_string();
    let text = format!(
        "policy\t{policy_name}\nepisodes\t{}\nreward\t{result}\nmean\t{:.6}\nstd\t{:.6}\n",
        result.episodes, result.mean, result.std
    );
    write_atomic(&ctx.out("eval_online.txt"), text.as_bytes())?;
    append_line(
        &ctx.out("run_log.tsv"),
        &format!("eval-online\t{policy_name}\t{}\t{result}", result.episodes),
    )?;
    println!("online evaluation: {result} over {} episodes", result.episodes);
    Ok(())
}

// ── counterfactual policy evaluation ────────────────────────────────────

pub fn cpe_task(
    ctx: &TaskContext,
    trajectories_path: &Path,
    policy_path: &Path,
    model_path: Option<&Path>,
) -> Result<()> {
    let world = ctx.world()?;
    let file = File::open(trajectories_path)
        .with_context(|| format!("opening {}", trajectories_path.display()))?;
    let mut trajectories = cpe::read_trajectories(BufReader::new(file))?;
    trajectories.truncate(ctx.config.cpe_max_trajectories);
    let policy = ctx.load_policy_spec(policy_path)?;
    let model = model_path.map(|p| ctx.load_model(p)).transpose()?;

    let report = match &model {
        Some(fitted) => {
            let value_model = ValueModel {
                model: fitted,
                catalog: &world.catalog,
                config: ctx.config.episode_config(),
                policy: &policy,
                rollouts: ctx.config.cpe_rollouts,
                seed: stream_seed(ctx.config.seed, "cpe-rollout", 0),
            };
            cpe::cpe_report(
                &trajectories,
                &policy,
                &world.catalog,
                ctx.config.gamma,
                (ctx.config.swis_clip_lo, ctx.config.swis_clip_hi),
                &value_model,
                &value_model,
            )?
        }
        None => {
            // no simulator: run the DR estimators with a zero value model
            // (they degrade to importance-weighted corrections only)
            struct Zero;
            impl cpe::RewardModel for Zero {
                fn expected_reward(
                    &self,
                    _: &slate_rl::DecisionContext,
                    _: slate_rl::ItemId,
                ) -> Result<f64, cpe::CpeError> {
                    Ok(0.0)
                }
            }
            impl cpe::ActionValueModel for Zero {
                fn q_value(
                    &self,
                    _: &slate_rl::DecisionContext,
                    _: slate_rl::ItemId,
                ) -> Result<f64, cpe::CpeError> {
                    Ok(0.0)
                }
            }
            cpe::cpe_report(
                &trajectories,
                &policy,
                &world.catalog,
                ctx.config.gamma,
                (ctx.config.swis_clip_lo, ctx.config.swis_clip_hi),
                &Zero,
                &Zero,
            )?
        }
    };

    let label = policy_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("policy")
        .to_string();
    let table = cpe::render_cpe_table(&[(label, report.clone())]);
    write_atomic(&ctx.out("cpe_report.tsv"), table.as_bytes())?;
    let record = serde_json::to_string_pretty(&report)?;
    write_atomic(&ctx.out("cpe.json"), record.as_bytes())?;
    println!(
        "CPE relative scores: IS {:.2}, SWIS {:.2}, DR {:.2}, Seq-DR {:.2} over {} trajectories",
        report.is.relative,
        report.swis.relative,
        report.dr.relative,
        report.seq_dr.relative,
        report.trajectories
    );
    Ok(())
}

// ── serve-env ───────────────────────────────────────────────────────────

pub fn serve_env(ctx: &TaskContext, bind: &str, model_path: Option<&Path>) -> Result<()> {
    let service = build_service(ctx, model_path)?;
    server::run_blocking(service, bind)
}

pub fn build_service(ctx: &TaskContext, model_path: Option<&Path>) -> Result<EnvService> {
    let world = ctx.world()?;
    let catalog = Arc::new(world.catalog.clone());
    let model = ctx.response_model(model_path, world.clone())?;
    Ok(EnvService {
        config: ctx.config.episode_config(),
        catalog,
        model,
        world: Arc::new(world),
    })
}
