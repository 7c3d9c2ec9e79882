//! Pipeline stages. Each reads upstream artifacts, writes its own directory and
//! finishes with a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fcp_core::baselines::{train_cft, train_grpo_lite, train_rft, train_sft, GrpoRound};
use fcp_core::dataset::{deserialize_dataset, serialize_dataset, Dataset, Style};
use fcp_core::env::{Env, Grammar, InstanceId, TaskInstance};
use fcp_core::eval::{
    condition_sweep_report, dynamics_report, evaluate, evaluate_unconditioned, DynamicsPoint, EvalCondition,
    MethodLog, SweepSummary,
};
use fcp_core::oracle::{kl_objective, random_distribution, random_joint, total_variation};
use fcp_core::policy::{Backend, Checkpoint, NeuralPolicy, Policy, TableRole, TabularPolicy};
use fcp_core::rng::stream;
use fcp_core::sequence::TokenSequence;
use fcp_core::train::{self, build_condition_pool, collect_offline, BootstrapState, ConditionPool, TrainOutcome};
use fcp_core::FcpError;
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BaselineMethod, ExperimentConfig};
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const MANIFEST: &str = "manifest.json";

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(FcpError::io(path.display().to_string(), e))
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub digest: String,
    pub env: Env,
}

impl Context {
    /// Builds the environment and writes the resolved config into the output directory.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let grammar = match &cfg.env.grammar {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read grammar {}: {e}", p.display())))?;
                Grammar::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Grammar::default(),
        };
        let env = Env::new(grammar, cfg.env.noise_rate, cfg.env.behavior.clone())
            .map_err(|e| CliError::Config(e.to_string()))?;
        let digest = cfg.digest();
        fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
        let path = cfg.output_dir.join(RESOLVED_CONFIG);
        let text = format!("# config digest {digest}\n{}", cfg.to_toml());
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(Context { cfg, digest, env })
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.cfg.output_dir.join(stage)
    }

    fn fresh_dir(&self, stage: &str) -> Result<PathBuf> {
        let d = self.dir(stage);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| io_err(&d, e))?;
        }
        fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        Ok(d)
    }

    fn style(&self) -> Style {
        self.cfg.env.style
    }

    fn seed(&self) -> u64 {
        self.cfg.master_seed
    }

    fn checkpoint(&self, policy: &Policy, tag: &str) -> Checkpoint {
        let mut c = Checkpoint::new(policy, self.env.vocab(), tag);
        c.config_digest = Some(self.digest.clone());
        c
    }

    /// Writes `manifest.json` listing every file in the stage directory.
    fn manifest(&self, stage: &str, extra: serde_json::Value) -> Result<()> {
        let dir = self.dir(stage);
        let mut artifacts = BTreeMap::new();
        let mut stack = vec![dir.clone()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
                let p = entry.map_err(|e| io_err(&d, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n != MANIFEST) {
                    let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
                    let rel = p.strip_prefix(&dir).expect("inside stage dir").to_string_lossy().replace('\\', "/");
                    artifacts.insert(rel, hex::encode(Sha256::digest(&bytes)));
                }
            }
        }
        let m = serde_json::json!({
            "stage": stage,
            "config_digest": self.digest,
            "artifacts": artifacts,
            "info": extra,
        });
        write_json(&dir.join(MANIFEST), &m)
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing(path))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(FcpError::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(FcpError::from)?)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?))
}

fn write_dataset(path: &Path, d: &Dataset, ctx: &Context) -> Result<()> {
    let mut f = create(path)?;
    serialize_dataset(d, ctx.env.vocab(), &mut f)?;
    f.flush().map_err(|e| io_err(path, e))
}

fn read_dataset(path: &Path, ctx: &Context) -> Result<Dataset> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(deserialize_dataset(BufReader::new(f), ctx.env.vocab())?)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Core(FcpError::io(path.display().to_string(), e.into())))?;
    let wrap = |e: csv::Error| CliError::Core(FcpError::io(path.display().to_string(), e.into()));
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn loss_rows(losses: &[f64]) -> Vec<Vec<String>> {
    losses.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    id: String,
    instruction: String,
}

fn write_tasks(path: &Path, tasks: &[TaskInstance], ctx: &Context) -> Result<()> {
    let mut f = create(path)?;
    for t in tasks {
        let rec = TaskRecord {
            id: t.id().to_string(),
            instruction: ctx.env.vocab().render(t.instruction().tokens()),
        };
        serde_json::to_writer(&mut f, &rec).map_err(FcpError::from)?;
        f.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    f.flush().map_err(|e| io_err(path, e))
}

fn read_tasks(path: &Path, ctx: &Context) -> Result<Vec<TaskInstance>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let perr = |message: String| CliError::Core(FcpError::Parse { line: i + 1, message });
        let rec: TaskRecord = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        let toks = ctx.env.vocab().tokenize(&rec.instruction).map_err(|e| perr(e.to_string()))?;
        let seq = TokenSequence::instruction(toks).map_err(|e| perr(e.to_string()))?;
        let task = ctx.env.parse_task(&seq).map_err(|e| perr(e.to_string()))?;
        if task.id().to_string() != rec.id {
            return Err(perr(format!("id {} does not match the instruction", rec.id)));
        }
        out.push(task);
    }
    Ok(out)
}

fn train_tasks(ctx: &Context) -> Result<Vec<TaskInstance>> {
    read_tasks(&require(ctx.dir("tasks").join("train.jsonl"))?, ctx)
}

fn eval_tasks(ctx: &Context) -> Result<Vec<TaskInstance>> {
    read_tasks(&require(ctx.dir("tasks").join("eval.jsonl"))?, ctx)
}

/// Draws `n_train` training tasks and `n_eval` evaluation tasks whose ids do not
/// occur in the training set.
pub fn gen_tasks(ctx: &Context) -> Result<()> {
    let e = &ctx.cfg.env;
    let mut rng = stream(ctx.seed(), "gen-tasks", 0);
    let train = (0..e.n_train)
        .map(|_| ctx.env.generate_instruction(e.task_kind, e.difficulty, &mut rng))
        .collect::<fcp_core::Result<Vec<_>>>()?;
    let ids: BTreeSet<InstanceId> = train.iter().map(|t| t.id()).collect();
    let mut rng = stream(ctx.seed(), "gen-eval", 0);
    let mut eval = Vec::with_capacity(e.n_eval);
    let budget = 100 * e.n_eval.max(100);
    for _ in 0..budget {
        if eval.len() == e.n_eval {
            break;
        }
        let t = ctx.env.generate_instruction(e.task_kind, e.difficulty, &mut rng)?;
        if !ids.contains(&t.id()) {
            eval.push(t);
        }
    }
    if eval.len() < e.n_eval {
        return Err(CliError::Config(format!(
            "could only draw {} of {} evaluation tasks disjoint from training; lower env.n_train or raise env.difficulty",
            eval.len(),
            e.n_eval
        )));
    }
    let dir = ctx.fresh_dir("tasks")?;
    write_tasks(&dir.join("train.jsonl"), &train, ctx)?;
    write_tasks(&dir.join("eval.jsonl"), &eval, ctx)?;
    info!("wrote {} training and {} evaluation tasks", train.len(), eval.len());
    ctx.manifest("tasks", serde_json::json!({ "n_train": train.len(), "n_eval": eval.len() }))
}

/// Tabular reference policy over the given instructions, built from the
/// environment's behavior model.
pub fn reference_policy(env: &Env, tasks: &[TaskInstance]) -> Result<TabularPolicy> {
    let mut t = TabularPolicy::new(TableRole::Response, env.vocab().len());
    for x in tasks {
        let (o, p): (Vec<_>, Vec<_>) = env.reference_space(x)?.into_iter().unzip();
        t.add_response_space(x.instruction(), o, &p)?;
    }
    Ok(t)
}

pub fn collect(ctx: &Context) -> Result<()> {
    let tasks = train_tasks(ctx)?;
    let reference = Policy::Tabular(reference_policy(&ctx.env, &tasks)?);
    let o = &ctx.cfg.offline;
    let d = collect_offline(&reference, &ctx.env, &tasks, o.n_per_prompt, o.selection, ctx.style(), ctx.seed())?;
    let dir = ctx.fresh_dir("collect")?;
    write_dataset(&dir.join("offline.jsonl"), &d, ctx)?;
    info!("collected {} triples", d.len());
    ctx.manifest("collect", serde_json::json!({ "triples": d.len() }))
}

/// Starting parameters: the reference table for the tabular backend, a seeded
/// random network otherwise. A table has no way to generalize, so it also
/// registers the evaluation prompts, which then keep their reference rows.
fn initial_policy(ctx: &Context, tasks: &[TaskInstance], stage: &str) -> Result<Policy> {
    match ctx.cfg.policy.backend {
        Backend::Tabular => {
            let mut all = tasks.to_vec();
            all.extend(eval_tasks(ctx)?);
            Ok(Policy::Tabular(reference_policy(&ctx.env, &all)?))
        }
        Backend::Neural => {
            let mut rng = stream(ctx.seed(), &format!("{stage}-init"), 0);
            let tt = ctx.env.task_tokens();
            let net = NeuralPolicy::new(
                ctx.cfg.policy.neural(),
                ctx.env.vocab().len(),
                vec![tt.marker, tt.filler],
                &mut rng,
            )?;
            let mut p = Policy::Neural(net);
            p.init_special_embeddings(&mut rng);
            Ok(p)
        }
    }
}

fn offline_dataset(ctx: &Context) -> Result<Dataset> {
    read_dataset(&require(ctx.dir("collect").join("offline.jsonl"))?, ctx)
}

pub fn train_offline(ctx: &Context) -> Result<()> {
    let tasks = train_tasks(ctx)?;
    let d = offline_dataset(ctx)?;
    let mut policy = initial_policy(ctx, &tasks, "train-offline")?;
    let out = train::train_offline(&mut policy, &d, &ctx.cfg.offline.schedule(), ctx.seed())?;
    let dir = ctx.fresh_dir("train-offline")?;
    ctx.checkpoint(&policy, "fcp").save(&dir.join("checkpoint.json"))?;
    write_csv(&dir.join("loss.csv"), &["step", "loss"], &loss_rows(&out.losses))?;
    info!("offline training: {} steps, final loss {:.4}", out.losses.len(), out.losses.last().copied().unwrap_or(f64::NAN));
    ctx.manifest("train-offline", serde_json::json!({ "steps": out.losses.len() }))
}

pub fn build_pool(ctx: &Context) -> Result<()> {
    let d = offline_dataset(ctx)?;
    let pool = build_condition_pool(&d, &ctx.cfg.pool, &ctx.env)?;
    let dir = ctx.fresh_dir("build-pool")?;
    let path = dir.join("pool.json");
    fs::write(&path, pool.to_json(ctx.env.vocab())? + "\n").map_err(|e| io_err(&path, e))?;
    info!("condition pool has {} entries", pool.len());
    ctx.manifest("build-pool", serde_json::json!({ "entries": pool.len() }))
}

fn load_policy(ctx: &Context, path: PathBuf) -> Result<(Policy, Checkpoint)> {
    let ck = Checkpoint::load(&require(path)?)?;
    Ok((ck.policy(ctx.env.vocab())?, ck))
}

/// One row of `bootstrap/metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u32,
    pub accuracy: f64,
    pub positive_feedback_rate: f64,
    pub mean_score: f64,
    pub mean_length: f64,
    pub loss: f64,
    pub samples: usize,
}

const ROUND_HEADER: [&str; 7] = ["round", "accuracy", "positive_feedback_rate", "mean_score", "mean_length", "loss", "samples"];

fn round_rows(rows: &[RoundRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.round.to_string(),
                r.accuracy.to_string(),
                r.positive_feedback_rate.to_string(),
                r.mean_score.to_string(),
                r.mean_length.to_string(),
                r.loss.to_string(),
                r.samples.to_string(),
            ]
        })
        .collect()
}

fn round_name(t: u32) -> String {
    format!("round-{t:03}")
}

fn latest_round_checkpoint(dir: &Path, max_round: u32) -> Option<(u32, PathBuf)> {
    (1..=max_round)
        .rev()
        .map(|t| (t, dir.join(format!("checkpoint-{t:03}.json"))))
        .find(|(_, p)| p.exists())
}

/// Bootstrapping from the offline checkpoint. With `resume`, continues after
/// the latest round checkpoint; otherwise starts over.
pub fn bootstrap(ctx: &Context, resume: bool) -> Result<()> {
    let tasks = train_tasks(ctx)?;
    let pool_path = require(ctx.dir("build-pool").join("pool.json"))?;
    let pool = ConditionPool::from_json(&fs::read_to_string(&pool_path).map_err(|e| io_err(&pool_path, e))?, ctx.env.vocab())?;
    let schedule = &ctx.cfg.online;
    let dir = ctx.dir("bootstrap");
    let resumed = if resume { latest_round_checkpoint(&dir, schedule.rounds) } else { None };
    let (mut state, mut rows) = match resumed {
        Some((t, path)) => {
            let (policy, ck) = load_policy(ctx, path)?;
            let optimizer = ck
                .optimizer
                .ok_or_else(|| CliError::Core(FcpError::Contract("round checkpoint has no optimizer state".into())))?;
            let mut rows: Vec<RoundRow> = read_json(&require(dir.join("rounds.json"))?)?;
            rows.truncate(t as usize);
            info!("resuming after round {t}");
            (BootstrapState { policy, optimizer, round: t }, rows)
        }
        None => {
            let (policy, _) = load_policy(ctx, ctx.dir("train-offline").join("checkpoint.json"))?;
            ctx.fresh_dir("bootstrap")?;
            (BootstrapState::new(policy), Vec::new())
        }
    };
    let vocab = ctx.env.vocab();
    train::bootstrap(&mut state, &pool, &ctx.env, &tasks, schedule, ctx.style(), ctx.seed(), |report, st| {
        let t = report.metrics.round;
        let name = round_name(t);
        write_dataset(&dir.join(format!("{name}.jsonl")), &report.buffer.dataset(), ctx)
            .map_err(|e| FcpError::Contract(e.to_string()))?;
        let meta = dir.join(format!("{name}.meta.jsonl"));
        let mut f = BufWriter::new(fs::File::create(&meta).map_err(|e| FcpError::io(meta.display().to_string(), e))?);
        report.buffer.write_meta(vocab, &mut f)?;
        f.flush().map_err(|e| FcpError::io(meta.display().to_string(), e))?;
        let mut ck = ctx.checkpoint(&st.policy, "fcp-bootstrap");
        ck.round = Some(t);
        ck.optimizer = Some(st.optimizer.clone());
        ck.save(&dir.join(format!("checkpoint-{t:03}.json")))?;
        rows.push(RoundRow {
            round: t,
            accuracy: report.metrics.accuracy,
            positive_feedback_rate: report.metrics.positive_feedback_rate,
            mean_score: report.metrics.mean_score,
            mean_length: report.metrics.mean_length,
            loss: report.mean_loss(),
            samples: report.metrics.samples,
        });
        write_json(&dir.join("rounds.json"), &rows).map_err(|e| FcpError::Contract(e.to_string()))?;
        write_csv(&dir.join("metrics.csv"), &ROUND_HEADER, &round_rows(&rows)).map_err(|e| FcpError::Contract(e.to_string()))?;
        Ok(())
    })?;
    if rows.is_empty() {
        write_json(&dir.join("rounds.json"), &rows)?;
        write_csv(&dir.join("metrics.csv"), &ROUND_HEADER, &[])?;
    }
    let mut ck = ctx.checkpoint(&state.policy, "fcp-bootstrap");
    ck.round = Some(state.round);
    ck.save(&dir.join("checkpoint.json"))?;
    ctx.manifest("bootstrap", serde_json::json!({ "rounds": state.round }))
}

fn baseline_dir(ctx: &Context, m: BaselineMethod) -> PathBuf {
    ctx.dir("train-baseline").join(m.as_str())
}

fn critique_policy(ctx: &Context, tasks: &[TaskInstance]) -> Result<Policy> {
    match ctx.cfg.policy.backend {
        Backend::Tabular => {
            let support = ctx.env.feedback_support(ctx.style());
            let n = support.len();
            let mut t = TabularPolicy::new(TableRole::Critique, ctx.env.vocab().len());
            t.add_critique_space(support, &vec![1.0 / n as f64; n])?;
            Ok(Policy::Tabular(t))
        }
        Backend::Neural => initial_policy(ctx, tasks, "train-baseline-cft"),
    }
}

/// SFT, RFT and CFT train on the collected triples from fresh parameters;
/// GRPO-lite starts from the SFT checkpoint.
pub fn train_baseline(ctx: &Context, method: BaselineMethod) -> Result<()> {
    let tasks = train_tasks(ctx)?;
    let schedule = ctx.cfg.offline.schedule();
    let dir = baseline_dir(ctx, method);
    let (policy, losses, curve): (Policy, Vec<f64>, Option<Vec<GrpoRound>>) = match method {
        BaselineMethod::Sft | BaselineMethod::Rft | BaselineMethod::Cft => {
            let d = offline_dataset(ctx)?;
            let stage = format!("train-baseline-{}", method.as_str());
            let (mut p, out): (Policy, TrainOutcome);
            match method {
                BaselineMethod::Sft => {
                    p = initial_policy(ctx, &tasks, &stage)?;
                    out = train_sft(&mut p, &d, &schedule, ctx.seed())?;
                }
                BaselineMethod::Rft => {
                    p = initial_policy(ctx, &tasks, &stage)?;
                    out = train_rft(&mut p, &d, &ctx.env, &schedule, ctx.seed())?;
                }
                _ => {
                    p = critique_policy(ctx, &tasks)?;
                    out = train_cft(&mut p, &d, &schedule, ctx.seed())?;
                }
            }
            (p, out.losses, None)
        }
        BaselineMethod::GrpoLite => {
            let (mut p, _) = load_policy(ctx, baseline_dir(ctx, BaselineMethod::Sft).join("checkpoint.json"))?;
            let curve = train_grpo_lite(&mut p, &ctx.env, &tasks, &ctx.cfg.baseline.grpo, ctx.style(), ctx.seed(), |_, _| Ok(()))?;
            let losses = curve.iter().map(|r| r.loss).collect();
            (p, losses, Some(curve))
        }
    };
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    ctx.checkpoint(&policy, method.as_str()).save(&dir.join("checkpoint.json"))?;
    write_csv(&dir.join("loss.csv"), &["step", "loss"], &loss_rows(&losses))?;
    if let Some(curve) = &curve {
        let rows: Vec<Vec<String>> = curve
            .iter()
            .map(|r| {
                vec![
                    r.round.to_string(),
                    r.mean_reward.to_string(),
                    r.accuracy.to_string(),
                    r.mean_length.to_string(),
                    r.loss.to_string(),
                ]
            })
            .collect();
        write_csv(&dir.join("curve.csv"), &["round", "mean_reward", "accuracy", "mean_length", "loss"], &rows)?;
        write_json(&dir.join("curve.json"), curve)?;
    }
    ctx.manifest("train-baseline", serde_json::json!({ "last_method": method.as_str() }))
}

fn target_checkpoint(ctx: &Context, target: &str) -> Result<(PathBuf, bool)> {
    Ok(match target {
        "offline" => (ctx.dir("train-offline").join("checkpoint.json"), true),
        "bootstrap" => (ctx.dir("bootstrap").join("checkpoint.json"), true),
        other => match BaselineMethod::parse(other) {
            Some(BaselineMethod::Cft) => {
                return Err(CliError::Config("cft checkpoints predict feedback and cannot be evaluated as response policies".into()))
            }
            Some(m) => (baseline_dir(ctx, m).join("checkpoint.json"), false),
            None => return Err(CliError::Config(format!("unknown eval target `{other}`"))),
        },
    })
}

pub fn eval(ctx: &Context) -> Result<()> {
    let train_ids: BTreeSet<InstanceId> = train_tasks(ctx)?.iter().map(|t| t.id()).collect();
    let eval_set = eval_tasks(ctx)?;
    let e = &ctx.cfg.eval;
    let mut loaded = Vec::new();
    for target in &e.targets {
        let (path, conditioned) = target_checkpoint(ctx, target)?;
        loaded.push((target.clone(), load_policy(ctx, path)?.0, conditioned));
    }
    let conditions: Vec<EvalCondition> = e
        .conditions
        .iter()
        .map(|&l| EvalCondition::build(&ctx.env, l, ctx.style(), e.condition_sampling))
        .collect();
    let dir = ctx.fresh_dir("eval")?;
    for (target, policy, conditioned) in &loaded {
        let records = if *conditioned {
            evaluate(policy, &ctx.env, &conditions, &eval_set, e.decode, &e.seeds, ctx.style(), &train_ids)?
        } else {
            evaluate_unconditioned(policy, &ctx.env, &eval_set, e.decode, &e.seeds, ctx.style(), &train_ids)?
        };
        let sub = dir.join(target);
        let summary = condition_sweep_report(&records, &sub.join("records.csv"), &sub.join("summary.json"), Some(&ctx.digest))?;
        for c in &summary.conditions {
            info!("{target} {}: accuracy {:.3}, marker rate {:.3}, length {:.2}", c.condition.as_str(), c.accuracy, c.marker_rate, c.mean_length);
        }
    }
    ctx.manifest("eval", serde_json::json!({ "targets": e.targets }))
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyInstance {
    pub responses: usize,
    pub feedbacks: usize,
    pub c_plus: usize,
    pub bayes_residual: f64,
    pub max_identity_residual: f64,
    /// Smallest `objective(posterior) - objective(pi)` over the random policies.
    pub min_optimality_gap: f64,
    pub example: fcp_core::oracle::DiagnosticsReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub config_digest: String,
    pub passed: bool,
    pub failure: Option<String>,
    pub instances: Vec<VerifyInstance>,
}

/// Posterior oracle identities on random tabular joints.
pub fn verify(ctx: &Context) -> Result<VerifyReport> {
    let v = &ctx.cfg.verify;
    let mut instances = Vec::new();
    let mut failure = None;
    for i in 0..v.instances {
        let mut rng = stream(ctx.seed(), "verify", i as u64);
        let joint = random_joint(&mut rng, v.responses, v.feedbacks);
        let c_plus = (0..v.feedbacks)
            .max_by(|&a, &b| joint.marginal(a).total_cmp(&joint.marginal(b)))
            .expect("at least one feedback");
        let post = joint.posterior(c_plus)?;
        let best = kl_objective(&post, &joint, c_plus)?.objective_value;
        let (mut max_res, mut min_gap) = (0.0f64, f64::INFINITY);
        let mut example = None;
        for _ in 0..v.policies.max(1) {
            let pi = random_distribution(&mut rng, v.responses);
            let r = kl_objective(&pi, &joint, c_plus)?;
            max_res = max_res.max(r.identity_residual);
            let gap = best - r.objective_value;
            min_gap = min_gap.min(gap);
            if failure.is_none() && total_variation(&pi, &post) > 1e-6 && gap <= 0.0 {
                failure = Some(format!("instance {i}: a random policy matches the posterior objective"));
            }
            example.get_or_insert(r);
        }
        let bayes = joint.bayes_residual();
        if failure.is_none() && bayes >= 1e-12 {
            failure = Some(format!("instance {i}: Bayes residual {bayes:e}"));
        }
        if failure.is_none() && max_res >= 1e-9 {
            failure = Some(format!("instance {i}: identity residual {max_res:e}"));
        }
        instances.push(VerifyInstance {
            responses: v.responses,
            feedbacks: v.feedbacks,
            c_plus,
            bayes_residual: bayes,
            max_identity_residual: max_res,
            min_optimality_gap: min_gap,
            example: example.expect("at least one policy"),
        });
    }
    let report = VerifyReport {
        config_digest: ctx.digest.clone(),
        passed: failure.is_none(),
        failure,
        instances,
    };
    let dir = ctx.fresh_dir("verify")?;
    write_json(&dir.join("diagnostics.json"), &report)?;
    ctx.manifest("verify", serde_json::json!({ "passed": report.passed }))?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportSummary {
    pub config_digest: String,
    /// Last-round values per method.
    pub final_round: BTreeMap<String, DynamicsPoint>,
    pub eval: BTreeMap<String, SweepSummary>,
}

/// Dynamics CSV across bootstrapping and GRPO-lite plus a combined summary.
pub fn report(ctx: &Context) -> Result<ReportSummary> {
    let mut logs = Vec::new();
    let rounds_path = ctx.dir("bootstrap").join("rounds.json");
    if rounds_path.exists() {
        let rows: Vec<RoundRow> = read_json(&rounds_path)?;
        logs.push(MethodLog {
            method: "fcp".into(),
            rounds: rows
                .iter()
                .map(|r| DynamicsPoint {
                    accuracy: Some(r.accuracy),
                    mean_score: Some(r.mean_score),
                    mean_length: Some(r.mean_length),
                    loss: Some(r.loss),
                })
                .collect(),
        });
    }
    let curve_path = baseline_dir(ctx, BaselineMethod::GrpoLite).join("curve.json");
    if curve_path.exists() {
        let curve: Vec<GrpoRound> = read_json(&curve_path)?;
        logs.push(MethodLog {
            method: "grpo_lite".into(),
            rounds: curve
                .iter()
                .map(|r| DynamicsPoint {
                    accuracy: Some(r.accuracy),
                    mean_score: Some(r.mean_reward),
                    mean_length: Some(r.mean_length),
                    loss: Some(r.loss),
                })
                .collect(),
        });
    }
    if logs.is_empty() {
        return Err(CliError::Missing(rounds_path));
    }
    let mut eval = BTreeMap::new();
    let eval_dir = ctx.dir("eval");
    if eval_dir.exists() {
        for entry in fs::read_dir(&eval_dir).map_err(|e| io_err(&eval_dir, e))? {
            let p = entry.map_err(|e| io_err(&eval_dir, e))?.path().join("summary.json");
            if p.exists() {
                let name = p.parent().and_then(|d| d.file_name()).expect("target dir").to_string_lossy().to_string();
                eval.insert(name, read_json(&p)?);
            }
        }
    }
    let dir = ctx.fresh_dir("report")?;
    dynamics_report(&logs, &dir.join("dynamics.csv"))?;
    let summary = ReportSummary {
        config_digest: ctx.digest.clone(),
        final_round: logs
            .iter()
            .filter_map(|l| l.rounds.last().map(|p| (l.method.clone(), p.clone())))
            .collect(),
        eval,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    ctx.manifest("report", serde_json::json!({ "methods": logs.iter().map(|l| l.method.clone()).collect::<Vec<_>>() }))?;
    Ok(summary)
}
