//! Experiment configuration: strict TOML with dotted overrides.

use std::path::{Path, PathBuf};

use fcp_core::baselines::GrpoSchedule;
use fcp_core::dataset::Style;
use fcp_core::env::{BehaviorModel, TaskKind};
use fcp_core::eval::{ConditionLabel, ConditionSampling};
use fcp_core::policy::{AggregationMode, Backend, Decode, NeuralConfig};
use fcp_core::train::{OfflineSchedule, PoolConfig, SchedulerKind, Selection, TrainingSchedule};
use fcp_core::FcpError;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FCP_OUTPUT_DIR";

/// Keys whose values are structured but opaque to the key checker.
const OPAQUE: [&str; 2] = ["eval.decode", "pool.polarity_whitelist"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvSection,
    pub policy: PolicySection,
    pub offline: OfflineSection,
    pub pool: PoolConfig,
    pub online: TrainingSchedule,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
    pub verify: VerifySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            output_dir: PathBuf::from("runs/default"),
            env: EnvSection::default(),
            policy: PolicySection::default(),
            offline: OfflineSection::default(),
            pool: PoolConfig::default(),
            online: TrainingSchedule::default(),
            baseline: BaselineSection::default(),
            eval: EvalSection::default(),
            verify: VerifySection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub task_kind: TaskKind,
    pub difficulty: u32,
    pub noise_rate: f64,
    /// Template grammar file; the built-in grammar when absent.
    pub grammar: Option<PathBuf>,
    pub style: Style,
    pub n_train: usize,
    pub n_eval: usize,
    pub behavior: BehaviorModel,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            task_kind: TaskKind::StringTransform,
            difficulty: 5,
            noise_rate: fcp_core::env::DEFAULT_NOISE_RATE,
            grammar: None,
            style: Style::Reviewer,
            n_train: 2000,
            n_eval: 300,
            behavior: BehaviorModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub backend: Backend,
    pub d_model: usize,
    pub layers: usize,
    pub hidden: usize,
    pub max_context: usize,
    pub max_response: usize,
    pub init_std: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        let n = NeuralConfig::default();
        PolicySection {
            backend: Backend::Neural,
            d_model: n.d_model,
            layers: n.layers,
            hidden: n.hidden,
            max_context: n.max_context,
            max_response: n.max_response,
            init_std: n.init_std,
        }
    }
}

impl PolicySection {
    pub fn neural(&self) -> NeuralConfig {
        NeuralConfig {
            d_model: self.d_model,
            layers: self.layers,
            hidden: self.hidden,
            max_context: self.max_context,
            max_response: self.max_response,
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineSection {
    pub n_per_prompt: usize,
    pub selection: Selection,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler: SchedulerKind,
    pub aggregation: AggregationMode,
}

impl Default for OfflineSection {
    fn default() -> Self {
        OfflineSection {
            n_per_prompt: 4,
            selection: Selection::All,
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            scheduler: SchedulerKind::Cosine,
            aggregation: AggregationMode::TokenMean,
        }
    }
}

impl OfflineSection {
    pub fn schedule(&self) -> OfflineSchedule {
        OfflineSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            scheduler: self.scheduler,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Sft,
    Rft,
    Cft,
    GrpoLite,
}

impl BaselineMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::Sft => "sft",
            BaselineMethod::Rft => "rft",
            BaselineMethod::Cft => "cft",
            BaselineMethod::GrpoLite => "grpo_lite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [BaselineMethod::Sft, BaselineMethod::Rft, BaselineMethod::Cft, BaselineMethod::GrpoLite]
            .into_iter()
            .find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub method: BaselineMethod,
    pub grpo: GrpoSchedule,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            method: BaselineMethod::Sft,
            grpo: GrpoSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub conditions: Vec<ConditionLabel>,
    pub seeds: Vec<u64>,
    pub decode: Decode,
    pub condition_sampling: ConditionSampling,
    /// Checkpoints to evaluate: `offline`, `bootstrap`, or a baseline method.
    pub targets: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            conditions: ConditionLabel::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3],
            decode: Decode::Greedy,
            condition_sampling: ConditionSampling::Representative,
            targets: vec!["offline".into(), "bootstrap".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub instances: usize,
    pub responses: usize,
    pub feedbacks: usize,
    pub policies: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            instances: 1,
            responses: 4,
            feedbacks: 6,
            policies: 1000,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `key=value` overrides and
    /// the output-directory environment variable, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        check_keys(&table)?;
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !self.env.task_kind.difficulty_range().contains(&self.env.difficulty) {
            return bad(format!(
                "env.difficulty {} outside {:?} for {:?}",
                self.env.difficulty,
                self.env.task_kind.difficulty_range(),
                self.env.task_kind
            ));
        }
        if self.env.n_train == 0 || self.env.n_eval == 0 {
            return bad("env.n_train and env.n_eval must be positive".into());
        }
        if self.offline.n_per_prompt == 0 {
            return bad("offline.n_per_prompt must be positive".into());
        }
        if self.eval.seeds.is_empty() || self.eval.conditions.is_empty() {
            return bad("eval.seeds and eval.conditions must be nonempty".into());
        }
        if let Decode::Sample { temperature } = self.eval.decode {
            if !(temperature > 0.0) {
                return bad("eval.decode.temperature must be positive".into());
            }
        }
        for t in &self.eval.targets {
            if t != "offline" && t != "bootstrap" && BaselineMethod::parse(t).is_none() {
                return bad(format!("unknown eval target `{t}`"));
            }
        }
        if self.verify.instances == 0 || self.verify.responses == 0 || self.verify.feedbacks == 0 {
            return bad("verify.instances, verify.responses and verify.feedbacks must be positive".into());
        }
        self.policy.neural().validate().map_err(config_error)?;
        self.offline.schedule().validate().map_err(config_error)?;
        self.online.validate().map_err(config_error)?;
        self.env.behavior.validate().map_err(config_error)?;
        Ok(())
    }

    /// SHA-256 of the resolved settings, excluding `output_dir` so that the same
    /// experiment written to two places shares a digest.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn suggestion(unknown: &str, candidates: &[&String]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (strsim::normalized_damerau_levenshtein(unknown, c), *c))
        .filter(|(s, _)| *s >= 0.5)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.clone())
}

fn check_table(table: &toml::Table, schema: &serde_json::Map<String, Value>, prefix: &str) -> Result<(), CliError> {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match schema.get(k) {
            None => {
                let names: Vec<&String> = schema.keys().collect();
                let mut msg = format!("unknown config key `{path}`");
                if let Some(s) = suggestion(k, &names) {
                    let fixed = if prefix.is_empty() { s } else { format!("{prefix}.{s}") };
                    msg.push_str(&format!("; did you mean `{fixed}`?"));
                }
                return Err(CliError::Config(msg));
            }
            Some(Value::Object(sub)) if !OPAQUE.contains(&path.as_str()) => {
                if let toml::Value::Table(t) = v {
                    check_table(t, sub, &path)?;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Rejects keys that the schema does not know, suggesting the closest sibling.
fn check_keys(table: &toml::Table) -> Result<(), CliError> {
    let schema = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    let Value::Object(root) = schema else { unreachable!("config is a struct") };
    check_table(table, &root, "")
}

fn config_error(e: FcpError) -> CliError {
    match e {
        FcpError::Config(m) => CliError::Config(m),
        other => CliError::Config(other.to_string()),
    }
}
