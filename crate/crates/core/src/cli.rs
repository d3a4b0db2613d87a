//! Command-line surface. `run` does the work; the binary only parses
//! arguments and maps errors to exit codes.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::grammar::{render_prompt, ReferringTask, DEFAULT_SYSTEM_PREAMBLE};
use crate::grpo::{train, GrpoConfig, KlDirection};
use crate::io::{self, sig9, PromptLine, RewardLine, SCHEMA_VERSION};
use crate::metrics::{default_grid, evaluate, validate_grid};
use crate::reward::{reward_response, RewardConfig};
use crate::rng::derive_seed;
use crate::toyenv::{generate_tasks, greedy_report, SyntheticSpec, ToyPolicyParams};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, unreadable input.
    Usage(String),
    /// Input parsed but its content is wrong, or output could not be written.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "groundref",
    version,
    about = "Referring-expression reward, evaluation and toy GRPO training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task set as JSONL.
    GenTasks(GenTasksArgs),
    /// Check the tag structure and answer of each response line.
    Validate(ValidateArgs),
    /// Score responses against their tasks.
    Reward(RewardArgs),
    /// Compute per-subset recall, precision, DF1 and the rejection score.
    Eval(EvalArgs),
    /// Render the model prompt for each task.
    RenderPrompt(RenderPromptArgs),
    /// Train the linear toy policy with GRPO and benchmark it.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Args)]
pub struct GenTasksArgs {
    /// JSON file with synthetic-spec fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rejection_fraction: Option<f64>,
    #[arg(long)]
    pub min_candidates: Option<usize>,
    #[arg(long)]
    pub max_candidates: Option<usize>,
    #[arg(long)]
    pub max_arity: Option<usize>,
    #[arg(long)]
    pub category: Option<String>,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub lambda: f64,
    #[arg(long, default_value_t = crate::geometry::DEFAULT_MATCH_TOL)]
    pub match_tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Comma-separated IoU thresholds; defaults to 0.50:0.05:0.95.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderPromptArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    /// File holding a replacement system preamble.
    #[arg(long)]
    pub preamble_file: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// JSON file with `spec`, `grpo`, `reward`, `iterations`, `heldout_tasks`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds task generation, the held-out benchmark and all sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub n_tasks: Option<usize>,
    #[arg(long)]
    pub heldout_tasks: Option<usize>,
    #[arg(long)]
    pub rejection_fraction: Option<f64>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Use `ln(pi_ref/pi) ...` instead of the default ratio direction.
    #[arg(long)]
    pub kl_ref_over_policy: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainToyConfig {
    pub spec: SyntheticSpec,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub iterations: usize,
    pub heldout_tasks: usize,
}

impl Default for TrainToyConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            iterations: 500,
            heldout_tasks: 100,
        }
    }
}

impl TrainToyConfig {
    /// The benchmark spec: same distribution, a seed derived from the training one.
    pub fn heldout_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_tasks: self.heldout_tasks,
            seed: derive_seed(self.spec.seed, "heldout", &[]),
            ..self.spec.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub v: u32,
    pub dim: usize,
    pub weights: Vec<f64>,
}

fn read_input(path: &Path) -> CliResult<String> {
    io::read_text(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_input(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn emit(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", p.display()))),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Data(format!("cannot write stdout: {e}"))),
    }
}

fn data<T>(path: &Path, r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenTasks(a) => cmd_gen_tasks(&a, stdout),
        Command::Validate(a) => cmd_validate(&a, stdout),
        Command::Reward(a) => cmd_reward(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::RenderPrompt(a) => cmd_render_prompt(&a, stdout),
        Command::TrainToy(a) => cmd_train_toy(&a, stdout),
    }
}

pub fn resolve_gen_spec(a: &GenTasksArgs) -> CliResult<SyntheticSpec> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_config(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(n) = a.n {
        spec.n_tasks = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(r) = a.rejection_fraction {
        spec.rejection_fraction = r;
    }
    if let Some(m) = a.min_candidates {
        spec.min_candidates = m;
    }
    if let Some(m) = a.max_candidates {
        spec.max_candidates = m;
    }
    if let Some(m) = a.max_arity {
        spec.max_arity = m;
    }
    if let Some(c) = &a.category {
        spec.category = c.clone();
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

pub fn cmd_gen_tasks(a: &GenTasksArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let spec = resolve_gen_spec(a)?;
    let tasks: Vec<ReferringTask> = generate_tasks(&spec)?.into_iter().map(|t| t.task).collect();
    emit(a.out.as_deref(), &io::tasks_to_jsonl(&tasks), stdout)
}

pub fn cmd_validate(a: &ValidateArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let text = read_input(&a.responses)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let report = io::validate_line(line, i + 1);
        out.push_str(&serde_json::to_string(&report).expect("report serializes"));
        out.push('\n');
    }
    emit(a.out.as_deref(), &out, stdout)
}

fn load_tasks(path: &Path) -> CliResult<Vec<ReferringTask>> {
    let text = read_input(path)?;
    data(path, io::parse_tasks(&text))
}

pub fn cmd_reward(a: &RewardArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = RewardConfig::new(a.lambda, a.match_tol).map_err(|e| CliError::Usage(e.to_string()))?;
    let tasks = load_tasks(&a.tasks)?;
    let by_id: HashMap<&str, &ReferringTask> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    if by_id.len() != tasks.len() {
        return Err(CliError::Data(format!("{}: duplicate task ids", a.tasks.display())));
    }
    let text = read_input(&a.responses)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = data(&a.responses, io::parse_response_line(line, i + 1))?;
        let id = rec
            .task_id
            .ok_or_else(|| CliError::Data(format!("{}: line {}: missing task_id", a.responses.display(), i + 1)))?;
        let task = by_id.get(id.as_str()).ok_or_else(|| {
            CliError::Data(format!(
                "{}: line {}: unknown task id {id:?}",
                a.responses.display(),
                i + 1
            ))
        })?;
        let r = reward_response(task, &rec.raw_response, &cfg);
        out.push_str(&serde_json::to_string(&RewardLine::new(id, &r)).expect("reward serializes"));
        out.push('\n');
    }
    emit(a.out.as_deref(), &out, stdout)
}

pub fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let grid = match &a.thresholds {
        Some(g) => {
            validate_grid(g).map_err(|e| CliError::Usage(e.to_string()))?;
            g.clone()
        }
        None => default_grid(),
    };
    let tasks = load_tasks(&a.tasks)?;
    let text = read_input(&a.predictions)?;
    let preds = data(&a.predictions, io::parse_predictions(&text))?;
    let report = evaluate(&tasks, &preds, &grid).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(csv) = &a.csv {
        emit(Some(csv), &io::report_to_csv(&report), stdout)?;
    }
    emit(a.out.as_deref(), &io::report_to_json(&report), stdout)
}

pub fn cmd_render_prompt(a: &RenderPromptArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let preamble = match &a.preamble_file {
        Some(p) => read_input(p)?.trim_end().to_string(),
        None => DEFAULT_SYSTEM_PREAMBLE.to_string(),
    };
    let tasks = load_tasks(&a.tasks)?;
    let mut out = String::new();
    for t in &tasks {
        let prompt = render_prompt(t, &preamble).map_err(|e| CliError::Data(format!("task {}: {e}", t.task_id)))?;
        let line = PromptLine {
            v: SCHEMA_VERSION,
            task_id: t.task_id.clone(),
            prompt,
        };
        out.push_str(&serde_json::to_string(&line).expect("prompt serializes"));
        out.push('\n');
    }
    emit(a.out.as_deref(), &out, stdout)
}

pub fn resolve_train_config(a: &TrainToyArgs) -> CliResult<TrainToyConfig> {
    let mut c: TrainToyConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainToyConfig::default(),
    };
    if let Some(s) = a.seed {
        c.spec.seed = s;
        c.grpo.seed = s;
    }
    if let Some(n) = a.iterations {
        c.iterations = n;
    }
    if let Some(n) = a.n_tasks {
        c.spec.n_tasks = n;
    }
    if let Some(n) = a.heldout_tasks {
        c.heldout_tasks = n;
    }
    if let Some(r) = a.rejection_fraction {
        c.spec.rejection_fraction = r;
    }
    if let Some(g) = a.group_size {
        c.grpo.group_size = g;
    }
    if let Some(b) = a.beta {
        c.grpo.kl_beta = b;
    }
    if let Some(e) = a.clip_eps {
        c.grpo.clip_eps = e;
    }
    if let Some(t) = a.temperature {
        c.grpo.temperature = t;
    }
    if let Some(lr) = a.lr {
        c.grpo.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        c.grpo.batch_size = b;
    }
    if let Some(s) = a.inner_steps {
        c.grpo.inner_steps = s;
    }
    if a.kl_ref_over_policy {
        c.grpo.kl_direction = KlDirection::RefOverPolicy;
    }
    let usage = |e: Error| CliError::Usage(e.to_string());
    c.spec.validate().map_err(usage)?;
    c.grpo.validate().map_err(usage)?;
    c.reward.validate().map_err(usage)?;
    if c.spec.n_tasks == 0 || c.heldout_tasks == 0 {
        return Err(CliError::Usage(
            "training and held-out task counts must be positive".into(),
        ));
    }
    Ok(c)
}

pub fn cmd_train_toy(a: &TrainToyArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let c = resolve_train_config(a)?;
    let tasks = generate_tasks(&c.spec)?;
    let heldout_spec = c.heldout_spec();
    let heldout = generate_tasks(&heldout_spec)?;
    let init = ToyPolicyParams::zeros(c.spec.feature_dim());
    let outcome = train(&tasks, &c.spec, &init, &c.grpo, &c.reward, c.iterations)?;
    let report = greedy_report(&outcome.params, &heldout, &heldout_spec)?;

    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let params = ParamsFile {
        v: SCHEMA_VERSION,
        dim: outcome.params.dim(),
        weights: outcome.params.weights.iter().copied().map(sig9).collect(),
    };
    let mut params_json = serde_json::to_string_pretty(&params).expect("params serialize");
    params_json.push('\n');
    emit(Some(&a.out_dir.join("params.json")), &params_json, stdout)?;
    emit(
        Some(&a.out_dir.join("train_log.jsonl")),
        &io::train_log_to_jsonl(&outcome.log),
        stdout,
    )?;
    emit(
        Some(&a.out_dir.join("report.json")),
        &io::report_to_json(&report),
        stdout,
    )?;

    let df1 = report.overall.map(|o| o.df1);
    let summary = format!(
        "iterations={} overall_df1={} rejection_score={}\n",
        c.iterations,
        df1.map_or("null".into(), |v| sig9(v).to_string()),
        report.rejection_score.map_or("null".into(), |v| sig9(v).to_string()),
    );
    emit(None, &summary, stdout)
}
