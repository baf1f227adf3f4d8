//! Command-line front end for the `npp-lab` binary.
//!
//! Tabular output goes to stdout as CSV. Failures print one line to stderr,
//! `npp-lab: error[<kind>]: <message>`, and exit with 2 (usage), 3 (data) or
//! 4 (numeric).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::costmodel::{schedule_cost, CountMode, Preset};
use crate::curriculum::{format_truncated, Lambda, PatchSchedule};
use crate::data::{generate_records, read_dataset, write_dataset, Dataset, SyntheticSpec, TokenGrid};
use crate::error::NppError;
use crate::sampler::{generate, generate_patchwise, CfgSpace, SamplerParams};
use crate::tensor::{Dtype, Float};
use crate::trainer::{checkpoint, evaluate, RunConfig, Trainer};
use crate::transformer::{Model, ModelConfig};

#[derive(Debug, Parser)]
#[command(name = "npp-lab", version, about = "Next-patch-prediction training lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic NPPT dataset.
    GenData(GenDataArgs),
    /// Print the patch schedule and its cost factor.
    Schedule(ScheduleArgs),
    /// Training-compute report for a schedule.
    Cost(CostArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Teacher-forced NLL and accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Sample token grids from a checkpoint.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Synthetic spec: a JSON file, or inline JSON starting with `{`.
    #[arg(long)]
    pub spec: String,
    /// Number of records.
    #[arg(long)]
    pub count: usize,
    /// Index of the first record; disjoint ranges give independent splits.
    #[arg(long, default_value_t = 0)]
    pub first: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurriculumArgs {
    /// Segment scheduling factor, as `p/q` or a decimal.
    #[arg(long, default_value = "1/2")]
    pub lambda: Lambda,
    /// Number of patch levels; sides are 2^(L-1), ..., 2, 1.
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    /// Explicit comma-separated side list ending at 1, e.g. `4,1`; overrides --levels.
    #[arg(long, value_delimiter = ',')]
    pub sides: Option<Vec<usize>>,
}

impl CurriculumArgs {
    fn build(&self, steps: u64) -> CliResult<PatchSchedule> {
        if steps == 0 {
            return Err(CliError::usage("--steps", "must be at least 1"));
        }
        let flag = if self.sides.is_some() { "--sides" } else { "--levels" };
        PatchSchedule::build(steps, self.lambda, self.levels, self.sides.as_deref())
            .map_err(|e| CliError::usage(flag, e))
    }
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Total training steps T.
    #[arg(long)]
    pub steps: u64,
    #[command(flatten)]
    pub curriculum: CurriculumArgs,
    /// Decimal places kept (truncated) in the `cost_factor_truncated` column.
    #[arg(long, default_value_t = 3)]
    pub digits: u32,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Model config JSON file (a bare model config or a run config with a `model` key).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Size preset used when no --config is given: B, L, XL or XXL.
    #[arg(long, default_value = "B")]
    pub preset: Preset,
    /// Vocabulary size for --preset.
    #[arg(long, default_value_t = 16384)]
    pub vocab: usize,
    /// Class count for --preset.
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    /// Token grid as HxW; defaults to the config's grid, or 16x16 for presets.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// Steps in the schedule; the ratio depends on it only through rounding.
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[command(flatten)]
    pub curriculum: CurriculumArgs,
    /// Counting mode: param6wn or full.
    #[arg(long, default_value = "param6wn")]
    pub mode: CountMode,
    /// Count the class condition token in every sequence.
    #[arg(long)]
    pub with_condition: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Training NPPT file; overrides the config's `data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out NPPT file; overrides the config's `eval_data`.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Output directory for metrics.csv and checkpoints; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps instead of the schedule end.
    #[arg(long)]
    pub until: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class label to condition on.
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    pub num: usize,
    /// Keep the k most likely tokens; 0 keeps all.
    #[arg(long, default_value_t = 0)]
    pub top_k: usize,
    /// Nucleus mass.
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Classifier-free guidance scale; 1 disables guidance.
    #[arg(long, default_value_t = 2.0)]
    pub cfg_scale: f64,
    /// Space in which guidance mixes: logits or logprobs.
    #[arg(long, default_value = "logits", value_parser = parse_cfg_space)]
    pub cfg_space: CfgSpace,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decode one prediction per patch of this side instead of token by token.
    #[arg(long)]
    pub patchwise: Option<usize>,
    /// Output NPPT file.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for one PPM render per sample.
    #[arg(long)]
    pub ppm: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("grid sides must be positive".into());
    }
    Ok((h, w))
}

fn parse_cfg_space(s: &str) -> Result<CfgSpace, String> {
    match s {
        "logits" => Ok(CfgSpace::Logits),
        "logprobs" => Ok(CfgSpace::LogProbs),
        _ => Err(format!("expected logits or logprobs, got {s:?}")),
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn usage(flag: &str, message: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            kind: "usage",
            message: format!("{flag}: {message}"),
        }
    }

    /// The single stderr line.
    pub fn line(&self) -> String {
        format!("npp-lab: error[{}]: {}", self.kind, self.message.replace('\n', " "))
    }
}

impl From<NppError> for CliError {
    fn from(e: NppError) -> Self {
        let (code, kind) = match &e {
            NppError::Config(_) | NppError::PatchSpec(_) => (2, "usage"),
            NppError::Numeric(_) => (4, "numeric"),
            _ => (3, "data"),
        };
        CliError {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    NppError::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

/// Runs a parsed command, writing tabular output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Schedule(a) => schedule(a, out),
        Command::Cost(a) => cost(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Sample(a) => sample(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn read_json_arg(value: &str) -> CliResult<String> {
    if value.trim_start().starts_with('{') {
        return Ok(value.to_string());
    }
    std::fs::read_to_string(value).map_err(|e| io_err(Path::new(value), e))
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CliResult {
    let spec: SyntheticSpec =
        serde_json::from_str(&read_json_arg(&a.spec)?).map_err(|e| CliError::usage("--spec", e))?;
    spec.validate().map_err(|e| CliError::usage("--spec", e))?;
    let data = generate_records(&spec, a.first, a.count)?;
    write_dataset(&a.out, &data)?;
    emit(
        out,
        &format!(
            "records,vocab,height,width,num_classes\n{},{},{},{},{}\n",
            data.len(),
            data.vocab(),
            data.height(),
            data.width(),
            data.num_classes()
        ),
    )
}

fn schedule(a: ScheduleArgs, out: &mut dyn Write) -> CliResult {
    let s = a.curriculum.build(a.steps)?;
    let mut text = String::from("level,side,start,end,steps\n");
    for seg in s.segments() {
        text += &format!("{},{},{},{},{}\n", seg.level, seg.side, seg.start, seg.end, seg.steps());
    }
    let exact = s.theoretical_cost_factor();
    let realized = s.realized_cost_factor();
    let decimal = *exact.numer() as f64 / *exact.denom() as f64;
    text += "\ncost_factor_exact,cost_factor_realized,cost_factor,cost_factor_truncated\n";
    text += &format!("{exact},{realized},{decimal},{}\n", format_truncated(exact, a.digits));
    emit(out, &text)
}

fn load_model_config(path: &Path) -> CliResult<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::usage("--config", e))?;
    let model = match value.get("model") {
        Some(m) => m.clone(),
        None => value,
    };
    let config: ModelConfig = serde_json::from_value(model).map_err(|e| CliError::usage("--config", e))?;
    config.validate().map_err(|e| CliError::usage("--config", e))?;
    Ok(config)
}

fn cost(a: CostArgs, out: &mut dyn Write) -> CliResult {
    let config = match &a.config {
        Some(path) => load_model_config(path)?,
        None => a.preset.guess_config(a.vocab, a.grid.unwrap_or((16, 16)), a.classes),
    };
    let grid = a.grid.unwrap_or((config.grid_h, config.grid_w));
    let s = a.curriculum.build(a.steps)?;
    let r = schedule_cost(&config, grid, &s, a.mode, a.with_condition).map_err(|e| match e {
        NppError::PatchSpec(m) => CliError::usage("--grid", m),
        other => other.into(),
    })?;
    let mut text = String::from("side,seq_len,steps,flops\n");
    for seg in &r.segments {
        text += &format!("{},{},{},{}\n", seg.side, seg.seq_len, seg.steps, seg.flops);
    }
    text += "\nmode,with_condition,params,total,baseline,ratio,ratio_exact\n";
    text += &format!(
        "{},{},{},{},{},{:.6},{}\n",
        r.mode,
        r.with_condition,
        config.param_count(),
        r.total,
        r.baseline,
        r.ratio,
        r.exact_ratio
    );
    emit(out, &text)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut config = RunConfig::load(&a.config).map_err(|e| match e {
        NppError::Io { .. } => CliError::from(e),
        other => CliError::usage("--config", other),
    })?;
    if a.data.is_some() {
        config.data = a.data.clone();
    }
    if a.eval_data.is_some() {
        config.eval_data = a.eval_data.clone();
    }
    if a.out.is_some() {
        config.output_dir = a.out.clone();
    }
    let data_path = config
        .data
        .clone()
        .ok_or_else(|| CliError::usage("--data", "no training data given"))?;
    if config.output_dir.is_none() {
        return Err(CliError::usage("--out", "no output directory given"));
    }
    let data = read_dataset(&data_path)?;
    let eval = config.eval_data.as_ref().map(read_dataset).transpose()?;
    match config.dtype {
        Dtype::F32 => train_typed::<f32>(config, &a, &data, eval.as_ref(), out),
        Dtype::F64 => train_typed::<f64>(config, &a, &data, eval.as_ref(), out),
    }
}

fn train_typed<T: Float>(
    config: RunConfig,
    a: &TrainArgs,
    data: &Dataset,
    eval: Option<&Dataset>,
    out: &mut dyn Write,
) -> CliResult {
    let mut trainer = match &a.resume {
        Some(path) => checkpoint::resume::<T>(path, &config)?,
        None => Trainer::<T>::new(config, data.len())?,
    };
    let rows = trainer.run_with(data, eval, a.until, |row| eprintln!("{}", row.to_csv()))?;
    let mut text = String::from("step,train_loss,eval_nll,cum_flops\n");
    let (loss, nll) = rows
        .last()
        .map(|r| {
            (
                format!("{:.6}", r.train_loss),
                r.eval_nll.map(|x| format!("{x:.6}")).unwrap_or_default(),
            )
        })
        .unwrap_or_default();
    text += &format!("{},{loss},{nll},{}\n", trainer.step(), trainer.cum_flops());
    emit(out, &text)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let data = read_dataset(&a.data)?;
    let result = match checkpoint::read_manifest(&a.ckpt)?.dtype {
        Dtype::F32 => evaluate(&checkpoint::load_model::<f32>(&a.ckpt)?, &data)?,
        Dtype::F64 => evaluate(&checkpoint::load_model::<f64>(&a.ckpt)?, &data)?,
    };
    emit(
        out,
        &format!(
            "nll,accuracy,tokens\n{:.6},{:.6},{}\n",
            result.nll, result.accuracy, result.tokens
        ),
    )
}

fn sample(a: SampleArgs, out: &mut dyn Write) -> CliResult {
    let params = SamplerParams {
        temperature: a.temperature,
        top_k: a.top_k,
        top_p: a.top_p,
        cfg_scale: a.cfg_scale,
        cfg_space: a.cfg_space,
        seed: a.seed,
    };
    if !(a.temperature > 0.0) {
        return Err(CliError::usage("--temperature", "must be > 0"));
    }
    if !(a.top_p > 0.0 && a.top_p <= 1.0) {
        return Err(CliError::usage("--top-p", "must be in (0, 1]"));
    }
    if !(a.cfg_scale >= 0.0) {
        return Err(CliError::usage("--cfg-scale", "must be >= 0"));
    }
    let grids = match checkpoint::read_manifest(&a.ckpt)?.dtype {
        Dtype::F32 => sample_typed(&checkpoint::load_model::<f32>(&a.ckpt)?, &a, &params)?,
        Dtype::F64 => sample_typed(&checkpoint::load_model::<f64>(&a.ckpt)?, &a, &params)?,
    };
    let (data, config) = grids;
    write_dataset(&a.out, &data)?;
    if let Some(dir) = &a.ppm {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (i, g) in data.grids().iter().enumerate() {
            let path = dir.join(format!("sample-{i:04}.ppm"));
            std::fs::write(&path, render_ppm(g, config.vocab_size, 8)).map_err(|e| io_err(&path, e))?;
        }
    }
    emit(
        out,
        &format!("samples,class,out\n{},{},{}\n", data.len(), a.class, a.out.display()),
    )
}

fn sample_typed<T: Float>(
    model: &Model<T>,
    a: &SampleArgs,
    params: &SamplerParams,
) -> CliResult<(Dataset, ModelConfig)> {
    let cfg = model.config().clone();
    if a.class >= cfg.num_classes {
        return Err(CliError::usage(
            "--class",
            format!("{} out of range for {} classes", a.class, cfg.num_classes),
        ));
    }
    let grids: Vec<TokenGrid> = (0..a.num)
        .map(|i| match a.patchwise {
            Some(side) => generate_patchwise(model, a.class, params, side, i as u64),
            None => generate(model, a.class, params, i as u64),
        })
        .collect::<crate::Result<_>>()
        .map_err(|e| match e {
            NppError::PatchSpec(m) => CliError::usage("--patchwise", m),
            other => other.into(),
        })?;
    let data = Dataset::new(
        cfg.vocab_size as u32,
        cfg.grid_h,
        cfg.grid_w,
        cfg.num_classes as u32,
        grids,
    )?;
    Ok((data, cfg))
}

/// Binary PPM with one `scale x scale` block per token, coloured by id.
pub fn render_ppm(grid: &TokenGrid, vocab: usize, scale: usize) -> Vec<u8> {
    let (h, w) = (grid.height() * scale, grid.width() * scale);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let colour = |t: u32| -> [u8; 3] {
        let x = (t as f64 + 0.5) / vocab.max(1) as f64;
        let hue = (x * 6.0) % 6.0;
        let c = (hue.fract() * 255.0) as u8;
        match hue as u32 {
            0 => [255, c, 0],
            1 => [255 - c, 255, 0],
            2 => [0, 255, c],
            3 => [0, 255 - c, 255],
            4 => [c, 0, 255],
            _ => [255, 0, 255 - c],
        }
    };
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&colour(grid.at(y / scale, x / scale)));
        }
    }
    out
}
