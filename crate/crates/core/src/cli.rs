//! Command-line entry point. Exit codes: 0 success, 1 input or configuration
//! error, 2 failed check.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::analysis::{
    ingest_table, pareto_frontier, pareto_points, shipped_table, slope_table, write_points_csv, write_report,
    write_slope_csv, CostAxis, Observation, QualityAxis,
};
use crate::config::{Family, ModelConfig};
use crate::cost::{count_flops, DEFAULT_SEQ_LEN};
use crate::error::{Error, Result};
use crate::harness::{
    finetune, load_run, pretrain, read_records, run_ladder, save_run, Corpus, FinetuneOptions, PretrainOptions,
    ResultsSink, RunOutputs, RunStatus,
};
use crate::ladders::{desk_ladder, named_config, protocol_ladder, standard_ladder, LadderEntry, Protocol};
use crate::model::{gradcheck, tiny_config, GradcheckOptions, Model};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ARCHSCALE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "archscale-out";
const RESULTS_FILE: &str = "results.jsonl";
/// Documents in the generated corpus when no `--corpus` is given.
pub const DEFAULT_CORPUS_DOCS: usize = 20_000;

#[derive(Parser, Debug)]
#[command(name = "archscale", version, about = "Architecture scaling toolkit")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory when a subcommand's --out is omitted [env: ARCHSCALE_OUT_DIR].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and FLOP counts for one configuration.
    Count(CountArgs),
    /// Print a scaling ladder as key-value configurations.
    Ladder(LadderArgs),
    /// Span-corruption pretraining of one model or a whole ladder.
    Pretrain(PretrainArgs),
    /// Finetune a pretrained checkpoint on the synthetic tasks.
    Finetune(FinetuneArgs),
    /// Fit slopes for every family.
    Fit(FitArgs),
    /// Extract a Pareto frontier.
    Pareto(ParetoArgs),
    /// Finite-difference gradient check.
    Gradcheck(GradcheckArgs),
    /// Markdown report with scatter data and an SVG plot.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ModelSel {
    #[arg(long)]
    family: Option<String>,
    /// tiny, small, base, large, xl or desk-tiny, desk-small, desk-base.
    #[arg(long)]
    size: Option<String>,
    /// Key-value configuration file; overrides --family/--size.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSel {
    fn resolve(&self, default_size: &str) -> Result<(ModelConfig, String)> {
        if let Some(p) = &self.config {
            let c = ModelConfig::from_kv(&fs::read_to_string(p)?)?;
            let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("custom").to_string();
            return Ok((c, label));
        }
        let family: Family = self.family.as_deref().ok_or_else(|| Error::config("--family or --config is required"))?.parse()?;
        let size = self.size.as_deref().unwrap_or(default_size).to_ascii_lowercase();
        Ok((named_config(family, &size)?, size))
    }
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelSel,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    n_enc: usize,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    n_dec: usize,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
    /// Also write per-component CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LadderArgs {
    #[arg(long)]
    family: String,
    #[arg(long, default_value = "uniform")]
    protocol: String,
    /// Rungs for depth or width protocols.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Base size for depth or width protocols.
    #[arg(long, default_value = "small")]
    base: String,
    /// Desk-scale ladder.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = PretrainOptions::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = PretrainOptions::default().seq_len)]
    seq_len: usize,
    #[arg(long, default_value_t = PretrainOptions::default().lr_scale)]
    lr: f64,
    #[arg(long, default_value_t = PretrainOptions::default().warmup)]
    warmup: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    model: ModelSel,
    #[command(flatten)]
    train: TrainFlags,
    /// UTF-8 text, one document per line; a generated corpus otherwise.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run every rung of the family's desk ladder.
    #[arg(long)]
    ladder: bool,
    /// Seeds for ladder runs, comma separated; defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Concurrent ladder runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Finetuning steps after each ladder run; 0 skips finetuning.
    #[arg(long, default_value_t = 0)]
    finetune_steps: u64,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = FinetuneOptions::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = FinetuneOptions::default().lr_scale)]
    lr: f64,
    #[arg(long, default_value_t = FinetuneOptions::default().payload_len)]
    payload_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InputSel {
    /// JSON Lines run records, or a CSV result table.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Use the bundled published result table.
    #[arg(long)]
    published: bool,
}

impl InputSel {
    fn load(&self) -> Result<Vec<Observation>> {
        match (&self.input, self.published) {
            (Some(_), true) => Err(Error::config("--in and --published are exclusive")),
            (None, true) => Ok(shipped_table()),
            (None, false) => Err(Error::config("--in or --published is required")),
            (Some(p), false) if p.extension().map_or(false, |e| e.eq_ignore_ascii_case("csv")) => {
                ingest_table(File::open(p)?)
            }
            (Some(p), false) => Ok(read_records(p)?.iter().map(Observation::from).collect()),
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: InputSel,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ParetoArgs {
    #[command(flatten)]
    input: InputSel,
    #[arg(long, default_value = "flops")]
    cost: String,
    #[arg(long, default_value = "U")]
    quality: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    family: String,
    /// Check the small finite-difference configuration (the default).
    #[arg(long)]
    tiny: bool,
    /// Check a named size instead; slow beyond desk sizes.
    #[arg(long, conflicts_with = "tiny")]
    size: Option<String>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = GradcheckOptions::default().tolerance)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    input: InputSel,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Env {
    seed: u64,
    out_dir: PathBuf,
}

impl Env {
    fn out_or(&self, out: &Option<PathBuf>, name: &str) -> PathBuf {
        out.clone().unwrap_or_else(|| self.out_dir.join(name))
    }
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_corpus(path: &Option<PathBuf>, seed: u64) -> Result<Corpus> {
    match path {
        Some(p) => Corpus::from_file(p),
        None => Ok(Corpus::markov(DEFAULT_CORPUS_DOCS, seed)),
    }
}

fn human(n: f64) -> String {
    match n {
        n if n >= 1e9 => format!("{:.2}B", n / 1e9),
        n if n >= 1e6 => format!("{:.1}M", n / 1e6),
        n if n >= 1e3 => format!("{:.1}K", n / 1e3),
        n => format!("{}", n),
    }
}

fn cmd_count(a: &CountArgs, out: &mut dyn Write) -> Result<Outcome> {
    let (config, label) = a.model.resolve("base")?;
    let r = count_flops(&config, a.n_enc, a.n_dec)?;
    if a.json {
        writeln!(out, "{}", r.to_json()?)?;
    } else {
        writeln!(out, "family = {}\nsize = {}", config.family, label)?;
        writeln!(out, "params = {} ({})", r.params_total, human(r.params_total as f64))?;
        writeln!(out, "flops_forward = {} ({}) at n_enc = {}, n_dec = {}", r.flops_forward, human(r.flops_forward as f64), r.n_enc, r.n_dec)?;
        for (c, p) in &r.params_by_component {
            writeln!(out, "params.{} = {}", c, p)?;
        }
        for (c, f) in &r.flops_by_component {
            writeln!(out, "flops.{} = {}", c, f)?;
        }
    }
    if let Some(p) = &a.csv {
        r.write_csv(create(p)?)?;
    }
    Ok(Outcome::Ok)
}

fn ladder_entries(a: &LadderArgs) -> Result<Vec<LadderEntry>> {
    let family: Family = a.family.parse()?;
    let protocol: Protocol = a.protocol.parse()?;
    match (protocol, a.desk) {
        (Protocol::Uniform, true) => desk_ladder(family),
        (Protocol::Uniform, false) => standard_ladder(family),
        (p, _) => protocol_ladder(&named_config(family, &a.base)?, p, a.steps),
    }
}

fn cmd_ladder(a: &LadderArgs, out: &mut dyn Write) -> Result<Outcome> {
    let mut text = String::new();
    for e in ladder_entries(a)? {
        let params = count_flops(&e.config, DEFAULT_SEQ_LEN, DEFAULT_SEQ_LEN)?.params_total;
        text.push_str(&format!("[{}]\n# params = {}\n{}\n", e.label, params, e.config.to_kv()));
    }
    match &a.out {
        Some(p) => create(p)?.write_all(text.as_bytes())?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(Outcome::Ok)
}

fn pretrain_options(t: &TrainFlags, seed: u64) -> PretrainOptions {
    PretrainOptions {
        steps: t.steps,
        batch: t.batch,
        seq_len: t.seq_len,
        lr_scale: t.lr,
        warmup: t.warmup,
        seed,
        ..PretrainOptions::default()
    }
}

fn cmd_pretrain(a: &PretrainArgs, env: &Env, out: &mut dyn Write) -> Result<Outcome> {
    let dir = a.out.clone().unwrap_or_else(|| env.out_dir.clone());
    fs::create_dir_all(&dir)?;
    let corpus = load_corpus(&a.corpus, env.seed)?;
    let sink = ResultsSink::open(&dir.join(RESULTS_FILE))?;
    if a.ladder {
        let family: Family = a.model.family.as_deref().ok_or_else(|| Error::config("--ladder needs --family"))?.parse()?;
        let seeds = if a.seeds.is_empty() { vec![env.seed] } else { a.seeds.clone() };
        let pre = pretrain_options(&a.train, env.seed);
        let fine = FinetuneOptions { steps: a.finetune_steps, ..FinetuneOptions::default() };
        let outputs = RunOutputs { sink: Some(&sink), checkpoint_dir: Some(dir.clone()) };
        let entries = desk_ladder(family)?;
        let records = run_ladder(&entries, &seeds, &corpus, &pre, &fine, a.jobs, &outputs)?;
        for r in &records {
            writeln!(out, "{}\t{:?}\tU = {}", r.run_id, r.status, r.upstream_neg_log_ppl.map_or("-".into(), |u| format!("{:.4}", u)))?;
        }
        return Ok(Outcome::Ok);
    }
    let (config, label) = a.model.resolve("desk-tiny")?;
    let mut model = Model::<f32>::build(&config, env.seed)?;
    let rec = pretrain(&mut model, &corpus, &pretrain_options(&a.train, env.seed), &label)?;
    let ckpt = dir.join(format!("{}.ckpt", rec.run_id));
    save_run(&ckpt, &model, &rec)?;
    sink.append(&rec)?;
    info!("checkpoint written to {}", ckpt.display());
    writeln!(out, "{}", ckpt.display())?;
    Ok(Outcome::Ok)
}

fn cmd_finetune(a: &FinetuneArgs, env: &Env, out: &mut dyn Write) -> Result<Outcome> {
    let (mut model, rec) = load_run::<f32>(&a.ckpt)?;
    let opts = FinetuneOptions {
        steps: a.steps,
        batch: a.batch,
        lr_scale: a.lr,
        payload_len: a.payload_len,
        seed: env.seed,
        ..FinetuneOptions::default()
    };
    let rec = finetune(&mut model, &opts, rec)?;
    let dir = a.out.clone().unwrap_or_else(|| env.out_dir.clone());
    let sink = ResultsSink::open(&dir.join(RESULTS_FILE))?;
    sink.append(&rec)?;
    save_run(&dir.join(format!("{}.finetuned.ckpt", rec.run_id)), &model, &rec)?;
    writeln!(out, "{}", rec.to_json_line()?)?;
    Ok(if rec.status == RunStatus::Failed { Outcome::CheckFailed } else { Outcome::Ok })
}

fn cmd_fit(a: &FitArgs, env: &Env, out: &mut dyn Write) -> Result<Outcome> {
    let rows = slope_table(&a.input.load()?);
    let path = env.out_or(&a.out, "slopes.csv");
    write_slope_csv(&rows, create(&path)?)?;
    write_slope_csv(&rows, &mut *out)?;
    info!("slopes written to {}", path.display());
    Ok(Outcome::Ok)
}

fn cmd_pareto(a: &ParetoArgs, env: &Env, out: &mut dyn Write) -> Result<Outcome> {
    let cost: CostAxis = a.cost.parse()?;
    let quality: QualityAxis = a.quality.parse()?;
    let points = pareto_points(&a.input.load()?, cost, quality);
    if points.is_empty() {
        return Err(Error::Input("no observations carry the requested quality".into()));
    }
    let front = pareto_frontier(&points);
    let path = env.out_or(&a.out, "frontier.csv");
    write_points_csv(&front, create(&path)?)?;
    write_points_csv(&front, &mut *out)?;
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(a: &GradcheckArgs, env: &Env, out: &mut dyn Write) -> Result<Outcome> {
    let family: Family = a.family.parse()?;
    let config = match &a.size {
        Some(s) => named_config(family, s)?,
        None => tiny_config(family),
    };
    let mut ok = true;
    for seed in env.seed..env.seed + a.seeds.max(1) {
        let opts = GradcheckOptions { seed, tolerance: a.tolerance, ..GradcheckOptions::default() };
        let r = gradcheck(&config, &opts)?;
        ok &= r.passed;
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(if ok { Outcome::Ok } else { Outcome::CheckFailed })
}

fn cmd_report(a: &ReportArgs, env: &Env, out: &mut dyn Write) -> Result<Outcome> {
    let files = write_report(&a.input.load()?, &env.out_or(&a.out, "report.md"))?;
    for p in [&files.markdown, &files.scatter_csv, &files.scatter_svg] {
        writeln!(out, "{}", p.display())?;
    }
    Ok(Outcome::Ok)
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// results to `out` and diagnostics to stderr. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let env = Env { seed: cli.seed, out_dir };
    let result = match &cli.command {
        Command::Count(a) => cmd_count(a, out),
        Command::Ladder(a) => cmd_ladder(a, out),
        Command::Pretrain(a) => cmd_pretrain(a, &env, out),
        Command::Finetune(a) => cmd_finetune(a, &env, out),
        Command::Fit(a) => cmd_fit(a, &env, out),
        Command::Pareto(a) => cmd_pareto(a, &env, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, &env, out),
        Command::Report(a) => cmd_report(a, &env, out),
    };
    match result {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::CheckFailed) => 2,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}

/// Log level implied by repeated `-v` flags, for binaries that install a logger.
pub fn verbosity<I, T>(args: I) -> log::LevelFilter
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let n = args
        .into_iter()
        .map(Into::into)
        .filter_map(|a| a.into_string().ok())
        .map(|a| match a.as_str() {
            "--verbose" => 1,
            s if s.starts_with('-') && !s.starts_with("--") && s[1..].chars().all(|c| c == 'v') => s.len() - 1,
            _ => 0,
        })
        .sum::<usize>();
    match n {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    }
}
