//! The `incaudio` command line.
//!
//! Exit status 2 means a usage error. Anything that fails validation or I/O
//! exits 1 with a single `error[class]: message` line on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{load_tasks, write_tasks, Overrides, RunConfig, RunMode};
use crate::data::{read_wav, synth_dataset, Dataset, FeatureSource, JointDataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::features::{write_feature_file, MelExtractor, N_MELS};
use crate::metrics::F1Average;
use crate::model::Checkpoint;
use crate::report::{render_table, MetricsReport, ReportFormat};
use crate::task::TaskSpec;
use crate::train::{run_incremental_sequence, train_joint_baseline, LrSchedule, PlanStep, SequencePlan};

pub const THREADS_ENV: &str = "INCAUDIO_THREADS";

#[derive(Debug, Parser)]
#[command(name = "incaudio", version, about = "Incremental scene classification and audio tagging")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Log-mel feature extraction.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a sequence (or the joint baseline) from a run configuration.
    Train(TrainArgs),
    /// Recompute a report from a checkpoint.
    Eval(EvalArgs),
    /// Report rendering.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Debug, Subcommand)]
enum FeaturesCmd {
    /// One LMEL file per WAV file of the input directory (or single file).
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Required sample rate of the inputs.
        #[arg(long)]
        sr: u32,
    },
}

#[derive(Debug, Subcommand)]
enum DataCmd {
    /// Generate a seeded synthetic scene/event corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Class count of each scene task, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    scenes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    events: usize,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    eval_per_class: usize,
    #[arg(long, default_value_t = 0.34)]
    segment_seconds: f64,
    #[arg(long, default_value_t = 16_000)]
    sr: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    no_kd: bool,
    #[arg(long)]
    no_indl: bool,
    /// Use this distillation weight instead of the adaptive one.
    #[arg(long)]
    lambda_fixed: Option<f64>,
    #[arg(long, value_enum)]
    lr_schedule: Option<ScheduleArg>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AverageArg {
    Micro,
    Macro,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest(s) holding the eval rows of the requested tasks.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Task ids in report order, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    tasks: Vec<u32>,
    /// Task specifications; defaults to `tasks.json` beside the first manifest.
    #[arg(long)]
    task_file: Option<PathBuf>,
    #[arg(long, default_value_t = 44_100)]
    sr: u32,
    #[arg(long, default_value_t = 10.0)]
    segment_seconds: f64,
    #[arg(long, value_enum, default_value = "micro")]
    f1_average: AverageArg,
    /// Write the structured report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Render one or more step reports as a table.
    Render {
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error[{}]: {e}", e.class());
        return 1;
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Configuration(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let wd = cli.workdir;
    match cli.command {
        Command::Features(FeaturesCmd::Extract { input, out, sr }) => {
            extract(&wd.join(input), &wd.join(out), sr)
        }
        Command::Data(DataCmd::Synth(a)) => {
            let spec = SynthSpec {
                scene_tasks: a.scenes,
                event_classes: a.events,
                train_per_class: a.train_per_class,
                eval_per_class: a.eval_per_class,
                segment_seconds: a.segment_seconds,
                sample_rate_hz: a.sr,
                seed: a.seed,
                ..SynthSpec::default()
            };
            let out = wd.join(a.out);
            let res = synth_dataset(&spec, &out)?;
            write_record(&out.join("run.toml"), &spec)?;
            println!(
                "{} tasks, {} frames per example -> {}",
                res.tasks.len(),
                res.n_frames,
                out.display()
            );
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(&wd.join(&a.config))?;
            cfg.apply(&Overrides {
                no_kd: a.no_kd,
                no_indl: a.no_indl,
                lambda_fixed: a.lambda_fixed,
                lr_schedule: a.lr_schedule.map(|s| match s {
                    ScheduleArg::Cosine => LrSchedule::Cosine,
                    ScheduleArg::Constant => LrSchedule::Constant,
                }),
                out_dir: a.out_dir,
            });
            cfg.validate()?;
            train(&cfg, &wd)
        }
        Command::Eval(a) => eval(a, &wd),
        Command::Report(ReportCmd::Render { input, format, out }) => {
            let reports = input
                .iter()
                .map(|p| MetricsReport::read(&wd.join(p)))
                .collect::<Result<Vec<_>>>()?;
            let text = match format {
                FormatArg::Text => render_table(&reports),
                FormatArg::Json => reports.iter().map(|r| r.to_json()).collect(),
            };
            match out {
                Some(p) => {
                    let p = wd.join(p);
                    fs::write(&p, text).map_err(|e| Error::io(&p, e))
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn write_record<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).expect("records serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn extract(input: &Path, out: &Path, sr: u32) -> Result<()> {
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Contract(format!("no WAV files in {}", input.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let extractor = MelExtractor::new(sr, N_MELS)?;
    for f in &files {
        let (samples, rate) = read_wav(f)?;
        if rate != sr {
            return Err(Error::format(f, format!("sample rate {rate} Hz, expected {sr} Hz")));
        }
        let fm = extractor.extract(&samples)?;
        let stem = f.file_stem().expect("wav files have names");
        write_feature_file(&fm, &out.join(stem).with_extension("lmel"))?;
    }
    #[derive(Serialize)]
    struct Record {
        sample_rate_hz: u32,
        n_mels: usize,
        inputs: Vec<String>,
    }
    write_record(
        &out.join("run.toml"),
        &Record {
            sample_rate_hz: sr,
            n_mels: N_MELS,
            inputs: files.iter().map(|f| f.display().to_string()).collect(),
        },
    )?;
    println!("{} feature files -> {}", files.len(), out.display());
    Ok(())
}

fn task_by_id(tasks: &[TaskSpec], id: u32) -> Result<TaskSpec> {
    tasks
        .iter()
        .find(|t| t.id == id)
        .cloned()
        .ok_or_else(|| Error::Configuration(format!("task {id} is not defined in the task file")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates the configured synthetic corpus (if any) and loads the task
/// list of a run.
pub fn prepare_data(cfg: &RunConfig, wd: &Path) -> Result<Vec<TaskSpec>> {
    if let Some(spec) = &cfg.data.synth {
        let dir = cfg.data_dir(wd);
        let made = synth_dataset(spec, &dir)?;
        // Keep the configured file names even if they differ from the defaults.
        let rename = [
            (made.train_manifest, cfg.train_manifest(wd)),
            (made.eval_manifest, cfg.eval_manifest(wd)),
        ];
        for (from, to) in rename {
            if from != to {
                fs::rename(&from, &to).map_err(|e| Error::io(&from, e))?;
            }
        }
        if dir.join("tasks.json") != cfg.tasks_path(wd) {
            write_tasks(&cfg.tasks_path(wd), &made.tasks)?;
        }
    }
    load_tasks(&cfg.tasks_path(wd))
}

/// Loads the train or eval split of `task` as the run configures it.
pub fn load_split(cfg: &RunConfig, wd: &Path, task: &TaskSpec, split: Split, source: &mut FeatureSource) -> Result<Dataset> {
    let manifest = if split == Split::Train {
        cfg.train_manifest(wd)
    } else {
        cfg.eval_manifest(wd)
    };
    Dataset::load(&manifest, task, split, cfg.input, source)
}

/// The incremental plan of an already prepared run.
pub fn sequence_plan(cfg: &RunConfig, wd: &Path, tasks: &[TaskSpec]) -> Result<SequencePlan> {
    let mut source = FeatureSource::new(cfg.data.sample_rate_hz, cfg.data.segment_seconds);
    let mut steps = Vec::with_capacity(cfg.steps.len());
    for s in &cfg.steps {
        let task = task_by_id(tasks, s.task)?;
        steps.push(PlanStep {
            train: load_split(cfg, wd, &task, Split::Train, &mut source)?,
            eval: load_split(cfg, wd, &task, Split::Eval, &mut source)?,
            config: s.step_config(&cfg.loss),
            task,
        });
    }
    Ok(SequencePlan {
        input: cfg.input,
        model: cfg.model.clone(),
        model_seed: cfg.model_seed,
        f1_average: cfg.f1_average,
        steps,
    })
}

fn train(cfg: &RunConfig, wd: &Path) -> Result<()> {
    let out = cfg.out_dir(wd);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join("resolved_config.toml"), &cfg.to_toml())?;
    let tasks = prepare_data(cfg, wd)?;

    let reports = match cfg.mode {
        RunMode::Incremental => {
            let plan = sequence_plan(cfg, wd, &tasks)?;
            run_incremental_sequence::<f32>(&plan, Some(&out))?
                .into_iter()
                .map(|o| o.report)
                .collect::<Vec<_>>()
        }
        RunMode::Joint => {
            let scenes = task_by_id(&tasks, cfg.steps[0].task)?;
            let events = task_by_id(&tasks, cfg.steps[1].task)?;
            let mut source = FeatureSource::new(cfg.data.sample_rate_hz, cfg.data.segment_seconds);
            let mut load = |task: &TaskSpec, split| load_split(cfg, wd, task, split, &mut source);
            let train = JointDataset::align(load(&scenes, Split::Train)?, load(&events, Split::Train)?)?;
            let eval = JointDataset::align(load(&scenes, Split::Eval)?, load(&events, Split::Eval)?)?;
            let step = cfg.steps[0].step_config(&cfg.loss);
            let res = train_joint_baseline::<f32>(cfg.input, cfg.model.clone(), cfg.model_seed, &train, &eval, &step)?;
            let ckpt = Checkpoint {
                step: 0,
                learner: res.learner,
                history: Vec::new(),
            };
            ckpt.write(&out.join("joint.ckpt"))?;
            write_text(&out.join("joint.report.json"), &res.report.to_json())?;
            write_text(&out.join("joint.log.tsv"), &res.log.to_tsv())?;
            vec![res.report]
        }
    };
    let table = render_table(&reports);
    write_text(&out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn eval(a: EvalArgs, wd: &Path) -> Result<()> {
    let ckpt = Checkpoint::<f32>::read(&wd.join(&a.checkpoint))?;
    let manifests: Vec<PathBuf> = a.manifest.iter().map(|m| wd.join(m)).collect();
    let task_file = match &a.task_file {
        Some(p) => wd.join(p),
        None => manifests[0]
            .parent()
            .unwrap_or(Path::new("."))
            .join("tasks.json"),
    };
    let tasks = load_tasks(&task_file)?;
    let input = ckpt.learner.input_spec();
    let mut source = FeatureSource::new(a.sr, a.segment_seconds);
    let mut sets = Vec::with_capacity(a.tasks.len());
    for &id in &a.tasks {
        let task = task_by_id(&tasks, id)?;
        let mut found = None;
        for m in &manifests {
            let d = Dataset::load(m, &task, Split::Eval, input, &mut source)?;
            if !d.is_empty() {
                found = Some(d);
                break;
            }
        }
        sets.push(found.ok_or_else(|| {
            Error::Contract(format!("no eval rows for task {id} in the given manifests"))
        })?);
    }
    let refs: Vec<&Dataset> = sets.iter().collect();
    let average = match a.f1_average {
        AverageArg::Micro => F1Average::Micro,
        AverageArg::Macro => F1Average::Macro,
    };
    let mut history = ckpt.history.clone();
    let report = evaluate(&ckpt.learner, ckpt.step, &refs, &mut history, average)?;
    if let Some(p) = &a.out {
        let p = wd.join(p);
        report.emit(ReportFormat::Json, &p)?;
        #[derive(Serialize)]
        struct Record<'a> {
            checkpoint: &'a Path,
            manifests: &'a [PathBuf],
            tasks: &'a [u32],
            sample_rate_hz: u32,
            segment_seconds: f64,
        }
        write_record(
            &p.with_extension("run.toml"),
            &Record {
                checkpoint: &a.checkpoint,
                manifests: &a.manifest,
                tasks: &a.tasks,
                sample_rate_hz: a.sr,
                segment_seconds: a.segment_seconds,
            },
        )?;
    }
    print!("{}", render_table(std::slice::from_ref(&report)));
    Ok(())
}
