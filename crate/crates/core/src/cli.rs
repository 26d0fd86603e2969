//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus_dir::{read_corpus, write_corpus};
use crate::data::{generate_corpus, SessionCorpus};
use crate::error::{Error, Result};
use crate::experiment::{
    cross_validate_with, fine_tune_phase, initial_phase, phase_name, unit_images, CvReport, CvTiming,
    RepeatRecord, SplitMode,
};
use crate::network::{FreezeMode, LayerKind};
use crate::optim::predict;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "incft", version, about = "Incremental fine-tuning experiments on synthetic session data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and write it as PGM files plus a manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh network on the given units.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one fine-tune phase on top of a checkpoint.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint to continue from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// `conv`, `all-but-last` or `none`; overrides the configuration.
        #[arg(long, value_parser = parse_freeze)]
        freeze: Option<FreezeMode>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the accuracy of a checkpoint on the given units.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated vanilla → FT1 → FT2 experiment.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory written by gen-data; generated in memory when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// `intra` or `inter`; overrides the configuration.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SplitMode>,
        /// `conv`, `all-but-last` or `none`; overrides the configuration.
        #[arg(long, value_parser = parse_freeze)]
        freeze: Option<FreezeMode>,
        /// Results JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Save every phase's checkpoint as `repeat<r>_<phase>.sfck` here.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Print the structure and metadata of a checkpoint.
    InspectCheckpoint {
        path: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the fast profile when no configuration file is given; its
    /// schedule follows `--mode`.
    #[arg(long, conflicts_with = "config")]
    pub fast: bool,
    /// Overrides the corpus seed for gen-data and the run seed elsewhere.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Corpus directory written by gen-data; generated in memory when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Unit ids: sessions in inter mode, rounds in intra mode. `1,2` or `1-4`.
    #[arg(long)]
    pub units: Option<String>,
    /// `intra` or `inter`; overrides the configuration.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SplitMode>,
    /// Session whose rounds are the units in intra mode.
    #[arg(long)]
    pub session: Option<u32>,
}

fn parse_mode(s: &str) -> std::result::Result<SplitMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_freeze(s: &str) -> std::result::Result<FreezeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `1,2,5` and ranges like `1-4`, keeping the given order.
pub fn parse_unit_list(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::InvalidArgument(format!("bad unit list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u32 = a.trim().parse().map_err(|_| bad())?;
                let b: u32 = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(err: &Error) -> u8 {
    if err.is_usage() {
        2
    } else {
        1
    }
}

/// `mode` picks the fast-profile schedule; it defaults to inter-session.
fn load_config(args: &ConfigArgs, mode: Option<SplitMode>) -> Result<RunConfig> {
    match &args.config {
        Some(path) => RunConfig::load(path),
        None if args.fast => Ok(RunConfig::fast_profile(mode.unwrap_or(SplitMode::InterSession))),
        None => Ok(RunConfig::default()),
    }
}

fn load_corpus(dir: Option<&Path>, config: &RunConfig) -> Result<SessionCorpus> {
    match dir {
        Some(dir) => Ok(read_corpus(dir)?.0),
        None => generate_corpus(&config.corpus),
    }
}

struct Selection {
    corpus: SessionCorpus,
    mode: SplitMode,
    units: Vec<u32>,
    session: u32,
}

fn select(data: &DataArgs, config: &RunConfig) -> Result<Selection> {
    let units = match &data.units {
        Some(list) => parse_unit_list(list)?,
        None => return Err(Error::InvalidArgument("--units is required".into())),
    };
    let corpus = load_corpus(data.corpus.as_deref(), config)?;
    Ok(Selection {
        corpus,
        mode: data.mode.unwrap_or(config.experiment.mode),
        units,
        session: data.session.unwrap_or(config.experiment.intra_session),
    })
}

impl Selection {
    fn images(&self) -> Result<Vec<&crate::data::LabeledImage>> {
        unit_images(&self.corpus, self.mode, self.session, &self.units)
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData { config, out: dir } => {
            let mut run_config = load_config(&config, None)?;
            if let Some(seed) = config.seed {
                run_config.corpus.seed = seed;
            }
            let corpus = generate_corpus(&run_config.corpus)?;
            let manifest = write_corpus(&corpus, Some(&run_config.corpus), &dir)?;
            writeln!(
                out,
                "wrote {} images ({} sessions × {} rounds) to {}",
                manifest.total_images,
                manifest.sessions,
                manifest.rounds_per_session,
                dir.display()
            )?;
            writeln!(out, "digest {}", manifest.digest)?;
        }
        Command::Train { config, data, out: path } => {
            let run_config = load_config(&config, data.mode)?;
            let seed = config.seed.unwrap_or(run_config.experiment.seed);
            let sel = select(&data, &run_config)?;
            let images = sel.images()?;
            let (h, w) = sel.corpus.resolution();
            let (spec, params, trace) = initial_phase(
                &run_config.experiment,
                [1, h, w],
                crate::data::CLASS_COUNT,
                seed,
                &images,
            )?;
            for e in &trace {
                writeln!(out, "epoch {:>3}  loss {:.4}  train acc {:.4}", e.epoch, e.mean_loss, e.accuracy)?;
            }
            Checkpoint::new(spec, params, 0).save(&path)?;
            writeln!(out, "saved {}", path.display())?;
        }
        Command::Finetune {
            config,
            data,
            checkpoint,
            freeze,
            out: path,
        } => {
            let mut run_config = load_config(&config, data.mode)?;
            if let Some(f) = freeze {
                run_config.experiment.freeze_mode = f;
            }
            let seed = config.seed.unwrap_or(run_config.experiment.seed);
            let sel = select(&data, &run_config)?;
            let mut ck = Checkpoint::load(&checkpoint)?;
            check_input(&ck, &sel.corpus)?;
            let images = sel.images()?;
            let phase = ck.phase.checked_add(1).ok_or_else(|| {
                Error::InvalidArgument("checkpoint phase counter is exhausted".into())
            })?;
            let trace = fine_tune_phase(
                &run_config.experiment,
                &ck.spec,
                &mut ck.params,
                seed,
                phase as usize,
                &images,
            )?;
            for e in &trace {
                writeln!(out, "epoch {:>3}  loss {:.4}  train acc {:.4}", e.epoch, e.mean_loss, e.accuracy)?;
            }
            ck.phase = phase;
            ck.optimizer = None;
            ck.save(&path)?;
            writeln!(out, "saved {} ({})", path.display(), phase_name(phase as usize))?;
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            out: json_path,
        } => {
            let run_config = load_config(&config, data.mode)?;
            let sel = select(&data, &run_config)?;
            let ck = Checkpoint::load(&checkpoint)?;
            check_input(&ck, &sel.corpus)?;
            let images = sel.images()?;
            let predicted = predict(&ck.spec, &ck.params, &images)?;
            let correct = predicted
                .iter()
                .zip(&images)
                .filter(|(p, img)| **p == img.label.id())
                .count();
            let report = EvalReport {
                accuracy: correct as f64 / images.len() as f64,
                correct,
                images: images.len(),
                mode: sel.mode,
                units: sel.units.clone(),
            };
            writeln!(
                out,
                "accuracy {:.4} ({:.2}%) on {} images",
                report.accuracy,
                report.accuracy * 100.0,
                report.images
            )?;
            let json = serde_json::to_string(&report)?;
            writeln!(out, "{json}")?;
            if let Some(p) = json_path {
                std::fs::write(&p, json + "\n").map_err(|e| Error::file(&p, e))?;
            }
        }
        Command::Experiment {
            config,
            corpus,
            mode,
            freeze,
            out: path,
            checkpoints,
        } => {
            let mut run_config = load_config(&config, mode)?;
            if let Some(seed) = config.seed {
                run_config.experiment.seed = seed;
            }
            if let Some(m) = mode {
                run_config.experiment.mode = m;
            }
            if let Some(f) = freeze {
                run_config.experiment.freeze_mode = f;
            }
            let corpus_data = load_corpus(corpus.as_deref(), &run_config)?;
            if let Some(dir) = &checkpoints {
                std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            }
            let results = run_experiment(&run_config, &corpus_data, checkpoints.as_deref(), out)?;
            let text = serde_json::to_string_pretty(&results)?;
            std::fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e))?;
            write_table(&results.report, out)?;
            writeln!(out, "results written to {}", path.display())?;
        }
        Command::InspectCheckpoint { path } => {
            let ck = Checkpoint::load(&path)?;
            let [c, h, w] = ck.spec.input_shape();
            writeln!(out, "checkpoint {} (CRC ok)", path.display())?;
            writeln!(out, "phase {} ({})", ck.phase, phase_name(ck.phase as usize))?;
            writeln!(out, "input {c}×{h}×{w}, {} classes", ck.spec.class_count())?;
            writeln!(out, "layers:")?;
            for layer in ck.spec.layers() {
                let detail = match layer.kind {
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    } => format!("conv2d {in_channels}→{out_channels} k{kernel} s{stride} p{padding}"),
                    LayerKind::Relu => "relu".into(),
                    LayerKind::MaxPool2d { window, stride } => format!("maxpool {window}×{window} s{stride}"),
                    LayerKind::Flatten => "flatten".into(),
                    LayerKind::Dense {
                        in_features,
                        out_features,
                    } => format!("dense {in_features}→{out_features}"),
                };
                writeln!(out, "  {:<12} {detail}", layer.name)?;
            }
            writeln!(out, "tensors:")?;
            for p in ck.params.iter() {
                writeln!(
                    out,
                    "  {:<16} {:<18} {}",
                    p.name,
                    format!("{:?}", p.tensor.shape()),
                    if p.trainable { "trainable" } else { "frozen" }
                )?;
            }
            match &ck.optimizer {
                Some(s) => writeln!(out, "optimizer: adam, step {}, lr {}", s.t, s.lr)?,
                None => writeln!(out, "optimizer: none")?,
            }
        }
    }
    Ok(())
}

fn check_input(ck: &Checkpoint, corpus: &SessionCorpus) -> Result<()> {
    let (h, w) = corpus.resolution();
    if ck.spec.input_shape() != [1, h, w] {
        return Err(Error::Shape(format!(
            "checkpoint expects {:?} input, corpus images are 1×{h}×{w}",
            ck.spec.input_shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub images: usize,
    pub mode: SplitMode,
    pub units: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub digest: String,
    pub resolution: [usize; 2],
    pub sessions: usize,
    pub rounds_per_session: usize,
    pub total_images: usize,
}

/// Contents of the results JSON. `timing` is the only field that varies
/// between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub schema_version: u32,
    pub config: RunConfig,
    pub corpus: CorpusSummary,
    #[serde(flatten)]
    pub report: CvReport,
    pub timing: CvTiming,
}

/// Runs the cross-validated experiment, logging each repeat to `log` and
/// optionally saving every phase's checkpoint under `checkpoints`.
pub fn run_experiment(
    config: &RunConfig,
    corpus: &SessionCorpus,
    checkpoints: Option<&Path>,
    log: &mut dyn Write,
) -> Result<ExperimentResults> {
    let (report, timing) = cross_validate_with(&config.experiment, corpus, |record: &RepeatRecord, run| {
        let accs: Vec<String> = record.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        writeln!(log, "repeat {}  eval unit {}  [{}]", record.repeat, record.plan.eval_unit, accs.join(", "))?;
        if let Some(dir) = checkpoints {
            for (k, phase) in run.phases.iter().enumerate() {
                let ck = Checkpoint::new(run.spec.clone(), phase.params.clone(), k as u16);
                ck.save(dir.join(format!("repeat{}_{}.sfck", record.repeat, phase.phase)))?;
            }
        }
        Ok(())
    })?;
    let (h, w) = corpus.resolution();
    Ok(ExperimentResults {
        schema_version: RESULTS_SCHEMA_VERSION,
        config: config.clone(),
        corpus: CorpusSummary {
            digest: corpus.digest(),
            resolution: [h, w],
            sessions: corpus.sessions().len(),
            rounds_per_session: corpus.rounds_per_session(),
            total_images: corpus.total_images(),
        },
        report,
        timing,
    })
}

pub fn write_table(report: &CvReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{:<8} {:>9} {:>9}  per repeat", "phase", "mean", "std")?;
    for p in &report.phases {
        let std = if p.std_defined {
            format!("{:.4}", p.std)
        } else {
            "n/a".into()
        };
        let accs: Vec<String> = p.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        writeln!(out, "{:<8} {:>9.4} {:>9}  {}", p.phase, p.mean, std, accs.join(" "))?;
    }
    Ok(())
}
