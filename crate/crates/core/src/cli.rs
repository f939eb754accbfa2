//! The `mrjl` command line: synth, train, eval, reconstruct, featmap.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{checkpoint_id, Checkpoint};
use crate::config::{TrainConfig, CONFIG_ENV};
use crate::data::{synthesize_mlr, Manifest, SynthOptions, TrainSet};
use crate::error::{Error, Result};
use crate::eval::{self, EvalData, EvalOptions, Mode, Protocol, RankOptions, Subset};
use crate::imaging::{self, ResolutionTag};
use crate::model::Mrjl;
use crate::params::ParamStore;
use crate::trainer::{self, TrainState};

#[derive(Debug, Parser)]
#[command(name = "mrjl", version, about = "Cross-resolution person re-identification")]
struct Cli {
    /// Upper bound on worker threads for loading and extraction.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    workers: u32,
    /// Seed for every stochastic step (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write an MLR copy of a dataset: one camera down-sampled at r in {2,3,4}.
    Synth(SynthArgs),
    /// Train on the train split of a dataset.
    Train(TrainArgs),
    /// Rank the query split against the gallery and write a report.
    Eval(EvalArgs),
    /// Write the HR and LR reconstructions of one image.
    Reconstruct(ImageArgs),
    /// Write the feature response maps of both branches for one image.
    Featmap(ImageArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Source dataset root.
    #[arg(long)]
    root: PathBuf,
    /// Camera whose images are down-sampled.
    #[arg(long)]
    lr_camera: u32,
    #[arg(long)]
    out: PathBuf,
    /// Use this rate for every down-sampled image.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
    rate: Option<u32>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root with a train split.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics, LR trace and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Config file; defaults to $MRJL_CONFIG.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// `key=value` config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total epochs, also when resuming.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Unknown,
    Known,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    Joint,
    HrOnly,
    LrOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    MultiShot,
    SingleShot,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root with gallery and query splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Unknown)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SubsetArg::Joint)]
    subset: SubsetArg,
    /// Every mode and subset from the one checkpoint.
    #[arg(long)]
    sweep: bool,
    #[arg(long, value_enum, default_value_t = ProtocolArg::MultiShot)]
    protocol: ProtocolArg,
    /// Gallery resampling trials for the single-shot protocol.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Keep gallery entries that share identity and camera with the query.
    #[arg(long)]
    no_camera_filter: bool,
    /// Also write the query and gallery feature matrices.
    #[arg(long)]
    dump_features: bool,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TagArg {
    Hr,
    Lr,
}

#[derive(Debug, Args)]
struct ImageArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resolution tag of the input; only changes output names.
    #[arg(long, value_enum, default_value_t = TagArg::Hr)]
    tag: TagArg,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(hint) = hint(&e) {
                eprintln!("hint: {hint}");
            }
            e.exit_code()
        }
    }
}

fn hint(e: &Error) -> Option<&'static str> {
    Some(match e {
        Error::MissingFiles(_) => "the manifest lists files that are not on disk; re-run `mrjl synth` or fix --data",
        Error::Version { .. } => "the checkpoint was written by an incompatible version; retrain",
        Error::Integrity(_) => "the checkpoint is truncated or corrupted",
        Error::Config(_) => "see `mrjl train --help` for config keys and overrides",
        Error::NonFiniteLoss { .. } | Error::NumericFault { .. } => "lower the learning rates or check the input images",
        _ => return None,
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    let workers = cli.workers as usize;
    match cli.command {
        Command::Synth(a) => synth(a, cli.seed.unwrap_or(0), workers),
        Command::Train(a) => train(a, cli.seed),
        Command::Eval(a) => evaluate(a, cli.seed.unwrap_or(0), workers),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Featmap(a) => featmap(a),
    }
}

fn synth(a: SynthArgs, seed: u64, workers: usize) -> Result<()> {
    if a.out == a.root {
        return Err(Error::Argument("--out must differ from --root".into()));
    }
    let opts = SynthOptions {
        lr_camera: a.lr_camera,
        seed,
        rate_override: a.rate,
    };
    let m = synthesize_mlr(&a.root, &a.out, &opts, workers)?;
    let low = m.entries.iter().filter(|e| e.tag.is_low_resolution()).count();
    println!("wrote {} images ({low} down-sampled) to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let manifest = Manifest::load_or_scan(&a.data)?;
    let (mut state, set) = match &a.resume {
        Some(path) => {
            if seed.is_some() || !a.overrides.is_empty() {
                return Err(Error::Argument("--seed and --set cannot change a resumed run".into()));
            }
            let mut st = TrainState::resume(&Checkpoint::load(path)?)?;
            if let Some(e) = a.epochs {
                st.cfg.epochs = e;
            }
            let set = TrainSet::from_manifest(&a.data, &manifest, st.cfg.height, st.cfg.width)?;
            (st, set)
        }
        None => {
            let mut overrides = a.overrides.clone();
            overrides.extend(seed.map(|s| format!("seed={s}")));
            overrides.extend(a.epochs.map(|e| format!("epochs={e}")));
            let cfg = TrainConfig::load_with_overrides(a.config.as_deref(), &overrides)?;
            let set = TrainSet::from_manifest(&a.data, &manifest, cfg.height, cfg.width)?;
            (TrainState::new(cfg, set.num_classes())?, set)
        }
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), state.cfg.to_toml())?;
    let summary = trainer::run(&mut state, &set, &a.out, |line| eprintln!("{line}"))?;
    println!(
        "trained {} epochs ({} steps); checkpoint {}",
        summary.epochs,
        summary.steps,
        summary.checkpoint.display()
    );
    Ok(())
}

fn evaluate(a: EvalArgs, seed: u64, workers: usize) -> Result<()> {
    let modes = match (a.sweep, a.mode) {
        (true, _) | (_, ModeArg::All) => Mode::ALL.to_vec(),
        (_, ModeArg::Unknown) => vec![Mode::Unknown],
        (_, ModeArg::Known) => vec![Mode::Known],
    };
    let subsets = match (a.sweep, a.subset) {
        (true, _) | (_, SubsetArg::All) => Subset::ALL.to_vec(),
        (_, SubsetArg::Joint) => vec![Subset::Joint],
        (_, SubsetArg::HrOnly) => vec![Subset::HrOnly],
        (_, SubsetArg::LrOnly) => vec![Subset::LrOnly],
    };
    let protocol = match a.protocol {
        ProtocolArg::MultiShot => Protocol::MultiShot,
        ProtocolArg::SingleShot => Protocol::SingleShot { trials: a.trials, seed },
    };
    let opts = EvalOptions {
        modes,
        subsets,
        rank: RankOptions {
            filter_same_camera: !a.no_camera_filter,
            protocol,
            workers,
        },
    };
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::ingest(&a.checkpoint, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let (model, store) = ck.restore()?;
    let data = EvalData::load(&a.data, ck.model.height, ck.model.width, workers)?;
    let report = eval::evaluate(&model, &store, &data, &opts, &checkpoint_id(&bytes))?;
    let out = a.out.unwrap_or_else(|| parent_dir(&a.checkpoint));
    report.save(&out)?;
    if a.dump_features {
        for &mode in &opts.modes {
            let (q, g) = eval::extract_split_features(&model, &store, &data, mode, workers)?;
            q.save(&out.join(format!("query_{mode}.feat")))?;
            g.save(&out.join(format!("gallery_{mode}.feat")))?;
        }
    }
    let mut stdout = std::io::stdout().lock();
    write!(stdout, "{}", report.to_text())?;
    writeln!(stdout, "report written to {}", out.join(eval::REPORT_JSON).display())?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_for_image(a: &ImageArgs) -> Result<(Mrjl, ParamStore, imaging::ImageTensor, String)> {
    let (model, store) = Checkpoint::load(&a.checkpoint)?.restore()?;
    let tag = match a.tag {
        TagArg::Hr => ResolutionTag::HR,
        TagArg::Lr => ResolutionTag::Unknown,
    };
    let img = imaging::load_native(&a.image)?.with_tag(tag);
    let stem = a
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Argument(format!("cannot derive a name from {}", a.image.display())))?
        .to_string();
    std::fs::create_dir_all(&a.out)?;
    Ok((model, store, img, stem))
}

fn reconstruct(a: ImageArgs) -> Result<()> {
    let (model, store, img, stem) = load_for_image(&a)?;
    let pair = model.reconstruct(&store, &img)?;
    let prefix = match a.tag {
        TagArg::Hr => "h",
        TagArg::Lr => "l",
    };
    for (suffix, out) in [("2h", &pair.hr), ("2l", &pair.lr)] {
        let path = a.out.join(format!("{stem}.{prefix}{suffix}.png"));
        imaging::save_png(out, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn featmap(a: ImageArgs) -> Result<()> {
    let (model, store, img, stem) = load_for_image(&a)?;
    let map = model.feature_maps(&store, &img)?;
    let path = a.out.join(format!("{stem}.featmap.png"));
    imaging::save_png(&map, &path)?;
    println!("{}", path.display());
    Ok(())
}
