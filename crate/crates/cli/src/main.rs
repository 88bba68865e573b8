//! `geoshape`: train, register, synthesise and export.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 bad command line, 3 invalid
//! configuration, 4 invalid data, 5 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geoshape::pipeline::{
    export, register::Registrar, synth, train as training, Dataset, ExportTarget,
    ModelCheckpoint, PipelineConfig,
};
use geoshape::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "geoshape", version, about = "Generative diffeomorphic shape model")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a template, subspace and posteriors from a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint instead of starting afresh.
        #[arg(long)]
        resume: bool,
    },
    /// Fit new images under a trained model.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `registrations.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a synthetic training and test population.
    Synthesise {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write figure data: template, modes, latents or fits.
    Export {
        what: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training dataset (needed for fits).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out dataset to register for fits.
        #[arg(long)]
        test: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Io => 1,
        ErrorKind::Config => 3,
        ErrorKind::Data => 4,
        ErrorKind::Numerical => 5,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, Error> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn save_checkpoint(model: &ModelCheckpoint, dir: &Path) -> Result<(), Error> {
    model.save(dir)?;
    write(&dir.join("bound.csv"), &training::bound_trace_csv(model))
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    checkpoint: &Path,
    seed: Option<u64>,
    resume: bool,
) -> Result<(), Error> {
    let data = Dataset::load(data)?;
    let mut model = if resume {
        let mut m = ModelCheckpoint::load(checkpoint)?;
        // A new configuration may extend the iteration budget.
        if config.is_some() {
            m.config = load_config(config, seed)?;
        }
        m
    } else {
        training::initialise(&load_config(config, seed)?, &data)?
    };
    log::info!(
        "training {} subjects on {:?}, M = {}",
        data.len(),
        model.template.lattice().dims(),
        model.subspace.len()
    );
    if let Err(err) = training::run(&mut model, &data) {
        if err.kind() == ErrorKind::Numerical {
            let dump = checkpoint.with_extension("abort");
            log::error!("numerical failure: {err}; last consistent state written to {dump:?}");
            save_checkpoint(&model, &dump)?;
        }
        return Err(err);
    }
    save_checkpoint(&model, checkpoint)?;
    log::info!(
        "finished after {} iterations, lower bound {:.6}",
        model.iteration,
        model.bound_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_register(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), Error> {
    let model = ModelCheckpoint::load(checkpoint)?;
    let data = Dataset::load(data)?;
    if let Some(k) = data.classes() {
        if k != model.template.classes() {
            return Err(Error::ChannelMismatch {
                expected: model.template.classes(),
                found: k,
            });
        }
    }
    let regs = Registrar::new(&model)?.register_all(&data.images)?;
    let m = model.subspace.len();
    let mut csv = String::from("subject_id,log_likelihood");
    for k in 1..=m {
        csv.push_str(&format!(",z_{k}"));
    }
    csv.push('\n');
    for (id, r) in data.ids.iter().zip(&regs) {
        csv.push_str(&format!("{id},{:e}", r.log_likelihood));
        for z in r.posterior.z.mean.iter() {
            csv.push_str(&format!(",{z:e}"));
        }
        csv.push('\n');
    }
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write(&out.join("registrations.csv"), &csv)
}

fn cmd_synthesise(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let cfg = load_config(config, seed)?;
    let pop = synth::synthesise(&cfg.synthetic, &cfg.metric, cfg.steps, cfg.seed)?;
    pop.save(out, &cfg.metric, cfg.steps, cfg.seed)?;
    log::info!(
        "wrote {} training and {} test subjects to {out:?}",
        pop.train.len(),
        pop.test.len()
    );
    Ok(())
}

fn cmd_export(
    what: &str,
    checkpoint: &Path,
    out: &Path,
    data: Option<&Path>,
    test: Option<&Path>,
) -> Result<(), Error> {
    let target: ExportTarget = what.parse()?;
    let model = ModelCheckpoint::load(checkpoint)?;
    let train = data.map(Dataset::load).transpose()?;
    let test = test.map(Dataset::load).transpose()?;
    let files = export::export(&model, target, out, train.as_ref(), test.as_ref())?;
    log::info!("wrote {} files to {out:?}", files.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            data,
            checkpoint,
            seed,
            resume,
        } => cmd_train(config.as_deref(), &data, &checkpoint, seed, resume),
        Command::Register {
            checkpoint,
            data,
            out,
        } => cmd_register(&checkpoint, &data, &out),
        Command::Synthesise { config, out, seed } => cmd_synthesise(config.as_deref(), &out, seed),
        Command::Export {
            what,
            checkpoint,
            out,
            data,
            test,
        } => cmd_export(&what, &checkpoint, &out, data.as_deref(), test.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
