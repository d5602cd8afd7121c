use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nmsq_core::codec::{config_of, pack_model, read_checkpoint, unpack_model, write_checkpoint};
use nmsq_core::microformer::{
    evaluate, read_examples, train_dense, write_examples, Example, MicroModel,
};
use nmsq_core::search::{run_search, write_report};
use nmsq_core::selftest::run_selftest;
use nmsq_core::{run_admm, CostMode, EncoderConfig, QuantMethod, RunConfig};

#[derive(Parser)]
#[command(
    name = "nmsq",
    version,
    about = "Joint N:M sparsity and integer quantization for small encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EncoderChoice {
    /// One scheme for every component, or six comma-separated schemes.
    #[arg(long, conflicts_with = "chosen")]
    encoder: Option<EncoderConfig>,
    /// File holding an encoder configuration, as written by `search --chosen`.
    #[arg(long)]
    chosen: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Trains the dense baseline and writes it as a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs ADMM compression with a fixed encoder configuration.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        encoder: EncoderChoice,
        /// `max`, `dist` or `ste`.
        #[arg(long)]
        solver: Option<QuantMethod>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores every configuration under the constraint and picks one.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        constraint: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// `payload` or `metadata`.
        #[arg(long)]
        mode: Option<CostMode>,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the chosen configuration.
        #[arg(long)]
        chosen: Option<PathBuf>,
    },
    /// Re-packs a checkpoint whose weights already satisfy a configuration.
    Pack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        encoder: EncoderChoice,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expands a checkpoint into dense 32-bit tensors.
    Unpack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reports loss and accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Dataset file; defaults to the validation split of the synthetic task.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Runs the built-in oracle checks.
    Selftest,
    /// Writes one split of the synthetic task.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<nmsq_core::Error>() {
            match e {
                nmsq_core::Error::Config(_) | nmsq_core::Error::UnattainableConstraint(_) => {
                    return 2
                }
                nmsq_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => return 2,
                _ => {}
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            ensure_exists(path)?;
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("no such file: {}", path.display())));
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Rejects an output path that names one of the inputs.
fn check_out(out: &Path, inputs: &[Option<&Path>]) -> Result<()> {
    for input in inputs.iter().flatten() {
        if same_file(out, input) {
            return Err(usage(format!(
                "--out {} would overwrite an input",
                out.display()
            )));
        }
    }
    Ok(())
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<(MicroModel<f32>, EncoderConfig)> {
    ensure_exists(path)?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let tensors = read_checkpoint(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))?;
    let config = config_of(&tensors).with_context(|| format!("reading {}", path.display()))?;
    let model = unpack_model(&tensors, cfg.geometry)
        .with_context(|| format!("loading {}", path.display()))?;
    Ok((model, config))
}

fn save_model(
    path: &Path,
    model: &MicroModel<f32>,
    config: &EncoderConfig,
    group_size: usize,
) -> Result<()> {
    let tensors = pack_model(model, config, group_size).context("packing model")?;
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_checkpoint(&mut w, &tensors)?;
    w.flush()?;
    Ok(())
}

fn resolve_encoder(choice: &EncoderChoice, cfg: &RunConfig) -> Result<EncoderConfig> {
    if let Some(e) = choice.encoder {
        return Ok(e);
    }
    if let Some(path) = &choice.chosen {
        ensure_exists(path)?;
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return text
            .trim()
            .parse()
            .map_err(|e| usage(format!("{}: {e}", path.display())));
    }
    Ok(cfg.encoder)
}

fn print_eval(label: &str, data: &[Example], model: &MicroModel<f32>, cfg: &RunConfig) {
    let stats = evaluate(model.geometry(), model.params(), data, &cfg.forward());
    println!(
        "{label}: loss {:.9} accuracy {:.4} examples {}",
        stats.loss,
        stats.accuracy,
        data.len()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            check_out(&out, &[common.config.as_deref()])?;
            let cfg = load_config(&common)?;
            let data = cfg.dataset()?;
            let model = train_dense(&cfg.init_model()?, &data.train, &cfg.train_options());
            save_model(&out, &model, &EncoderConfig::dense(), cfg.group_size)?;
            print_eval("validation", &data.val, &model, &cfg);
        }
        Command::Compress {
            common,
            model,
            encoder,
            solver,
            out,
        } => {
            check_out(
                &out,
                &[
                    common.config.as_deref(),
                    Some(&model),
                    encoder.chosen.as_deref(),
                ],
            )?;
            let mut cfg = load_config(&common)?;
            if let Some(s) = solver {
                cfg.method = s;
            }
            cfg.encoder = resolve_encoder(&encoder, &cfg)?;
            cfg.validate()?;
            let (dense, _) = load_model(&model, &cfg)?;
            let data = cfg.dataset()?;
            let outcome = run_admm(
                &dense,
                &cfg.encoder,
                &data.train,
                &cfg.schedule(),
                &cfg.admm_options(),
            )?;
            if let Some(last) = outcome.history.last() {
                println!("final residual {:.6e}", last.residual);
            }
            save_model(&out, &outcome.model, &cfg.encoder, cfg.group_size)?;
            println!("encoder {}", cfg.encoder);
            print_eval("validation", &data.val, &outcome.model, &cfg);
        }
        Command::Search {
            common,
            model,
            constraint,
            k,
            mode,
            out,
            chosen,
        } => {
            check_out(&out, &[common.config.as_deref(), Some(&model)])?;
            if let Some(c) = &chosen {
                check_out(c, &[common.config.as_deref(), Some(&model), Some(&out)])?;
            }
            let mut cfg = load_config(&common)?;
            if let Some(c) = constraint {
                cfg.constraint = c;
            }
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cfg.validate()?;
            let (dense, _) = load_model(&model, &cfg)?;
            let data = cfg.dataset()?;
            let outcome = run_search(&dense, &data.val, &cfg.search_params())?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_report(BufWriter::new(file), &outcome.scored)?;
            let c = outcome.chosen;
            if let Some(path) = &chosen {
                fs::write(path, format!("{}\n", c.config))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!("evaluated {} configurations", outcome.scored.len());
            println!(
                "chosen {} heuristic {:.6} compression {:.4} flops {:.4}",
                c.config, c.heuristic, c.compression_ratio, c.flop_reduction
            );
        }
        Command::Pack {
            common,
            model,
            encoder,
            out,
        } => {
            check_out(
                &out,
                &[
                    common.config.as_deref(),
                    Some(&model),
                    encoder.chosen.as_deref(),
                ],
            )?;
            let mut cfg = load_config(&common)?;
            cfg.encoder = resolve_encoder(&encoder, &cfg)?;
            cfg.validate()?;
            let (m, _) = load_model(&model, &cfg)?;
            save_model(&out, &m, &cfg.encoder, cfg.group_size)?;
            println!("packed {} as {}", model.display(), cfg.encoder);
        }
        Command::Unpack { common, model, out } => {
            check_out(&out, &[common.config.as_deref(), Some(&model)])?;
            let cfg = load_config(&common)?;
            let (m, from) = load_model(&model, &cfg)?;
            save_model(&out, &m, &EncoderConfig::dense(), cfg.group_size)?;
            println!("unpacked {} ({from})", model.display());
        }
        Command::Eval {
            common,
            model,
            data,
        } => {
            let cfg = load_config(&common)?;
            let (m, config) = load_model(&model, &cfg)?;
            let examples = match &data {
                Some(path) => {
                    ensure_exists(path)?;
                    let file =
                        File::open(path).with_context(|| format!("opening {}", path.display()))?;
                    read_examples(BufReader::new(file))
                        .with_context(|| format!("reading {}", path.display()))?
                }
                None => cfg.dataset()?.val,
            };
            let g = m.geometry();
            if let Some(bad) = examples.iter().find(|e| {
                e.label >= g.classes
                    || e.tokens.len() != g.seq_len
                    || e.tokens.iter().any(|&t| t >= g.vocab)
            }) {
                bail!(usage(format!(
                    "example {:?} does not fit the model geometry",
                    bad
                )));
            }
            println!("encoder {config}");
            print_eval("eval", &examples, &m, &cfg);
        }
        Command::Selftest => {
            let results = run_selftest();
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<18} {:>7.2}s  {}", r.name, r.seconds, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", results.len());
            }
        }
        Command::Dataset { common, split, out } => {
            check_out(&out, &[common.config.as_deref()])?;
            let cfg = load_config(&common)?;
            let data = cfg.dataset()?;
            let examples = match split {
                Split::Train => &data.train,
                Split::Val => &data.val,
            };
            let mut w = BufWriter::new(
                File::create(&out).with_context(|| format!("creating {}", out.display()))?,
            );
            write_examples(&mut w, examples)?;
            w.flush()?;
            println!("wrote {} examples", examples.len());
        }
    }
    Ok(())
}
