use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use catn_core::config::RunConfig;
use catn_core::gradcheck::run_gradcheck;
use catn_core::pipeline::{prepare, run_eval, run_explain, run_train, CONFIG_FILE};
use catn_core::synth::{desk_run_config, generate, write_synth, SynthConfig};
use catn_core::{CatnError, Split, Variant};

/// Cross-domain aspect transfer for cold-start rating prediction.
#[derive(Parser, Debug)]
#[command(name = "catn", version)]
struct Cli {
    /// Key-value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fraction of the training pool used.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// basic, attn, separate or full.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Number of aspects M.
    #[arg(long, global = true)]
    aspects: Option<usize>,
    /// Aspect dimension k.
    #[arg(long, global = true)]
    latent: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the vocabulary and all user/item documents.
    Prepare,
    /// Generate a synthetic two-domain data set with a planted topic pairing.
    Synth {
        /// Users present in both domains.
        #[arg(long, default_value_t = 20)]
        users: usize,
        /// Items per domain.
        #[arg(long, default_value_t = 10)]
        items: usize,
        /// Number of planted topics.
        #[arg(long, default_value_t = 3)]
        topics: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train a model and save checkpoint, history and split.
    Train,
    /// Evaluate a trained model on held-out cold-start users.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Explain one prediction: top aspect words and the correlation matrix.
    Explain {
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Finite-difference check of all parameter gradients on a tiny model.
    Gradcheck,
}

enum Failure {
    Config(String),
    Numerical(String),
    Core(CatnError),
}

impl From<CatnError> for Failure {
    fn from(e: CatnError) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 3,
            Failure::Core(e) => match e {
                CatnError::Config(_) | CatnError::UnknownVariant(_) | CatnError::InvalidArgument(_) => 1,
                CatnError::Divergence { .. } => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config: {m}"),
            Failure::Numerical(m) => f.write_str(m),
            Failure::Core(e) => e.fmt(f),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(e) = cli.eta {
        cfg.eta = e;
    }
    if let Some(v) = &cli.variant {
        cfg.train.variant = v.parse::<Variant>()?;
    }
    if let Some(m) = cli.aspects {
        cfg.hp.aspects = m;
    }
    if let Some(k) = cli.latent {
        cfg.hp.aspect_dim = k;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.sync_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn require_inputs(cfg: &RunConfig) -> Result<(), Failure> {
    for p in [&cfg.source, &cfg.target].into_iter().chain(cfg.pretrained.as_ref()) {
        if !p.exists() {
            return Err(CatnError::io(p, std::io::ErrorKind::NotFound.into()).into());
        }
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v).map_err(CatnError::from)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Synth { users, items, topics, noise } => {
            if *topics < 2 {
                return Err(Failure::Config(format!("--topics must be at least 2, got {topics}")));
            }
            let out = cli.out.clone().ok_or_else(|| Failure::Config("synth needs --out".into()))?;
            let syn = SynthConfig {
                overlap_users: *users,
                items_per_domain: *items,
                topics: *topics,
                noise: *noise,
                seed: cli.seed.unwrap_or(SynthConfig::default().seed),
                ..SynthConfig::default()
            };
            let data = generate(&syn)?;
            write_synth(&data, &syn, &out)?;
            let run_cfg = desk_run_config(&syn, &out);
            let p = out.join(CONFIG_FILE);
            std::fs::write(&p, run_cfg.to_text()).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            println!(
                "wrote {} source and {} target interactions to {}",
                data.source.len(),
                data.target.len(),
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck => {
            let variant = match &cli.variant {
                Some(v) => v.parse::<Variant>()?,
                None => Variant::Full,
            };
            let report = run_gradcheck(variant, cli.seed.unwrap_or(1), 1e-5, 1e-2)?;
            for t in &report.tensors {
                log::info!(
                    "{:<28} {:>4} entries  max rel err {:.3e}  ({:e} vs {:e})",
                    t.name,
                    t.entries,
                    t.max_rel_error,
                    t.worst_pair.0,
                    t.worst_pair.1
                );
            }
            println!("max relative error {:.3e} over {} entries", report.max_rel_error, report.entries);
            if report.max_rel_error < 1e-4 {
                Ok(())
            } else {
                Err(Failure::Numerical(format!("gradient check failed: {:.3e} exceeds 1e-4", report.max_rel_error)))
            }
        }
        cmd => {
            let cfg = load_config(&cli)?;
            require_inputs(&cfg)?;
            match cmd {
                Command::Prepare => print_json(&prepare(&cfg)?),
                Command::Train => {
                    let out = run_train(&cfg)?;
                    println!(
                        "best epoch {} of {}, validation MSE {:.5}; artifacts in {}",
                        out.best_epoch,
                        out.history.epochs.len(),
                        out.best_valid_mse,
                        cfg.out.display()
                    );
                    Ok(())
                }
                Command::Eval { split } => {
                    let split = match split.as_str() {
                        "test" => Split::Test,
                        "validation" => Split::Validation,
                        other => return Err(Failure::Config(format!("--split must be test or validation, got `{other}`"))),
                    };
                    print_json(&run_eval(&cfg, split)?)
                }
                Command::Explain { user, item, top_k } => print_json(&run_explain(&cfg, user, item, *top_k)?),
                Command::Synth { .. } | Command::Gradcheck => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
