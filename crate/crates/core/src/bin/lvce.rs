use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lvce::dosesim::DoseFraction;
use lvce::study::{selftest, StageStatus, Study, StudyConfig, MODES};
use lvce::{ChannelLayout, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_SELFTEST: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "lvce", version, about = "Longitudinal virtual contrast enhancement study runner")]
struct Cli {
    /// Study configuration (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the seeds inside the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Compute metrics inside the brain mask (`on`) or over the whole volume.
    #[arg(long, global = true, value_enum)]
    masked_metrics: Option<Switch>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    SingleSession,
    Longitudinal,
    Both,
}

impl Mode {
    fn layouts(self) -> Vec<ChannelLayout> {
        match self {
            Mode::SingleSession => vec![ChannelLayout::SingleSession],
            Mode::Longitudinal => vec![ChannelLayout::Longitudinal],
            Mode::Both => MODES.to_vec(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the phantom cohort.
    Generate,
    /// Resample, register, crop and normalize every subject.
    Preprocess,
    /// Simulate the low-dose image of the current session.
    SimulateDose {
        /// Dose fraction; defaults to the configured training dose.
        #[arg(long)]
        dose: Option<f64>,
    },
    /// Train one or both models.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        mode: Mode,
        #[arg(long)]
        dose: Option<f64>,
    },
    /// Score the baseline and both models on the test split.
    Evaluate {
        #[arg(long)]
        dose: Option<f64>,
    },
    /// Simulate, train and evaluate at every configured dose level.
    DoseSweep,
    /// Emit tables, plots and slice panels.
    Report,
    /// Run the built-in gradient, convolution, metric and statistics checks.
    Selftest,
    /// Every stage at the primary dose, in order.
    Run {
        /// Include the dose sweep.
        #[arg(long)]
        sweep: bool,
    },
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn load_config(cli: &Cli) -> lvce::Result<StudyConfig> {
    let mut cfg = match &cli.config {
        Some(p) => StudyConfig::load(p)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(m) = cli.masked_metrics {
        cfg.metrics.masked = matches!(m, Switch::On);
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn dose_arg(study: &Study, dose: Option<f64>) -> lvce::Result<DoseFraction> {
    match dose {
        Some(d) if d > 0.0 => DoseFraction::new(d),
        Some(d) => Err(Error::InvalidArgument(format!("dose {d} is not a study level"))),
        None => Ok(study.config().primary_dose()),
    }
}

fn run_stage(study: &mut Study, command: &Command) -> lvce::Result<()> {
    let status = match command {
        Command::Generate => study.generate()?,
        Command::Preprocess => study.preprocess()?,
        Command::SimulateDose { dose } => {
            let d = dose_arg(study, *dose)?;
            study.simulate_dose(d)?
        }
        Command::Train { mode, dose } => {
            let d = dose_arg(study, *dose)?;
            let mut status = StageStatus::UpToDate;
            for layout in mode.layouts() {
                if study.train(d, layout)? == StageStatus::Ran {
                    status = StageStatus::Ran;
                }
            }
            status
        }
        Command::Evaluate { dose } => {
            let d = dose_arg(study, *dose)?;
            let s = study.evaluate(d)?;
            let table = std::fs::read_to_string(study.eval_dir(d).join("table.txt"))
                .map_err(|e| Error::Io { path: study.eval_dir(d), source: e })?;
            print!("{table}");
            s
        }
        Command::DoseSweep => study.dose_sweep()?,
        Command::Report => study.report()?,
        Command::Run { sweep } => {
            study.run_all(*sweep)?;
            StageStatus::Ran
        }
        Command::Selftest | Command::ShowConfig => unreachable!("handled before opening the study"),
    };
    if status == StageStatus::UpToDate {
        eprintln!("up to date");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    if let Command::Selftest = cli.command {
        let checks = selftest::run_selftest();
        for c in &checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        return if checks.iter().all(|c| c.passed) {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(EXIT_SELFTEST)
        };
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Command::ShowConfig = cli.command {
        match serde_json::to_string_pretty(&cfg) {
            Ok(s) => {
                println!("{s}");
                return ExitCode::SUCCESS;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    let mut study = match Study::open(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot open study at {}: {e}", cfg.output_dir.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run_stage(&mut study, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
