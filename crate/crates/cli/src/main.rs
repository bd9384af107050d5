use clap::{Parser, Subcommand};
use kbp_cli::{
    cmd_evaluate, cmd_gen_data, cmd_optimize, cmd_predict, cmd_report, cmd_train, CliError, Method, Model, OptMode,
    PipelineConfig, Result, Run,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kbp", version, about = "Knowledge-based planning pipeline on synthetic phantoms")]
struct Cli {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the dataset, network and forest seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun completed stages and overwrite earlier output.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 makes every output byte-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms, influence matrices and reference plans.
    GenData,
    /// Train predictors on the training split.
    Train {
        #[arg(long)]
        model: Option<Model>,
    },
    /// Predict dose volumes.
    Predict {
        #[arg(long)]
        model: Option<Model>,
        /// Patient ids; defaults to the test split.
        #[arg(long, value_delimiter = ',')]
        patients: Option<Vec<String>>,
    },
    /// Turn predictions into deliverable plans.
    Optimize {
        #[arg(long)]
        model: Option<Model>,
        #[arg(long)]
        mode: Option<OptMode>,
        #[arg(long, value_delimiter = ',')]
        patients: Option<Vec<String>>,
    },
    /// Compare plans with the reference plans and write the report tables.
    Evaluate,
    /// Render the summary from the evaluation.
    Report,
    /// Every stage in order.
    Run,
}

fn methods(run: &Run, model: Option<Model>, mode: Option<OptMode>) -> Vec<Method> {
    match model {
        Some(m) => vec![Method::new(m, mode.unwrap_or(run.config.optimization.mode))],
        None => run
            .config
            .evaluation
            .methods
            .iter()
            .copied()
            .filter(|m| mode.is_none_or(|o| o == m.mode))
            .collect(),
    }
}

fn optimize(run: &mut Run, methods: &[Method], patients: Option<&[String]>) -> Result<()> {
    for &m in methods {
        let failures = cmd_optimize(run, m, patients)?;
        for (id, e) in failures {
            eprintln!("{m} {id}: {e}");
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut run = Run::open(config, cli.force)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&mut run),
        Command::Train { model } => {
            let models = model.map(|m| vec![m]).unwrap_or_else(|| run.config.models());
            models.into_iter().try_for_each(|m| cmd_train(&mut run, m))
        }
        Command::Predict { model, patients } => {
            let models = model.map(|m| vec![m]).unwrap_or_else(|| run.config.models());
            models.into_iter().try_for_each(|m| cmd_predict(&mut run, m, patients.as_deref()))
        }
        Command::Optimize { model, mode, patients } => {
            let ms = methods(&run, model, mode);
            optimize(&mut run, &ms, patients.as_deref())
        }
        Command::Evaluate => cmd_evaluate(&mut run).map(|_| ()),
        Command::Report => cmd_report(&mut run).map(|p| println!("{}", p.display())),
        Command::Run => {
            cmd_gen_data(&mut run)?;
            for m in run.config.models() {
                cmd_train(&mut run, m)?;
                cmd_predict(&mut run, m, None)?;
            }
            let ms = run.config.evaluation.methods.clone();
            optimize(&mut run, &ms, None)?;
            cmd_evaluate(&mut run)?;
            cmd_report(&mut run).map(|p| println!("{}", p.display()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
