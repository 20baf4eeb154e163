use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ovqa::pipeline::{self, Layout, LoadedConfig, StageResult};

/// Open-vocabulary QA experiments with a graph-attention soft verbalizer.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every field is optional.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the embedding table and synthetic samples.
    Gen(Common),
    /// Count answer frequencies and assign categories.
    Vocab(Common),
    /// Build the train and test answer graphs.
    Graph(Common),
    /// Train every configured arm.
    Train(Common),
    /// Write per-sample predictions and the attention export.
    Predict(Common),
    /// Evaluate predictions into reports.
    Eval(Common),
    /// Run every stage in order.
    Run(Common),
    /// Run the shared stages, then the open arm for each ε.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ε values.
        #[arg(long, value_delimiter = ',', default_values_t = pipeline::default_grid())]
        grid: Vec<f64>,
    },
}

impl Common {
    fn load(&self) -> ovqa::Result<LoadedConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!(
                "out_dir={}",
                toml::Value::String(o.display().to_string())
            ));
        }
        pipeline::load_config_file(self.config.as_deref(), &overrides)
    }
}

fn logged(err: &dyn std::fmt::Display, code: i32) -> i32 {
    log::error!("{err}");
    code
}

fn stage(
    common: &Common,
    f: fn(&ovqa::pipeline::ExperimentConfig, &Layout) -> StageResult<()>,
) -> Result<(), i32> {
    let loaded = common.load().map_err(|e| logged(&e, e.exit_code()))?;
    let layout = Layout::new(&loaded.config.out_dir);
    pipeline::write_manifest(&loaded, &layout).map_err(|e| logged(&e, e.exit_code()))?;
    f(&loaded.config, &layout).map_err(|e| logged(&e, e.exit_code()))
}

fn dispatch(cli: Cli) -> Result<(), i32> {
    match cli.command {
        Command::Gen(c) => stage(&c, pipeline::stage_gen),
        Command::Vocab(c) => stage(&c, pipeline::stage_vocab),
        Command::Graph(c) => stage(&c, pipeline::stage_graph),
        Command::Train(c) => stage(&c, pipeline::stage_train),
        Command::Predict(c) => stage(&c, pipeline::stage_predict),
        Command::Eval(c) => stage(&c, pipeline::stage_eval),
        Command::Run(c) => {
            let loaded = c.load().map_err(|e| logged(&e, e.exit_code()))?;
            let layout =
                pipeline::run_experiment(&loaded).map_err(|e| logged(&e, e.exit_code()))?;
            log::info!("artifacts in {}", layout.root.display());
            Ok(())
        }
        Command::Sweep { common, grid } => {
            let loaded = common.load().map_err(|e| logged(&e, e.exit_code()))?;
            if grid.is_empty() || grid.iter().any(|e| !(0.0..=1.0).contains(e)) {
                log::error!("sweep grid must be non-empty values in [0, 1]");
                return Err(2);
            }
            pipeline::run_sweep(&loaded, &grid).map_err(|e| logged(&e, e.exit_code()))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code as u8),
    }
}
