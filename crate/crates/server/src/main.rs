use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use interseg::eval::{run_benchmark, RunConfig, Variant};
use interseg::scene::{generate_scene, BenchmarkSpec, grid_subsample, load_manifest, make_benchmark, SceneSpec, Split};
use interseg::segnet::{load_params, save_params, train_supervised};
use interseg_server::{router, AppState};

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "interseg", version, about = "Interactive point-cloud segmentation by test-time training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> AnyResult<RunConfig> {
        Ok(match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    DefaultConfig,
    /// Generate the synthetic benchmark (PLY files plus manifest.json).
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long)]
        num_train: Option<usize>,
        #[arg(long)]
        num_test: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the baseline network on the train split.
    TrainBaseline {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "baseline.ipcs")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the number-of-clicks benchmark on the test split.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "baseline.ipcs")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Comma-separated variant names, e.g. full,no_filtering,ia_baseline.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Serve refinement sessions over HTTP.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, env = "INTERSEG_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "INTERSEG_CHECKPOINT", default_value = "baseline.ipcs")]
        checkpoint: PathBuf,
        /// Benchmark directory whose test scenes are offered; without it a
        /// single generated demo scene is served.
        #[arg(long, env = "INTERSEG_DATA")]
        data: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> AnyResult<()> {
    match cli.command {
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml_string()),
        Command::GenData { config, out, num_train, num_test, seed } => {
            let mut cfg = config.load()?;
            cfg.data.num_train = num_train.unwrap_or(cfg.data.num_train);
            cfg.data.num_test = num_test.unwrap_or(cfg.data.num_test);
            cfg.data.seed = seed.unwrap_or(cfg.data.seed);
            let m = make_benchmark(&out, &cfg.data)?;
            log::info!("wrote {} scenes to {}", m.entries.len(), out.display());
        }
        Command::TrainBaseline { config, data, out, epochs } => {
            let mut cfg = config.load()?;
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            let train = load_manifest(&data)?.load_split(Split::Train)?;
            let (params, report) = train_supervised::<f32>(&train, &cfg.network, &cfg.train)?;
            log::info!("epoch losses {:?}", report.epoch_losses);
            save_params(&params, &out)?;
            log::info!("saved {}", out.display());
        }
        Command::Bench { config, data, checkpoint, out, variants, seeds, budget, workers } => {
            let mut cfg = config.load()?;
            if let Some(v) = variants {
                cfg.eval.variants = v;
            }
            if let Some(s) = seeds {
                cfg.eval.seeds = s;
            }
            cfg.eval.click_budget = budget.unwrap_or(cfg.eval.click_budget);
            cfg.eval.workers = workers.unwrap_or(cfg.eval.workers);
            cfg.validate()?;
            let manifest = load_manifest(&data)?;
            let params = load_params::<f32>(&checkpoint, Some(&cfg.network))?;
            let (summary, _) = run_benchmark(&manifest, &params, &cfg.eval, Some(&out))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            print!("{}", summary.table());
        }
        Command::Serve { config, port, checkpoint, data } => {
            let cfg = config.load()?;
            let params = load_params::<f32>(&checkpoint, Some(&cfg.network))?;
            let state = AppState::new(params, cfg.eval.refine.clone());
            let state = match data {
                Some(dir) => state.with_manifest(load_manifest(&dir)?),
                None => state.with_scene(demo_scene(&cfg.data)?),
            };
            serve(state, port)?;
        }
    }
    Ok(())
}

/// One shifted scene outside the benchmark's seed sequence.
fn demo_scene(data: &BenchmarkSpec) -> AnyResult<interseg::scene::LabeledCloud> {
    let spec = SceneSpec { seed: u64::MAX - data.seed, shift: data.shift.clone(), ..data.scene.clone() };
    Ok(grid_subsample(&generate_scene(&spec, "demo")?, data.grid_cell))
}

#[tokio::main]
async fn serve(state: AppState, port: u16) -> AnyResult<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).with_graceful_shutdown(async { tokio::signal::ctrl_c().await.ok(); }).await?;
    Ok(())
}
