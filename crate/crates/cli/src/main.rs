use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use djscc_core::channel::{generate_gain_series, Environment, GainMode, ShadowState};
use djscc_core::data::{save_multiband, synth_dataset};
use djscc_core::harness::experiment::{
    link_budget_lines, run_compare_storage, run_eval, run_mismatch, run_sweep, run_train, ExperimentConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "djscc-sat", version, about = "Satellite downlink DJSCC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, u64)> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let seed = self.seed.unwrap_or(cfg.seed);
        Ok((cfg, seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the link budget at each elevation.
    LinkBudget {
        #[arg(long)]
        config: PathBuf,
        /// Elevations in degrees; defaults to the training elevations.
        #[arg(long, value_delimiter = ',')]
        elevations: Vec<f64>,
    },
    /// Write a channel gain series as CSV.
    ChannelSim {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "suburban")]
        environment: Environment,
        /// Keep this state fixed; without it the state follows the Markov chain.
        #[arg(long)]
        state: Option<ShadowState>,
        /// Initial state of the Markov chain.
        #[arg(long, default_value = "los")]
        initial: ShadowState,
        #[arg(long)]
        elevation: f64,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
    },
    /// Write synthetic MBIF images.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Height, width, bands.
        #[arg(long, value_delimiter = ',', default_values_t = [16, 16, 3])]
        shape: Vec<usize>,
    },
    /// Train the configured models.
    Train(Common),
    /// Evaluate trained models at their conditions.
    Eval(Common),
    /// Sweep the evaluation SNR.
    SweepSnr(Common),
    /// Evaluate under misidentified channel states.
    Mismatch(Common),
    /// Compare parameter counts and checkpoint sizes.
    CompareStorage(Common),
}

fn channel_sim(common: &Common, env: Environment, state: Option<ShadowState>, initial: ShadowState, elevation: f64, count: usize) -> Result<PathBuf> {
    let (cfg, seed) = common.load()?;
    let table = cfg.table(env)?;
    let mode = state.map_or(GainMode::Markov(initial), GainMode::Fixed);
    let series = generate_gain_series(&table, elevation, mode, count, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut text = String::from("index,state,re,im,envelope\n");
    for (i, (h, s)) in series.samples.iter().zip(&series.states).enumerate() {
        let _ = writeln!(text, "{i},{s},{},{},{}", h.re, h.im, h.norm());
    }
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("gain_series.csv");
    std::fs::write(&path, text)?;
    Ok(path)
}

fn synth_data(seed: u64, out: &Path, count: usize, shape: &[usize]) -> Result<()> {
    let &[h, w, bands] = shape else {
        anyhow::bail!("--shape takes height,width,bands; got {shape:?}");
    };
    let images = synth_dataset(seed, count, [h, w, bands])?;
    std::fs::create_dir_all(out)?;
    let width = count.to_string().len();
    for (i, img) in images.iter().enumerate() {
        save_multiband(img, out.join(format!("img_{i:0width$}.mbif")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::LinkBudget { config, elevations } => {
            let cfg = ExperimentConfig::load(&config)?;
            let elevations = if elevations.is_empty() {
                let mut e: Vec<f64> = cfg.train.conditions.iter().map(|k| k.elevation_deg).collect();
                e.sort_by(f64::total_cmp);
                e.dedup();
                e
            } else {
                elevations
            };
            for line in link_budget_lines(&cfg, &elevations)? {
                println!("{line}");
            }
        }
        Command::ChannelSim { common, environment, state, initial, elevation, count } => {
            let path = channel_sim(&common, environment, state, initial, elevation, count)?;
            eprintln!("wrote {}", path.display());
        }
        Command::SynthData { seed, out, count, shape } => {
            synth_data(seed, &out, count, &shape)?;
            eprintln!("wrote {count} images to {}", out.display());
        }
        Command::Train(c) => {
            let (cfg, seed) = c.load()?;
            for m in run_train(&cfg, seed, &c.out)? {
                eprintln!("trained {} ({} parameters)", m.id, m.network.num_params());
            }
        }
        Command::Eval(c) => {
            let (cfg, seed) = c.load()?;
            print!("{}", run_eval(&cfg, seed, &c.out)?.to_csv());
        }
        Command::SweepSnr(c) => {
            let (cfg, seed) = c.load()?;
            print!("{}", run_sweep(&cfg, seed, &c.out)?.to_csv());
        }
        Command::Mismatch(c) => {
            let (cfg, seed) = c.load()?;
            print!("{}", run_mismatch(&cfg, seed, &c.out)?.to_csv());
        }
        Command::CompareStorage(c) => {
            // the configuration is validated even though only the models are read
            c.load().context("loading configuration")?;
            let r = run_compare_storage(&c.out)?;
            print!("{}", r.to_csv());
            eprintln!("attention share {:.4}%", 100.0 * r.attention_share);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // bad arguments count as configuration errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_config = e.downcast_ref::<djscc_core::Error>().is_none_or(|e| e.is_config());
            ExitCode::from(if is_config { 1 } else { 2 })
        }
    }
}
