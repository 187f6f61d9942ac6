//! Command-line front end for the scenario pipeline. All heavy lifting lives
//! in the library; each subcommand parses flags, calls one library entry
//! point, and writes deterministic JSON/CSV outputs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use skyharvest::scenario::{
    self, apply_sweep, compare, run_scenario, scenario_rows, write_artifacts, write_rows_csv,
    ScenarioConfig, VariantSpec,
};
use skyharvest::Result;

#[derive(Parser)]
#[command(name = "skyharvest", about = "UAV data-harvesting trajectory toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario config JSON; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Planner variant, e.g. pernode-learned, global-learned,
    /// deterministic-learned, pernode-true.
    #[arg(long, default_value = "pernode-learned")]
    variant: String,
    /// Override the evaluation trial count.
    #[arg(long)]
    trials: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        Ok(cfg)
    }

    fn variant(&self) -> Result<VariantSpec> {
        VariantSpec::parse(&self.variant)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city map and write it as JSON.
    GenerateMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        extent: Option<f64>,
        #[arg(long)]
        mean_height: Option<f64>,
        #[arg(long)]
        street_pitch: Option<f64>,
        #[arg(long)]
        building_fill: Option<f64>,
    },
    /// Plan the parameter-learning trajectory and write plan + measurements.
    PlanLearning {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the compressed LoS-probability map.
    FitLos {
        #[command(flatten)]
        common: Common,
    },
    /// Optimize the communication trajectory and schedule.
    PlanComm {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full pipeline and evaluate against the ray-cast ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one config field over a list of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// field=v1,v2,... (fields: num_nodes, t_c, mean_height, t_l, h_min)
        #[arg(long)]
        sweep: String,
    },
    /// Paired comparison of two variants over consecutive seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        against: String,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
}

fn run_and_write(common: &Common) -> Result<std::path::PathBuf> {
    let cfg = common.config()?;
    let art = run_scenario(&cfg, common.variant()?)?;
    write_artifacts(&common.out_dir, &cfg, &art)
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateMap { common, extent, mean_height, street_pitch, building_fill } => {
            let mut cfg = common.config()?;
            if let Some(e) = extent {
                cfg.extent = (e, e);
            }
            if let Some(h) = mean_height {
                cfg.mean_height = h;
            }
            if let Some(p) = street_pitch {
                cfg.street_pitch = p;
            }
            if let Some(f) = building_fill {
                cfg.building_fill = f;
            }
            let map = skyharvest::citymap::generate_city(
                cfg.extent,
                cfg.street_pitch,
                cfg.building_fill,
                cfg.height_range,
                cfg.mean_height,
                cfg.seed,
            )?;
            std::fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join("map.json");
            skyharvest::citymap::save_map(&map, &path)?;
            println!("wrote {} ({} buildings)", path.display(), map.buildings.len());
        }
        Command::PlanLearning { common } => {
            let dir = run_and_write(&common)?;
            println!("wrote learning plan under {}", dir.display());
        }
        Command::FitLos { common } => {
            let dir = run_and_write(&common)?;
            println!("wrote compressed map under {}", dir.display());
        }
        Command::PlanComm { common } => {
            let dir = run_and_write(&common)?;
            println!("wrote communication plan under {}", dir.display());
        }
        Command::Evaluate { common } => {
            let cfg = common.config()?;
            let variant = common.variant()?;
            let art = run_scenario(&cfg, variant)?;
            let dir = write_artifacts(&common.out_dir, &cfg, &art)?;
            let rows = scenario_rows(&cfg, variant, "", f64::NAN);
            let file = std::fs::File::create(dir.join("results.csv"))?;
            write_rows_csv(file, &rows)?;
            println!(
                "min-throughput: model {:.4}, measured {:.4} +/- {:.4} bits/s/Hz ({})",
                art.comm_plan.mu_model,
                art.eval.mean_min_throughput,
                art.eval.std_min_throughput,
                dir.display()
            );
        }
        Command::Sweep { common, sweep } => {
            let cfg = common.config()?;
            let variant = common.variant()?;
            let (field, list) = sweep
                .split_once('=')
                .ok_or_else(|| skyharvest::Error::Config("expected field=v1,v2,...".into()))?;
            let values: Vec<f64> = list
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| skyharvest::Error::Config(format!("bad value '{v}'")))
                })
                .collect::<Result<_>>()?;
            // Validate the field before running anything.
            apply_sweep(&cfg, field, values[0])?;
            let rows = scenario::sweep(&cfg, variant, field, &values)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join(format!("sweep_{field}.csv"));
            write_rows_csv(std::fs::File::create(&path)?, &rows)?;
            println!("wrote {} ({} rows)", path.display(), rows.len());
        }
        Command::Compare { common, against, seeds } => {
            let cfg = common.config()?;
            let a = common.variant()?;
            let b = VariantSpec::parse(&against)?;
            let res = compare(&cfg, a, b, seeds)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let path = common
                .out_dir
                .join(format!("compare_{}_vs_{}.json", res.variant_a, res.variant_b));
            std::fs::write(&path, serde_json::to_string_pretty(&res)?)?;
            println!(
                "{}: median {:.4} vs {}: median {:.4} (diff {:.4}, wins {}/{}, sign-test p = {:.4})",
                res.variant_a,
                res.median_a,
                res.variant_b,
                res.median_b,
                res.median_diff,
                res.wins_a,
                res.wins_b,
                res.p_sign
            );
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
