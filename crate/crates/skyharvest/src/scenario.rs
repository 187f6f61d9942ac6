//! Scenario orchestration: one config drives the full pipeline
//! (map generation, learning flight, parameter estimation, map compression,
//! communication planning, ground-truth evaluation), plus parameter sweeps
//! and paired variant comparisons.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{
    mle_estimate, sample_slot_measurements, ChannelParams, GramAccumulator, Measurement,
    SegmentParams,
};
use crate::citymap::{build_path_graph, generate_city, place_nodes, CityMap, GroundNode};
use crate::commplan::{
    baseline_probabilistic_cmap, bcd_optimize, deterministic_cmap, evaluate_plan,
    fit_pooled_deterministic, CommConfig, CommPlan, EvalResult,
};
use crate::learnplan::{plan_learning_trajectory, select_horizon, LearningPlan};
use crate::mapcompress::{compress, CompressConfig, CompressedMap};
use crate::{Error, Result};

/// Everything needed to reproduce one end-to-end run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    // City.
    pub extent: (f64, f64),
    pub street_pitch: f64,
    pub building_fill: f64,
    pub height_range: (f64, f64),
    pub mean_height: f64,
    pub num_nodes: usize,
    // Learning phase.
    pub t_l: f64,
    pub a_h: f64,
    pub a_v: f64,
    pub base: [f64; 3],
    pub terminal: [f64; 3],
    pub kappa: f64,
    // Shared kinematics / altitude band.
    pub v_max: f64,
    pub h_min: f64,
    pub h_max: f64,
    // Compression.
    pub train_radius: f64,
    pub train_samples: usize,
    // Communication phase.
    pub t_c: f64,
    pub n_c: Option<usize>,
    pub looped: bool,
    pub eps_mu: f64,
    pub max_iter: usize,
    pub solver_tol: f64,
    // Evaluation.
    pub trials: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            extent: (600.0, 600.0),
            street_pitch: 100.0,
            building_fill: 0.5,
            height_range: (5.0, 40.0),
            mean_height: 14.0,
            num_nodes: 4,
            t_l: 100.0,
            a_h: 100.0,
            a_v: 20.0,
            base: [0.0, 0.0, 50.0],
            terminal: [300.0, 300.0, 50.0],
            kappa: 2.5,
            v_max: 10.0,
            h_min: 50.0,
            h_max: 100.0,
            train_radius: crate::mapcompress::DEFAULT_TRAIN_RADIUS,
            train_samples: crate::mapcompress::DEFAULT_TRAIN_SAMPLES,
            t_c: 90.0,
            n_c: None,
            looped: true,
            eps_mu: 1e-3,
            max_iter: 50,
            solver_tol: 1e-8,
            trials: 200,
        }
    }
}

impl ScenarioConfig {
    pub fn comm_config(&self) -> CommConfig {
        let mut cfg = CommConfig::with_duration(self.t_c);
        if let Some(n) = self.n_c {
            cfg.n_c = n;
        }
        cfg.v_max = self.v_max;
        cfg.h_min = self.h_min;
        cfg.h_max = self.h_max;
        cfg.looped = self.looped;
        cfg.eps_mu = self.eps_mu;
        cfg.max_iter = self.max_iter;
        cfg.solver_tol = self.solver_tol;
        cfg
    }

    pub fn compress_config(&self) -> CompressConfig {
        CompressConfig {
            radius: self.train_radius,
            samples_per_node: self.train_samples,
            h_min: self.h_min,
            h_max: self.h_max,
            seed: mix_seed(self.seed, 2),
            fit_global: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::Config("num_nodes must be >= 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if !(self.h_min <= self.h_max) {
            return Err(Error::Config("h_min must not exceed h_max".into()));
        }
        self.comm_config().validate()
    }

    /// Stable short hash of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 step: decorrelates derived seeds.
    let mut z = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// How the planner models LoS probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Per-node logistic models.
    PerNode,
    /// One pooled logistic model shared by all nodes.
    Global,
    /// Single unsegmented power law, no LoS modelling.
    Deterministic,
}

/// Where the channel parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamSource {
    /// MLE over measurements gathered on the learning flight.
    Learned,
    /// Ground-truth parameters (idealized upper baseline).
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub model: ModelKind,
    pub params: ParamSource,
}

impl VariantSpec {
    pub fn label(&self) -> String {
        let m = match self.model {
            ModelKind::PerNode => "pernode",
            ModelKind::Global => "global",
            ModelKind::Deterministic => "deterministic",
        };
        let p = match self.params {
            ParamSource::Learned => "learned",
            ParamSource::True => "true",
        };
        format!("{m}-{p}")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (m, p) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("bad variant '{s}', expected model-params")))?;
        let model = match m {
            "pernode" => ModelKind::PerNode,
            "global" => ModelKind::Global,
            "deterministic" => ModelKind::Deterministic,
            _ => return Err(Error::Config(format!("unknown model kind '{m}'"))),
        };
        let params = match p {
            "learned" => ParamSource::Learned,
            "true" => ParamSource::True,
            _ => return Err(Error::Config(format!("unknown param source '{p}'"))),
        };
        Ok(VariantSpec { model, params })
    }
}

/// Intermediate and final artifacts of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioArtifacts {
    pub map: CityMap,
    pub nodes: Vec<GroundNode>,
    pub learning_plan: LearningPlan,
    pub measurements: Vec<(usize, Measurement)>,
    pub learned_params: Option<ChannelParams>,
    pub params_used: ChannelParams,
    pub compressed: CompressedMap,
    pub comm_plan: CommPlan,
    pub eval: EvalResult,
}

/// One output-table row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub variant: String,
    pub sweep_field: String,
    pub sweep_value: f64,
    pub metric: String,
    pub value: f64,
    pub status: String,
    pub config_hash: String,
}

/// Clamp learned parameters into the planner's admissible region: positive
/// exponents, NLoS at least as lossy as LoS, and an NLoS floor strictly below
/// the LoS gain. Shadowing variances are kept from the reference model.
pub fn clamp_learned(est: &ChannelParams, reference: &ChannelParams) -> ChannelParams {
    let mut out = *est;
    out.los.sigma2 = reference.los.sigma2;
    out.nlos.sigma2 = reference.nlos.sigma2;
    out.los.alpha = out.los.alpha.max(0.1);
    out.nlos.alpha = out.nlos.alpha.max(out.los.alpha);
    out.nlos.beta_db = out.nlos.beta_db.min(out.los.beta_db - 1.0);
    out
}

/// Fly the learning trajectory and collect labelled measurements.
pub fn fly_learning(
    map: &CityMap,
    params: &ChannelParams,
    nodes: &[GroundNode],
    plan: &LearningPlan,
    seed: u64,
) -> Vec<(usize, Measurement)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    for (slot, wp) in plan.waypoints.iter().enumerate() {
        for m in sample_slot_measurements(map, params, nodes, *wp, &mut rng) {
            log.push((slot, m));
        }
    }
    log
}

/// MLE over a measurement log; `None` when either segment is rank-deficient.
pub fn estimate_from_log(log: &[(usize, Measurement)]) -> Option<ChannelParams> {
    let mut acc = GramAccumulator::default();
    for (_, m) in log {
        acc.seg_mut(m.segment).add_row(m.d, m.gain_db);
    }
    let est = mle_estimate(&acc);
    let (al, bl) = est.los.omega?;
    let (an, bn) = est.nlos.omega?;
    Some(ChannelParams {
        los: SegmentParams { alpha: al, beta_db: bl, sigma2: 0.0 },
        nlos: SegmentParams { alpha: an, beta_db: bn, sigma2: 0.0 },
    })
}

/// End-to-end pipeline for one (config, variant) pair.
pub fn run_scenario(cfg: &ScenarioConfig, variant: VariantSpec) -> Result<ScenarioArtifacts> {
    cfg.validate()?;
    let true_params = ChannelParams::urban_micro();
    let map = generate_city(
        cfg.extent,
        cfg.street_pitch,
        cfg.building_fill,
        cfg.height_range,
        cfg.mean_height,
        cfg.seed,
    )?;
    if cfg.h_min < map.tallest {
        return Err(Error::Config(format!(
            "h_min = {} is below the tallest building ({:.1} m)",
            cfg.h_min, map.tallest
        )));
    }
    let nodes = place_nodes(&map, cfg.num_nodes, mix_seed(cfg.seed, 1))?;
    let graph = build_path_graph(
        &map, cfg.a_h, cfg.a_v, cfg.h_min, cfg.h_max, cfg.base, cfg.terminal,
    )?;
    let n_l = select_horizon(cfg.t_l, cfg.a_h, cfg.a_v, cfg.v_max)?;
    let learning_plan = plan_learning_trajectory(&graph, &map, &nodes, cfg.kappa, n_l)?;
    let measurements = fly_learning(&map, &true_params, &nodes, &learning_plan, mix_seed(cfg.seed, 4));
    let learned_params = estimate_from_log(&measurements).map(|p| clamp_learned(&p, &true_params));

    let params_used = match variant.params {
        ParamSource::True => true_params,
        ParamSource::Learned => learned_params.ok_or_else(|| {
            Error::CommPlan("learning flight left a channel segment unidentifiable".into())
        })?,
    };

    let compressed = match variant.model {
        ModelKind::PerNode => compress(&map, &nodes, &params_used, &cfg.compress_config())?,
        ModelKind::Global => {
            baseline_probabilistic_cmap(&compress(&map, &nodes, &params_used, &cfg.compress_config())?)?
        }
        ModelKind::Deterministic => match variant.params {
            ParamSource::Learned => {
                let pooled: Vec<(f64, f64)> =
                    measurements.iter().map(|(_, m)| (m.d, m.gain_db)).collect();
                let (alpha, beta_db, sigma2) = fit_pooled_deterministic(&pooled)?;
                deterministic_cmap(alpha, beta_db, sigma2, nodes.clone())
            }
            ParamSource::True => deterministic_cmap(
                0.5 * (true_params.los.alpha + true_params.nlos.alpha),
                0.5 * (true_params.los.beta_db + true_params.nlos.beta_db),
                0.5 * (true_params.los.sigma2 + true_params.nlos.sigma2),
                nodes.clone(),
            ),
        },
    };

    let comm_cfg = cfg.comm_config();
    let comm_plan = bcd_optimize(&compressed, &comm_cfg)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 3));
    let eval = evaluate_plan(
        &map,
        &true_params,
        &compressed,
        &comm_cfg,
        &comm_plan.schedule.q,
        &comm_plan.positions,
        cfg.trials,
        &mut eval_rng,
    )?;

    Ok(ScenarioArtifacts {
        map,
        nodes,
        learning_plan,
        measurements,
        learned_params,
        params_used,
        compressed,
        comm_plan,
        eval,
    })
}

/// Flatten one run into result rows; failures become a single error row.
pub fn scenario_rows(
    cfg: &ScenarioConfig,
    variant: VariantSpec,
    sweep_field: &str,
    sweep_value: f64,
) -> Vec<ResultRow> {
    let hash = cfg.hash();
    let row = |metric: &str, value: f64, status: &str| ResultRow {
        seed: cfg.seed,
        variant: variant.label(),
        sweep_field: sweep_field.to_string(),
        sweep_value,
        metric: metric.to_string(),
        value,
        status: status.to_string(),
        config_hash: hash.clone(),
    };
    match run_scenario(cfg, variant) {
        Ok(art) => vec![
            row("learning_final_error", art.learning_plan.final_error.as_f64(), "ok"),
            row("mu_model", art.comm_plan.mu_model, "ok"),
            row("mean_min_throughput", art.eval.mean_min_throughput, "ok"),
            row("std_min_throughput", art.eval.std_min_throughput, "ok"),
            row(
                "model_mean_min_throughput",
                art.eval.model_mean_min_throughput,
                "ok",
            ),
            row("bcd_iterations", art.comm_plan.trace.len() as f64, "ok"),
        ],
        Err(e) => vec![row("mean_min_throughput", f64::NAN, &format!("error: {e}"))],
    }
}

/// Supported sweep fields.
pub fn apply_sweep(cfg: &ScenarioConfig, field: &str, value: f64) -> Result<ScenarioConfig> {
    let mut out = cfg.clone();
    match field {
        "num_nodes" => out.num_nodes = value as usize,
        "t_c" => out.t_c = value,
        "mean_height" => out.mean_height = value,
        "t_l" => out.t_l = value,
        "h_min" => out.h_min = value,
        _ => return Err(Error::Config(format!("unknown sweep field '{field}'"))),
    }
    Ok(out)
}

/// Sweep one field over a list of values.
pub fn sweep(
    cfg: &ScenarioConfig,
    variant: VariantSpec,
    field: &str,
    values: &[f64],
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &v in values {
        let c = apply_sweep(cfg, field, v)?;
        rows.extend(scenario_rows(&c, variant, field, v));
    }
    Ok(rows)
}

/// Paired comparison of two variants over consecutive seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareResult {
    pub variant_a: String,
    pub variant_b: String,
    pub seeds: Vec<u64>,
    pub median_a: f64,
    pub median_b: f64,
    pub median_diff: f64,
    pub wins_a: usize,
    pub wins_b: usize,
    /// Two-sided sign-test p-value on the paired differences.
    pub p_sign: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Exact two-sided sign test: P(|wins - n/2| at least as extreme) under
/// Binomial(n, 1/2).
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let log_half = 0.5f64.ln();
    let tail = |k: usize| -> f64 {
        // P(X <= k)
        (0..=k)
            .map(|i| {
                let mut log_c = 0.0;
                for j in 0..i {
                    log_c += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
                }
                (log_c + n as f64 * log_half).exp()
            })
            .sum()
    };
    let low = wins.min(n - wins);
    (2.0 * tail(low)).min(1.0)
}

pub fn compare(
    cfg: &ScenarioConfig,
    a: VariantSpec,
    b: VariantSpec,
    num_seeds: usize,
) -> Result<CompareResult> {
    let mut va = Vec::new();
    let mut vb = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..num_seeds {
        let mut c = cfg.clone();
        c.seed = cfg.seed + i as u64;
        seeds.push(c.seed);
        va.push(run_scenario(&c, a)?.eval.mean_min_throughput);
        vb.push(run_scenario(&c, b)?.eval.mean_min_throughput);
    }
    let (mut wins_a, mut wins_b) = (0usize, 0usize);
    let mut diffs: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
    for d in &diffs {
        if *d > 0.0 {
            wins_a += 1;
        } else if *d < 0.0 {
            wins_b += 1;
        }
    }
    let p_sign = sign_test_p(wins_a, wins_a + wins_b);
    Ok(CompareResult {
        variant_a: a.label(),
        variant_b: b.label(),
        seeds,
        median_a: median(&mut va),
        median_b: median(&mut vb),
        median_diff: median(&mut diffs),
        wins_a,
        wins_b,
        p_sign,
    })
}

/// Write all artifacts of a run under `<out_dir>/<config-hash>/`.
pub fn write_artifacts(
    out_dir: &std::path::Path,
    cfg: &ScenarioConfig,
    art: &ScenarioArtifacts,
) -> Result<std::path::PathBuf> {
    let dir = out_dir.join(cfg.hash());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    crate::citymap::save_map(&art.map, &dir.join("map.json"))?;
    crate::learnplan::save_plan(&art.learning_plan, &dir.join("learning.json"))?;
    crate::mapcompress::save_compressed(&art.compressed, &dir.join("compressed.json"))?;
    crate::commplan::save_comm_plan(&art.comm_plan, &dir.join("commplan.json"))?;
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&art.eval)?)?;
    let file = std::fs::File::create(dir.join("measurements.csv"))?;
    crate::channel::export_measurements_csv(file, &art.measurements)?;
    Ok(dir)
}

pub fn write_rows_csv<W: std::io::Write>(writer: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "seed", "variant", "sweep_field", "sweep_value", "metric", "value", "status",
        "config_hash",
    ])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.variant.clone(),
            r.sweep_field.clone(),
            format!("{}", r.sweep_value),
            r.metric.clone(),
            format!("{}", r.value),
            r.status.clone(),
            r.config_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_cfg() -> ScenarioConfig {
        ScenarioConfig {
            num_nodes: 2,
            t_c: 12.0,
            n_c: Some(12),
            trials: 20,
            train_samples: 300,
            max_iter: 4,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let c1 = fast_cfg();
        let c2 = fast_cfg();
        assert_eq!(c1.hash(), c2.hash());
        let mut c3 = fast_cfg();
        c3.seed = 99;
        assert_ne!(c1.hash(), c3.hash());
        assert_eq!(c1.hash().len(), 16);
    }

    #[test]
    fn variant_labels_round_trip() {
        for m in [ModelKind::PerNode, ModelKind::Global, ModelKind::Deterministic] {
            for p in [ParamSource::Learned, ParamSource::True] {
                let v = VariantSpec { model: m, params: p };
                assert_eq!(VariantSpec::parse(&v.label()).unwrap(), v);
            }
        }
        assert!(VariantSpec::parse("bogus").is_err());
        assert!(VariantSpec::parse("pernode-psychic").is_err());
    }

    #[test]
    fn clamp_learned_enforces_admissible_region() {
        let reference = ChannelParams::urban_micro();
        let est = ChannelParams {
            los: SegmentParams { alpha: 3.0, beta_db: -30.0, sigma2: 0.0 },
            nlos: SegmentParams { alpha: 2.0, beta_db: -29.0, sigma2: 0.0 },
        };
        let c = clamp_learned(&est, &reference);
        assert!(c.nlos.alpha >= c.los.alpha);
        assert!(c.nlos.beta_db <= c.los.beta_db - 1.0);
        assert_eq!(c.los.sigma2, reference.los.sigma2);
        assert_eq!(c.nlos.sigma2, reference.nlos.sigma2);
    }

    #[test]
    fn sign_test_hand_values() {
        // n = 5, all wins: p = 2 * (1/2)^5 = 0.0625.
        assert!((sign_test_p(5, 5) - 0.0625).abs() < 1e-12);
        assert!((sign_test_p(0, 5) - 0.0625).abs() < 1e-12);
        // Balanced outcome is not significant.
        assert!(sign_test_p(3, 6) > 0.9);
        assert_eq!(sign_test_p(0, 0), 1.0);
    }

    #[test]
    fn full_pipeline_runs_and_is_deterministic() {
        let cfg = fast_cfg();
        let v = VariantSpec { model: ModelKind::PerNode, params: ParamSource::True };
        let a1 = run_scenario(&cfg, v).unwrap();
        let a2 = run_scenario(&cfg, v).unwrap();
        assert_eq!(a1.eval.mean_min_throughput, a2.eval.mean_min_throughput);
        assert_eq!(a1.comm_plan.positions, a2.comm_plan.positions);
        assert!(a1.eval.mean_min_throughput > 0.0);
        assert!(a1.learning_plan.final_error.is_finite());
    }

    #[test]
    fn sweep_produces_rows_per_value() {
        let cfg = fast_cfg();
        let v = VariantSpec { model: ModelKind::Deterministic, params: ParamSource::True };
        let rows = sweep(&cfg, v, "num_nodes", &[2.0, 3.0]).unwrap();
        assert!(rows.len() >= 2);
        assert!(rows.iter().any(|r| r.sweep_value == 2.0));
        assert!(rows.iter().any(|r| r.sweep_value == 3.0));
        assert!(sweep(&cfg, v, "nonsense", &[1.0]).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = fast_cfg();
        cfg.h_min = 10.0; // below the tallest building almost surely
        cfg.h_max = 10.0;
        let v = VariantSpec { model: ModelKind::PerNode, params: ParamSource::True };
        assert!(run_scenario(&cfg, v).is_err());
        let mut cfg2 = fast_cfg();
        cfg2.num_nodes = 0;
        assert!(run_scenario(&cfg2, v).is_err());
    }

    #[test]
    fn failure_becomes_error_row() {
        let mut cfg = fast_cfg();
        cfg.num_nodes = 0;
        let v = VariantSpec { model: ModelKind::PerNode, params: ParamSource::True };
        let rows = scenario_rows(&cfg, v, "", f64::NAN);
        assert_eq!(rows.len(), 1);
        assert!(rows[0].status.starts_with("error"));
        assert!(rows[0].value.is_nan());
    }
}
