//! Map compression: per-node logistic models of line-of-sight probability
//! as a function of elevation angle, plus the closed-form expected channel
//! gain they induce.
//!
//! Each ground node k gets p_k(theta) = 1 / (1 + exp(-a_k theta + b_k)) with
//! theta = atan(z / r) the elevation angle from the node to the UAV. The
//! compressed map combined with the channel-parameter estimates yields
//! E[gain] in closed form, which downstream planning consumes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, D_MIN};
use crate::citymap::{los_check, CityMap, GroundNode, Segment};
use crate::{Error, Result};

/// Default training-cylinder radius around each node, metres.
pub const DEFAULT_TRAIN_RADIUS: f64 = 250.0;
/// Default training-set size per node.
pub const DEFAULT_TRAIN_SAMPLES: usize = 1500;
/// L2 regularization weight for the logistic fit.
pub const FIT_L2: f64 = 1e-6;

/// One logistic training sample: elevation angle and LoS indicator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainingSample {
    pub theta: f64,
    pub los: bool,
}

/// Elevation angle from a ground point to a UAV position.
pub fn elevation_angle(node: [f64; 3], uav: [f64; 3]) -> f64 {
    let r = ((uav[0] - node[0]).powi(2) + (uav[1] - node[1]).powi(2)).sqrt();
    let z = uav[2] - node[2];
    z.atan2(r)
}

/// Logistic LoS probability for parameters (a, b).
pub fn los_probability(a: f64, b: f64, theta: f64) -> f64 {
    1.0 / (1.0 + (-a * theta + b).exp())
}

/// Draw LoS-labelled samples uniformly over a cylinder of radius
/// `radius` around `node`, altitudes uniform in [h_min, h_max], clipped to
/// the map extent.
pub fn sample_training_set(
    map: &CityMap,
    node: &GroundNode,
    radius: f64,
    h_min: f64,
    h_max: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    if radius <= 0.0 || h_max < h_min || count == 0 {
        return Err(Error::InvalidArgument("bad training-set parameters".into()));
    }
    let (ex, ey) = map.extent;
    let x_lo = (node.position[0] - radius).max(0.0);
    let x_hi = (node.position[0] + radius).min(ex);
    let y_lo = (node.position[1] - radius).max(0.0);
    let y_hi = (node.position[1] + radius).min(ey);
    if x_lo >= x_hi || y_lo >= y_hi {
        return Err(Error::InvalidArgument(
            "training cylinder does not intersect the map extent".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut guard = 0usize;
    while samples.len() < count {
        guard += 1;
        if guard > 1000 * count {
            return Err(Error::InvalidArgument(
                "training sampler failed to find points inside the cylinder".into(),
            ));
        }
        let x = rng.gen_range(x_lo..x_hi);
        let y = rng.gen_range(y_lo..y_hi);
        let dx = x - node.position[0];
        let dy = y - node.position[1];
        if dx * dx + dy * dy > radius * radius {
            continue;
        }
        let z = rng.gen_range(h_min..=h_max);
        let uav = [x, y, z];
        let d2 = dx * dx + dy * dy + (z - node.position[2]).powi(2);
        if d2 < D_MIN * D_MIN {
            continue;
        }
        samples.push(TrainingSample {
            theta: elevation_angle(node.position, uav),
            los: los_check(map, uav, node.position) == Segment::Los,
        });
    }
    Ok(samples)
}

/// Diagnostics from the logistic fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub neg_log_likelihood: f64,
    pub converged: bool,
}

fn nll(a: f64, b: f64, samples: &[TrainingSample]) -> f64 {
    let mut s = 0.0;
    for t in samples {
        let u = -a * t.theta + b;
        // log(1 + e^u) computed stably.
        let log1pe = if u > 0.0 { u + (-u).exp().ln_1p() } else { u.exp().ln_1p() };
        s += if t.los { log1pe } else { log1pe - u };
    }
    s + 0.5 * FIT_L2 * (a * a + b * b)
}

/// Damped-Newton logistic regression of LoS on elevation angle.
///
/// The slope is projected to a >= 0: LoS probability must not decrease with
/// elevation. Returns (a, b, diagnostics).
pub fn fit_logistic(samples: &[TrainingSample]) -> Result<(f64, f64, FitDiagnostics)> {
    if samples.is_empty() {
        return Err(Error::LogisticFit("empty training set".into()));
    }
    let (mut a, mut b) = (1.0f64, 0.0f64);
    let mut diag = FitDiagnostics {
        iterations: 0,
        final_grad_norm: f64::INFINITY,
        neg_log_likelihood: nll(a, b, samples),
        converged: false,
    };
    for iter in 0..200 {
        // Gradient and Hessian of the negative log-likelihood in (a, b).
        // Feature vector per sample is (-theta, 1) applied to u = -a*theta + b.
        let (mut ga, mut gb) = (FIT_L2 * a, FIT_L2 * b);
        let (mut haa, mut hab, mut hbb) = (FIT_L2, 0.0, FIT_L2);
        for t in samples {
            let u = -a * t.theta + b;
            let p = 1.0 / (1.0 + (-u).exp()); // P(NLoS-side label)=sigmoid(u)? see below
            // With p(theta)=sigmoid(a*theta-b)=P(LoS), residual is p_los - y.
            let p_los = 1.0 - p;
            let resid = p_los - if t.los { 1.0 } else { 0.0 };
            ga += resid * t.theta;
            gb += -resid;
            let w = p_los * (1.0 - p_los);
            haa += w * t.theta * t.theta;
            hab += -w * t.theta;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-300 {
            return Err(Error::LogisticFit("singular Hessian".into()));
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        // Damped line search on the regularized NLL.
        let f0 = nll(a, b, samples);
        let mut step = 1.0;
        let (mut na, mut nb) = (a, b);
        for _ in 0..40 {
            na = (a - step * da).max(0.0);
            nb = b - step * db;
            if nll(na, nb, samples) <= f0 {
                break;
            }
            step *= 0.5;
        }
        let moved = ((na - a).powi(2) + (nb - b).powi(2)).sqrt();
        a = na;
        b = nb;
        diag.iterations = iter + 1;
        diag.final_grad_norm = (ga * ga + gb * gb).sqrt();
        if diag.final_grad_norm < 1e-8 || moved < 1e-12 {
            diag.converged = true;
            break;
        }
    }
    diag.neg_log_likelihood = nll(a, b, samples);
    Ok((a, b, diag))
}

/// Per-node logistic model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NodeModel {
    pub node_id: usize,
    pub a: f64,
    pub b: f64,
    pub diagnostics: FitDiagnostics,
}

/// Compressed map: per-node logistic models plus the channel parameters in
/// the linear-domain form used by the expected-gain formula.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressedMap {
    pub models: Vec<NodeModel>,
    pub global: Option<NodeModel>,
    /// LoS path-loss exponent.
    pub alpha_los: f64,
    /// NLoS path-loss exponent.
    pub alpha_nlos: f64,
    /// Linear-domain LoS gain at 1 m with shadowing absorbed.
    pub beta_los_eff: f64,
    /// Linear-domain NLoS gain at 1 m with shadowing absorbed.
    pub beta_nlos_eff: f64,
    pub nodes: Vec<GroundNode>,
}

/// Shadowing absorption: E[10^(eta/10)] = exp(c * sigma^2) with
/// c = (ln 10 / 10)^2 / 2.
pub fn shadowing_factor(sigma2: f64) -> f64 {
    let c = (std::f64::consts::LN_10 / 10.0).powi(2) / 2.0;
    (c * sigma2).exp()
}

impl CompressedMap {
    pub fn from_params(
        models: Vec<NodeModel>,
        global: Option<NodeModel>,
        params: &ChannelParams,
        nodes: Vec<GroundNode>,
    ) -> Self {
        let beta_l = 10f64.powf(params.los.beta_db / 10.0) * shadowing_factor(params.los.sigma2);
        let beta_n = 10f64.powf(params.nlos.beta_db / 10.0) * shadowing_factor(params.nlos.sigma2);
        CompressedMap {
            models,
            global,
            alpha_los: params.los.alpha,
            alpha_nlos: params.nlos.alpha,
            beta_los_eff: beta_l,
            beta_nlos_eff: beta_n,
            nodes,
        }
    }

    /// Exponent ratio A = alpha_NLoS / alpha_LoS (>= 1 for physical maps).
    pub fn a_ratio(&self) -> f64 {
        self.alpha_nlos / self.alpha_los
    }

    /// Gain ratio B = beta_NLoS / beta_LoS in the linear domain.
    pub fn b_ratio(&self) -> f64 {
        self.beta_nlos_eff / self.beta_los_eff
    }

    pub fn model(&self, node_id: usize) -> &NodeModel {
        self.models
            .iter()
            .find(|m| m.node_id == node_id)
            .or(self.global.as_ref())
            .expect("node model present")
    }

    /// LoS probability for node `node_id` seen from `uav`.
    pub fn p_los(&self, node_id: usize, uav: [f64; 3]) -> f64 {
        let node = &self.nodes[node_id];
        let m = self.model(node_id);
        los_probability(m.a, m.b, elevation_angle(node.position, uav))
    }

    /// Expected linear channel gain, marginalizing the LoS/NLoS mixture and
    /// shadowing:
    ///   E[gamma] = ((d^((A-1) alpha_L) - B) p + B) * beta_L / d^alpha_N.
    pub fn expected_gain(&self, node_id: usize, uav: [f64; 3]) -> f64 {
        let node = &self.nodes[node_id];
        let d2: f64 = (0..3).map(|i| (uav[i] - node.position[i]).powi(2)).sum();
        let d = d2.sqrt().max(D_MIN);
        let p = self.p_los(node_id, uav);
        let a_ratio = self.a_ratio();
        let b_ratio = self.b_ratio();
        ((d.powf((a_ratio - 1.0) * self.alpha_los) - b_ratio) * p + b_ratio) * self.beta_los_eff
            / d.powf(self.alpha_nlos)
    }
}

/// Compression settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompressConfig {
    pub radius: f64,
    pub samples_per_node: usize,
    pub h_min: f64,
    pub h_max: f64,
    pub seed: u64,
    pub fit_global: bool,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            radius: DEFAULT_TRAIN_RADIUS,
            samples_per_node: DEFAULT_TRAIN_SAMPLES,
            h_min: 50.0,
            h_max: 100.0,
            seed: 0,
            fit_global: true,
        }
    }
}

/// Fit per-node models (and optionally a pooled global fallback).
pub fn compress(
    map: &CityMap,
    nodes: &[GroundNode],
    params: &ChannelParams,
    cfg: &CompressConfig,
) -> Result<CompressedMap> {
    let mut models = Vec::with_capacity(nodes.len());
    let mut pooled = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        let samples = sample_training_set(
            map,
            node,
            cfg.radius,
            cfg.h_min,
            cfg.h_max,
            cfg.samples_per_node,
            cfg.seed.wrapping_add(i as u64).wrapping_mul(0x9E3779B97F4A7C15),
        )?;
        let (a, b, diagnostics) = fit_logistic(&samples)?;
        models.push(NodeModel { node_id: node.id, a, b, diagnostics });
        if cfg.fit_global {
            pooled.extend_from_slice(&samples);
        }
    }
    let global = if cfg.fit_global && !pooled.is_empty() {
        let (a, b, diagnostics) = fit_logistic(&pooled)?;
        Some(NodeModel { node_id: usize::MAX, a, b, diagnostics })
    } else {
        None
    };
    Ok(CompressedMap::from_params(models, global, params, nodes.to_vec()))
}

pub fn save_compressed(map: &CompressedMap, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(map)?)?;
    Ok(())
}

pub fn load_compressed(path: &std::path::Path) -> Result<CompressedMap> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn export_models_csv<W: std::io::Write>(writer: W, cmap: &CompressedMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["node_id", "a", "b", "iterations", "converged"])?;
    for m in &cmap.models {
        w.write_record([
            m.node_id.to_string(),
            format!("{}", m.a),
            format!("{}", m.b),
            m.diagnostics.iterations.to_string(),
            m.diagnostics.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
