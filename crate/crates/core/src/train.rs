//! Alternating train/enforce loop: an evolution-strategies policy step on
//! the simulation plant, followed by a margin-enforcement step against the
//! design plant. After every policy update the controller is either
//! re-certified directly (letting the uncertainty multiplier move), or
//! pulled back into the certified set by the convex projection pipeline.
//!
//! The policy step is pluggable: [`es_step`] is the derivative-free default,
//! and anything mapping parameters to parameters can replace it.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{certify, CertifyOutcome};
use crate::controller::{Activation, RinnDims, RinnParams};
use crate::error::{Error, Result};
use crate::plant::{
    flexible_rod_plant, matrix_from_rows, rigid_rod_plant, DiskMargin, PlantModel, RodParams,
};
use crate::sim::{rollout, PerturbationSpec, RolloutOptions, SimConfig};
use crate::synthesis::{
    construct_theta_hat_regularized, project_theta, project_theta_hat, reconstruct,
};

/// Exploration noise on the commanded input during training rollouts,
/// annealed linearly over the run.
const NOISE_STD_START: f64 = 0.5;
const NOISE_STD_END: f64 = 0.05;

const MAX_NUMERICAL_FAILURE_STREAK: usize = 3;

/// Training variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Alternating policy/enforcement loop; every adopted controller is
    /// certified against the design plant.
    Constrained,
    /// Pure policy optimization, no certification machinery.
    UnconstrainedBaseline,
    /// Constrained loop restricted to LTI controllers (`n_phi = 0`).
    LtiBaseline,
}

/// Evolution-strategies knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub population: usize,
    pub es_sigma: f64,
    /// `None` resolves per mode: 5e-5 constrained, 1e-4 otherwise.
    pub learning_rate: Option<f64>,
    pub episodes_per_eval: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            population: 32,
            es_sigma: 0.05,
            learning_rate: None,
            episodes_per_eval: 4,
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Margins are certified against this model.
    pub plant_design: PlantModel,
    /// Rollouts use this (possibly higher-fidelity) model.
    pub plant_sim: PlantModel,
    pub margin: DiskMargin,
    pub nk: usize,
    pub nphi: usize,
    pub activation: Activation,
    pub sim: SimConfig,
    pub rl: RlConfig,
    pub iterations: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.rl.population < 2 || self.rl.population % 2 != 0 {
            return Err(Error::Config("population must be even and >= 2".into()));
        }
        if self.rl.episodes_per_eval == 0 {
            return Err(Error::Config("episodes_per_eval must be positive".into()));
        }
        if matches!(self.mode, TrainMode::Constrained | TrainMode::LtiBaseline)
            && self.nk != self.plant_design.n_states()
        {
            return Err(Error::Config(format!(
                "constrained modes need controller order {} equal to the design plant order {}",
                self.nk,
                self.plant_design.n_states()
            )));
        }
        Ok(())
    }

    /// `n_phi` actually used; the LTI baseline forces zero.
    pub fn effective_nphi(&self) -> usize {
        match self.mode {
            TrainMode::LtiBaseline => 0,
            _ => self.nphi,
        }
    }

    pub fn controller_dims(&self) -> RinnDims {
        RinnDims {
            nk: self.nk,
            nphi: self.effective_nphi(),
            nu: self.plant_sim.n_inputs(),
            ny: self.plant_sim.n_outputs(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.rl.learning_rate.unwrap_or(match self.mode {
            TrainMode::Constrained => 5e-5,
            _ => 1e-4,
        })
    }

    fn noise_std(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return NOISE_STD_START;
        }
        let t = (iteration - 1) as f64 / (self.iterations - 1) as f64;
        NOISE_STD_START + (NOISE_STD_END - NOISE_STD_START) * t
    }
}

/// One metrics line per training iteration. Certification fields are `None`
/// (blank in CSV) in the unconstrained baseline.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_eval_reward: f64,
    pub std_eval_reward: f64,
    pub cert_feasible_pre_projection: Option<bool>,
    pub projection_applied: Option<bool>,
    pub projection_distance: Option<f64>,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iteration,env_steps,mean_eval_reward,std_eval_reward,cert_feasible_pre_projection,projection_applied,projection_distance,wall_time_s";

    pub fn to_csv_line(&self) -> String {
        let flag = |v: Option<bool>| v.map(|b| if b { "1" } else { "0" }.to_string()).unwrap_or_default();
        let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.env_steps,
            self.mean_eval_reward,
            self.std_eval_reward,
            flag(self.cert_feasible_pre_projection),
            flag(self.projection_applied),
            num(self.projection_distance),
            self.wall_time_s
        )
    }
}

/// Certificate triple carried in checkpoints.
#[derive(Debug, Clone)]
pub struct CertTriple {
    pub x: DMatrix<f64>,
    pub lambda_p: Vec<f64>,
    pub lambda_k: Vec<f64>,
    pub margin: DiskMargin,
}

/// Training state snapshot; serializes as the controller schema plus
/// `iteration`, `env_steps`, `certificate`, and `rng_state` fields.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: usize,
    pub theta: RinnParams,
    pub certificate: Option<CertTriple>,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut value: serde_json::Value =
            serde_json::from_str(&self.theta.to_json()).expect("controller json");
        let obj = value.as_object_mut().expect("object");
        obj.insert("iteration".into(), serde_json::json!(self.iteration));
        obj.insert("env_steps".into(), serde_json::json!(self.env_steps));
        obj.insert(
            "certificate".into(),
            match &self.certificate {
                Some(c) => serde_json::json!({
                    "X": crate::plant::matrix_to_rows(&c.x),
                    "lambda_p": c.lambda_p,
                    "lambda_k": c.lambda_k,
                    "alpha": c.margin.alpha,
                    "sigma": c.margin.sigma,
                }),
                None => serde_json::Value::Null,
            },
        );
        obj.insert(
            "rng_state".into(),
            serde_json::to_value(&self.rng).expect("rng serialization"),
        );
        serde_json::to_string_pretty(&value).expect("checkpoint serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let theta = RinnParams::from_json(text)?;
        let value: serde_json::Value = serde_json::from_str(text)?;
        let iteration = value["iteration"].as_u64().unwrap_or(0) as usize;
        let env_steps = value["env_steps"].as_u64().unwrap_or(0);
        let certificate = match &value["certificate"] {
            serde_json::Value::Null => None,
            cert => {
                let x = matrix_from_rows(
                    &serde_json::from_value::<Vec<Vec<f64>>>(cert["X"].clone())?,
                    "X",
                )?;
                Some(CertTriple {
                    x,
                    lambda_p: serde_json::from_value(cert["lambda_p"].clone())?,
                    lambda_k: serde_json::from_value(cert["lambda_k"].clone())?,
                    margin: DiskMargin::new(
                        cert["alpha"].as_f64().unwrap_or(0.0),
                        cert["sigma"].as_f64().unwrap_or(0.0),
                    )?,
                })
            }
        };
        let rng: ChaCha8Rng = serde_json::from_value(value["rng_state"].clone())?;
        Ok(Self { iteration, theta, certificate, rng, env_steps })
    }
}

/// Receives training events; implementations write files or collect rows.
pub trait TrainSink {
    fn metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _cp: &Checkpoint) -> Result<()> {
        Ok(())
    }
    /// Called once per iteration with the adopted controller.
    fn adopted(&mut self, _iteration: usize, _theta: &RinnParams) -> Result<()> {
        Ok(())
    }
}

/// Sink that drops everything.
pub struct NullSink;
impl TrainSink for NullSink {}

/// Sink that collects everything in memory.
#[derive(Default)]
pub struct MemorySink {
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<Checkpoint>,
    pub adopted: Vec<(usize, RinnParams)>,
}

impl TrainSink for MemorySink {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.push(row.clone());
        Ok(())
    }
    fn checkpoint(&mut self, cp: &Checkpoint) -> Result<()> {
        self.checkpoints.push(cp.clone());
        Ok(())
    }
    fn adopted(&mut self, iteration: usize, theta: &RinnParams) -> Result<()> {
        self.adopted.push((iteration, theta.clone()));
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Evolution-strategies step
// ---------------------------------------------------------------------------

/// Parameters of one antithetic ES update.
#[derive(Debug, Clone, Copy)]
pub struct EsConfig {
    pub population: usize,
    pub sigma: f64,
    pub learning_rate: f64,
}

/// Outcome of one ES update.
#[derive(Debug, Clone)]
pub struct EsOutcome {
    pub theta: DVector<f64>,
    /// True when every single evaluation diverged; the step is then a no-op.
    pub all_diverged: bool,
    pub evaluations: usize,
}

/// The antithetic estimator: `theta + lr / (population * sigma) *
/// sum_i (r+_i - r-_i) eps_i` over `population / 2` direction pairs.
pub fn antithetic_update(
    theta: &DVector<f64>,
    directions: &[DVector<f64>],
    r_plus: &[f64],
    r_minus: &[f64],
    cfg: &EsConfig,
) -> DVector<f64> {
    let mut update = DVector::zeros(theta.len());
    for ((eps, rp), rm) in directions.iter().zip(r_plus).zip(r_minus) {
        update += (rp - rm) * eps;
    }
    theta + (cfg.learning_rate / (cfg.population as f64 * cfg.sigma)) * update
}

/// One derivative-free policy update. `eval` maps a candidate parameter
/// vector and an episode seed to a total episode reward, or `None` on
/// divergence (scored as zero). Deterministic given the RNG state; the
/// candidate evaluations fan out in parallel over seeded pure rollouts.
pub fn es_step<F>(
    theta: &DVector<f64>,
    cfg: &EsConfig,
    rng: &mut ChaCha8Rng,
    episode_seeds: &[u64],
    eval: F,
) -> EsOutcome
where
    F: Fn(&DVector<f64>, u64) -> Option<f64> + Sync,
{
    assert!(cfg.population >= 2 && cfg.population % 2 == 0, "even population");
    let half = cfg.population / 2;
    let n = theta.len();
    let directions: Vec<DVector<f64>> = (0..half)
        .map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();

    let score = |candidate: &DVector<f64>| -> (f64, usize) {
        let mut total = 0.0;
        let mut diverged = 0;
        for &seed in episode_seeds {
            match eval(candidate, seed) {
                Some(r) => total += r,
                None => diverged += 1,
            }
        }
        (total / episode_seeds.len() as f64, diverged)
    };

    let results: Vec<((f64, usize), (f64, usize))> = directions
        .par_iter()
        .map(|eps| {
            let plus = theta + cfg.sigma * eps;
            let minus = theta - cfg.sigma * eps;
            (score(&plus), score(&minus))
        })
        .collect();

    let evaluations = cfg.population * episode_seeds.len();
    let total_diverged: usize = results.iter().map(|(p, m)| p.1 + m.1).sum();
    if total_diverged == evaluations {
        return EsOutcome { theta: theta.clone(), all_diverged: true, evaluations };
    }
    let r_plus: Vec<f64> = results.iter().map(|(p, _)| p.0).collect();
    let r_minus: Vec<f64> = results.iter().map(|(_, m)| m.0).collect();
    EsOutcome {
        theta: antithetic_update(theta, &directions, &r_plus, &r_minus, cfg),
        all_diverged: false,
        evaluations,
    }
}

/// Policy-improvement step on the simulation plant. Returns the proposed
/// parameters (not yet margin-enforced) and the number of environment steps
/// consumed.
pub fn rl_step(
    theta: &RinnParams,
    plant_sim: &PlantModel,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    noise_std: f64,
) -> (RinnParams, u64, bool) {
    let dims = theta.dims();
    let activation = theta.activation;
    let es_cfg = EsConfig {
        population: cfg.rl.population,
        sigma: cfg.rl.es_sigma,
        learning_rate: cfg.learning_rate(),
    };
    let episode_seeds: Vec<u64> = (0..cfg.rl.episodes_per_eval).map(|_| rng.gen()).collect();
    let sim = cfg.sim.clone();
    let eval = |vec: &DVector<f64>, seed: u64| -> Option<f64> {
        let candidate = RinnParams::unflatten(vec, dims, activation).ok()?;
        let episode_cfg = SimConfig { seed, ..sim.clone() };
        let opts = RolloutOptions { sigma: 0.0, exploration_noise: Some(noise_std) };
        rollout(plant_sim, &candidate, &episode_cfg, &PerturbationSpec::None, &opts)
            .ok()
            .map(|t| t.total_reward)
    };
    let outcome = es_step(&theta.flatten(), &es_cfg, rng, &episode_seeds, eval);
    let steps = (outcome.evaluations * cfg.sim.n_steps()) as u64;
    let theta_prime = RinnParams::unflatten(&outcome.theta, dims, activation)
        .expect("flattened dims are consistent");
    (theta_prime, steps, outcome.all_diverged)
}

/// Noise-free evaluation: mean and standard deviation of episode reward over
/// seeded rollouts (divergence scores zero).
pub fn evaluate(
    theta: &RinnParams,
    plant_sim: &PlantModel,
    sim: &SimConfig,
    seeds: &[u64],
) -> (f64, f64) {
    let rewards: Vec<f64> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SimConfig { seed, ..sim.clone() };
            rollout(plant_sim, theta, &cfg, &PerturbationSpec::None, &RolloutOptions::default())
                .map(|t| t.total_reward)
                .unwrap_or(0.0)
        })
        .collect();
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
        / rewards.len() as f64;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Initialization and the training loop
// ---------------------------------------------------------------------------

/// State after initialization: parameters plus the enforcement triple.
#[derive(Debug, Clone)]
pub struct InitState {
    pub theta: RinnParams,
    pub x: DMatrix<f64>,
    pub lambda_p: Vec<f64>,
    pub lambda_k: Vec<f64>,
}

fn gaussian_theta(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> RinnParams {
    let dims = cfg.controller_dims();
    let mut theta = RinnParams::zeros(dims, cfg.activation);
    let mut fill = |m: &mut DMatrix<f64>| {
        let fan_in = m.ncols().max(1) as f64;
        let std = 0.1 / fan_in.sqrt();
        for v in m.iter_mut() {
            *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    };
    fill(&mut theta.a_k);
    fill(&mut theta.b_kw);
    fill(&mut theta.b_ky);
    fill(&mut theta.c_kv);
    fill(&mut theta.d_kvw);
    fill(&mut theta.d_kvy);
    fill(&mut theta.c_ku);
    fill(&mut theta.d_kuw);
    fill(&mut theta.d_kuy);
    theta
}

/// Draws scaled Gaussian parameters; in the constrained modes, immediately
/// runs the projection path once (from `X = Lambda = I`, with the
/// degenerate-`X` repair) so training starts from a certified controller.
pub fn initialize(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<InitState> {
    cfg.validate()?;
    let theta_raw = gaussian_theta(cfg, rng);
    let dims = cfg.controller_dims();
    let nx = cfg.plant_design.n_states() + cfg.nk;
    let identity_state = InitState {
        theta: theta_raw.clone(),
        x: DMatrix::identity(nx, nx),
        lambda_p: vec![1.0; dims.nu],
        lambda_k: vec![1.0; dims.nphi],
    };
    if cfg.mode == TrainMode::UnconstrainedBaseline {
        return Ok(identity_state);
    }

    let plant = &cfg.plant_design;
    let th_ref = construct_theta_hat_regularized(
        &theta_raw,
        &identity_state.x,
        &identity_state.lambda_k,
        plant,
    )?;
    let th_proj = project_theta_hat(&th_ref, &identity_state.lambda_p, cfg.margin, plant)
        .map_err(|e| match e {
            Error::ProjectionInfeasible { alpha, sigma } => Error::Config(format!(
                "no controller of this structure attains the margin (alpha={alpha}, \
                 sigma={sigma}); reduce alpha"
            )),
            other => other,
        })?;
    let (theta_rec, x, lambda_k) = reconstruct(&th_proj, plant, cfg.activation)?;
    let theta = match project_theta(
        &theta_raw,
        &x,
        &identity_state.lambda_p,
        &lambda_k,
        cfg.margin,
        plant,
    ) {
        Ok(t) => t,
        // The reconstructed controller is itself in the certified set.
        Err(Error::NumericalFailure(_)) => theta_rec,
        Err(e) => return Err(e),
    };
    Ok(InitState {
        theta,
        x,
        lambda_p: identity_state.lambda_p,
        lambda_k,
    })
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Runs the alternating train/enforce loop.
pub fn train(cfg: &TrainConfig, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let constrained = cfg.mode != TrainMode::UnconstrainedBaseline;

    let init = initialize(cfg, &mut rng)?;
    let mut theta = init.theta;
    let mut x = init.x;
    let mut lambda_p = init.lambda_p;
    let mut lambda_k = init.lambda_k;

    let mut env_steps: u64 = 0;
    let mut metrics_log: Vec<MetricsRow> = Vec::new();
    let mut numerical_failures = 0usize;

    let make_checkpoint = |iteration: usize,
                           theta: &RinnParams,
                           x: &DMatrix<f64>,
                           lambda_p: &[f64],
                           lambda_k: &[f64],
                           rng: &ChaCha8Rng,
                           env_steps: u64| Checkpoint {
        iteration,
        theta: theta.clone(),
        certificate: constrained.then(|| CertTriple {
            x: x.clone(),
            lambda_p: lambda_p.to_vec(),
            lambda_k: lambda_k.to_vec(),
            margin: cfg.margin,
        }),
        rng: rng.clone(),
        env_steps,
    };

    for iteration in 1..=cfg.iterations {
        let started = Instant::now();
        let noise = cfg.noise_std(iteration);
        let (theta_prime, steps, all_diverged) =
            rl_step(&theta, &cfg.plant_sim, cfg, &mut rng, noise);
        env_steps += steps;

        let mut cert_feasible = None;
        let mut projection_applied = None;
        let mut projection_distance = None;

        if !constrained {
            theta = theta_prime;
        } else if all_diverged {
            // Step aborted; the previous certified controller stands.
            cert_feasible = Some(true);
            projection_applied = Some(false);
        } else {
            match certify(&cfg.plant_design, &theta_prime, cfg.margin)? {
                CertifyOutcome::Certified(cert) => {
                    theta = theta_prime;
                    x = cert.x;
                    lambda_p = cert.multipliers.lambda_p;
                    lambda_k = cert.multipliers.lambda_k;
                    cert_feasible = Some(true);
                    projection_applied = Some(false);
                    numerical_failures = 0;
                }
                outcome => {
                    // Non-certified (clean infeasibility or a numerical
                    // failure logged as such): fall through to projection.
                    let _ = outcome;
                    cert_feasible = Some(false);
                    match enforce_by_projection(
                        cfg,
                        &theta_prime,
                        &x,
                        &lambda_p,
                        &lambda_k,
                    ) {
                        Ok((theta_new, x_new, lambda_k_new)) => {
                            projection_distance = Some(
                                (theta_new.flatten() - theta_prime.flatten()).norm(),
                            );
                            theta = theta_new;
                            x = x_new;
                            lambda_k = lambda_k_new;
                            projection_applied = Some(true);
                            numerical_failures = 0;
                        }
                        Err(Error::NumericalFailure(what)) => {
                            numerical_failures += 1;
                            if numerical_failures >= MAX_NUMERICAL_FAILURE_STREAK {
                                return Err(Error::NumericalFailure(format!(
                                    "{what}: {numerical_failures} consecutive solver failures"
                                )));
                            }
                            // Keep the previous certified controller.
                            projection_applied = Some(false);
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }

        let eval_seeds: Vec<u64> = (0..cfg.rl.episodes_per_eval).map(|_| rng.gen()).collect();
        let (mean, std) = evaluate(&theta, &cfg.plant_sim, &cfg.sim, &eval_seeds);
        env_steps += (eval_seeds.len() * cfg.sim.n_steps()) as u64;

        sink.adopted(iteration, &theta)?;
        let row = MetricsRow {
            iteration,
            env_steps,
            mean_eval_reward: mean,
            std_eval_reward: std,
            cert_feasible_pre_projection: cert_feasible,
            projection_applied,
            projection_distance,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        sink.metrics(&row)?;
        metrics_log.push(row);

        if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
            sink.checkpoint(&make_checkpoint(
                iteration, &theta, &x, &lambda_p, &lambda_k, &rng, env_steps,
            ))?;
        }
    }

    let final_checkpoint = make_checkpoint(
        cfg.iterations,
        &theta,
        &x,
        &lambda_p,
        &lambda_k,
        &rng,
        env_steps,
    );
    sink.checkpoint(&final_checkpoint)?;
    Ok(TrainOutcome { final_checkpoint, metrics: metrics_log })
}

/// Lines 9-12 of the alternating loop: transform with the last `(X,
/// Lambda_k)`, project in the transformed space at the last `Lambda_p`,
/// extract the new `(X, Lambda_k)`, then project the proposed parameters in
/// raw space.
fn enforce_by_projection(
    cfg: &TrainConfig,
    theta_prime: &RinnParams,
    x: &DMatrix<f64>,
    lambda_p: &[f64],
    lambda_k: &[f64],
) -> Result<(RinnParams, DMatrix<f64>, Vec<f64>)> {
    let plant = &cfg.plant_design;
    let th_ref = construct_theta_hat_regularized(theta_prime, x, lambda_k, plant)?;
    let th_proj = project_theta_hat(&th_ref, lambda_p, cfg.margin, plant)?;
    let (theta_rec, x_new, lambda_k_new) = reconstruct(&th_proj, plant, cfg.activation)?;
    let theta_new = match project_theta(
        theta_prime,
        &x_new,
        lambda_p,
        &lambda_k_new,
        cfg.margin,
        plant,
    ) {
        Ok(t) => t,
        // Fall back to the reconstructed point, which lies in the set.
        Err(Error::NumericalFailure(_)) => theta_rec,
        Err(e) => return Err(e),
    };
    Ok((theta_new, x_new, lambda_k_new))
}

// ---------------------------------------------------------------------------
// Configuration file schema
// ---------------------------------------------------------------------------

/// Plant reference in a config file: a built-in name with optional parameter
/// overrides, or explicit matrices.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PlantSpec {
    Named {
        name: String,
        #[serde(default)]
        params: RodParams,
    },
    Explicit {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
        #[serde(rename = "C")]
        c: Vec<Vec<f64>>,
    },
}

impl PlantSpec {
    pub fn resolve(&self) -> Result<PlantModel> {
        match self {
            PlantSpec::Named { name, params } => match name.as_str() {
                "rigid-rod" | "rigid" => rigid_rod_plant(*params),
                "flexible-rod" | "flexible" => flexible_rod_plant(*params),
                other => Err(Error::Config(format!("unknown plant name '{other}'"))),
            },
            PlantSpec::Explicit { a, b, c } => PlantModel::new(
                matrix_from_rows(a, "A")?,
                matrix_from_rows(b, "B")?,
                matrix_from_rows(c, "C")?,
            ),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct DimsDto {
    nk: usize,
    nphi: usize,
}

fn default_checkpoint_every() -> usize {
    10
}

fn default_iterations() -> usize {
    100
}

/// JSON mirror of [`TrainConfig`].
#[derive(Debug, Clone, Deserialize)]
pub struct TrainConfigFile {
    plant_design: PlantSpec,
    plant_sim: PlantSpec,
    margin: DiskMargin,
    dims: DimsDto,
    #[serde(default)]
    activation: Option<Activation>,
    #[serde(default)]
    sim: SimConfig,
    #[serde(default)]
    rl: RlConfig,
    #[serde(default = "default_iterations")]
    iterations: usize,
    mode: TrainMode,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_checkpoint_every")]
    checkpoint_every: usize,
}

impl TrainConfigFile {
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let file: TrainConfigFile = serde_json::from_str(text)?;
        let cfg = TrainConfig {
            plant_design: file.plant_design.resolve()?,
            plant_sim: file.plant_sim.resolve()?,
            margin: DiskMargin::new(file.margin.alpha, file.margin.sigma)?,
            nk: file.dims.nk,
            nphi: file.dims.nphi,
            activation: file.activation.unwrap_or(Activation::Tanh),
            sim: file.sim,
            rl: file.rl,
            iterations: file.iterations,
            mode: file.mode,
            seed: file.seed,
            checkpoint_every: file.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
