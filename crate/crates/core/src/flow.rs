//! Flow-matching training and inference: linear-interpolant samples, Euler
//! integration of the learned field, autoregressive rollout, and the
//! diffusion/GMM baseline samplers sharing the same trunk.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::Path;
use crate::dataset::{make_observation, ActionChunk, DatasetConfig, NormStats, Observation};
use crate::error::{Error, Result};
use crate::geometry::{goal_reached, ArmModel, Configuration};
use crate::nn::model::{
    encode_observation_cached, gmm_forward, head_forward, loss_and_grad, optimizer_step,
    scene_tokens, HeadKind, PolicyParams, TrainSample,
};
use crate::nn::tape::Tensor;
use crate::oracle::PlanningProblem;
use crate::rng;
use crate::scene::Scene;

pub const DEFAULT_EULER_STEPS: usize = 20;
pub const DEFAULT_CHUNKS: usize = 12;
pub const DEFAULT_EPS_GOAL: f64 = 0.05;
pub const DEFAULT_DIFFUSION_STEPS: usize = 100;
pub const GMM_STD_FLOOR: f64 = 1e-6;

/// Inference-time knobs shared by the samplers and the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub euler_steps: usize,
    /// autoregressive chunk count T
    pub chunks: usize,
    pub head: HeadKind,
    /// diffusion denoising steps
    pub k_steps: usize,
    pub eps_goal: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            euler_steps: DEFAULT_EULER_STEPS,
            chunks: DEFAULT_CHUNKS,
            head: HeadKind::Flow,
            k_steps: DEFAULT_DIFFUSION_STEPS,
            eps_goal: DEFAULT_EPS_GOAL,
            seed: 0,
        }
    }
}

/// Everything needed to run the trained policy on a new problem.
#[derive(Debug, Clone)]
pub struct Policy {
    pub params: PolicyParams,
    pub norm: NormStats,
    pub data_cfg: DatasetConfig,
    pub arm: ArmModel,
}

/// One flow-matching supervision draw over a flattened normalized chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub tau: f64,
    pub x_tau: Vec<f64>,
    pub u: Vec<f64>,
}

impl FlowSample {
    /// Exact interpolant construction; the only place the invariants are
    /// computed, so they hold by definition for every draw.
    pub fn from_parts(x0: Vec<f64>, eps: Vec<f64>, tau: f64) -> FlowSample {
        assert_eq!(x0.len(), eps.len());
        let x_tau = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| (1.0 - tau) * x + tau * e)
            .collect();
        let u = eps.iter().zip(&x0).map(|(e, x)| e - x).collect();
        FlowSample { x0, eps, tau, x_tau, u }
    }
}

pub fn make_flow_sample(x0: &[f64], rng: &mut ChaCha8Rng) -> FlowSample {
    let eps: Vec<f64> = (0..x0.len())
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let tau: f64 = rng.gen_range(0.0..1.0);
    FlowSample::from_parts(x0.to_vec(), eps, tau)
}

/// Linear-beta DDPM schedule.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(k_steps: usize) -> DiffusionSchedule {
        assert!(k_steps >= 1);
        let (b0, b1) = (1e-4, 0.02);
        let betas: Vec<f64> = (0..k_steps)
            .map(|i| {
                if k_steps == 1 {
                    b1
                } else {
                    b0 + (b1 - b0) * i as f64 / (k_steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(k_steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        DiffusionSchedule { betas, alphas, alpha_bars }
    }

    /// Conditioning value fed to the head for step index t (0-based).
    pub fn tau_for(&self, t: usize) -> f64 {
        (t + 1) as f64 / self.betas.len() as f64
    }
}

/// One optimizer update on a batch of (observation, normalized chunk).
/// Flow head regresses Eq. 5 targets; diffusion head regresses injected
/// noise under the linear schedule.
pub fn training_step(
    params: &mut PolicyParams,
    batch: &[(Observation, ActionChunk)],
    rng: &mut ChaCha8Rng,
    lr: f64,
    head: HeadKind,
    k_steps: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut samples = Vec::with_capacity(batch.len());
    match head {
        HeadKind::Flow => {
            for (obs, chunk) in batch {
                let fs = make_flow_sample(&chunk.flat(), rng);
                samples.push(TrainSample {
                    obs: obs.clone(),
                    x_flat: fs.x_tau,
                    tau: fs.tau,
                    target: fs.u,
                });
            }
        }
        HeadKind::Diffusion => {
            let schedule = DiffusionSchedule::linear(k_steps);
            for (obs, chunk) in batch {
                let x0 = chunk.flat();
                let t = rng.gen_range(0..k_steps);
                let ab = schedule.alpha_bars[t];
                let eps: Vec<f64> = (0..x0.len())
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect();
                let x_t: Vec<f64> = x0
                    .iter()
                    .zip(&eps)
                    .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                    .collect();
                samples.push(TrainSample {
                    obs: obs.clone(),
                    x_flat: x_t,
                    tau: schedule.tau_for(t),
                    target: eps,
                });
            }
        }
        HeadKind::Gmm => {
            let gmm_batch: Vec<(Observation, Vec<f64>)> = batch
                .iter()
                .map(|(obs, chunk)| (obs.clone(), chunk.flat()))
                .collect();
            let (loss, grads) = crate::nn::model::gmm_loss_and_grad(params, &gmm_batch)?;
            optimizer_step(params, &grads, lr)?;
            return Ok(loss);
        }
    }
    let (loss, grads) = loss_and_grad(params, &samples, head)?;
    optimizer_step(params, &grads, lr)?;
    Ok(loss)
}

/// Expected Eq. 5 loss of the zero predictor on normalized chunks:
/// E[(eps - x0)^2] with eps ~ N(0,1) and x0 standardized.
pub fn zero_predictor_loss(chunks: &[ActionChunk]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in chunks {
        for v in c.flat() {
            sum += 1.0 + v * v;
            n += 1;
        }
    }
    sum / n as f64
}

/// Left-endpoint Euler integration of a field from tau=1 down to 0,
/// starting at `eps`. The field closure receives (x, tau).
pub fn euler_integrate<F>(eps: &[f64], steps: usize, mut field: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("euler_steps must be >= 1".into()));
    }
    let mut x = eps.to_vec();
    let dt = 1.0 / steps as f64;
    for s in 1..=steps {
        let tau = 1.0 - (s - 1) as f64 / steps as f64;
        let v = field(&x, tau)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "euler integration".into(),
                index: s,
            });
        }
    }
    Ok(x)
}

fn standard_normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Draw one denormalized action chunk by integrating the flow head.
/// `scene_cache` optionally injects precomputed scene tokens.
pub fn sample_chunk(
    policy: &Policy,
    obs: &Observation,
    rng: &mut ChaCha8Rng,
    euler_steps: usize,
    scene_cache: Option<&Tensor>,
) -> Result<ActionChunk> {
    let arch = &policy.params.arch;
    let enc = encode_observation_cached(&policy.params, obs, scene_cache)?;
    let eps = standard_normal_vec(arch.chunk_dim(), rng);
    let x = euler_integrate(&eps, euler_steps, |x, tau| {
        head_forward(&policy.params, &enc, x, tau, HeadKind::Flow)
    })?;
    let normalized = ActionChunk::from_flat(&x, arch.horizon, arch.k);
    Ok(policy.norm.invert(&normalized))
}

/// DDPM ancestral sampling given a noise-prediction closure.
pub fn ddpm_sample<F>(
    eps: &[f64],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    mut predict_noise: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let k = schedule.betas.len();
    let mut x = eps.to_vec();
    for t in (0..k).rev() {
        let beta = schedule.betas[t];
        let alpha = schedule.alphas[t];
        let ab = schedule.alpha_bars[t];
        let eps_hat = predict_noise(&x, schedule.tau_for(t))?;
        for (xi, ei) in x.iter_mut().zip(&eps_hat) {
            *xi = (*xi - beta / (1.0 - ab).sqrt() * ei) / alpha.sqrt();
        }
        if t > 0 {
            let ab_prev = schedule.alpha_bars[t - 1];
            let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
            for xi in x.iter_mut() {
                *xi += sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ddpm sampling".into(),
                index: t,
            });
        }
    }
    Ok(x)
}

/// Baseline diffusion sampler on the shared trunk.
pub fn diffusion_sample_chunk(
    policy: &Policy,
    obs: &Observation,
    rng: &mut ChaCha8Rng,
    k_steps: usize,
    scene_cache: Option<&Tensor>,
) -> Result<ActionChunk> {
    if k_steps == 0 {
        return Err(Error::InvalidArgument("k_steps must be >= 1".into()));
    }
    let arch = &policy.params.arch;
    let enc = encode_observation_cached(&policy.params, obs, scene_cache)?;
    let schedule = DiffusionSchedule::linear(k_steps);
    let eps = standard_normal_vec(arch.chunk_dim(), rng);
    let x = ddpm_sample(&eps, &schedule, rng, |x, tau| {
        head_forward(&policy.params, &enc, x, tau, HeadKind::Diffusion)
    })?;
    let normalized = ActionChunk::from_flat(&x, arch.horizon, arch.k);
    Ok(policy.norm.invert(&normalized))
}

/// Baseline GMM sampler: categorical component, then a diagonal Gaussian
/// draw with the std floor applied.
pub fn gmm_sample_chunk(
    policy: &Policy,
    obs: &Observation,
    rng: &mut ChaCha8Rng,
    scene_cache: Option<&Tensor>,
) -> Result<ActionChunk> {
    let arch = &policy.params.arch;
    let enc = encode_observation_cached(&policy.params, obs, scene_cache)?;
    let out = gmm_forward(&policy.params, &enc);
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut comp = out.log_weights.len() - 1;
    for (i, lw) in out.log_weights.iter().enumerate() {
        acc += lw.exp();
        if u < acc {
            comp = i;
            break;
        }
    }
    let x: Vec<f64> = out.means[comp]
        .iter()
        .zip(&out.log_stds[comp])
        .map(|(mu, ls)| {
            let std = ls.exp().max(GMM_STD_FLOOR);
            mu + std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
        .collect();
    let normalized = ActionChunk::from_flat(&x, arch.horizon, arch.k);
    Ok(policy.norm.invert(&normalized))
}

/// Outcome of one autoregressive rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub path: Path,
    pub reached_goal: bool,
    pub chunk_seeds: Vec<u64>,
}

/// Autoregressive rollout: re-observe, sample a chunk, apply its deltas,
/// repeat for up to T chunks; stop early and truncate at the first
/// goal-reaching waypoint.
pub fn rollout(
    policy: &Policy,
    q_0: &Configuration,
    q_goal: &Configuration,
    scene: &Scene,
    chunks: usize,
    rng: &mut ChaCha8Rng,
    euler_steps: usize,
    cfg: &InferenceConfig,
) -> Result<RolloutResult> {
    let cache = scene_rollout_cache(policy, scene)?;
    rollout_cached(policy, q_0, q_goal, scene, chunks, rng, euler_steps, cfg, &cache)
}

/// Scene-dependent state shared across candidates and chunks.
pub struct SceneCache {
    pub tokens: Tensor,
    pub empty: bool,
}

pub fn scene_rollout_cache(policy: &Policy, scene: &Scene) -> Result<SceneCache> {
    let cloud =
        crate::dataset::scene_points_padded(scene, policy.data_cfg.n_w, scene.seed)?;
    Ok(SceneCache {
        tokens: scene_tokens(&policy.params, &cloud.points),
        empty: scene.obstacles.is_empty(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn rollout_cached(
    policy: &Policy,
    q_0: &Configuration,
    q_goal: &Configuration,
    scene: &Scene,
    chunks: usize,
    rng: &mut ChaCha8Rng,
    euler_steps: usize,
    cfg: &InferenceConfig,
    cache: &SceneCache,
) -> Result<RolloutResult> {
    let sampler = |obs: &Observation, seed: u64| -> Result<ActionChunk> {
        let mut chunk_rng = rng::stream(seed, &[rng::tag::CHUNK]);
        match cfg.head {
            HeadKind::Flow => {
                sample_chunk(policy, obs, &mut chunk_rng, euler_steps, Some(&cache.tokens))
            }
            HeadKind::Diffusion => diffusion_sample_chunk(
                policy,
                obs,
                &mut chunk_rng,
                cfg.k_steps,
                Some(&cache.tokens),
            ),
            HeadKind::Gmm => {
                gmm_sample_chunk(policy, obs, &mut chunk_rng, Some(&cache.tokens))
            }
        }
    };
    rollout_impl(policy, q_0, q_goal, scene, chunks, rng, cfg.eps_goal, sampler)
}

/// Rollout skeleton with an injectable chunk sampler (tests swap in frozen
/// or oracle samplers).
#[allow(clippy::too_many_arguments)]
pub fn rollout_impl<F>(
    policy: &Policy,
    q_0: &Configuration,
    q_goal: &Configuration,
    scene: &Scene,
    chunks: usize,
    rng: &mut ChaCha8Rng,
    eps_goal: f64,
    mut sampler: F,
) -> Result<RolloutResult>
where
    F: FnMut(&Observation, u64) -> Result<ActionChunk>,
{
    if chunks == 0 {
        return Err(Error::InvalidArgument("chunk count must be >= 1".into()));
    }
    let mut waypoints = vec![q_0.clone()];
    let mut chunk_seeds = Vec::with_capacity(chunks);
    let mut reached =
        goal_reached(&policy.arm, q_0, q_goal, eps_goal)?;
    'outer: for _ in 0..chunks {
        if reached {
            break;
        }
        let q_t = waypoints.last().unwrap().clone();
        let obs = make_observation(
            &policy.arm,
            &q_t,
            q_goal,
            scene,
            &policy.data_cfg,
            scene.seed,
        )?;
        let seed = rng.gen::<u64>();
        chunk_seeds.push(seed);
        let chunk = sampler(&obs, seed)?;
        let mut q = q_t;
        for delta in &chunk.deltas {
            let joints: Vec<f64> = q
                .joints
                .iter()
                .zip(delta)
                .map(|(a, b)| a + b)
                .collect();
            q = Configuration::new(joints);
            waypoints.push(q.clone());
            if goal_reached(&policy.arm, &q, q_goal, eps_goal)? {
                reached = true;
                continue 'outer;
            }
        }
    }
    Ok(RolloutResult {
        path: Path { waypoints },
        reached_goal: reached,
        chunk_seeds,
    })
}

/// N independent rollouts with rng streams split by candidate index;
/// candidates run in parallel, output order is by index, and per-candidate
/// failures stay isolated.
pub fn rollout_batch(
    policy: &Policy,
    problem: &PlanningProblem,
    n: usize,
    base_seed: u64,
    cfg: &InferenceConfig,
) -> Vec<Result<RolloutResult>> {
    let cache = match scene_rollout_cache(policy, &problem.scene) {
        Ok(c) => c,
        Err(e) => return vec![Err(e)].into_iter().collect(),
    };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(base_seed, &[rng::tag::CANDIDATE, i as u64]);
            rollout_cached(
                policy,
                &problem.q_start,
                &problem.q_goal,
                &problem.scene,
                cfg.chunks,
                &mut rng,
                cfg.euler_steps,
                cfg,
                &cache,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{init_params, ArchConfig};
    use rand::Rng;
    use crate::scene::{generate_scene, Family};
    use proptest::prelude::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            k: 2,
            d: 8,
            layers: 1,
            heads: 2,
            horizon: 4,
            k_r: 3,
            k_w: 4,
            radius_r: 0.5,
            radius_w: 0.8,
            fourier_dim: 4,
            head_hidden: 12,
            ffn_mult: 2,
            gmm_components: 2,
        }
    }

    fn tiny_policy(seed: u64) -> Policy {
        let arch = tiny_arch();
        Policy {
            params: init_params(&arch, seed).unwrap(),
            norm: NormStats::identity(arch.k),
            data_cfg: DatasetConfig {
                horizon: arch.horizon,
                n_r: 12,
                n_w: 24,
                stride: arch.horizon,
            },
            arm: ArmModel::default_planar(arch.k),
        }
    }

    fn tiny_obs(policy: &Policy, scene: &Scene) -> Observation {
        make_observation(
            &policy.arm,
            &Configuration::new(vec![0.2, -0.4]),
            &Configuration::new(vec![1.0, 0.5]),
            scene,
            &policy.data_cfg,
            scene.seed,
        )
        .unwrap()
    }

    #[test]
    fn flow_sample_endpoints_and_midpoint() {
        let x0 = vec![0.0, 0.0];
        let eps = vec![2.0, -2.0];
        let s = FlowSample::from_parts(x0.clone(), eps.clone(), 0.0);
        assert_eq!(s.x_tau, x0);
        let s = FlowSample::from_parts(x0.clone(), eps.clone(), 1.0);
        assert_eq!(s.x_tau, eps);
        let s = FlowSample::from_parts(x0, eps, 0.5);
        assert_eq!(s.x_tau, vec![1.0, -1.0]);
        assert_eq!(s.u, vec![2.0, -2.0]);
    }

    proptest! {
        #[test]
        fn flow_sample_invariants_exact(
            x0 in proptest::collection::vec(-3.0f64..3.0, 6),
            seed in 0u64..500,
        ) {
            let mut rng = rng::stream(seed, &[]);
            let s = make_flow_sample(&x0, &mut rng);
            prop_assert!((0.0..=1.0).contains(&s.tau));
            for i in 0..x0.len() {
                prop_assert_eq!(s.x_tau[i], (1.0 - s.tau) * s.x0[i] + s.tau * s.eps[i]);
                prop_assert_eq!(s.u[i], s.eps[i] - s.x0[i]);
            }
        }
    }

    #[test]
    fn euler_constant_field_recovers_x0_any_steps() {
        let x0 = vec![0.4, -1.2, 0.7];
        let eps = vec![1.5, 0.3, -0.8];
        let u: Vec<f64> = eps.iter().zip(&x0).map(|(e, x)| e - x).collect();
        for steps in [1usize, 3, 20, 90] {
            let out = euler_integrate(&eps, steps, |_, _| Ok(u.clone())).unwrap();
            for (a, b) in out.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-9, "steps {steps}");
            }
        }
    }

    #[test]
    fn euler_zero_field_is_identity() {
        let eps = vec![0.9, -0.1];
        let out = euler_integrate(&eps, 20, |_, _| Ok(vec![0.0, 0.0])).unwrap();
        assert_eq!(out, eps);
    }

    #[test]
    fn euler_rejects_non_finite_with_step_index() {
        let eps = vec![1.0];
        let err = euler_integrate(&eps, 10, |_, tau| {
            Ok(vec![if tau < 0.75 { f64::NAN } else { 0.0 }])
        })
        .unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn sample_chunk_step_counts_smoke() {
        let policy = tiny_policy(1);
        let scene = generate_scene(Family::Tabletop, 3).unwrap();
        let obs = tiny_obs(&policy, &scene);
        for steps in [1usize, 20] {
            let mut rng = rng::stream(9, &[]);
            let c = sample_chunk(&policy, &obs, &mut rng, steps, None).unwrap();
            assert_eq!(c.horizon(), policy.params.arch.horizon);
            assert_eq!(c.dof(), policy.params.arch.k);
            assert!(c.flat().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn training_fixed_point_leaves_params_unchanged() {
        // a head already emitting the exact target field gives zero loss and
        // zero gradient, so Adam from zero moments moves nothing
        let policy = tiny_policy(2);
        let scene = generate_scene(Family::Tabletop, 5).unwrap();
        let obs = tiny_obs(&policy, &scene);
        let dim = policy.params.arch.chunk_dim();
        let x: Vec<f64> = (0..dim).map(|i| 0.1 * i as f64).collect();
        let enc = crate::nn::model::encode_observation(&policy.params, &obs).unwrap();
        let current = head_forward(&policy.params, &enc, &x, 0.5, HeadKind::Flow).unwrap();
        let batch = [TrainSample {
            obs,
            x_flat: x,
            tau: 0.5,
            target: current,
        }];
        let (loss, grads) = loss_and_grad(&policy.params, &batch, HeadKind::Flow).unwrap();
        assert!(loss.abs() < 1e-24);
        let mut params = policy.params.clone();
        optimizer_step(&mut params, &grads, 1e-3).unwrap();
        assert_eq!(params.tensors, policy.params.tensors);
    }

    #[test]
    fn training_step_deterministic() {
        let policy = tiny_policy(3);
        let scene = generate_scene(Family::Tabletop, 6).unwrap();
        let obs = tiny_obs(&policy, &scene);
        let chunk = ActionChunk::zeros(policy.params.arch.horizon, 2);
        let batch = vec![(obs, chunk)];
        let run = || {
            let mut params = policy.params.clone();
            let mut rng = rng::stream(50, &[rng::tag::TRAIN]);
            let loss =
                training_step(&mut params, &batch, &mut rng, 1e-3, HeadKind::Flow, 10).unwrap();
            (loss, params)
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn convergence_smoke_on_toy_dataset() {
        let policy = tiny_policy(4);
        let scene = generate_scene(Family::Tabletop, 7).unwrap();
        let mut batch = Vec::new();
        let mut rng = rng::stream(60, &[]);
        for i in 0..10 {
            let q_t = Configuration::new(vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let q_goal = Configuration::new(vec![0.8, -0.3]);
            let obs =
                make_observation(&policy.arm, &q_t, &q_goal, &scene, &policy.data_cfg, scene.seed)
                    .unwrap();
            let chunk = ActionChunk {
                deltas: (0..policy.params.arch.horizon)
                    .map(|h| vec![0.3 * (i as f64 / 10.0), -0.2 * h as f64 / 8.0])
                    .collect(),
            };
            batch.push((obs, chunk));
        }
        let mut params = policy.params.clone();
        let mut train_rng = rng::stream(61, &[rng::tag::TRAIN]);
        let mut losses = Vec::new();
        for _ in 0..500 {
            losses.push(
                training_step(&mut params, &batch, &mut train_rng, 2e-3, HeadKind::Flow, 10)
                    .unwrap(),
            );
        }
        let initial = losses[0];
        let final_avg: f64 = losses[480..].iter().sum::<f64>() / 20.0;
        assert!(
            final_avg < 0.5 * initial,
            "initial {initial}, final {final_avg}"
        );
    }

    #[test]
    fn rollout_frozen_policy_and_length_contract() {
        let policy = tiny_policy(5);
        let scene = generate_scene(Family::Tabletop, 8).unwrap();
        let q0 = Configuration::new(vec![0.1, 0.2]);
        let q_goal = Configuration::new(vec![2.0, -1.0]);
        let chunks = 3;
        let h = policy.params.arch.horizon;
        let mut rng = rng::stream(70, &[]);
        let r = rollout_impl(&policy, &q0, &q_goal, &scene, chunks, &mut rng, 0.05, |_, _| {
            Ok(ActionChunk::zeros(h, 2))
        })
        .unwrap();
        assert!(!r.reached_goal);
        assert_eq!(r.path.waypoints.len(), 1 + chunks * h);
        for w in &r.path.waypoints {
            assert_eq!(w, &q0);
        }

        // already at goal: single waypoint, no chunks sampled
        let mut rng = rng::stream(71, &[]);
        let r = rollout_impl(&policy, &q0, &q0, &scene, chunks, &mut rng, 0.05, |_, _| {
            Ok(ActionChunk::zeros(h, 2))
        })
        .unwrap();
        assert!(r.reached_goal);
        assert_eq!(r.path.waypoints.len(), 1);
        assert!(r.chunk_seeds.is_empty());
    }

    #[test]
    fn rollout_deltas_reconstruct_path() {
        let policy = tiny_policy(6);
        let scene = generate_scene(Family::Tabletop, 9).unwrap();
        let q0 = Configuration::new(vec![0.0, 0.0]);
        let q_goal = Configuration::new(vec![2.5, 2.5]);
        let h = policy.params.arch.horizon;
        let mut emitted: Vec<Vec<f64>> = Vec::new();
        let mut rng = rng::stream(72, &[]);
        let mut sample_rng = rng::stream(73, &[]);
        let r = rollout_impl(&policy, &q0, &q_goal, &scene, 4, &mut rng, 0.05, |_, _| {
            let chunk = ActionChunk {
                deltas: (0..h)
                    .map(|_| {
                        vec![
                            sample_rng.gen_range(-0.05..0.05),
                            sample_rng.gen_range(-0.05..0.05),
                        ]
                    })
                    .collect(),
            };
            emitted.extend(chunk.deltas.iter().cloned());
            Ok(chunk)
        })
        .unwrap();
        assert_eq!(r.path.waypoints.len(), 1 + emitted.len());
        for (t, delta) in emitted.iter().enumerate() {
            for j in 0..2 {
                let diff = r.path.waypoints[t + 1].joints[j] - r.path.waypoints[t].joints[j];
                assert_eq!(diff, r.path.waypoints[t].joints[j] + delta[j] - r.path.waypoints[t].joints[j]);
                assert!((diff - delta[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rollout_truncates_at_goal() {
        let policy = tiny_policy(7);
        let scene = Scene::empty();
        let q0 = Configuration::new(vec![0.0, 0.0]);
        let q_goal = Configuration::new(vec![0.3, 0.0]);
        let h = policy.params.arch.horizon;
        let mut rng = rng::stream(74, &[]);
        // constant +0.1 on joint 1: goal reached mid-chunk
        let r = rollout_impl(&policy, &q0, &q_goal, &scene, 5, &mut rng, 0.05, |_, _| {
            Ok(ActionChunk {
                deltas: (0..h).map(|_| vec![0.1, 0.0]).collect(),
            })
        })
        .unwrap();
        assert!(r.reached_goal);
        assert!(r.path.waypoints.len() < 1 + 5 * h);
        let last = r.path.waypoints.last().unwrap();
        assert!(goal_reached(&policy.arm, last, &q_goal, 0.05).unwrap());
        // no earlier waypoint reaches the goal
        for w in &r.path.waypoints[..r.path.waypoints.len() - 1] {
            assert!(!goal_reached(&policy.arm, w, &q_goal, 0.05).unwrap());
        }
    }

    fn tiny_problem(scene: Scene) -> PlanningProblem {
        PlanningProblem {
            scene,
            q_start: Configuration::new(vec![0.2, -0.4]),
            q_goal: Configuration::new(vec![1.4, 0.6]),
            problem_id: "flow-test".into(),
        }
    }

    #[test]
    fn rollout_batch_singleton_matches_index_zero_stream() {
        let policy = tiny_policy(8);
        let problem = tiny_problem(generate_scene(Family::Tabletop, 10).unwrap());
        let cfg = InferenceConfig {
            euler_steps: 2,
            chunks: 2,
            ..Default::default()
        };
        let batch = rollout_batch(&policy, &problem, 1, 99, &cfg);
        assert_eq!(batch.len(), 1);
        let cache = scene_rollout_cache(&policy, &problem.scene).unwrap();
        let mut rng = rng::stream(99, &[rng::tag::CANDIDATE, 0]);
        let single = rollout_cached(
            &policy,
            &problem.q_start,
            &problem.q_goal,
            &problem.scene,
            cfg.chunks,
            &mut rng,
            cfg.euler_steps,
            &cfg,
            &cache,
        )
        .unwrap();
        assert_eq!(batch[0].as_ref().unwrap(), &single);
    }

    #[test]
    fn rollout_batch_deterministic_across_schedules() {
        let policy = tiny_policy(9);
        let problem = tiny_problem(generate_scene(Family::Box, 11).unwrap());
        let cfg = InferenceConfig {
            euler_steps: 2,
            chunks: 2,
            ..Default::default()
        };
        let a = rollout_batch(&policy, &problem, 6, 77, &cfg);
        // serial reference with the same per-candidate stream derivation
        let cache = scene_rollout_cache(&policy, &problem.scene).unwrap();
        let serial: Vec<RolloutResult> = (0..6)
            .map(|i| {
                let mut rng = rng::stream(77, &[rng::tag::CANDIDATE, i]);
                rollout_cached(
                    &policy,
                    &problem.q_start,
                    &problem.q_goal,
                    &problem.scene,
                    cfg.chunks,
                    &mut rng,
                    cfg.euler_steps,
                    &cfg,
                    &cache,
                )
                .unwrap()
            })
            .collect();
        for (r, s) in a.iter().zip(&serial) {
            assert_eq!(r.as_ref().unwrap(), s);
        }
        let b = rollout_batch(&policy, &problem, 6, 77, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_ref().unwrap(), y.as_ref().unwrap());
        }
    }

    #[test]
    fn rollout_batch_candidates_are_diverse() {
        let policy = tiny_policy(10);
        let problem = tiny_problem(generate_scene(Family::Box, 12).unwrap());
        let cfg = InferenceConfig {
            euler_steps: 2,
            chunks: 1,
            ..Default::default()
        };
        let batch = rollout_batch(&policy, &problem, 10, 55, &cfg);
        let mut distinct: Vec<&Path> = Vec::new();
        for r in &batch {
            let p = &r.as_ref().unwrap().path;
            if !distinct.iter().any(|q| *q == p) {
                distinct.push(p);
            }
        }
        assert!(distinct.len() >= 2, "only {} distinct paths", distinct.len());
    }

    #[test]
    fn diffusion_schedule_alpha_bar_monotone() {
        let s = DiffusionSchedule::linear(100);
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bars[0] < 1.0 && s.alpha_bars[99] > 0.0);
    }

    #[test]
    fn ddpm_single_step_posterior_recovers_x0() {
        // with k=1 and the network predicting the exact injected noise, the
        // ancestral update collapses to the closed-form posterior mean x0
        let schedule = DiffusionSchedule::linear(1);
        let ab = schedule.alpha_bars[0];
        let x0 = vec![0.7, -0.4, 1.1];
        let eps = vec![0.3, -1.2, 0.5];
        let x1: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
            .collect();
        let mut rng = rng::stream(80, &[]);
        let out = ddpm_sample(&x1, &schedule, &mut rng, |_, _| Ok(eps.clone())).unwrap();
        for (a, b) in out.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diffusion_more_steps_cost_more_time() {
        let policy = tiny_policy(11);
        let scene = generate_scene(Family::Tabletop, 13).unwrap();
        let obs = tiny_obs(&policy, &scene);
        let time_for = |k: usize| {
            let mut rng = rng::stream(81, &[]);
            // warm up once, then time several draws
            diffusion_sample_chunk(&policy, &obs, &mut rng, k, None).unwrap();
            let start = std::time::Instant::now();
            for _ in 0..3 {
                diffusion_sample_chunk(&policy, &obs, &mut rng, k, None).unwrap();
            }
            start.elapsed()
        };
        assert!(time_for(100) > time_for(20));
    }

    #[test]
    fn gmm_collapsed_mixture_returns_mean() {
        // force one component and near-zero stds by editing the head bias
        let mut arch = tiny_arch();
        arch.gmm_components = 1;
        let mut params = init_params(&arch, 12).unwrap();
        let dim = arch.chunk_dim();
        // zero the output weight and set bias: logit 0, means fixed, log-std
        // hugely negative so exp() underflows to the floor
        let wi = params.idx("gmm_head.l3.w");
        for v in params.tensors[wi].data.iter_mut() {
            *v = 0.0;
        }
        let bi = params.idx("gmm_head.l3.b");
        for j in 0..dim {
            params.tensors[bi].data[1 + j] = 0.3 * j as f64;
            params.tensors[bi].data[1 + dim + j] = -60.0;
        }
        let policy = Policy {
            params,
            norm: NormStats::identity(2),
            data_cfg: DatasetConfig {
                horizon: arch.horizon,
                n_r: 12,
                n_w: 24,
                stride: arch.horizon,
            },
            arm: ArmModel::default_planar(2),
        };
        let scene = generate_scene(Family::Tabletop, 16).unwrap();
        let obs = tiny_obs(&policy, &scene);
        let mut rng = rng::stream(82, &[]);
        let chunk = gmm_sample_chunk(&policy, &obs, &mut rng, None).unwrap();
        for (j, v) in chunk.flat().iter().enumerate() {
            assert!((v - 0.3 * j as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn gmm_nll_decreases_on_synthetic_mixture() {
        let policy = tiny_policy(13);
        let scene = generate_scene(Family::Tabletop, 17).unwrap();
        let obs = tiny_obs(&policy, &scene);
        let h = policy.params.arch.horizon;
        let mut rng = rng::stream(83, &[]);
        // two-component synthetic data in chunk space
        let batch: Vec<(Observation, ActionChunk)> = (0..12)
            .map(|i| {
                let center = if i % 2 == 0 { 0.8 } else { -0.8 };
                let chunk = ActionChunk {
                    deltas: (0..h)
                        .map(|_| {
                            vec![
                                center + rng.gen_range(-0.05..0.05),
                                -center + rng.gen_range(-0.05..0.05),
                            ]
                        })
                        .collect(),
                };
                (obs.clone(), chunk)
            })
            .collect();
        let mut params = policy.params.clone();
        let mut train_rng = rng::stream(84, &[]);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..120 {
            let loss =
                training_step(&mut params, &batch, &mut train_rng, 5e-3, HeadKind::Gmm, 1)
                    .unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(last < first, "NLL {first} -> {last}");
    }

    #[test]
    fn zero_predictor_loss_formula() {
        // standardized data: E[(eps - x)^2] = 1 + E[x^2]
        let chunks = vec![ActionChunk {
            deltas: vec![vec![1.0, -1.0], vec![1.0, -1.0]],
        }];
        assert!((zero_predictor_loss(&chunks) - 2.0).abs() < 1e-12);
    }
}
