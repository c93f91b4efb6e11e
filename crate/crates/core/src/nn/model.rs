//! Policy network: shared config MLP, set-abstraction point tokens, a small
//! pre-LN transformer encoder, and three interchangeable output heads
//! (flow field, diffusion noise, GMM) on the same trunk.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Observation;
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::nn::tape::{Gradients, Tape, Tensor, Var};
use crate::rng;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FMPC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LN_EPS: f64 = 1e-5;

/// Network hyperparameters; embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// arm degrees of freedom
    pub k: usize,
    /// token width
    pub d: usize,
    /// transformer blocks
    pub layers: usize,
    /// attention heads
    pub heads: usize,
    /// action-chunk horizon
    pub horizon: usize,
    /// robot set-abstraction centers
    pub k_r: usize,
    /// scene set-abstraction centers
    pub k_w: usize,
    pub radius_r: f64,
    pub radius_w: f64,
    /// sin/cos features for tau (must be even)
    pub fourier_dim: usize,
    pub head_hidden: usize,
    pub ffn_mult: usize,
    pub gmm_components: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            k: 2,
            d: 64,
            layers: 2,
            heads: 4,
            horizon: 8,
            k_r: 8,
            k_w: 16,
            radius_r: 0.35,
            radius_w: 0.6,
            fourier_dim: 16,
            head_hidden: 128,
            ffn_mult: 4,
            gmm_components: 5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::BadConfig("transformer needs at least one layer".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::BadConfig(format!(
                "width {} not divisible into {} heads",
                self.d, self.heads
            )));
        }
        if self.k == 0
            || self.d == 0
            || self.horizon == 0
            || self.k_r == 0
            || self.k_w == 0
            || self.head_hidden == 0
            || self.ffn_mult == 0
            || self.gmm_components == 0
        {
            return Err(Error::BadConfig("zero-sized dimension".into()));
        }
        if self.fourier_dim == 0 || self.fourier_dim % 2 != 0 {
            return Err(Error::BadConfig("fourier_dim must be even and positive".into()));
        }
        if !(self.radius_r > 0.0 && self.radius_w > 0.0) {
            return Err(Error::BadConfig("grouping radii must be positive".into()));
        }
        Ok(())
    }

    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.k
    }
}

fn block_shapes(arch: &ArchConfig) -> Vec<(String, usize, usize)> {
    let d = arch.d;
    let hh = arch.head_hidden;
    let hk = arch.chunk_dim();
    let ff = arch.ffn_mult * d;
    let mut shapes: Vec<(String, usize, usize)> = Vec::new();
    let dense = |name: &str, rows: usize, cols: usize, shapes: &mut Vec<(String, usize, usize)>| {
        shapes.push((format!("{name}.w"), rows, cols));
        shapes.push((format!("{name}.b"), 1, cols));
    };

    dense("cfg_mlp.l1", arch.k, d, &mut shapes);
    dense("cfg_mlp.l2", d, d, &mut shapes);
    dense("sa_r.l1", 2, d, &mut shapes);
    dense("sa_r.l2", d, d, &mut shapes);
    dense("sa_w.l1", 2, d, &mut shapes);
    dense("sa_w.l2", d, d, &mut shapes);
    for tok in ["e_t", "e_goal", "e_r", "e_w"] {
        shapes.push((format!("tok.{tok}"), 1, d));
    }
    for l in 0..arch.layers {
        for ln in ["ln1", "ln2"] {
            shapes.push((format!("layer{l}.{ln}.g"), 1, d));
            shapes.push((format!("layer{l}.{ln}.b"), 1, d));
        }
        for proj in ["wq", "wk", "wv", "wo"] {
            dense(&format!("layer{l}.{proj}"), d, d, &mut shapes);
        }
        dense(&format!("layer{l}.ffn.l1"), d, ff, &mut shapes);
        dense(&format!("layer{l}.ffn.l2"), ff, d, &mut shapes);
    }
    shapes.push(("final_ln.g".into(), 1, d));
    shapes.push(("final_ln.b".into(), 1, d));
    shapes.push(("action_tokens".into(), 1, arch.horizon));

    let field_in = d + arch.horizon + hk + arch.fourier_dim;
    for head in ["flow_head", "diff_head"] {
        dense(&format!("{head}.l1"), field_in, hh, &mut shapes);
        dense(&format!("{head}.l2"), hh, hh, &mut shapes);
        dense(&format!("{head}.l3"), hh, hk, &mut shapes);
    }
    let m = arch.gmm_components;
    dense("gmm_head.l1", d + arch.horizon, hh, &mut shapes);
    dense("gmm_head.l2", hh, hh, &mut shapes);
    dense("gmm_head.l3", hh, m * (1 + 2 * hk), &mut shapes);
    shapes
}

/// All learnable state plus optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: ArchConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub init_seed: u64,
}

impl PolicyParams {
    pub fn idx(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[self.idx(name)]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<PolicyParams> {
    arch.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::INIT]);
    let shapes = block_shapes(arch);
    let mut names = Vec::with_capacity(shapes.len());
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, rows, cols) in shapes {
        let t = if name.ends_with(".w") {
            // scaled-uniform over fan-in + fan-out
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        } else if name.ends_with(".g") {
            Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
        } else if name.starts_with("tok.") || name == "action_tokens" {
            Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| 0.02 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect(),
            )
        } else {
            Tensor::zeros(rows, cols)
        };
        names.push(name);
        tensors.push(t);
    }
    let m = tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    let v = tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    Ok(PolicyParams {
        arch: arch.clone(),
        names,
        tensors,
        m,
        v,
        step: 0,
        init_seed: seed,
    })
}

/// Parameter leaves registered on one tape, aligned with `PolicyParams`.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn register(params: &PolicyParams, tape: &mut Tape) -> ParamVars {
        let vars = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        ParamVars { vars }
    }

    pub fn get(&self, params: &PolicyParams, name: &str) -> Var {
        self.vars[params.idx(name)]
    }

    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.grad(tape, v)).collect()
    }
}

fn dense(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    name: &str,
    x: Var,
) -> Var {
    let w = vars.get(params, &format!("{name}.w"));
    let b = vars.get(params, &format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn mlp2_silu(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Var {
    let h = dense(tape, params, vars, &format!("{prefix}.l1"), x);
    let h = tape.silu(h);
    dense(tape, params, vars, &format!("{prefix}.l2"), h)
}

fn layer_norm_affine(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Var {
    let g = vars.get(params, &format!("{prefix}.g"));
    let b = vars.get(params, &format!("{prefix}.b"));
    let n = tape.layer_norm_rows(x, LN_EPS);
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

/// Farthest-point sampling, canonical in the point SET: the start point
/// and every tie are resolved by lexicographic coordinate order, and all
/// distances are pairwise (no order-dependent accumulation), so any
/// permutation of the input yields the same centers in the same order.
pub fn fps_centers(points: &[Point2], count: usize) -> Vec<usize> {
    assert!(!points.is_empty());
    let lex = |a: &Point2, b: &Point2| {
        a.x.partial_cmp(&b.x)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
    };
    let first = (0..points.len())
        .min_by(|&a, &b| lex(&points[a], &points[b]))
        .unwrap();
    let mut selected = Vec::with_capacity(count);
    selected.push(first);
    let mut min_dist: Vec<f64> = points.iter().map(|p| p.dist(&points[first])).collect();
    while selected.len() < count {
        let next = (0..points.len())
            .max_by(|&a, &b| {
                min_dist[a]
                    .partial_cmp(&min_dist[b])
                    .unwrap()
                    .then(lex(&points[b], &points[a]))
            })
            .unwrap();
        selected.push(next);
        for (i, p) in points.iter().enumerate() {
            min_dist[i] = min_dist[i].min(p.dist(&points[next]));
        }
    }
    selected
}

fn group_indices(points: &[Point2], center: usize, radius: f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| points[i].dist(&points[center]) <= radius)
        .collect()
}

/// One set-abstraction stage: FPS centers, radius grouping, shared
/// per-point MLP on center-relative coordinates, max-pool per group.
fn set_abstraction(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    prefix: &str,
    points: &[Point2],
    centers: usize,
    radius: f64,
) -> Var {
    let chosen = fps_centers(points, centers);
    let mut tokens = Vec::with_capacity(centers);
    for &c in &chosen {
        let members = group_indices(points, c, radius);
        let mut rel = Tensor::zeros(members.len(), 2);
        for (r, &i) in members.iter().enumerate() {
            rel.data[r * 2] = points[i].x - points[c].x;
            rel.data[r * 2 + 1] = points[i].y - points[c].y;
        }
        let rel = tape.leaf(rel);
        let h = mlp2_silu(tape, params, vars, prefix, rel);
        tokens.push(tape.max_rows(h));
    }
    tape.concat_rows(&tokens)
}

fn transformer_block(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    layer: usize,
    x: Var,
    attn_out: &mut Vec<Var>,
) -> Var {
    let arch = &params.arch;
    let dh = arch.d / arch.heads;
    let prefix = format!("layer{layer}");

    let normed = layer_norm_affine(tape, params, vars, &format!("{prefix}.ln1"), x);
    let q = dense(tape, params, vars, &format!("{prefix}.wq"), normed);
    let k = dense(tape, params, vars, &format!("{prefix}.wk"), normed);
    let v = dense(tape, params, vars, &format!("{prefix}.wv"), normed);
    let mut head_outs = Vec::with_capacity(arch.heads);
    for h in 0..arch.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.matmul_transb(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        attn_out.push(attn);
        head_outs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&head_outs);
    let proj = dense(tape, params, vars, &format!("{prefix}.wo"), merged);
    let x = tape.add(x, proj);

    let normed = layer_norm_affine(tape, params, vars, &format!("{prefix}.ln2"), x);
    let h = dense(tape, params, vars, &format!("{prefix}.ffn.l1"), normed);
    let h = tape.silu(h);
    let h = dense(tape, params, vars, &format!("{prefix}.ffn.l2"), h);
    tape.add(x, h)
}

/// Encoder output built on an existing tape (used for training graphs).
pub struct EncodedVar {
    pub tokens: Var,
    /// one (n x n) attention matrix per (layer, head)
    pub attention: Vec<Var>,
}

/// Builds the full encoder on `tape`. `scene_tokens` optionally injects a
/// precomputed scene set-abstraction block (inference-time cache); gradients
/// do not flow through an injected block.
pub fn build_encoder(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    obs: &Observation,
    scene_tokens: Option<&Tensor>,
) -> Result<EncodedVar> {
    let arch = &params.arch;
    if obs.q_t.dof() != arch.k {
        return Err(Error::DimensionMismatch {
            expected: arch.k,
            got: obs.q_t.dof(),
        });
    }

    let q_t = tape.leaf(Tensor::row(&obs.q_t.joints));
    let q_goal = tape.leaf(Tensor::row(&obs.q_goal.joints));
    let h_t = mlp2_silu(tape, params, vars, "cfg_mlp", q_t);
    let h_goal = mlp2_silu(tape, params, vars, "cfg_mlp", q_goal);
    let e_t = vars.get(params, "tok.e_t");
    let e_goal = vars.get(params, "tok.e_goal");
    let h_t = tape.add(h_t, e_t);
    let h_goal = tape.add(h_goal, e_goal);

    let h_r = set_abstraction(
        tape,
        params,
        vars,
        "sa_r",
        &obs.robot_cloud.points,
        arch.k_r,
        arch.radius_r,
    );
    let h_w = match scene_tokens {
        Some(t) => {
            if t.shape() != (arch.k_w, arch.d) {
                return Err(Error::DimensionMismatch {
                    expected: arch.k_w * arch.d,
                    got: t.len(),
                });
            }
            tape.leaf(t.clone())
        }
        None => set_abstraction(
            tape,
            params,
            vars,
            "sa_w",
            &obs.scene_cloud.points,
            arch.k_w,
            arch.radius_w,
        ),
    };
    let e_r = vars.get(params, "tok.e_r");
    let e_w = vars.get(params, "tok.e_w");
    let h_r = tape.add_row(h_r, e_r);
    let h_w = tape.add_row(h_w, e_w);

    let mut seq = tape.concat_rows(&[h_t, h_goal, h_r, h_w]);
    let mut attention = Vec::new();
    for l in 0..arch.layers {
        seq = transformer_block(tape, params, vars, l, seq, &mut attention);
    }
    let seq = layer_norm_affine(tape, params, vars, "final_ln", seq);
    Ok(EncodedVar {
        tokens: seq,
        attention,
    })
}

/// Value-level encoder output for inference.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// (2 + K_r + K_w) x d token sequence
    pub tokens: Tensor,
    pub attention: Vec<Tensor>,
}

pub fn encode_observation(params: &PolicyParams, obs: &Observation) -> Result<EncoderOutput> {
    encode_observation_cached(params, obs, None)
}

pub fn encode_observation_cached(
    params: &PolicyParams,
    obs: &Observation,
    scene_tokens: Option<&Tensor>,
) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(params, &mut tape);
    let enc = build_encoder(&mut tape, params, &vars, obs, scene_tokens)?;
    Ok(EncoderOutput {
        tokens: tape.value(enc.tokens).clone(),
        attention: enc.attention.iter().map(|&a| tape.value(a).clone()).collect(),
    })
}

/// Scene set-abstraction tokens (pre type-embedding), reusable across every
/// chunk and candidate that shares the scene cloud.
pub fn scene_tokens(params: &PolicyParams, points: &[Point2]) -> Tensor {
    let mut tape = Tape::new();
    let vars = ParamVars::register(params, &mut tape);
    let out = set_abstraction(
        &mut tape,
        params,
        &vars,
        "sa_w",
        points,
        params.arch.k_w,
        params.arch.radius_w,
    );
    tape.value(out).clone()
}

/// Which trunk head interprets the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Flow,
    Diffusion,
    Gmm,
}

impl HeadKind {
    fn prefix(self) -> &'static str {
        match self {
            HeadKind::Flow => "flow_head",
            HeadKind::Diffusion => "diff_head",
            HeadKind::Gmm => "gmm_head",
        }
    }
}

pub fn fourier_features(tau: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let w = 2.0_f64.powi(j as i32) * std::f64::consts::TAU;
        out.push((w * tau).sin());
        out.push((w * tau).cos());
    }
    out
}

fn head_mlp(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    prefix: &str,
    input: Var,
) -> Var {
    let h = dense(tape, params, vars, &format!("{prefix}.l1"), input);
    let h = tape.silu(h);
    let h = dense(tape, params, vars, &format!("{prefix}.l2"), h);
    let h = tape.silu(h);
    dense(tape, params, vars, &format!("{prefix}.l3"), h)
}

/// Field-head forward on an existing tape (flow or diffusion).
pub fn field_head_var(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    tokens: Var,
    x_flat: &[f64],
    tau: f64,
    head: HeadKind,
) -> Result<Var> {
    assert!(head != HeadKind::Gmm);
    let arch = &params.arch;
    if x_flat.len() != arch.chunk_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.chunk_dim(),
            got: x_flat.len(),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0,1]")));
    }
    let pooled = tape.mean_rows(tokens);
    let action = vars.get(params, "action_tokens");
    let x = tape.leaf(Tensor::row(x_flat));
    let fourier = tape.leaf(Tensor::row(&fourier_features(tau, arch.fourier_dim)));
    let input = tape.concat_cols(&[pooled, action, x, fourier]);
    Ok(head_mlp(tape, params, vars, head.prefix(), input))
}

// Tape-free forward helpers for inference: same arithmetic, same order of
// operations as the tape ops, so values agree bit-for-bit.

fn dense_value(params: &PolicyParams, name: &str, x: &Tensor) -> Tensor {
    let w = params.tensor(&format!("{name}.w"));
    let b = params.tensor(&format!("{name}.b"));
    let mut y = x.matmul(w);
    for r in 0..y.rows {
        for c in 0..y.cols {
            y.data[r * y.cols + c] += b.data[c];
        }
    }
    y
}

fn silu_value(mut t: Tensor) -> Tensor {
    for x in t.data.iter_mut() {
        *x *= 1.0 / (1.0 + (-*x).exp());
    }
    t
}

fn mean_rows_value(t: &Tensor) -> Tensor {
    let mut v = Tensor::zeros(1, t.cols);
    for r in 0..t.rows {
        for c in 0..t.cols {
            v.data[c] += t.at(r, c);
        }
    }
    for x in v.data.iter_mut() {
        *x /= t.rows as f64;
    }
    v
}

fn head_mlp_value(params: &PolicyParams, prefix: &str, input: &Tensor) -> Tensor {
    let h = silu_value(dense_value(params, &format!("{prefix}.l1"), input));
    let h = silu_value(dense_value(params, &format!("{prefix}.l2"), &h));
    dense_value(params, &format!("{prefix}.l3"), &h)
}

/// Flow/diffusion head evaluation against a fixed encoder output; returns
/// the flattened H*k field prediction. Tape-free: this runs once per Euler
/// step, so it must not pay the tape's parameter-registration cost.
pub fn head_forward(
    params: &PolicyParams,
    enc: &EncoderOutput,
    x_flat: &[f64],
    tau: f64,
    head: HeadKind,
) -> Result<Vec<f64>> {
    assert!(head != HeadKind::Gmm);
    let arch = &params.arch;
    if x_flat.len() != arch.chunk_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.chunk_dim(),
            got: x_flat.len(),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0,1]")));
    }
    let pooled = mean_rows_value(&enc.tokens);
    let action = params.tensor("action_tokens");
    let mut input = pooled.data;
    input.extend_from_slice(&action.data);
    input.extend_from_slice(x_flat);
    input.extend_from_slice(&fourier_features(tau, arch.fourier_dim));
    let input = Tensor::row(&input);
    Ok(head_mlp_value(params, head.prefix(), &input).data)
}

/// Unpacked GMM head output over the flattened chunk.
#[derive(Debug, Clone)]
pub struct GmmOutput {
    pub log_weights: Vec<f64>,
    /// components x chunk_dim
    pub means: Vec<Vec<f64>>,
    /// components x chunk_dim, stds = exp(log_std)
    pub log_stds: Vec<Vec<f64>>,
}

fn gmm_head_var(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &ParamVars,
    tokens: Var,
) -> Var {
    let pooled = tape.mean_rows(tokens);
    let action = vars.get(params, "action_tokens");
    let input = tape.concat_cols(&[pooled, action]);
    head_mlp(tape, params, vars, "gmm_head", input)
}

fn unpack_gmm(arch: &ArchConfig, raw: &[f64]) -> GmmOutput {
    let m = arch.gmm_components;
    let dim = arch.chunk_dim();
    let logits = &raw[0..m];
    let lse = {
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    GmmOutput {
        log_weights: logits.iter().map(|x| x - lse).collect(),
        means: (0..m)
            .map(|i| raw[m + i * dim..m + (i + 1) * dim].to_vec())
            .collect(),
        log_stds: (0..m)
            .map(|i| raw[m + m * dim + i * dim..m + m * dim + (i + 1) * dim].to_vec())
            .collect(),
    }
}

pub fn gmm_forward(params: &PolicyParams, enc: &EncoderOutput) -> GmmOutput {
    let pooled = mean_rows_value(&enc.tokens);
    let action = params.tensor("action_tokens");
    let mut input = pooled.data;
    input.extend_from_slice(&action.data);
    let input = Tensor::row(&input);
    unpack_gmm(&params.arch, &head_mlp_value(params, "gmm_head", &input).data)
}

/// Mixture log-density of a flattened chunk under a GMM head output.
pub fn gmm_log_likelihood(out: &GmmOutput, x: &[f64]) -> f64 {
    let dim = x.len() as f64;
    let scores: Vec<f64> = out
        .log_weights
        .iter()
        .zip(out.means.iter().zip(&out.log_stds))
        .map(|(lw, (mean, lstd))| {
            let mut s = *lw - dim / 2.0 * (2.0 * std::f64::consts::PI).ln();
            for ((&xi, &mu), &ls) in x.iter().zip(mean).zip(lstd) {
                let z = (xi - mu) * (-ls).exp();
                s -= 0.5 * z * z + ls;
            }
            s
        })
        .collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln()
}

/// One supervised field-regression example.
pub struct TrainSample {
    pub obs: Observation,
    /// interpolant fed to the head, flattened, normalized space
    pub x_flat: Vec<f64>,
    pub tau: f64,
    /// regression target, flattened
    pub target: Vec<f64>,
}

/// Mean-squared-error loss over a batch plus gradients for every parameter
/// block, in `PolicyParams` block order.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &[TrainSample],
    head: HeadKind,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::register(params, &mut tape);
    let mut per_sample = Vec::with_capacity(batch.len());
    for sample in batch {
        let enc = build_encoder(&mut tape, params, &vars, &sample.obs, None)?;
        let out = field_head_var(
            &mut tape,
            params,
            &vars,
            enc.tokens,
            &sample.x_flat,
            sample.tau,
            head,
        )?;
        let target = tape.leaf(Tensor::row(&sample.target));
        let diff = tape.sub(out, target);
        let sq = tape.mul(diff, diff);
        let sum = tape.sum_all(sq);
        per_sample.push(tape.scale(sum, 1.0 / sample.target.len() as f64));
    }
    let stacked = tape.concat_cols(&per_sample);
    let total = tape.sum_all(stacked);
    let loss = tape.scale(total, 1.0 / per_sample.len() as f64);
    for (i, &v) in per_sample.iter().enumerate() {
        if !tape.value(v).is_finite() {
            return Err(Error::NonFinite {
                context: "training loss".into(),
                index: i,
            });
        }
    }
    let loss_value = tape.value(loss).data[0];
    let grads = tape.backward(loss);
    Ok((loss_value, vars.grads(&tape, &grads)))
}

/// Mean negative log-likelihood of chunks under the GMM head, with grads.
pub fn gmm_loss_and_grad(
    params: &PolicyParams,
    batch: &[(Observation, Vec<f64>)],
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let arch = &params.arch;
    let m = arch.gmm_components;
    let dim = arch.chunk_dim();
    let mut tape = Tape::new();
    let vars = ParamVars::register(params, &mut tape);
    let mut per_sample = Vec::with_capacity(batch.len());
    for (obs, x) in batch {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        let enc = build_encoder(&mut tape, params, &vars, obs, None)?;
        let raw = gmm_head_var(&mut tape, params, &vars, enc.tokens);
        let logits = tape.slice_cols(raw, 0, m);
        let means_flat = tape.slice_cols(raw, m, m + m * dim);
        let means = tape.reshape(means_flat, m, dim);
        let lstd_flat = tape.slice_cols(raw, m + m * dim, m + 2 * m * dim);
        let lstd = tape.reshape(lstd_flat, m, dim);
        let lse = tape.logsumexp_all(logits);
        let logw_row = tape.sub_bscalar(logits, lse);
        let logw = tape.reshape(logw_row, m, 1);
        let target = tape.leaf(Tensor::row(x));
        let neg_target = tape.scale(target, -1.0);
        let diff = tape.add_row(means, neg_target);
        let neg_lstd = tape.scale(lstd, -1.0);
        let inv_std = tape.exp(neg_lstd);
        let z = tape.mul(diff, inv_std);
        let zsq = tape.mul(z, z);
        let s1 = tape.sum_cols(zsq);
        let s2 = tape.sum_cols(lstd);
        let half = tape.scale(s1, -0.5);
        let comp = tape.sub(half, s2);
        let comp = tape.add_const(
            comp,
            -(dim as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln(),
        );
        let scores = tape.add(logw, comp);
        let ll = tape.logsumexp_all(scores);
        per_sample.push(tape.scale(ll, -1.0));
    }
    let stacked = tape.concat_cols(&per_sample);
    let total = tape.sum_all(stacked);
    let loss = tape.scale(total, 1.0 / per_sample.len() as f64);
    for (i, &v) in per_sample.iter().enumerate() {
        if !tape.value(v).is_finite() {
            return Err(Error::NonFinite {
                context: "gmm loss".into(),
                index: i,
            });
        }
    }
    let loss_value = tape.value(loss).data[0];
    let grads = tape.backward(loss);
    Ok((loss_value, vars.grads(&tape, &grads)))
}

/// In-place Adam update.
pub fn optimizer_step(params: &mut PolicyParams, grads: &[Tensor], lr: f64) -> Result<()> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    if grads.len() != params.tensors.len() {
        return Err(Error::DimensionMismatch {
            expected: params.tensors.len(),
            got: grads.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors[i].shape() {
            return Err(Error::DimensionMismatch {
                expected: params.tensors[i].len(),
                got: g.len(),
            });
        }
    }
    params.step += 1;
    let t = params.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for (i, g) in grads.iter().enumerate() {
        let m = &mut params.m[i];
        let v = &mut params.v[i];
        let p = &mut params.tensors[i];
        for j in 0..g.len() {
            m.data[j] = BETA1 * m.data[j] + (1.0 - BETA1) * g.data[j];
            v.data[j] = BETA2 * v.data[j] + (1.0 - BETA2) * g.data[j] * g.data[j];
            let m_hat = m.data[j] / bc1;
            let v_hat = v.data[j] / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}
