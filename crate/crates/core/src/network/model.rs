use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{Attention, AttentionCache, AttentionMode};
use super::layers::{
    positional_encoding, positional_encoding_backward, sigmoid, ChildHead, ChildHeadCache, Mlp2, MlpCache,
    ParamLayout, PE_DIM,
};
use super::sampling::{FeaturePlaneSet, MotionMode, Sampler};
use crate::error::{OdgError, Result};
use crate::render::GaussianGrad;
use crate::scene::{
    normalize_quat_backward, quat_norm, BoxAttributes, Gaussian3D, Quat, Vec3, VoxelGrid, BOX_DIM, IDENTITY_QUAT,
};

pub const SCALE_MIN: f64 = 0.05;
pub const SCALE_MAX: f64 = 4.0;
/// Largest per-stage child offset in normalized coordinates.
pub const OFFSET_RANGE: f64 = 0.25;
/// Sampling spread (meters) before any scale has been decoded.
pub const INIT_SPREAD: f64 = 0.5;
/// Default box extents `(l, w, h)` added to the box head's raw output.
pub const BOX_PRIOR: [f64; 3] = [4.0, 2.0, 1.5];
/// Initial scale produced by a zero-weight scale head with its default bias.
const INIT_SCALE: f64 = 0.5;
const ROT_EPS: f64 = 1e-12;

/// Sampling pattern around a mean, in units of its per-axis spread.
const SAMPLE_PATTERN: [[f64; 3]; 7] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

fn default_heads() -> usize {
    4
}

fn default_sample_points() -> usize {
    4
}

/// Architecture of the query decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// Gaussians per query at each stage, `K_1 < K_2 < …`.
    pub k_schedule: Vec<usize>,
    pub static_queries: usize,
    pub dynamic_queries: usize,
    /// Query feature width `M`.
    pub feat_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_sample_points")]
    pub sample_points: usize,
    pub num_classes: usize,
    /// Feature plane channels `F`.
    pub channels: usize,
    #[serde(default)]
    pub attention: AttentionMode,
    #[serde(default)]
    pub motion: MotionMode,
}

impl LayerConfig {
    pub fn stages(&self) -> usize {
        self.k_schedule.len()
    }

    pub fn queries(&self) -> usize {
        self.static_queries + self.dynamic_queries
    }

    /// Gaussians per query before stage `l` (1-based): `K_{l−1}`, with `K_0 = 1`.
    pub fn parents(&self, l: usize) -> usize {
        if l <= 1 {
            1
        } else {
            self.k_schedule[l - 2]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_schedule.is_empty() {
            return Err(OdgError::config("k_schedule", "needs at least one stage"));
        }
        let mut prev = 1;
        for (i, &k) in self.k_schedule.iter().enumerate() {
            if k == 0 {
                return Err(OdgError::config("k_schedule", format!("entry {i} is zero")));
            }
            if i > 0 && k <= prev {
                return Err(OdgError::config(
                    "k_schedule",
                    format!("must be strictly increasing, found {prev} then {k}"),
                ));
            }
            if k % prev != 0 {
                return Err(OdgError::config(
                    "k_schedule",
                    format!("{k} is not a multiple of the previous stage's {prev}"),
                ));
            }
            prev = k;
        }
        if self.queries() == 0 {
            return Err(OdgError::config("static_queries", "at least one query is required"));
        }
        if self.feat_dim == 0 {
            return Err(OdgError::config("feat_dim", "must be positive"));
        }
        if self.heads == 0 || self.feat_dim % self.heads != 0 {
            return Err(OdgError::config(
                "heads",
                format!("head count {} must divide feat_dim {}", self.heads, self.feat_dim),
            ));
        }
        if !(1..=SAMPLE_PATTERN.len()).contains(&self.sample_points) {
            return Err(OdgError::config(
                "sample_points",
                format!("must be in 1..={}", SAMPLE_PATTERN.len()),
            ));
        }
        if self.num_classes == 0 {
            return Err(OdgError::config("num_classes", "must be positive"));
        }
        if self.channels == 0 {
            return Err(OdgError::config("channels", "must be positive"));
        }
        Ok(())
    }
}

/// Maps normalized `[0,1]³` scene coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub origin: Vec3,
    pub extent: Vec3,
}

impl SceneBounds {
    pub fn from_grid(grid: &VoxelGrid) -> Self {
        Self {
            origin: grid.origin,
            extent: grid.extent(),
        }
    }

    pub fn denormalize(&self, n: &Vec3) -> Vec3 {
        self.origin + n.component_mul(&self.extent)
    }
}

/// Query features and Gaussian means between stages. Means are normalized,
/// query-major with `k` per query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    pub stage: usize,
    pub k: usize,
    pub static_feats: Vec<f64>,
    pub dynamic_feats: Vec<f64>,
    pub static_means: Vec<Vec3>,
    pub dynamic_means: Vec<Vec3>,
    /// Per-mean sampling spread in meters (the last decoded scale).
    pub static_spread: Vec<Vec3>,
    pub dynamic_spread: Vec<Vec3>,
    pub dynamic_box: Vec<BoxAttributes>,
}

impl QueryState {
    /// Means in token order: dynamic queries first.
    pub fn token_means(&self) -> Vec<Vec3> {
        [self.dynamic_means.as_slice(), self.static_means.as_slice()].concat()
    }

    fn token_spread(&self) -> Vec<Vec3> {
        [self.dynamic_spread.as_slice(), self.static_spread.as_slice()].concat()
    }
}

/// Decoded output of one stage. Gaussians are in token order (dynamic queries
/// first), children of one query contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: usize,
    pub k: usize,
    pub gaussians: Vec<Gaussian3D>,
    /// Normalized means of `gaussians`.
    pub means: Vec<Vec3>,
    /// `N × C` class logits (identical to each Gaussian's `sem`).
    pub class_scores: Vec<f64>,
    /// `D × 10`: center, (l, w, h), (sin θ, cos θ), (vx, vy).
    pub box_pred: Vec<f64>,
    /// `D × (C + 1)` logits; the last column is "no object".
    pub box_class: Vec<f64>,
}

impl StageOutput {
    pub fn world_means(&self) -> Vec<Vec3> {
        self.gaussians.iter().map(|g| g.mean).collect()
    }
}

/// Upstream gradients of a scalar objective with respect to a stage's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGrad {
    /// `mean` is with respect to world coordinates, `sem` to the class logits.
    pub gaussians: Vec<GaussianGrad>,
    pub box_pred: Vec<f64>,
    pub box_class: Vec<f64>,
}

impl StageGrad {
    pub fn zeros(out: &StageOutput, num_classes: usize) -> Self {
        Self {
            gaussians: vec![GaussianGrad::zeros(num_classes); out.gaussians.len()],
            box_pred: vec![0.0; out.box_pred.len()],
            box_class: vec![0.0; out.box_class.len()],
        }
    }
}

/// Gradient with respect to a [`QueryState`]'s features and means.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    /// Token order, `(D + S) × M`.
    pub feats: Vec<f64>,
    /// Token order, normalized coordinates.
    pub means: Vec<Vec3>,
}

impl StateGrad {
    pub fn zeros(cfg: &LayerConfig, k: usize) -> Self {
        Self {
            feats: vec![0.0; cfg.queries() * cfg.feat_dim],
            means: vec![Vec3::zeros(); cfg.queries() * k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StageLayers {
    attn: Attention,
    mix: Mlp2,
    pos: Mlp2,
    cls: ChildHead,
    box_reg: Mlp2,
    box_cls: Mlp2,
}

/// The decoder's architecture and parameter layout. Parameters live in one flat
/// vector laid out by `layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: LayerConfig,
    pub layout: ParamLayout,
    embed_dynamic: usize,
    embed_static: usize,
    stages: Vec<StageLayers>,
    phi_scale: ChildHead,
    phi_rot: ChildHead,
    phi_opacity: ChildHead,
}

impl Network {
    pub fn new(cfg: LayerConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.feat_dim;
        let c = cfg.num_classes;
        let mut layout = ParamLayout::default();
        let embed_dynamic = layout.push("embed.dynamic", &[cfg.dynamic_queries, m]);
        let embed_static = layout.push("embed.static", &[cfg.static_queries, m]);
        let phi_scale = ChildHead::new(&mut layout, "phi_scale", m, m, 3);
        let phi_rot = ChildHead::new(&mut layout, "phi_rot", m, m, 4);
        let phi_opacity = ChildHead::new(&mut layout, "phi_opacity", m, m, 1);
        let mut stages = Vec::with_capacity(cfg.stages());
        for (i, &k) in cfg.k_schedule.iter().enumerate() {
            let name = |s: &str| format!("stage{}.{s}", i + 1);
            stages.push(StageLayers {
                attn: Attention::new(&mut layout, &name("attn"), m, cfg.heads)?,
                mix: Mlp2::new(&mut layout, &name("mix"), m + cfg.sample_points * cfg.channels, m, m),
                pos: Mlp2::new(&mut layout, &name("pos"), m, m, 3 * k),
                cls: ChildHead::new(&mut layout, &name("cls"), m, m, c),
                box_reg: Mlp2::new(&mut layout, &name("box_reg"), m, m, BOX_DIM),
                box_cls: Mlp2::new(&mut layout, &name("box_cls"), m, m, c + 1),
            });
        }
        Ok(Self {
            cfg,
            layout,
            embed_dynamic,
            embed_static,
            stages,
            phi_scale,
            phi_rot,
            phi_opacity,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// Seeded initial parameters: Glorot hidden layers, small output layers, zero
    /// query embeddings, identity layer norms.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0d9);
        let mut p = vec![0.0; self.layout.len];
        self.phi_scale.mlp.init(&mut p, &mut rng, 0.1);
        self.phi_rot.mlp.init(&mut p, &mut rng, 0.1);
        self.phi_opacity.mlp.init(&mut p, &mut rng, 0.1);
        let sb = self.phi_scale.mlp.l2.b;
        let bias = inv_sigmoid((INIT_SCALE - SCALE_MIN) / (SCALE_MAX - SCALE_MIN));
        p[sb..sb + 3].fill(bias);
        // Rotation head starts near the identity quaternion.
        p[self.phi_rot.mlp.l2.b] = 1.0;
        for s in &self.stages {
            for lin in [s.attn.q, s.attn.k, s.attn.v, s.attn.o] {
                lin.init(&mut p, &mut rng, 1.0);
            }
            s.attn.ln.init(&mut p);
            s.mix.init(&mut p, &mut rng, 0.5);
            s.pos.init(&mut p, &mut rng, 0.1);
            s.cls.mlp.init(&mut p, &mut rng, 0.5);
            s.box_reg.init(&mut p, &mut rng, 0.1);
            s.box_cls.init(&mut p, &mut rng, 0.5);
        }
        p
    }

    pub fn bounds_check(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.len {
            return Err(OdgError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.layout.len,
                params.len()
            )));
        }
        Ok(())
    }
}

fn inv_sigmoid(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

/// Seeded initial state: means `~ U[0,1]³` (static queries drawn first), default
/// box attributes, zero features.
pub fn init_queries(cfg: &LayerConfig, seed: u64) -> Result<QueryState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<Vec3> { (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect() };
    let static_means = draw(cfg.static_queries);
    let dynamic_means = draw(cfg.dynamic_queries);
    let spread = Vec3::repeat(INIT_SPREAD);
    Ok(QueryState {
        stage: 0,
        k: 1,
        static_feats: vec![0.0; cfg.static_queries * cfg.feat_dim],
        dynamic_feats: vec![0.0; cfg.dynamic_queries * cfg.feat_dim],
        static_spread: vec![spread; static_means.len()],
        dynamic_spread: vec![spread; dynamic_means.len()],
        static_means,
        dynamic_means,
        dynamic_box: vec![
            BoxAttributes {
                l: BOX_PRIOR[0],
                w: BOX_PRIOR[1],
                h: BOX_PRIOR[2],
                theta: 0.0,
                vx: 0.0,
                vy: 0.0,
            };
            cfg.dynamic_queries
        ],
    })
}

/// Replicates each of the `K_{ℓ−1}` parents per query `K_ℓ / K_{ℓ−1}` times, adds
/// the per-child offsets, and clamps to `[0,1]³`.
pub fn expand_children(means: &[Vec3], parents: usize, offsets: &[Vec3], children: usize) -> Result<Vec<Vec3>> {
    if parents == 0 || children % parents != 0 {
        return Err(OdgError::config(
            "k_schedule",
            format!("{children} children per query is not a multiple of {parents} parents"),
        ));
    }
    if means.len() % parents != 0 || offsets.len() != means.len() / parents * children {
        return Err(OdgError::InvalidArgument("expand_children shape mismatch".into()));
    }
    let r = children / parents;
    Ok(offsets
        .iter()
        .enumerate()
        .map(|(i, off)| {
            let q = i / children;
            let parent = means[q * parents + (i % children) / r];
            (parent + off).map(|v| v.clamp(0.0, 1.0))
        })
        .collect())
}

/// Per-Gaussian properties decoded by the shared heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedProps {
    pub scale: Vec<Vec3>,
    pub rot: Vec<Quat>,
    pub opacity: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct DecodeCache {
    pe: Vec<f64>,
    scale_raw: Vec<f64>,
    rot_raw: Vec<f64>,
    opa_raw: Vec<f64>,
    scale: ChildHeadCache,
    rot: ChildHeadCache,
    opa: ChildHeadCache,
}

fn unit_or_identity(raw: &[f64]) -> Quat {
    let q = [raw[0], raw[1], raw[2], raw[3]];
    let n = quat_norm(&q);
    if n < ROT_EPS {
        IDENTITY_QUAT
    } else {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }
}

fn decode_forward(net: &Network, p: &[f64], pe: Vec<f64>, feats: &[f64], kc: usize) -> (DecodedProps, DecodeCache) {
    let (scale_raw, scale) = net.phi_scale.forward(p, &pe, feats, kc);
    let (rot_raw, rot) = net.phi_rot.forward(p, &pe, feats, kc);
    let (opa_raw, opa) = net.phi_opacity.forward(p, &pe, feats, kc);
    let props = DecodedProps {
        scale: scale_raw
            .chunks_exact(3)
            .map(|r| Vec3::from_fn(|a, _| SCALE_MIN + (SCALE_MAX - SCALE_MIN) * sigmoid(r[a])))
            .collect(),
        rot: rot_raw.chunks_exact(4).map(unit_or_identity).collect(),
        opacity: opa_raw.iter().map(|&r| sigmoid(r)).collect(),
    };
    (
        props,
        DecodeCache {
            pe,
            scale_raw,
            rot_raw,
            opa_raw,
            scale,
            rot,
            opa,
        },
    )
}

/// Scale, rotation and opacity of every child Gaussian from
/// `concat(PE(mean), query feature)`. `means` holds `kc` normalized means per
/// query row of `feats`.
pub fn decode_properties(net: &Network, params: &[f64], means: &[Vec3], feats: &[f64], kc: usize) -> Result<DecodedProps> {
    net.bounds_check(params)?;
    let m = net.cfg.feat_dim;
    if feats.len() % m != 0 || means.len() != feats.len() / m * kc {
        return Err(OdgError::InvalidArgument("decode_properties shape mismatch".into()));
    }
    let mut pe = Vec::with_capacity(means.len() * PE_DIM);
    for mu in means {
        positional_encoding(mu, &mut pe);
    }
    Ok(decode_forward(net, params, pe, feats, kc).0)
}

/// Everything a stage's backward pass needs.
#[derive(Debug, Clone)]
pub struct StageTrace {
    stage: usize,
    kp: usize,
    kc: usize,
    parent_means: Vec<Vec3>,
    spread: Vec<Vec3>,
    velocities: Vec<Option<[f64; 2]>>,
    attn: AttentionCache,
    mix: MlpCache,
    x2: Vec<f64>,
    pos: MlpCache,
    pos_raw: Vec<f64>,
    unclamped: Vec<Vec3>,
    children: Vec<Vec3>,
    cls: ChildHeadCache,
    decode: DecodeCache,
    box_reg: MlpCache,
    box_cls: MlpCache,
}

fn sample_point(bounds: &SceneBounds, mean: &Vec3, spread: &Vec3, i: usize) -> Vec3 {
    let pat = SAMPLE_PATTERN[i];
    bounds.denormalize(mean) + Vec3::new(pat[0] * spread.x, pat[1] * spread.y, pat[2] * spread.z)
}

/// Runs stage `state.stage + 1` and returns the next state, the decoded output
/// and the trace for [`refine_stage_backward`].
pub fn refine_stage_traced(
    net: &Network,
    p: &[f64],
    state: &QueryState,
    sampler: &Sampler,
    bounds: &SceneBounds,
) -> Result<(QueryState, StageOutput, StageTrace)> {
    net.bounds_check(p)?;
    let cfg = &net.cfg;
    let l = state.stage + 1;
    if l > cfg.stages() {
        return Err(OdgError::InvalidArgument(format!(
            "stage {l} exceeds the configured {} stages",
            cfg.stages()
        )));
    }
    let (kp, kc) = (cfg.parents(l), cfg.k_schedule[l - 1]);
    if state.k != kp {
        return Err(OdgError::InvalidArgument(format!(
            "state holds {} means per query, stage {l} expects {kp}",
            state.k
        )));
    }
    if sampler.channels() != cfg.channels {
        return Err(OdgError::InvalidArgument(format!(
            "feature planes have {} channels, network expects {}",
            sampler.channels(),
            cfg.channels
        )));
    }
    let layers = &net.stages[l - 1];
    let (m, nd, t) = (cfg.feat_dim, cfg.dynamic_queries, cfg.queries());
    let (ch, np) = (cfg.channels, cfg.sample_points);

    let (ad, as_, attn) = layers.attn.forward(p, &state.dynamic_feats, &state.static_feats, cfg.attention);
    let x1 = [ad, as_].concat();

    let parent_means = state.token_means();
    let spread = state.token_spread();
    let velocities: Vec<Option<[f64; 2]>> = (0..t)
        .map(|q| (q < nd).then(|| [state.dynamic_box[q].vx, state.dynamic_box[q].vy]))
        .collect();
    let fw = np * ch;
    let mut mix_in = Vec::with_capacity(t * (m + fw));
    for q in 0..t {
        mix_in.extend_from_slice(&x1[q * m..(q + 1) * m]);
        let mut f = vec![0.0; fw];
        for j in 0..kp {
            let idx = q * kp + j;
            for i in 0..np {
                let s = sampler.sample(&sample_point(bounds, &parent_means[idx], &spread[idx], i), velocities[q]);
                for (a, b) in f[i * ch..(i + 1) * ch].iter_mut().zip(&s.feat) {
                    *a += b / kp as f64;
                }
            }
        }
        mix_in.extend(f);
    }
    let (h, mix) = layers.mix.forward(p, &mix_in);
    let x2: Vec<f64> = x1.iter().zip(&h).map(|(a, b)| a + b).collect();

    let (pos_raw, pos) = layers.pos.forward(p, &x2);
    let offsets: Vec<Vec3> = pos_raw
        .chunks_exact(3)
        .map(|r| Vec3::new(r[0], r[1], r[2]).map(|v| OFFSET_RANGE * v.tanh()))
        .collect();
    let r = kc / kp;
    let unclamped: Vec<Vec3> = offsets
        .iter()
        .enumerate()
        .map(|(i, off)| parent_means[(i / kc) * kp + (i % kc) / r] + off)
        .collect();
    let children: Vec<Vec3> = unclamped.iter().map(|v| v.map(|x| x.clamp(0.0, 1.0))).collect();

    let mut pe = Vec::with_capacity(children.len() * PE_DIM);
    for mu in &children {
        positional_encoding(mu, &mut pe);
    }
    let (class_scores, cls) = layers.cls.forward(p, &pe, &x2, kc);
    let (props, decode) = decode_forward(net, p, pe, &x2, kc);

    let xd = &x2[..nd * m];
    let (box_raw, box_reg) = layers.box_reg.forward(p, xd);
    let (box_class, box_cls) = layers.box_cls.forward(p, xd);
    let mut box_pred = box_raw;
    for (q, row) in box_pred.chunks_exact_mut(BOX_DIM).enumerate() {
        let c = bounds.denormalize(&parent_means[q * kp]);
        let prior = [c.x, c.y, c.z, BOX_PRIOR[0], BOX_PRIOR[1], BOX_PRIOR[2], 0.0, 1.0, 0.0, 0.0];
        for (v, p0) in row.iter_mut().zip(prior) {
            *v += p0;
        }
    }

    let c = cfg.num_classes;
    let gaussians: Vec<Gaussian3D> = (0..children.len())
        .map(|i| Gaussian3D {
            mean: bounds.denormalize(&children[i]),
            scale: props.scale[i],
            rot: props.rot[i],
            opacity: props.opacity[i],
            sem: class_scores[i * c..(i + 1) * c].to_vec(),
        })
        .collect();

    let split = nd * kc;
    let next = QueryState {
        stage: l,
        k: kc,
        dynamic_feats: xd.to_vec(),
        static_feats: x2[nd * m..].to_vec(),
        dynamic_means: children[..split].to_vec(),
        static_means: children[split..].to_vec(),
        dynamic_spread: props.scale[..split].to_vec(),
        static_spread: props.scale[split..].to_vec(),
        dynamic_box: box_pred
            .chunks_exact(BOX_DIM)
            .map(|b| BoxAttributes {
                l: b[3],
                w: b[4],
                h: b[5],
                theta: b[6].atan2(b[7]),
                vx: b[8],
                vy: b[9],
            })
            .collect(),
    };
    let out = StageOutput {
        stage: l,
        k: kc,
        gaussians,
        means: children.clone(),
        class_scores,
        box_pred,
        box_class,
    };
    let trace = StageTrace {
        stage: l,
        kp,
        kc,
        parent_means,
        spread,
        velocities,
        attn,
        mix,
        x2,
        pos,
        pos_raw,
        unclamped,
        children,
        cls,
        decode,
        box_reg,
        box_cls,
    };
    Ok((next, out, trace))
}

/// One refinement stage: attention, feature sampling at the current means
/// (motion-warped for dynamic queries), feature mixing, child expansion and the
/// decoding heads.
pub fn refine_stage(
    net: &Network,
    params: &[f64],
    state: &QueryState,
    planes: &FeaturePlaneSet,
    bounds: &SceneBounds,
) -> Result<(QueryState, StageOutput)> {
    let sampler = Sampler::new(planes, net.cfg.motion)?;
    let (next, out, _) = refine_stage_traced(net, params, state, &sampler, bounds)?;
    Ok((next, out))
}

/// Backward pass of one stage. `out_grad` holds gradients on the stage's outputs
/// and `next_grad` on the state it produced; parameter gradients accumulate into
/// `g`. Returns the gradient on the input state. Sampling spreads and warp
/// velocities carried in the input state are treated as constants.
pub fn refine_stage_backward(
    net: &Network,
    p: &[f64],
    trace: &StageTrace,
    sampler: &Sampler,
    bounds: &SceneBounds,
    out_grad: &StageGrad,
    next_grad: &StateGrad,
    g: &mut [f64],
) -> Result<StateGrad> {
    let cfg = &net.cfg;
    let layers = &net.stages[trace.stage - 1];
    let (m, nd, t) = (cfg.feat_dim, cfg.dynamic_queries, cfg.queries());
    let (ch, np, c) = (cfg.channels, cfg.sample_points, cfg.num_classes);
    let (kp, kc) = (trace.kp, trace.kc);
    let n = t * kc;
    if out_grad.gaussians.len() != n
        || out_grad.box_pred.len() != nd * BOX_DIM
        || out_grad.box_class.len() != nd * (c + 1)
        || next_grad.feats.len() != t * m
        || next_grad.means.len() != n
    {
        return Err(OdgError::InvalidArgument("stage gradient shape mismatch".into()));
    }
    let ext = bounds.extent;
    let dc = &trace.decode;

    // Child means collect gradient from the next state, the decoded means and
    // every head that reads their positional encoding.
    let mut d_child: Vec<Vec3> = next_grad.means.clone();
    let mut d_scale_raw = vec![0.0; n * 3];
    let mut d_rot_raw = vec![0.0; n * 4];
    let mut d_opa_raw = vec![0.0; n];
    let mut d_cls = vec![0.0; n * c];
    for (i, gg) in out_grad.gaussians.iter().enumerate() {
        d_child[i] += gg.mean.component_mul(&ext);
        for a in 0..3 {
            let s = sigmoid(dc.scale_raw[i * 3 + a]);
            d_scale_raw[i * 3 + a] = gg.scale[a] * (SCALE_MAX - SCALE_MIN) * s * (1.0 - s);
        }
        let raw = &dc.rot_raw[i * 4..i * 4 + 4];
        let rq = [raw[0], raw[1], raw[2], raw[3]];
        if quat_norm(&rq) >= ROT_EPS {
            d_rot_raw[i * 4..i * 4 + 4].copy_from_slice(&normalize_quat_backward(&rq, &gg.rot));
        }
        let s = sigmoid(dc.opa_raw[i]);
        d_opa_raw[i] = gg.opacity * s * (1.0 - s);
        if gg.sem.len() != c {
            return Err(OdgError::InvalidArgument("class gradient width mismatch".into()));
        }
        d_cls[i * c..(i + 1) * c].copy_from_slice(&gg.sem);
    }

    let mut dx2 = next_grad.feats.clone();
    let mut dpe = vec![0.0; n * PE_DIM];
    let heads: [(&ChildHead, &ChildHeadCache, &Vec<f64>); 4] = [
        (&layers.cls, &trace.cls, &d_cls),
        (&net.phi_scale, &dc.scale, &d_scale_raw),
        (&net.phi_rot, &dc.rot, &d_rot_raw),
        (&net.phi_opacity, &dc.opa, &d_opa_raw),
    ];
    for (head, cache, dy) in heads {
        let (a, b) = head.backward(p, cache, &dc.pe, &trace.x2, kc, dy, g);
        add(&mut dpe, &a);
        add(&mut dx2, &b);
    }
    for (i, mu) in trace.children.iter().enumerate() {
        d_child[i] += positional_encoding_backward(mu, &dpe[i * PE_DIM..(i + 1) * PE_DIM]);
    }

    // Box heads read the dynamic rows and the first parent mean of each query.
    let mut d_parent = vec![Vec3::zeros(); t * kp];
    let d_box_in = layers.box_reg.backward(p, &trace.box_reg, &out_grad.box_pred, g);
    add(&mut dx2[..nd * m], &d_box_in);
    let d_cls_in = layers.box_cls.backward(p, &trace.box_cls, &out_grad.box_class, g);
    add(&mut dx2[..nd * m], &d_cls_in);
    for q in 0..nd {
        let b = &out_grad.box_pred[q * BOX_DIM..q * BOX_DIM + 3];
        d_parent[q * kp] += Vec3::new(b[0], b[1], b[2]).component_mul(&ext);
    }

    // Child expansion: clamp, replicate, offset.
    let r = kc / kp;
    let mut d_pos_raw = vec![0.0; n * 3];
    for i in 0..n {
        for a in 0..3 {
            let u = trace.unclamped[i][a];
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let d = d_child[i][a];
            d_parent[(i / kc) * kp + (i % kc) / r][a] += d;
            let th = trace.pos_raw[i * 3 + a].tanh();
            d_pos_raw[i * 3 + a] = d * OFFSET_RANGE * (1.0 - th * th);
        }
    }
    let d_from_pos = layers.pos.backward(p, &trace.pos, &d_pos_raw, g);
    add(&mut dx2, &d_from_pos);

    // x2 = x1 + mix([x1, sampled]).
    let d_mix_in = layers.mix.backward(p, &trace.mix, &dx2, g);
    let fw = np * ch;
    let mut dx1 = dx2;
    for q in 0..t {
        let row = &d_mix_in[q * (m + fw)..(q + 1) * (m + fw)];
        add(&mut dx1[q * m..(q + 1) * m], &row[..m]);
        let df = &row[m..];
        if df.iter().all(|v| *v == 0.0) {
            continue;
        }
        for j in 0..kp {
            let idx = q * kp + j;
            for i in 0..np {
                let gf: Vec<f64> = df[i * ch..(i + 1) * ch].iter().map(|v| v / kp as f64).collect();
                let pt = sample_point(bounds, &trace.parent_means[idx], &trace.spread[idx], i);
                let gw = sampler.backward(&pt, trace.velocities[q], &gf);
                d_parent[idx] += gw.component_mul(&ext);
            }
        }
    }

    let (d_dyn, d_static) = layers.attn.backward(p, &trace.attn, &dx1[..nd * m], &dx1[nd * m..], g);
    Ok(StateGrad {
        feats: [d_dyn, d_static].concat(),
        means: d_parent,
    })
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// All stages of one forward pass plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub initial: QueryState,
    pub stages: Vec<StageOutput>,
    states: Vec<QueryState>,
    traces: Vec<StageTrace>,
}

impl PipelineOutput {
    /// World coordinates of the initial means, token order.
    pub fn initial_world_means(&self, bounds: &SceneBounds) -> Vec<Vec3> {
        self.initial.token_means().iter().map(|m| bounds.denormalize(m)).collect()
    }

    pub fn final_stage(&self) -> &StageOutput {
        self.stages.last().expect("at least one stage")
    }

    pub fn states(&self) -> &[QueryState] {
        &self.states
    }
}

/// The initial state with features taken from the learned query embeddings.
pub fn initial_state(net: &Network, params: &[f64], seed: u64) -> Result<QueryState> {
    net.bounds_check(params)?;
    let mut s = init_queries(&net.cfg, seed)?;
    let m = net.cfg.feat_dim;
    s.dynamic_feats
        .copy_from_slice(&params[net.embed_dynamic..net.embed_dynamic + net.cfg.dynamic_queries * m]);
    s.static_feats
        .copy_from_slice(&params[net.embed_static..net.embed_static + net.cfg.static_queries * m]);
    Ok(s)
}

/// Initializes queries from `seed` and runs every stage.
pub fn forward_pipeline(
    net: &Network,
    params: &[f64],
    planes: &FeaturePlaneSet,
    bounds: &SceneBounds,
    seed: u64,
) -> Result<PipelineOutput> {
    let sampler = Sampler::new(planes, net.cfg.motion)?;
    let initial = initial_state(net, params, seed)?;
    let mut state = initial.clone();
    let mut stages = Vec::with_capacity(net.cfg.stages());
    let mut states = Vec::with_capacity(net.cfg.stages());
    let mut traces = Vec::with_capacity(net.cfg.stages());
    for _ in 0..net.cfg.stages() {
        let (next, out, trace) = refine_stage_traced(net, params, &state, &sampler, bounds)?;
        states.push(std::mem::replace(&mut state, next));
        stages.push(out);
        traces.push(trace);
    }
    Ok(PipelineOutput {
        initial,
        stages,
        states,
        traces,
    })
}

/// Parameter gradient of an objective whose gradients on each stage's outputs are
/// `grads`. Initial means are fixed and receive no gradient.
pub fn backward_pipeline(
    net: &Network,
    params: &[f64],
    planes: &FeaturePlaneSet,
    bounds: &SceneBounds,
    out: &PipelineOutput,
    grads: &[StageGrad],
) -> Result<Vec<f64>> {
    if grads.len() != out.stages.len() {
        return Err(OdgError::InvalidArgument("one gradient per stage required".into()));
    }
    let sampler = Sampler::new(planes, net.cfg.motion)?;
    let cfg = &net.cfg;
    let mut g = vec![0.0; net.layout.len];
    let mut carry = StateGrad::zeros(cfg, cfg.k_schedule[cfg.stages() - 1]);
    for l in (0..out.stages.len()).rev() {
        carry = refine_stage_backward(net, params, &out.traces[l], &sampler, bounds, &grads[l], &carry, &mut g)?;
    }
    let m = cfg.feat_dim;
    let split = cfg.dynamic_queries * m;
    add(&mut g[net.embed_dynamic..net.embed_dynamic + split], &carry.feats[..split]);
    add(
        &mut g[net.embed_static..net.embed_static + cfg.static_queries * m],
        &carry.feats[split..],
    );
    Ok(g)
}
