//! Three-stage optimisation on direct parameter fields.
//!
//! Each frame's decomposer, each pair's flows, poses and appearance fields
//! and each target's log-depth are plain tensors optimised in place. Stage 1
//! owns the flows, stage 2 the decomposers, stage 3 depth, pose, appearance
//! and (optionally) intrinsics; a stage never writes parameters it does not
//! own.

mod toy;

pub use toy::{mole_toy_task, ToyConfig, ToyReport};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{depth_metrics, EvalReport, Scaling, DEFAULT_DEPTH_CAP};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::losses::{
    augment_brightness, flow_loss_l1, stage2_loss, stage3_loss, visibility_mask, DecompositionFrame,
    LossBreakdown, LossWeights, WarpedSource,
};
use crate::optim::{Adam, AdamConfig};
use crate::synth::{gen_scene, SceneBundle, SceneConfig};
use crate::tape::{logit, softplus_inverse, Tape, Var};
use crate::tensor::Tensor;

/// Named trainable leaves of one objective evaluation.
pub type Leaves<'t> = Vec<(String, Var<'t>)>;
/// Total loss, its breakdown, and the leaves it was built from.
pub type Objective<'t> = (Var<'t>, LossBreakdown, Leaves<'t>);

pub const TRAIN_SCHEMA: &str = "endogede-train/1";

/// Which stage owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Stage {
    Flow,
    Decomposition,
    Alignment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthInit {
    /// Every pixel starts at this depth.
    Constant(f64),
    /// Ground truth times this factor.
    ScaledGroundTruth(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseInit {
    Identity,
    GroundTruth,
    /// Ground truth composed with a seeded perturbation of the given
    /// rotation (degrees) and translation magnitudes.
    Perturbed { rotation_deg: f64, translation: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub depth: DepthInit,
    pub pose: PoseInit,
    /// Start flows at the ground-truth rigid flow instead of zero.
    pub ground_truth_flows: bool,
    /// Start decomposers at the ground-truth albedo and shading.
    pub ground_truth_decomposition: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            depth: DepthInit::Constant(1.0),
            pose: PoseInit::Identity,
            ground_truth_flows: false,
            ground_truth_decomposition: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSteps {
    pub flow: usize,
    pub decomposition: usize,
    pub alignment: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRates {
    pub flow: f64,
    pub decomposition: f64,
    pub depth: f64,
    pub pose: f64,
    pub appearance: f64,
    pub intrinsics: f64,
}

impl StageRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            flow: lr,
            decomposition: lr,
            depth: lr,
            pose: lr,
            appearance: lr,
            intrinsics: lr,
        }
    }

    fn all(&self) -> [f64; 6] {
        [self.flow, self.decomposition, self.depth, self.pose, self.appearance, self.intrinsics]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub epochs: usize,
    /// Epoch (0-based) from which rates are multiplied by `lr_decay`.
    pub decay_epoch: usize,
    pub lr_decay: f64,
    pub lr: StageRates,
    pub steps: StageSteps,
    /// Frame interval `n` between target and sources.
    pub frame_interval: usize,
    pub weights: LossWeights,
    pub depth_bounds: (f64, f64),
    pub optimize_intrinsics: bool,
    /// Use the appearance field `A_p` in stage 3.
    pub appearance_flow: bool,
    pub init: InitConfig,
    /// Runs the routing toy task and reports its statistics.
    pub mole_toy: Option<ToyConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            epochs: 1,
            decay_epoch: 15,
            lr_decay: 0.1,
            lr: StageRates::uniform(1e-4),
            steps: StageSteps {
                flow: 100,
                decomposition: 100,
                alignment: 100,
            },
            frame_interval: 4,
            weights: LossWeights::default(),
            depth_bounds: (0.1, 100.0),
            optimize_intrinsics: false,
            appearance_flow: true,
            init: InitConfig::default(),
            mole_toy: None,
        }
    }
}

impl TrainConfig {
    /// Rates and step counts that converge at 64×80 within minutes; the
    /// default rates are sized for network weights, not per-pixel fields.
    pub fn desk() -> Self {
        Self {
            lr: StageRates {
                flow: 0.02,
                decomposition: 0.02,
                depth: 2e-3,
                pose: 5e-4,
                appearance: 2e-3,
                intrinsics: 0.05,
            },
            steps: StageSteps {
                flow: 300,
                decomposition: 300,
                alignment: 500,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.weights.validate()?;
        if self.frame_interval < 1 {
            return Err(Error::Config("frame interval must be at least 1".into()));
        }
        if samples(self.scene.frames, self.frame_interval).is_empty() {
            return Err(Error::Config(format!(
                "{} frames leave no target with a source {} frames away",
                self.scene.frames, self.frame_interval
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.lr.all().iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        let (lo, hi) = self.depth_bounds;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Config("depth bounds must satisfy 0 < min < max".into()));
        }
        let (DepthInit::Constant(d) | DepthInit::ScaledGroundTruth(d)) = self.init.depth;
        if !(d > 0.0) {
            return Err(Error::Config("depth initialisation must be positive".into()));
        }
        Ok(())
    }

    fn decay(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr_decay
        } else {
            1.0
        }
    }
}

/// A target frame and the frames it is compared against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Sample {
    pub target: usize,
    pub sources: Vec<usize>,
}

/// Targets with sources `t − n` and `t + n` where both exist; when no frame
/// has both, the first frame paired with frame `n`.
pub fn samples(frames: usize, n: usize) -> Vec<Sample> {
    let out: Vec<Sample> = (n..frames.saturating_sub(n))
        .map(|t| Sample {
            target: t,
            sources: vec![t - n, t + n],
        })
        .collect();
    if out.is_empty() && frames > n {
        return vec![Sample {
            target: 0,
            sources: vec![n],
        }];
    }
    out
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DirectParams {
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn flow_name(from: usize, to: usize) -> String {
    format!("flow.{from}.{to}")
}

pub fn pose_name(target: usize, source: usize) -> String {
    format!("pose.{target}.{source}")
}

pub fn appearance_name(target: usize, source: usize) -> String {
    format!("appearance.{target}.{source}")
}

pub fn depth_name(target: usize) -> String {
    format!("log_depth.{target}")
}

const DECOMPOSER_FIELDS: [(&str, usize); 6] = [
    ("albedo_bias", 3),
    ("albedo_gain", 3),
    ("shading_bias", 1),
    ("shading_gain", 1),
    ("mask_bias", 1),
    ("mask_gain", 1),
];

pub fn decomposer_name(field: &str, frame: usize) -> String {
    format!("{field}.{frame}")
}

pub const INTRINSICS_NAME: &str = "intrinsics";

impl DirectParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
    }

    pub fn owner(name: &str) -> Stage {
        let head = name.split('.').next().unwrap_or("");
        match head {
            "flow" => Stage::Flow,
            "log_depth" | "pose" | "appearance" | INTRINSICS_NAME => Stage::Alignment,
            _ => Stage::Decomposition,
        }
    }

    /// Parameters owned by `stage`, in name order.
    pub fn owned_by(&self, stage: Stage) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(n, _)| Self::owner(n) == stage)
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn depth(&self, target: usize, bounds: (f64, f64)) -> Result<Tensor> {
        Ok(self.get(&depth_name(target))?.map(|v| v.exp().clamp(bounds.0, bounds.1)))
    }

    pub fn pose(&self, target: usize, source: usize) -> Result<PoseSE3> {
        PoseSE3::from_tensor(self.get(&pose_name(target, source))?)
    }
}

/// Per-pixel decomposer for frame `f` applied to image `j`:
/// `A = σ(a_b + a_g⊙J)`, `S = softplus(s_b + s_g·J̄)`, `M = σ(m_b + m_g·J̄)`
/// with `J̄` the channel mean.
pub struct Decomposed<'t> {
    pub albedo: Var<'t>,
    pub shading: Var<'t>,
    pub mask: Var<'t>,
}

pub fn decompose<'t>(fields: &BTreeMap<&str, Var<'t>>, image: Var<'t>) -> Result<Decomposed<'t>> {
    let f = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::invalid("decompose", format!("missing field {k}")))
    };
    let mean = image.mean_last();
    let albedo = f("albedo_bias")?.add(f("albedo_gain")?.mul(image)?)?.sigmoid();
    let shading = f("shading_bias")?.add(f("shading_gain")?.mul(mean)?)?.softplus();
    let mask = f("mask_bias")?.add(f("mask_gain")?.mul(mean)?)?.sigmoid();
    Ok(Decomposed { albedo, shading, mask })
}

fn bind_decomposer<'t>(
    tape: &'t Tape,
    params: &DirectParams,
    frame: usize,
    trainable: bool,
) -> Result<(BTreeMap<&'static str, Var<'t>>, Leaves<'t>)> {
    let mut fields = BTreeMap::new();
    let mut leaves = Vec::new();
    for (field, _) in DECOMPOSER_FIELDS {
        let name = decomposer_name(field, frame);
        let v = tape.var(params.get(&name)?.clone(), trainable);
        fields.insert(field, v);
        leaves.push((name, v));
    }
    Ok((fields, leaves))
}

/// Albedo and shading of frame `f` under the current decomposer, as plain
/// tensors.
pub fn decomposition_values(params: &DirectParams, frame: usize, image: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let tape = Tape::new();
    let (fields, _) = bind_decomposer(&tape, params, frame, false)?;
    let d = decompose(&fields, tape.constant(image.clone()))?;
    Ok(((*d.albedo.value()).clone(), (*d.shading.value()).clone(), (*d.mask.value()).clone()))
}

/// Rigid flow from frame `from` to frame `to` under ground truth.
pub fn ground_truth_flow(scene: &SceneBundle, from: usize, to: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let depth = tape.constant(scene.depth[from].clone());
    let pose = tape.constant(scene.relative_pose(from, to).to_tensor());
    let k = tape.constant(scene.intrinsics.to_tensor());
    let (flow, _) = depth.rigid_flow(pose, k)?;
    Ok((*flow.value()).clone())
}

/// Ground-truth decomposer fields: zero gains, biases inverting the decodings
/// at the true albedo and shading, and an even albedo/shading split.
pub fn ground_truth_decomposer(scene: &SceneBundle, frame: usize) -> Vec<(String, Tensor)> {
    let a = &scene.albedo[frame];
    let s = &scene.shading[frame];
    let (h, w) = (scene.config.height, scene.config.width);
    DECOMPOSER_FIELDS
        .iter()
        .map(|(field, c)| {
            let t = match *field {
                "albedo_bias" => a.map(logit),
                "shading_bias" => s.map(softplus_inverse),
                _ => Tensor::zeros(&[h, w, *c]),
            };
            (decomposer_name(field, frame), t)
        })
        .collect()
}

fn perturbation(rng: &mut ChaCha8Rng, magnitude: f64) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: [f64; 3] = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [magnitude * v[0] / n, magnitude * v[1] / n, magnitude * v[2] / n]
}

/// Builds every parameter the samples need, following `config.init`.
pub fn init_params(scene: &SceneBundle, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<DirectParams> {
    let (h, w) = (scene.config.height, scene.config.width);
    let mut p = DirectParams::default();
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let samples = samples(scene.len(), config.frame_interval);
    let mut frames: Vec<usize> = samples
        .iter()
        .flat_map(|s| std::iter::once(s.target).chain(s.sources.iter().copied()))
        .collect();
    frames.sort_unstable();
    frames.dedup();
    for &f in &frames {
        if config.init.ground_truth_decomposition {
            p.tensors.extend(ground_truth_decomposer(scene, f));
        } else {
            for (field, c) in DECOMPOSER_FIELDS {
                let offset = match field {
                    "shading_bias" => softplus_inverse(0.5),
                    _ => 0.0,
                };
                let t = Tensor::from_fn(&[h, w, c], |_| offset + normal.sample(rng));
                p.tensors.insert(decomposer_name(field, f), t);
            }
        }
    }
    for s in &samples {
        let t = s.target;
        let gt = &scene.depth[t];
        let depth = match config.init.depth {
            DepthInit::Constant(d) => Tensor::full(&[h, w, 1], d),
            DepthInit::ScaledGroundTruth(k) => gt.map(|v| k * v),
        };
        p.tensors.insert(depth_name(t), depth.map(f64::ln));
        for &src in &s.sources {
            for (a, b) in [(t, src), (src, t)] {
                let flow = if config.init.ground_truth_flows {
                    ground_truth_flow(scene, a, b)?
                } else {
                    Tensor::zeros(&[h, w, 2])
                };
                p.tensors.insert(flow_name(a, b), flow);
            }
            let gt_pose = scene.relative_pose(t, src);
            let pose = match config.init.pose {
                PoseInit::Identity => PoseSE3::identity(),
                PoseInit::GroundTruth => gt_pose,
                PoseInit::Perturbed { rotation_deg, translation } => {
                    let dr = perturbation(rng, rotation_deg.to_radians());
                    let dt = perturbation(rng, translation);
                    PoseSE3::new(dr, dt).compose(&gt_pose)
                }
            };
            p.tensors.insert(pose_name(t, src), pose.to_tensor());
            p.tensors.insert(appearance_name(t, src), Tensor::zeros(&[h, w, 3]));
        }
    }
    p.tensors.insert(INTRINSICS_NAME.into(), scene.intrinsics.to_tensor());
    Ok(p)
}

/// Per-step totals of one stage run and the last breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageTrace {
    pub losses: Vec<f64>,
    pub breakdown: LossBreakdown,
}

impl StageTrace {
    pub fn first(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Means of consecutive `window`-step blocks.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Scene, parameters and one optimiser per stage.
pub struct Trainer {
    pub config: TrainConfig,
    pub scene: SceneBundle,
    pub params: DirectParams,
    optimizers: [Adam; 3],
    rng: ChaCha8Rng,
    epoch: usize,
}

fn check_loss(step: usize, loss: f64, stage: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{stage} loss became {loss}"),
        })
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let scene = gen_scene(config.seed, &config.scene)?;
        Self::with_scene(config, scene)
    }

    pub fn with_scene(config: TrainConfig, scene: SceneBundle) -> Result<Self> {
        config.validate()?;
        if scene.config.height != config.scene.height || scene.config.width != config.scene.width {
            return Err(Error::Config("scene size differs from the configured size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11);
        let params = init_params(&scene, &config, &mut rng)?;
        let adam = || Adam::new(AdamConfig::default());
        Ok(Self {
            config,
            scene,
            params,
            optimizers: [adam(), adam(), adam()],
            rng,
            epoch: 0,
        })
    }

    pub fn samples(&self) -> Vec<Sample> {
        samples(self.scene.len(), self.config.frame_interval)
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    fn rate(&self, name: &str) -> f64 {
        let r = &self.config.lr;
        let base = match name.split('.').next().unwrap_or("") {
            "flow" => r.flow,
            "log_depth" => r.depth,
            "pose" => r.pose,
            "appearance" => r.appearance,
            INTRINSICS_NAME => r.intrinsics,
            _ => r.decomposition,
        };
        base * self.config.decay(self.epoch)
    }

    fn apply(&mut self, stage: Stage, tape: &Tape, loss: Var<'_>, leaves: &[(String, Var<'_>)]) -> Result<()> {
        let grads = tape.backward(loss)?;
        for (name, var) in leaves {
            if DirectParams::owner(name) != stage {
                return Err(Error::invalid("trainer", format!("{name} is not owned by {stage:?}")));
            }
            let lr = self.rate(name);
            let g = grads.wrt(*var);
            let opt = &mut self.optimizers[stage as usize];
            opt.set_lr(lr);
            let p = self
                .params
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::invalid("trainer", format!("missing parameter {name}")))?;
            opt.step(name, p, &g)?;
        }
        Ok(())
    }

    /// Stage-1 loss over both flow directions of every target/source pair.
    fn flow_objective<'t>(
        &self,
        tape: &'t Tape,
        sample: &Sample,
    ) -> Result<Objective<'t>> {
        let mut total = tape.scalar(0.0);
        let mut breakdown = LossBreakdown::default();
        let mut leaves = Vec::new();
        let t = sample.target;
        for &s in &sample.sources {
            for (a, b) in [(t, s), (s, t)] {
                let name = flow_name(a, b);
                let flow = tape.leaf(self.params.get(&name)?.clone());
                let ia = tape.constant(self.scene.frames[a].clone());
                let ib = tape.constant(self.scene.frames[b].clone());
                let (warped, _) = ib.flow_warp(flow)?;
                let l = flow_loss_l1(ia, warped, flow, ia, &self.config.weights)?;
                breakdown.push(name.clone(), l.total.item());
                total = total.add(l.total)?;
                leaves.push((name, flow));
            }
        }
        breakdown.push("total", total.item());
        Ok((total, breakdown, leaves))
    }

    /// Gradient steps on the flows of `sample` only.
    pub fn run_stage1(&mut self, sample: &Sample, steps: usize) -> Result<StageTrace> {
        let mut trace = StageTrace::default();
        for step in 0..steps {
            let tape = Tape::new();
            let (loss, breakdown, leaves) = self.flow_objective(&tape, sample)?;
            check_loss(step, loss.item(), "stage 1")?;
            trace.losses.push(loss.item());
            trace.breakdown = breakdown;
            self.apply(Stage::Flow, &tape, loss, &leaves)?;
        }
        Ok(trace)
    }

    fn frames_of(sample: &Sample) -> Vec<usize> {
        let mut f: Vec<usize> = std::iter::once(sample.target).chain(sample.sources.iter().copied()).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Stage-2 objective with brightness factor `n`.
    pub fn decomposition_objective<'t>(
        &self,
        tape: &'t Tape,
        sample: &Sample,
        n: f64,
        trainable: bool,
    ) -> Result<Objective<'t>> {
        let mut frames = Vec::new();
        let mut leaves = Vec::new();
        for f in Self::frames_of(sample) {
            let (fields, l) = bind_decomposer(tape, &self.params, f, trainable)?;
            leaves.extend(l);
            let img = &self.scene.frames[f];
            let image = tape.constant(img.clone());
            let aug = tape.constant(augment_brightness(img, n)?);
            let d = decompose(&fields, image)?;
            let d_aug = decompose(&fields, aug)?;
            frames.push(DecompositionFrame {
                albedo: d.albedo,
                albedo_aug: d_aug.albedo,
                shading: d.shading,
                mask: d.mask,
                image,
            });
        }
        let loss = stage2_loss(&frames, &self.config.weights)?;
        Ok((loss.total, loss.breakdown, leaves))
    }

    /// Brightness factor drawn uniformly from the open interval (0, 2).
    fn draw_brightness(&mut self) -> f64 {
        loop {
            let n: f64 = 2.0 * self.rng.random::<f64>();
            if n > 0.0 {
                return n;
            }
        }
    }

    /// Gradient steps on the decomposers of the sample's frames only, with a
    /// fresh brightness factor each step.
    pub fn run_stage2(&mut self, sample: &Sample, steps: usize) -> Result<StageTrace> {
        let mut trace = StageTrace::default();
        for step in 0..steps {
            let n = self.draw_brightness();
            let tape = Tape::new();
            let (loss, breakdown, leaves) = self.decomposition_objective(&tape, sample, n, true)?;
            check_loss(step, loss.item(), "stage 2")?;
            trace.losses.push(loss.item());
            trace.breakdown = breakdown;
            self.apply(Stage::Decomposition, &tape, loss, &leaves)?;
        }
        Ok(trace)
    }

    /// Stage-3 objective. Decomposers and flows enter as constants.
    pub fn alignment_objective<'t>(
        &self,
        tape: &'t Tape,
        sample: &Sample,
        frozen: &FrozenInputs,
    ) -> Result<Objective<'t>> {
        let t = sample.target;
        let (lo, hi) = self.config.depth_bounds;
        let mut leaves = Vec::new();
        let log_depth = tape.leaf(self.params.get(&depth_name(t))?.clone());
        leaves.push((depth_name(t), log_depth));
        let depth = log_depth.exp().clamp(lo, hi);
        let k_val = self.params.get(INTRINSICS_NAME)?.clone();
        let k = if self.config.optimize_intrinsics {
            let k = tape.leaf(k_val);
            leaves.push((INTRINSICS_NAME.to_string(), k));
            k
        } else {
            tape.constant(k_val)
        };
        let target = tape.constant(self.scene.frames[t].clone());
        let target_albedo = tape.constant(frozen.albedo[&t].clone());
        let mut sources = Vec::new();
        for &s in &sample.sources {
            let pose = tape.leaf(self.params.get(&pose_name(t, s))?.clone());
            leaves.push((pose_name(t, s), pose));
            let appearance = if self.config.appearance_flow {
                let a = tape.leaf(self.params.get(&appearance_name(t, s))?.clone());
                leaves.push((appearance_name(t, s), a));
                Some(a)
            } else {
                None
            };
            let (image, valid) = tape
                .constant(self.scene.frames[s].clone())
                .rigid_warp(depth, pose, k)?;
            let (albedo, _) = tape.constant(frozen.albedo[&s].clone()).rigid_warp(depth, pose, k)?;
            let (shading, _) = tape.constant(frozen.shading[&s].clone()).rigid_warp(depth, pose, k)?;
            sources.push(WarpedSource {
                image,
                albedo,
                shading,
                valid,
                visibility: frozen.visibility[&(t, s)].clone(),
                appearance,
                flow_warped: tape.constant(frozen.flow_warped[&(t, s)].clone()),
            });
        }
        let loss = stage3_loss(target, target_albedo, depth, &sources, &self.config.weights)?;
        Ok((loss.total, loss.breakdown, leaves))
    }

    /// Decomposer outputs, visibility masks and flow-warped sources that
    /// stage 3 treats as constants.
    pub fn frozen_inputs(&self, sample: &Sample) -> Result<FrozenInputs> {
        let mut fi = FrozenInputs::default();
        for f in Self::frames_of(sample) {
            let (a, s, _) = decomposition_values(&self.params, f, &self.scene.frames[f])?;
            fi.albedo.insert(f, a);
            fi.shading.insert(f, s);
        }
        let t = sample.target;
        for &s in &sample.sources {
            let fwd = self.params.get(&flow_name(t, s))?;
            let bwd = self.params.get(&flow_name(s, t))?;
            fi.visibility.insert((t, s), visibility_mask(fwd, bwd)?);
            let tape = Tape::new();
            let (w, _) = tape
                .constant(self.scene.frames[s].clone())
                .flow_warp(tape.constant(fwd.clone()))?;
            fi.flow_warped.insert((t, s), (*w.value()).clone());
        }
        Ok(fi)
    }

    /// Gradient steps on depth, poses, appearance and optionally intrinsics.
    pub fn run_stage3(&mut self, sample: &Sample, steps: usize) -> Result<StageTrace> {
        let frozen = self.frozen_inputs(sample)?;
        let mut trace = StageTrace::default();
        for step in 0..steps {
            let tape = Tape::new();
            let (loss, breakdown, leaves) = self.alignment_objective(&tape, sample, &frozen)?;
            check_loss(step, loss.item(), "stage 3")?;
            trace.losses.push(loss.item());
            trace.breakdown = breakdown;
            self.apply(Stage::Alignment, &tape, loss, &leaves)?;
        }
        Ok(trace)
    }

    /// Depth metrics and pose errors of `sample` against ground truth.
    pub fn metrics(&self, sample: &Sample) -> Result<SampleMetrics> {
        let t = sample.target;
        let pred = self.params.depth(t, self.config.depth_bounds)?;
        let depth = depth_metrics(&pred, &self.scene.depth[t], DEFAULT_DEPTH_CAP, Scaling::Median)?;
        let mut poses = Vec::new();
        for &s in &sample.sources {
            let est = self.params.pose(t, s)?;
            let gt = self.scene.relative_pose(t, s);
            let err = gt.inverse().compose(&est);
            let (a, b) = (est.translation, gt.translation);
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb).max(1e-12);
            poses.push(PoseError {
                source: s,
                rotation_deg: err.angle().to_degrees(),
                translation_direction_deg: cos.clamp(-1.0, 1.0).acos().to_degrees(),
            });
        }
        Ok(SampleMetrics { target: t, depth, poses })
    }
}

#[derive(Clone, Debug, Default)]
pub struct FrozenInputs {
    pub albedo: BTreeMap<usize, Tensor>,
    pub shading: BTreeMap<usize, Tensor>,
    pub visibility: BTreeMap<(usize, usize), Tensor>,
    pub flow_warped: BTreeMap<(usize, usize), Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoseError {
    pub source: usize,
    pub rotation_deg: f64,
    /// Angle between estimated and true translation; scale is unobservable.
    pub translation_direction_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub target: usize,
    pub depth: EvalReport,
    pub poses: Vec<PoseError>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub breakdown: LossBreakdown,
}

impl From<&StageTrace> for StageSummary {
    fn from(t: &StageTrace) -> Self {
        Self {
            steps: t.losses.len(),
            first_loss: t.first(),
            last_loss: t.last(),
            breakdown: t.breakdown.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleReport {
    pub target: usize,
    pub stage1: StageSummary,
    pub stage2: StageSummary,
    pub stage3: StageSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr_factor: f64,
    pub samples: Vec<SampleReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub schema: &'static str,
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochReport>,
    pub metrics: Vec<SampleMetrics>,
    pub mean_depth: EvalReport,
    pub routing: Option<ToyReport>,
}

/// Runs stage 1 → 2 → 3 on every sample for each epoch and reports losses
/// and final metrics against ground truth.
pub fn run_training(config: &TrainConfig) -> Result<TrainReport> {
    let mut trainer = Trainer::new(config.clone())?;
    let samples = trainer.samples();
    let mut epochs = Vec::new();
    for epoch in 0..config.epochs {
        trainer.set_epoch(epoch);
        let mut reports = Vec::new();
        for s in &samples {
            let t1 = trainer.run_stage1(s, config.steps.flow)?;
            let t2 = trainer.run_stage2(s, config.steps.decomposition)?;
            let t3 = trainer.run_stage3(s, config.steps.alignment)?;
            log::info!(
                "epoch {epoch} target {}: flow {:.4}, decomposition {:.4}, alignment {:.4}",
                s.target,
                t1.last(),
                t2.last(),
                t3.last()
            );
            reports.push(SampleReport {
                target: s.target,
                stage1: (&t1).into(),
                stage2: (&t2).into(),
                stage3: (&t3).into(),
            });
        }
        epochs.push(EpochReport {
            epoch,
            lr_factor: config.decay(epoch),
            samples: reports,
        });
    }
    let metrics = samples.iter().map(|s| trainer.metrics(s)).collect::<Result<Vec<_>>>()?;
    let mean_depth = EvalReport::merge(&metrics.iter().map(|m| m.depth.clone()).collect::<Vec<_>>())?;
    let routing = match &config.mole_toy {
        Some(toy) => Some(mole_toy_task(None, toy)?),
        None => None,
    };
    Ok(TrainReport {
        schema: TRAIN_SCHEMA,
        seed: config.seed,
        config: config.clone(),
        epochs,
        metrics,
        mean_depth,
        routing,
    })
}

/// Intrinsics currently held by the parameters.
pub fn current_intrinsics(params: &DirectParams) -> Result<Intrinsics> {
    Intrinsics::from_tensor(params.get(INTRINSICS_NAME)?)
}
