//! Routing toy task: a frozen stack of random tanh blocks with a linear
//! depth head fitted on one scene family, adapted with MoLE adapters to
//! regress depth patches from image patches of two families.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mole::{
    draw_noise, mole_forward, routing_stats, total_variation, trainable_set, AdapterVars, MoLEAdapter,
    DEFAULT_RANK,
};
use crate::optim::{Adam, AdamConfig};
use crate::spectral::{allocate_experts, AllocationPlan};
use crate::synth::{gen_scene, LightMode, SceneConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    /// Block count when no plan is given (2 to 4).
    pub blocks: usize,
    /// Expert budget when no plan is given.
    pub total_experts: usize,
    pub hidden: usize,
    pub patch: usize,
    pub rank: usize,
    /// Training scenes per family; each contributes every frame's patches.
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene_height: usize,
    pub scene_width: usize,
    pub frames_per_scene: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub ridge: f64,
    pub noisy_router: bool,
    /// When false the adapters stay at their initialisation.
    pub train_adapters: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            blocks: 3,
            total_experts: 12,
            hidden: 32,
            patch: 4,
            rank: DEFAULT_RANK,
            train_scenes: 10,
            test_scenes: 4,
            scene_height: 32,
            scene_width: 40,
            frames_per_scene: 2,
            steps: 2000,
            warmup_steps: 1000,
            batch: 128,
            lr: 1e-2,
            ridge: 1e-3,
            noisy_router: true,
            train_adapters: true,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.blocks) {
            return Err(Error::Config("toy network needs 2 to 4 blocks".into()));
        }
        if self.hidden == 0 || self.patch == 0 || self.rank == 0 || self.batch == 0 {
            return Err(Error::Config("toy sizes must be positive".into()));
        }
        if self.train_scenes == 0 || self.test_scenes == 0 || self.frames_per_scene == 0 {
            return Err(Error::Config("toy task needs training and test scenes".into()));
        }
        if self.scene_height < self.patch || self.scene_width < self.patch {
            return Err(Error::Config("patch larger than the scene".into()));
        }
        if !(self.lr > 0.0 && self.ridge >= 0.0) {
            return Err(Error::Config("lr must be positive and ridge nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockRouting {
    pub block: usize,
    pub experts: usize,
    pub k: usize,
    /// Expert selection frequency on each family's held-out patches.
    pub family_frequency: [Vec<f64>; 2],
    pub total_variation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    pub seed: u64,
    pub per_block: Vec<usize>,
    pub top_k: Vec<usize>,
    pub train_tokens: usize,
    pub test_tokens: usize,
    pub baseline_rmse: f64,
    pub adapted_rmse: f64,
    /// `1 − adapted / baseline`.
    pub relative_reduction: f64,
    pub baseline_rmse_by_family: [f64; 2],
    pub adapted_rmse_by_family: [f64; 2],
    pub final_train_loss: f64,
    pub routing: Vec<BlockRouting>,
    pub mean_total_variation: f64,
}

/// Patches `[tokens, p·p·3 + 2]` (pixel values, then the patch
/// centre in normalised image coordinates) and depth targets `[tokens, p·p]`
/// of one family.
struct PatchSet {
    x: Tensor,
    y: Tensor,
}

fn family_scene(cfg: &ToyConfig, family: u8) -> SceneConfig {
    SceneConfig {
        height: cfg.scene_height,
        width: cfg.scene_width,
        frames: cfg.frames_per_scene,
        light: LightMode::Headlight,
        falloff: true,
        family,
        relief: 0.4,
        texture_contrast: 0.1,
        shading_range: (0.15, 0.65),
        max_step_translation: 0.1,
        max_step_rotation_deg: 2.0,
        ..Default::default()
    }
}

fn patches(cfg: &ToyConfig, family: u8, seeds: impl Iterator<Item = u64>) -> Result<PatchSet> {
    let p = cfg.patch;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut n = 0;
    for seed in seeds {
        let scene = gen_scene(seed, &family_scene(cfg, family))?;
        for f in 0..scene.len() {
            let (img, depth) = (&scene.frames[f], &scene.depth[f]);
            for by in 0..cfg.scene_height / p {
                for bx in 0..cfg.scene_width / p {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (by * p + dy, bx * p + dx);
                            for c in 0..3 {
                                xs.push(img.at3(y, x, c));
                            }
                            ys.push(depth.at3(y, x, 0));
                        }
                    }
                    let cy = (by * p) as f64 + 0.5 * (p - 1) as f64;
                    let cx = (bx * p) as f64 + 0.5 * (p - 1) as f64;
                    xs.push(2.0 * cx / (cfg.scene_width - 1) as f64 - 1.0);
                    xs.push(2.0 * cy / (cfg.scene_height - 1) as f64 - 1.0);
                    n += 1;
                }
            }
        }
    }
    Ok(PatchSet {
        x: Tensor::new(&[n, 3 * p * p + 2], xs)?,
        y: Tensor::new(&[n, p * p], ys)?,
    })
}

fn feature_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
            sq[j] += row[j] * row[j] / n as f64;
        }
    }
    let std = mean.iter().zip(&sq).map(|(m, s)| (s - m * m).max(0.0).sqrt().max(1e-6)).collect();
    (mean, std)
}

fn standardise(x: &mut Tensor, mean: &[f64], std: &[f64]) {
    let d = mean.len();
    for row in x.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(&[idx.len(), w], out).expect("row gather")
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut d = a.data().to_vec();
    d.extend_from_slice(b.data());
    Tensor::new(&[a.shape()[0] + b.shape()[0], a.shape()[1]], d).expect("row stack")
}

struct ToyNet {
    adapters: Vec<MoLEAdapter>,
    head_weight: Tensor,
    head_bias: Tensor,
}

impl ToyNet {
    /// Forward pass on the tape. Returns the prediction and each block's
    /// input. `noise` supplies gate noise per block when routing is noisy.
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        vars: &[AdapterVars<'t>],
        noise: &[Option<Tensor>],
    ) -> Result<(Var<'t>, Vec<Tensor>)> {
        let mut h = tape.constant(x.clone());
        let mut inputs = Vec::new();
        for (b, v) in vars.iter().enumerate() {
            inputs.push((*h.value()).clone());
            let (y, _) = mole_forward(h, v, noise.get(b).and_then(|n| n.as_ref()))?;
            h = y.tanh();
        }
        let out = h
            .matmul(tape.constant(self.head_weight.clone()))?
            .add(tape.constant(self.head_bias.clone()))?;
        Ok((out, inputs))
    }

    fn predict(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars: Vec<AdapterVars<'_>> = self.adapters.iter().map(|a| AdapterVars::bind(&tape, a, &[])).collect();
        let (out, inputs) = self.forward(&tape, x, &vars, &[])?;
        Ok(((*out.value()).clone(), inputs))
    }
}

fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let d = pred.zip_map(target, |a, b| (a - b) * (a - b))?;
    Ok(d.mean().sqrt())
}

/// Ridge regression `[features | 1] → targets`; returns `(W [d, o], b [o])`.
fn ridge_fit(features: &Tensor, targets: &Tensor, lambda: f64) -> Result<(Tensor, Tensor)> {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let o = targets.shape()[1];
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { features.data()[i * d + j] } else { 1.0 });
    let mut gram = x.transpose() * &x;
    for j in 0..d {
        gram[(j, j)] += lambda * n as f64;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NonFinite("ridge normal equations are not positive definite".into()))?;
    let mut w = vec![0.0; d * o];
    let mut b = vec![0.0; o];
    for k in 0..o {
        let y = DVector::from_fn(n, |i, _| targets.data()[i * o + k]);
        let sol = chol.solve(&(x.transpose() * y));
        for j in 0..d {
            w[j * o + k] = sol[j];
        }
        b[k] = sol[d];
    }
    Ok((Tensor::new(&[d, o], w)?, Tensor::new(&[o], b)?))
}

/// Trains MoLE adapters on a frozen toy network and reports held-out error
/// and per-family routing. `plan` fixes experts and `k` per block; without
/// one, `config.total_experts` is split evenly over `config.blocks`.
pub fn mole_toy_task(plan: Option<&AllocationPlan>, config: &ToyConfig) -> Result<ToyReport> {
    config.validate()?;
    let owned;
    let plan = match plan {
        Some(p) => p,
        None => {
            owned = allocate_experts(&vec![2.0; config.blocks], config.total_experts)?;
            &owned
        }
    };
    let blocks = plan.per_block.len();
    if !(2..=4).contains(&blocks) || plan.top_k.len() != blocks {
        return Err(Error::Config(format!("toy network needs 2 to 4 planned blocks, got {blocks}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // disjoint scene seeds per family and split
    let base = config.seed.wrapping_mul(1000);
    let tr = config.train_scenes as u64;
    let te = config.test_scenes as u64;
    let train = [
        patches(config, 0, base..base + tr)?,
        patches(config, 1, base + 100..base + 100 + tr)?,
    ];
    let mut test = [
        patches(config, 0, base + 200..base + 200 + te)?,
        patches(config, 1, base + 300..base + 300 + te)?,
    ];
    // z-score every input feature with pooled training statistics
    let mut train = train;
    let (mean, std) = feature_stats(&stack(&train[0].x, &train[1].x));
    for set in train.iter_mut().chain(test.iter_mut()) {
        standardise(&mut set.x, &mean, &std);
    }

    let d_in = train[0].x.shape()[1];
    let mut adapters = Vec::with_capacity(blocks);
    let mut d_prev = d_in;
    for b in 0..blocks {
        let normal = Normal::new(0.0, (1.0 / d_prev as f64).sqrt()).expect("valid normal");
        let w = Tensor::from_fn(&[config.hidden, d_prev], |_| normal.sample(&mut rng));
        let mut ad = MoLEAdapter::new(
            w,
            None,
            plan.per_block[b],
            config.rank,
            plan.top_k[b],
            config.warmup_steps,
            &mut rng,
        )?;
        ad.router.noisy = config.noisy_router;
        adapters.push(ad);
        d_prev = config.hidden;
    }
    let mut net = ToyNet {
        adapters,
        head_weight: Tensor::zeros(&[config.hidden, 1]),
        head_bias: Tensor::zeros(&[1]),
    };
    // The head sees only family 0: the frozen model is fitted on one domain.
    let features = {
        let tape = Tape::new();
        let vars: Vec<AdapterVars<'_>> = net.adapters.iter().map(|a| AdapterVars::bind(&tape, a, &[])).collect();
        let mut h = tape.constant(train[0].x.clone());
        for v in &vars {
            h = mole_forward(h, v, None)?.0.tanh();
        }
        (*h.value()).clone()
    };
    let (hw, hb) = ridge_fit(&features, &train[0].y, config.ridge)?;
    net.head_weight = hw;
    net.head_bias = hb;

    let eval = |net: &ToyNet| -> Result<(f64, [f64; 2])> {
        let p0 = net.predict(&test[0].x)?.0;
        let p1 = net.predict(&test[1].x)?.0;
        let all = rmse(&stack(&p0, &p1), &stack(&test[0].y, &test[1].y))?;
        Ok((all, [rmse(&p0, &test[0].y)?, rmse(&p1, &test[1].y)?]))
    };
    let (baseline, baseline_fam) = eval(&net)?;

    let train_x = stack(&train[0].x, &train[1].x);
    let train_y = stack(&train[0].y, &train[1].y);
    let n_train = train_x.shape()[0];
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut final_loss = f64::NAN;
    if config.train_adapters {
        for step in 0..config.steps {
            let idx: Vec<usize> = (0..config.batch).map(|_| rng.random_range(0..n_train)).collect();
            let (xb, yb) = (rows(&train_x, &idx), rows(&train_y, &idx));
            let noise: Vec<Option<Tensor>> = net
                .adapters
                .iter()
                .map(|a| draw_noise(&a.router, config.batch, &mut rng))
                .collect();
            let tape = Tape::new();
            let vars: Vec<AdapterVars<'_>> = net
                .adapters
                .iter()
                .map(|a| AdapterVars::bind(&tape, a, &trainable_set(a, step)))
                .collect();
            let (pred, _) = net.forward(&tape, &xb, &vars, &noise)?;
            let loss = pred.sub(tape.constant(yb))?.square().mean();
            final_loss = loss.item();
            if !final_loss.is_finite() {
                return Err(Error::Diverged {
                    step: step as usize,
                    detail: "toy loss became non-finite".into(),
                });
            }
            let grads = tape.backward(loss)?;
            let updates: Vec<Vec<(String, Tensor)>> = vars
                .iter()
                .map(|v| {
                    v.named()
                        .filter(|(_, var)| var.requires_grad())
                        .map(|(n, var)| (n.to_string(), grads.wrt(var)))
                        .collect()
                })
                .collect();
            for (b, (ad, ups)) in net.adapters.iter_mut().zip(updates).enumerate() {
                for (name, _, param) in ad.params_mut() {
                    if let Some((_, g)) = ups.iter().find(|(n, _)| *n == name) {
                        adam.step(&format!("block{b}.{name}"), param, g)?;
                    }
                }
                ad.step = step + 1;
            }
        }
    }
    for ad in &mut net.adapters {
        ad.router.noisy = false;
    }
    let (adapted, adapted_fam) = eval(&net)?;

    let inputs = [net.predict(&test[0].x)?.1, net.predict(&test[1].x)?.1];
    let mut routing = Vec::with_capacity(blocks);
    for (b, ad) in net.adapters.iter().enumerate() {
        let u0 = routing_stats(std::slice::from_ref(ad), std::slice::from_ref(&inputs[0][b]))?;
        let u1 = routing_stats(std::slice::from_ref(ad), std::slice::from_ref(&inputs[1][b]))?;
        let (f0, f1) = (u0[0].frequency.clone(), u1[0].frequency.clone());
        routing.push(BlockRouting {
            block: b,
            experts: ad.experts.len(),
            k: ad.router.k,
            total_variation: total_variation(&f0, &f1),
            family_frequency: [f0, f1],
        });
    }
    let mean_tv = routing.iter().map(|r| r.total_variation).sum::<f64>() / blocks as f64;
    Ok(ToyReport {
        seed: config.seed,
        per_block: plan.per_block.clone(),
        top_k: plan.top_k.clone(),
        train_tokens: n_train,
        test_tokens: test[0].x.shape()[0] + test[1].x.shape()[0],
        baseline_rmse: baseline,
        adapted_rmse: adapted,
        relative_reduction: 1.0 - adapted / baseline,
        baseline_rmse_by_family: baseline_fam,
        adapted_rmse_by_family: adapted_fam,
        final_train_loss: final_loss,
        routing,
        mean_total_variation: mean_tv,
    })
}
