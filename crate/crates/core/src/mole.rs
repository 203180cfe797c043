//! Mixture of low-rank experts on top of a frozen linear map.
//!
//! `Y' = X Wᵀ + b + Σ_{i ∈ top-k} α_i · diag(V_i) B_i diag(U_i) A_i x` per
//! token, with `α` a softmax over the selected router logits
//! `Γ = R(x) + δ·softplus(N(x))·ε`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_npy, write_npy, NpyDtype};
use crate::tape::{softplus, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_WARMUP_STEPS: u64 = 20_000;
/// Initial noise-scale bias; `softplus(-2) ≈ 0.13`.
const NOISE_BIAS_INIT: f64 = -2.0;

/// `diag(V) B diag(U) A`, with `A: [r, d_in]`, `B: [d_out, r]`, `U: [r]` and
/// `V: [d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankExpert {
    pub a: Tensor,
    pub b: Tensor,
    pub u: Tensor,
    pub v: Tensor,
}

impl LowRankExpert {
    /// `A ~ N(0, 1/d_in)`, `B = 0`, `U = V = 1`.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Config("expert dimensions must be positive".into()));
        }
        let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid std");
        Ok(Self {
            a: Tensor::from_fn(&[rank, d_in], |_| normal.sample(rng)),
            b: Tensor::zeros(&[d_out, rank]),
            u: Tensor::ones(&[rank]),
            v: Tensor::ones(&[d_out]),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    fn check(&self) -> Result<()> {
        if self.a.rank() != 2 || self.b.rank() != 2 {
            return Err(Error::Config("expert A and B must be matrices".into()));
        }
        let (r, d_out) = (self.rank(), self.d_out());
        if self.b.shape()[1] != r || self.u.shape() != [r] || self.v.shape() != [d_out] {
            return Err(Error::Config(format!(
                "inconsistent expert shapes A {:?} B {:?} U {:?} V {:?}",
                self.a.shape(),
                self.b.shape(),
                self.u.shape(),
                self.v.shape()
            )));
        }
        Ok(())
    }
}

/// Rank-first evaluation of one expert on a single input vector.
pub fn expert_delta(x: &[f64], e: &LowRankExpert) -> Result<Vec<f64>> {
    let (r, d_in, d_out) = (e.rank(), e.d_in(), e.d_out());
    if x.len() != d_in {
        return Err(Error::shape("expert_delta", &[x.len()], e.a.shape()));
    }
    let h: Vec<f64> = (0..r)
        .map(|i| e.u.data()[i] * e.a.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Ok((0..d_out)
        .map(|o| e.v.data()[o] * e.b.row(o).iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
        .collect())
}

/// Noisy top-k gate: logit map `R` and noise-scale map `N`, both affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub weight: Tensor,
    pub bias: Tensor,
    pub noise_weight: Tensor,
    pub noise_bias: Tensor,
    /// Noise gate δ; must be off at inference.
    pub noisy: bool,
    pub k: usize,
}

impl Router {
    /// Small random logits, zero noise weights. `k` is forced to 1 for a
    /// single expert.
    pub fn init<R: Rng + ?Sized>(d_in: usize, experts: usize, k: usize, rng: &mut R) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("router needs at least one expert".into()));
        }
        let k = if experts == 1 { 1 } else { k };
        if k == 0 || k > experts {
            return Err(Error::Config(format!("top-k {k} invalid for {experts} experts")));
        }
        let normal = Normal::new(0.0, 0.1 / (d_in as f64).sqrt()).expect("valid std");
        Ok(Self {
            weight: Tensor::from_fn(&[experts, d_in], |_| normal.sample(rng)),
            bias: Tensor::zeros(&[experts]),
            noise_weight: Tensor::zeros(&[experts, d_in]),
            noise_bias: Tensor::full(&[experts], NOISE_BIAS_INIT),
            noisy: false,
            k,
        })
    }

    pub fn experts(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-token selected experts and their weights, `k` per token in
/// descending logit order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub k: usize,
    pub experts: usize,
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl RoutingRecord {
    pub fn tokens(&self) -> usize {
        self.indices.len()
    }

    /// `[tokens, experts]` weights with zeros for unselected experts.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(idx, w)| {
                let mut row = vec![0.0; self.experts];
                for (&i, &a) in idx.iter().zip(w) {
                    row[i] = a;
                }
                row
            })
            .collect()
    }
}

/// Indices of the `k` largest values, ties to the lower index.
fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    order.truncate(k);
    order
}

/// Gate noise `ε ~ N(0, 1)` of shape `[tokens, experts]`, or `None` when the
/// router is noiseless.
pub fn draw_noise<R: Rng + ?Sized>(router: &Router, tokens: usize, rng: &mut R) -> Option<Tensor> {
    router
        .noisy
        .then(|| Tensor::from_fn(&[tokens, router.experts()], |_| StandardNormal.sample(rng)))
}

/// Tape-level routing: returns dense `α` (`[tokens, experts]`) and the record.
fn route_vars<'t>(
    x: Var<'t>,
    r: &RouterVars<'t>,
    k: usize,
    noise: Option<&Tensor>,
) -> Result<(Var<'t>, RoutingRecord)> {
    let e = r.weight.shape()[0];
    if k == 0 || k > e {
        return Err(Error::Config(format!("top-k {k} exceeds {e} experts")));
    }
    let mut logits = x.matmul(r.weight.transpose()?)?.add(r.bias)?;
    if let Some(eps) = noise {
        let scale = x.matmul(r.noise_weight.transpose()?)?.add(r.noise_bias)?.softplus();
        logits = logits.add(scale.mul(x.tape().constant(eps.clone()))?)?;
    }
    let lv = logits.value();
    let n = lv.shape()[0];
    let mut cols = Vec::with_capacity(n * k);
    for t in 0..n {
        cols.extend(top_k(lv.row(t), k));
    }
    let alpha = logits.gather_cols(&cols, k)?.softmax_last();
    let av = alpha.value();
    let record = RoutingRecord {
        k,
        experts: e,
        indices: cols.chunks(k).map(<[usize]>::to_vec).collect(),
        weights: av.data().chunks(k).map(<[f64]>::to_vec).collect(),
    };
    Ok((alpha.scatter_cols(&cols, e)?, record))
}

/// Routes every row of `x` (`[tokens, d_in]`).
pub fn route<R: Rng + ?Sized>(x: &Tensor, router: &Router, rng: &mut R) -> Result<RoutingRecord> {
    check_input(x, router.weight.shape()[1], "route")?;
    let noise = draw_noise(router, x.shape()[0], rng);
    route_with_noise(x, router, noise.as_ref())
}

fn route_with_noise(x: &Tensor, router: &Router, noise: Option<&Tensor>) -> Result<RoutingRecord> {
    check_input(x, router.weight.shape()[1], "route")?;
    let tape = Tape::new();
    let vars = RouterVars::constant(&tape, router);
    Ok(route_vars(tape.constant(x.clone()), &vars, router.k, noise)?.1)
}

fn check_input(x: &Tensor, d_in: usize, op: &'static str) -> Result<()> {
    match x.shape() {
        &[_, d] if d == d_in => Ok(()),
        s => Err(Error::shape(op, s, &[0, d_in])),
    }
}

/// Frozen base layer plus experts and router.
#[derive(Clone, Debug, PartialEq)]
pub struct MoLEAdapter {
    pub base_weight: Tensor,
    pub base_bias: Option<Tensor>,
    pub experts: Vec<LowRankExpert>,
    pub router: Router,
    pub warmup_steps: u64,
    pub step: u64,
}

/// Parameter groups that an optimiser may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ParamGroup {
    A,
    B,
    U,
    V,
    Router,
}

/// Groups trained at `step`: `A`, `B` and the router during warm-up, then
/// `U`, `V` and the router. The base layer is never trainable.
pub fn trainable_set(adapter: &MoLEAdapter, step: u64) -> Vec<ParamGroup> {
    if step < adapter.warmup_steps {
        vec![ParamGroup::A, ParamGroup::B, ParamGroup::Router]
    } else {
        vec![ParamGroup::U, ParamGroup::V, ParamGroup::Router]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub experts: usize,
    pub k: usize,
    pub warmup_steps: u64,
}

impl MoLEAdapter {
    /// Fresh adapter around a frozen `[d_out, d_in]` weight.
    pub fn new<R: Rng + ?Sized>(
        base_weight: Tensor,
        base_bias: Option<Tensor>,
        experts: usize,
        rank: usize,
        k: usize,
        warmup_steps: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let &[d_out, d_in] = base_weight.shape() else {
            return Err(Error::Config(format!("base weight must be a matrix, got {:?}", base_weight.shape())));
        };
        if let Some(b) = &base_bias {
            if b.shape() != [d_out] {
                return Err(Error::shape("MoLEAdapter", b.shape(), &[d_out]));
            }
        }
        let router = Router::init(d_in, experts, k, rng)?;
        let experts = (0..experts)
            .map(|_| LowRankExpert::init(d_in, d_out, rank, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            base_weight,
            base_bias,
            experts,
            router,
            warmup_steps,
            step: 0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.base_weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.base_weight.shape()[0]
    }

    pub fn manifest(&self) -> AdapterManifest {
        AdapterManifest {
            d_in: self.d_in(),
            d_out: self.d_out(),
            rank: self.experts.first().map_or(0, LowRankExpert::rank),
            experts: self.experts.len(),
            k: self.router.k,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if self.experts.is_empty() || self.experts.len() != self.router.experts() {
            return Err(Error::Config("expert count does not match router".into()));
        }
        if self.router.k == 0 || self.router.k > self.experts.len() {
            return Err(Error::Config(format!("top-k {} invalid", self.router.k)));
        }
        let rank = self.experts[0].rank();
        for e in &self.experts {
            e.check()?;
            if e.d_in() != d_in || e.d_out() != d_out || e.rank() != rank {
                return Err(Error::Config("expert shape does not match base layer".into()));
            }
        }
        let r = &self.router;
        if r.weight.shape() != [r.experts(), d_in]
            || r.noise_weight.shape() != r.weight.shape()
            || r.bias.shape() != [r.experts()]
            || r.noise_bias.shape() != [r.experts()]
        {
            return Err(Error::Config("router shapes inconsistent".into()));
        }
        Ok(())
    }

    /// Named parameters: `(name, group, tensor)`, base layer excluded.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("expert{i}.A"), ParamGroup::A, &e.a));
            out.push((format!("expert{i}.B"), ParamGroup::B, &e.b));
            out.push((format!("expert{i}.U"), ParamGroup::U, &e.u));
            out.push((format!("expert{i}.V"), ParamGroup::V, &e.v));
        }
        let r = &self.router;
        out.push(("router.weight".into(), ParamGroup::Router, &r.weight));
        out.push(("router.bias".into(), ParamGroup::Router, &r.bias));
        out.push(("router.noise_weight".into(), ParamGroup::Router, &r.noise_weight));
        out.push(("router.noise_bias".into(), ParamGroup::Router, &r.noise_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.experts.iter_mut().enumerate() {
            out.push((format!("expert{i}.A"), ParamGroup::A, &mut e.a));
            out.push((format!("expert{i}.B"), ParamGroup::B, &mut e.b));
            out.push((format!("expert{i}.U"), ParamGroup::U, &mut e.u));
            out.push((format!("expert{i}.V"), ParamGroup::V, &mut e.v));
        }
        let r = &mut self.router;
        out.push(("router.weight".into(), ParamGroup::Router, &mut r.weight));
        out.push(("router.bias".into(), ParamGroup::Router, &mut r.bias));
        out.push(("router.noise_weight".into(), ParamGroup::Router, &mut r.noise_weight));
        out.push(("router.noise_bias".into(), ParamGroup::Router, &mut r.noise_bias));
        out
    }

    /// Value-level forward pass. `rng` is only drawn from when the router
    /// is noisy.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<(Tensor, RoutingRecord)> {
        let tape = Tape::new();
        let vars = AdapterVars::bind(&tape, self, &[]);
        let noise = draw_noise(&self.router, x.shape().first().copied().unwrap_or(0), rng);
        let (y, rec) = mole_forward(tape.constant(x.clone()), &vars, noise.as_ref())?;
        Ok(((*y.value()).clone(), rec))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let m = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(dir.join("manifest.json"), m + "\n")?;
        write_npy(dir.join("base_weight.npy"), &self.base_weight, NpyDtype::F64)?;
        if let Some(b) = &self.base_bias {
            write_npy(dir.join("base_bias.npy"), b, NpyDtype::F64)?;
        }
        for (name, _, t) in self.params() {
            write_npy(dir.join(format!("{name}.npy")), t, NpyDtype::F64)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: AdapterManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let bias_path = dir.join("base_bias.npy");
        let base_bias = bias_path.exists().then(|| read_npy(&bias_path)).transpose()?;
        let load = |name: &str| read_npy(dir.join(format!("{name}.npy")));
        let experts = (0..m.experts)
            .map(|i| {
                Ok(LowRankExpert {
                    a: load(&format!("expert{i}.A"))?,
                    b: load(&format!("expert{i}.B"))?,
                    u: load(&format!("expert{i}.U"))?,
                    v: load(&format!("expert{i}.V"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let router = Router {
            weight: load("router.weight")?,
            bias: load("router.bias")?,
            noise_weight: load("router.noise_weight")?,
            noise_bias: load("router.noise_bias")?,
            noisy: false,
            k: m.k,
        };
        let adapter = Self {
            base_weight: read_npy(dir.join("base_weight.npy"))?,
            base_bias,
            experts,
            router,
            warmup_steps: m.warmup_steps,
            step: 0,
        };
        adapter.validate()?;
        if adapter.manifest() != m {
            return Err(Error::Format("adapter arrays disagree with manifest".into()));
        }
        Ok(adapter)
    }
}

pub struct RouterVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
    pub noise_weight: Var<'t>,
    pub noise_bias: Var<'t>,
}

impl<'t> RouterVars<'t> {
    fn constant(tape: &'t Tape, r: &Router) -> Self {
        Self {
            weight: tape.constant(r.weight.clone()),
            bias: tape.constant(r.bias.clone()),
            noise_weight: tape.constant(r.noise_weight.clone()),
            noise_bias: tape.constant(r.noise_bias.clone()),
        }
    }
}

pub struct ExpertVars<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub u: Var<'t>,
    pub v: Var<'t>,
}

/// An adapter's parameters placed on a tape. Groups listed in `trainable`
/// become gradient leaves; everything else, including the base layer, is
/// constant.
pub struct AdapterVars<'t> {
    pub base_weight: Var<'t>,
    pub base_bias: Option<Var<'t>>,
    pub experts: Vec<ExpertVars<'t>>,
    pub router: RouterVars<'t>,
    pub k: usize,
    names: BTreeMap<String, Var<'t>>,
}

impl<'t> AdapterVars<'t> {
    pub fn bind(tape: &'t Tape, adapter: &MoLEAdapter, trainable: &[ParamGroup]) -> Self {
        let mut names = BTreeMap::new();
        let mut put = |name: String, group: ParamGroup, t: &Tensor| {
            let v = tape.var(t.clone(), trainable.contains(&group));
            names.insert(name, v);
            v
        };
        let experts = adapter
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| ExpertVars {
                a: put(format!("expert{i}.A"), ParamGroup::A, &e.a),
                b: put(format!("expert{i}.B"), ParamGroup::B, &e.b),
                u: put(format!("expert{i}.U"), ParamGroup::U, &e.u),
                v: put(format!("expert{i}.V"), ParamGroup::V, &e.v),
            })
            .collect();
        let r = &adapter.router;
        let router = RouterVars {
            weight: put("router.weight".into(), ParamGroup::Router, &r.weight),
            bias: put("router.bias".into(), ParamGroup::Router, &r.bias),
            noise_weight: put("router.noise_weight".into(), ParamGroup::Router, &r.noise_weight),
            noise_bias: put("router.noise_bias".into(), ParamGroup::Router, &r.noise_bias),
        };
        Self {
            base_weight: tape.constant(adapter.base_weight.clone()),
            base_bias: adapter.base_bias.as_ref().map(|b| tape.constant(b.clone())),
            experts,
            router,
            k: adapter.router.k,
            names,
        }
    }

    /// Parameter vars by name, in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.names.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Differentiable forward pass on `x` (`[tokens, d_in]`). `noise` is the gate
/// noise `ε` and must be `None` for a noiseless router.
pub fn mole_forward<'t>(
    x: Var<'t>,
    p: &AdapterVars<'t>,
    noise: Option<&Tensor>,
) -> Result<(Var<'t>, RoutingRecord)> {
    check_input(&x.value(), p.base_weight.shape()[1], "mole_forward")?;
    let mut y = x.matmul(p.base_weight.transpose()?)?;
    if let Some(b) = p.base_bias {
        y = y.add(b)?;
    }
    let (alpha, record) = route_vars(x, &p.router, p.k, noise)?;
    let mut delta: Option<Var<'t>> = None;
    for (i, e) in p.experts.iter().enumerate() {
        let h = x.matmul(e.a.transpose()?)?.mul(e.u)?;
        let out = h.matmul(e.b.transpose()?)?.mul(e.v)?;
        let term = out.mul(alpha.slice_last(i, 1)?)?;
        delta = Some(match delta {
            Some(d) => d.add(term)?,
            None => term,
        });
    }
    let y = match delta {
        Some(d) => y.add(d)?,
        None => y,
    };
    Ok((y, record))
}

/// Per-expert selection frequency and mean dense weight for one adapter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpertUsage {
    pub frequency: Vec<f64>,
    pub mean_weight: Vec<f64>,
    /// Mean dense weight vector of every sample, in dataset order.
    pub sample_weights: Vec<Vec<f64>>,
}

/// Noiseless routing statistics of each adapter over `dataset`.
pub fn routing_stats(adapters: &[MoLEAdapter], dataset: &[Tensor]) -> Result<Vec<ExpertUsage>> {
    let mut out = Vec::with_capacity(adapters.len());
    for adapter in adapters {
        if adapter.router.noisy {
            return Err(Error::Config("routing statistics require a noiseless router".into()));
        }
        let e = adapter.experts.len();
        let mut count = vec![0.0; e];
        let mut weight = vec![0.0; e];
        let mut tokens = 0usize;
        let mut samples = Vec::with_capacity(dataset.len());
        for x in dataset {
            check_input(x, adapter.d_in(), "routing_stats")?;
            let rec = route_with_noise(x, &adapter.router, None)?;
            let mut mean = vec![0.0; e];
            for row in rec.dense() {
                for (j, &a) in row.iter().enumerate() {
                    weight[j] += a;
                    mean[j] += a;
                }
            }
            for idx in &rec.indices {
                for &j in idx {
                    count[j] += 1.0;
                }
            }
            let n = rec.tokens().max(1) as f64;
            tokens += rec.tokens();
            samples.push(mean.iter().map(|m| m / n).collect());
        }
        let n = tokens.max(1) as f64;
        out.push(ExpertUsage {
            frequency: count.iter().map(|c| c / n).collect(),
            mean_weight: weight.iter().map(|w| w / n).collect(),
            sample_weights: samples,
        });
    }
    Ok(out)
}

/// Total-variation distance between two distributions given as weights.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a / sp - b / sq).abs())
        .sum::<f64>()
}

/// Largest softplus noise scale over `x`, used to bound gate perturbations.
pub fn max_noise_scale(x: &Tensor, router: &Router) -> Result<f64> {
    let s = x.matmul(&router.noise_weight.transpose()?)?;
    let e = router.experts();
    Ok(s
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| softplus(v + router.noise_bias.data()[i % e]))
        .fold(0.0, f64::max))
}
