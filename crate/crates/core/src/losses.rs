//! Photometric, intrinsic-decomposition and smoothness losses for the three
//! optimisation stages.
//!
//! Images are `[H, W, C]` vars, masks are `[H, W]` constant tensors. Every
//! masked mean is normalised by the mask sum rather than by `H·W`.

use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::error::{Error, Result};
use crate::image_ops::sample_value;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Forward-backward consistency threshold: absolute floor in pixels and
/// fraction of the flow magnitude.
pub const VISIBILITY_MIN_PX: f64 = 3.0;
pub const VISIBILITY_REL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub w_flow_smooth: f64,
    pub w_ret: f64,
    pub w_rec_intrinsic: f64,
    pub w_rec_raw: f64,
    pub w_if: f64,
    pub w_ap_smooth: f64,
    pub w_depth_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.85,
            w_flow_smooth: 0.001,
            w_ret: 0.1,
            w_rec_intrinsic: 0.02,
            w_rec_raw: 0.01,
            w_if: 0.02,
            w_ap_smooth: 0.01,
            w_depth_smooth: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta,
            self.w_flow_smooth,
            self.w_ret,
            self.w_rec_intrinsic,
            self.w_rec_raw,
            self.w_if,
            self.w_ap_smooth,
            self.w_depth_smooth,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.beta > 1.0 {
            return Err(Error::Config("beta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Named loss terms in evaluation order, plus warnings raised while
/// computing them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terms: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl LossBreakdown {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.terms.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn absorb(&mut self, other: LossBreakdown, prefix: &str) {
        for (n, v) in other.terms {
            self.terms.push((format!("{prefix}{n}"), v));
        }
        self.warnings.extend(other.warnings);
    }
}

impl Serialize for LossBreakdown {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.terms.len() + 1))?;
        for (n, v) in &self.terms {
            map.serialize_entry(n, v)?;
        }
        map.serialize_entry("warnings", &self.warnings)?;
        map.end()
    }
}

/// A scalar loss var with its breakdown.
pub struct Loss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

fn same_shape(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

/// Per-pixel SSIM over 3×3 box windows with replicate padding.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape("ssim", a, b)?;
    let mu_a = a.avg_pool3x3()?;
    let mu_b = b.avg_pool3x3()?;
    let mu_ab = mu_a.mul(mu_b)?;
    let mu_a2 = mu_a.square();
    let mu_b2 = mu_b.square();
    let var_a = a.square().avg_pool3x3()?.sub(mu_a2)?;
    let var_b = b.square().avg_pool3x3()?.sub(mu_b2)?;
    let cov = a.mul(b)?.avg_pool3x3()?.sub(mu_ab)?;
    let num = mu_ab
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(cov.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_a2
        .add(mu_b2)?
        .add_scalar(SSIM_C1)
        .mul(var_a.add(var_b)?.add_scalar(SSIM_C2))?;
    num.div(den)
}

fn hw_of(v: Var<'_>) -> Result<(usize, usize)> {
    match v.shape().as_slice() {
        &[h, w, _] => Ok((h, w)),
        s => Err(Error::invalid("loss", format!("expected [H, W, C] image, got {s:?}"))),
    }
}

fn check_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw, mc) = mask.hwc()?;
    if (mh, mw, mc) != (h, w, 1) {
        return Err(Error::shape("mask", &[h, w], mask.shape()));
    }
    mask.clone().reshape(&[h, w, 1])
}

/// Mean of a `[H, W, 1]` per-pixel map over the mask. An empty mask yields a
/// zero loss (still connected to the graph) and `true`.
fn masked_mean<'t>(map: Var<'t>, mask: &Tensor) -> Result<(Var<'t>, bool)> {
    let (h, w) = hw_of(map)?;
    let m = check_mask(mask, h, w)?;
    let count = m.sum();
    let weighted = map.mul(map.tape().constant(m))?.sum();
    if count <= 0.0 {
        return Ok((weighted.scale(0.0), true));
    }
    Ok((weighted.scale(1.0 / count), false))
}

/// Per-pixel photometric error `β(1 − SSIM)/2 + (1 − β)|a − b|`, averaged over
/// channels to `[H, W, 1]`.
pub fn photometric_map<'t>(i_hat: Var<'t>, i: Var<'t>, beta: f64) -> Result<Var<'t>> {
    let s = ssim(i_hat, i)?;
    let structural = s.neg().add_scalar(1.0).scale(beta / 2.0);
    let l1 = i_hat.sub(i)?.abs().scale(1.0 - beta);
    Ok(structural.add(l1)?.mean_last())
}

/// Masked photometric loss. The breakdown holds a single `photometric` term
/// and an `empty mask` warning when the mask sums to zero.
pub fn photometric_loss<'t>(i_hat: Var<'t>, i: Var<'t>, mask: &Tensor, beta: f64) -> Result<Loss<'t>> {
    let map = photometric_map(i_hat, i, beta)?;
    let (total, empty) = masked_mean(map, mask)?;
    let mut breakdown = LossBreakdown::default();
    breakdown.push("photometric", total.item());
    if empty {
        breakdown.warnings.push("photometric loss evaluated on an empty mask".into());
    }
    Ok(Loss { total, breakdown })
}

fn full_mask(v: Var<'_>) -> Result<Tensor> {
    let (h, w) = hw_of(v)?;
    Ok(Tensor::ones(&[h, w]))
}

/// Photometric loss with every pixel counted.
pub fn photometric_full<'t>(i_hat: Var<'t>, i: Var<'t>, beta: f64) -> Result<Var<'t>> {
    Ok(photometric_loss(i_hat, i, &full_mask(i)?, beta)?.total)
}

/// Binary visibility from forward-backward flow consistency.
pub fn visibility_mask(flow_fwd: &Tensor, flow_bwd: &Tensor) -> Result<Tensor> {
    let (h, w, c) = flow_fwd.hwc()?;
    if c != 2 || flow_bwd.shape() != flow_fwd.shape() {
        return Err(Error::shape("visibility_mask", flow_fwd.shape(), flow_bwd.shape()));
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (fx, fy) = (flow_fwd.data()[2 * i], flow_fwd.data()[2 * i + 1]);
            let Some(b) = sample_value(flow_bwd, x as f64 + fx, y as f64 + fy) else {
                continue;
            };
            let residual = (fx + b[0]).hypot(fy + b[1]);
            if residual < VISIBILITY_MIN_PX.max(VISIBILITY_REL * fx.hypot(fy)) {
                out[i] = 1.0;
            }
        }
    }
    Tensor::new(&[h, w], out)
}

/// `clamp(n·I, 0, 1)` for a brightness factor `n ∈ (0, 2)`.
pub fn augment_brightness(img: &Tensor, n: f64) -> Result<Tensor> {
    if !(n > 0.0 && n < 2.0) {
        return Err(Error::invalid("augment_brightness", format!("factor {n} outside (0, 2)")));
    }
    Ok(img.map(|v| (n * v).clamp(0.0, 1.0)))
}

/// `L_p(A₁ₓ⊙S₁ₓ, I₁ₓ) + L_p(Aₙₓ⊙S₁ₓ, I₁ₓ)` with full masks.
pub fn recomposition_loss<'t>(
    a_1x: Var<'t>,
    a_nx: Var<'t>,
    s_1x: Var<'t>,
    i_1x: Var<'t>,
    beta: f64,
) -> Result<Var<'t>> {
    let first = photometric_full(a_1x.mul(s_1x)?, i_1x, beta)?;
    let second = photometric_full(a_nx.mul(s_1x)?, i_1x, beta)?;
    first.add(second)
}

/// `(dx, dy)` stacked along channels.
fn grad_stack(v: Var<'_>) -> Result<Var<'_>> {
    let (dx, dy) = v.spatial_gradient()?;
    Var::concat_last(&[dx, dy])
}

/// `L_p(∇A, ∇I⊙M) + L_p(∇S, ∇Ī⊙(1 − M))`, where `Ī` is the channel mean of
/// the image and `∇` stacks x and y differences as channels.
pub fn retinex_loss<'t>(a: Var<'t>, s: Var<'t>, m: Var<'t>, i: Var<'t>, beta: f64) -> Result<Var<'t>> {
    let tape = a.tape();
    let grad_a = grad_stack(a)?;
    let grad_i = grad_stack(i)?;
    let albedo_target = grad_i.mul(m)?;
    let grad_s = grad_stack(s)?;
    let grad_ibar = grad_stack(i.mean_last())?;
    let not_m = tape.scalar(1.0).sub(m)?;
    let shading_target = grad_ibar.mul(not_m)?;
    let first = photometric_full(grad_a, albedo_target, beta)?;
    let second = photometric_full(grad_s, shading_target, beta)?;
    first.add(second)
}

/// Edge-aware first-order smoothness:
/// `mean(|∂ₓF| · exp(sign·mean_c|∂ₓG|)) + mean(|∂ᵧF| · exp(sign·mean_c|∂ᵧG|))`.
fn edge_aware<'t>(field: Var<'t>, guide: Var<'t>, sign: f64) -> Result<Var<'t>> {
    let (fx, fy) = field.spatial_gradient()?;
    let (gx, gy) = guide.spatial_gradient()?;
    let wx = gx.abs().mean_last().scale(sign).exp();
    let wy = gy.abs().mean_last().scale(sign).exp();
    fx.abs().mul(wx)?.mean().add(fy.abs().mul(wy)?.mean())
}

/// Stage-1 flow objective: `L_p(I_t, I_warp) + w·mean(|∇O|·exp(−|∇I_ref|))`.
pub fn flow_loss_l1<'t>(
    i_t: Var<'t>,
    i_warp: Var<'t>,
    flow: Var<'t>,
    i_ref: Var<'t>,
    weights: &LossWeights,
) -> Result<Loss<'t>> {
    let photo = photometric_full(i_t, i_warp, weights.beta)?;
    let smooth = edge_aware(flow, i_ref, -1.0)?;
    let total = photo.add(smooth.scale(weights.w_flow_smooth))?;
    let mut breakdown = LossBreakdown::default();
    breakdown.push("photometric", photo.item());
    breakdown.push("flow_smoothness", smooth.item());
    breakdown.push("total", total.item());
    Ok(Loss { total, breakdown })
}

/// One frame's stage-2 inputs: predictions for the original and
/// brightness-augmented image plus the original image.
#[derive(Clone, Copy)]
pub struct DecompositionFrame<'t> {
    pub albedo: Var<'t>,
    pub albedo_aug: Var<'t>,
    pub shading: Var<'t>,
    pub mask: Var<'t>,
    pub image: Var<'t>,
}

/// `rec + w_ret·ret`.
pub fn stage2_combine(rec: f64, ret: f64, weights: &LossWeights) -> f64 {
    rec + weights.w_ret * ret
}

/// Stage-2 loss averaged over frames.
pub fn stage2_loss<'t>(frames: &[DecompositionFrame<'t>], weights: &LossWeights) -> Result<Loss<'t>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("stage2_loss", "no frames"))?;
    let mut total = first.image.tape().scalar(0.0);
    let (mut rec_sum, mut ret_sum) = (0.0, 0.0);
    for f in frames {
        let rec = recomposition_loss(f.albedo, f.albedo_aug, f.shading, f.image, weights.beta)?;
        let ret = retinex_loss(f.albedo, f.shading, f.mask, f.image, weights.beta)?;
        rec_sum += rec.item();
        ret_sum += ret.item();
        total = total.add(rec.add(ret.scale(weights.w_ret))?)?;
    }
    let n = frames.len() as f64;
    let total = total.scale(1.0 / n);
    let mut breakdown = LossBreakdown::default();
    breakdown.push("recomposition", rec_sum / n);
    breakdown.push("retinex", ret_sum / n);
    breakdown.push("total", total.item());
    Ok(Loss { total, breakdown })
}

/// `D / mean(D)`.
pub fn mean_normalised<'t>(depth: Var<'t>) -> Result<Var<'t>> {
    let mean = depth.mean();
    depth.div(mean)
}

/// `w_ap·mean(|∇A_p|·exp(|∇(I_t − I_opt)|)) + w_d·mean(|∇D̃|·exp(|∇I_t|))`
/// with `D̃` the mean-normalised depth. Both exponents are positive.
pub fn smoothness_loss<'t>(
    appearance: Var<'t>,
    depth: Var<'t>,
    i_t: Var<'t>,
    i_opt: Var<'t>,
    weights: &LossWeights,
) -> Result<Loss<'t>> {
    let ap = edge_aware(appearance, i_t.sub(i_opt)?, 1.0)?;
    let d = edge_aware(mean_normalised(depth)?, i_t, 1.0)?;
    let total = ap.scale(weights.w_ap_smooth).add(d.scale(weights.w_depth_smooth))?;
    let mut breakdown = LossBreakdown::default();
    breakdown.push("appearance_smoothness", ap.item());
    breakdown.push("depth_smoothness", d.item());
    Ok(Loss { total, breakdown })
}

/// One source frame warped into the target view.
#[derive(Clone)]
pub struct WarpedSource<'t> {
    /// `I_{s→t}` from the rigid warp.
    pub image: Var<'t>,
    pub albedo: Var<'t>,
    pub shading: Var<'t>,
    /// Geometric validity from the warp.
    pub valid: Tensor,
    /// Flow-consistency visibility `V`.
    pub visibility: Tensor,
    /// Appearance flow `A_p`, an additive correction to `I_{s→t}`.
    pub appearance: Option<Var<'t>>,
    /// Source image warped by the stage-1 optical flow.
    pub flow_warped: Var<'t>,
}

/// Stage-3 objective summed over source frames:
/// `L_sm + w_ri·L_p(A_{s→t}⊙S_{s→t}, I_t) + w_rr·L_p(I_{s→t} + A_p, I_t) + w_if·L_p(A_{s→t}, A_t)`,
/// every photometric term masked by `V ∧ valid`.
pub fn stage3_loss<'t>(
    target: Var<'t>,
    target_albedo: Var<'t>,
    depth: Var<'t>,
    sources: &[WarpedSource<'t>],
    weights: &LossWeights,
) -> Result<Loss<'t>> {
    if sources.is_empty() {
        return Err(Error::invalid("stage3_loss", "no source frames"));
    }
    let tape = target.tape();
    let mut total = tape.scalar(0.0);
    let mut breakdown = LossBreakdown::default();
    let (mut sm, mut rec, mut inf) = (0.0, 0.0, 0.0);
    for (k, s) in sources.iter().enumerate() {
        let mask = s.valid.zip_map(&s.visibility, |a, b| a * b)?;
        let appearance = match s.appearance {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(&target.shape())),
        };
        let smooth = smoothness_loss(appearance, depth, target, s.flow_warped, weights)?;
        let recomposed = s.albedo.mul(s.shading)?;
        let p_int = photometric_loss(recomposed, target, &mask, weights.beta)?;
        let p_raw = photometric_loss(s.image.add(appearance)?, target, &mask, weights.beta)?;
        let p_if = photometric_loss(s.albedo, target_albedo, &mask, weights.beta)?;
        let l_rec = p_int
            .total
            .scale(weights.w_rec_intrinsic)
            .add(p_raw.total.scale(weights.w_rec_raw))?;
        let frame = smooth
            .total
            .add(l_rec)?
            .add(p_if.total.scale(weights.w_if))?;
        sm += smooth.total.item();
        rec += l_rec.item();
        inf += p_if.total.item();
        let prefix = format!("source{k}.");
        breakdown.absorb(smooth.breakdown, &prefix);
        breakdown.push(format!("{prefix}photometric_intrinsic"), p_int.total.item());
        breakdown.push(format!("{prefix}photometric_raw"), p_raw.total.item());
        breakdown.push(format!("{prefix}photometric_albedo"), p_if.total.item());
        // the three photometric terms share one mask
        if !p_int.breakdown.warnings.is_empty() {
            breakdown.warnings.push(format!("source {k}: empty photometric mask"));
        }
        total = total.add(frame)?;
    }
    breakdown.push("smoothness", sm);
    breakdown.push("reconstruction", rec);
    breakdown.push("illumination_free", inf);
    breakdown.push("total", total.item());
    Ok(Loss { total, breakdown })
}
