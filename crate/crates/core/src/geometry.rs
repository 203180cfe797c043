//! Pinhole camera geometry, SE(3) poses and differentiable inverse warping.
//!
//! Poses map target-camera coordinates to source-camera coordinates. Flows
//! are target-to-source displacements in pixels: the target pixel `p` reads
//! the source image at `p + O(p)`.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, BackwardFn, Var};
use crate::tensor::Tensor;

/// Points with depth at or below this are treated as behind the camera.
pub const Z_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.check()?;
        Ok(k)
    }

    fn check(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("Intrinsics", "focal lengths must be positive"));
        }
        Ok(())
    }

    /// Checks that the principal point lies within `margin` image sizes of
    /// the image, e.g. `margin = 0.5` allows half an image beyond each edge.
    pub fn check_principal_point(&self, h: usize, w: usize, margin: f64) -> Result<()> {
        let ok = |c: f64, n: usize| c >= -margin * n as f64 && c <= (1.0 + margin) * n as f64;
        if ok(self.cx, w) && ok(self.cy, h) {
            Ok(())
        } else {
            Err(Error::invalid(
                "Intrinsics",
                format!("principal point ({}, {}) far outside {w}x{h}", self.cx, self.cy),
            ))
        }
    }

    /// `[fx, fy, cx, cy]`, the layout used when K is optimised.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[4], vec![self.fx, self.fy, self.cx, self.cy]).expect("shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            &[fx, fy, cx, cy] => Self::new(fx, fy, cx, cy),
            _ => Err(Error::invalid("Intrinsics", format!("expected 4 values, got {:?}", t.shape()))),
        }
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let k: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        k.check()?;
        Ok(k)
    }

    /// Uniform rescaling for a resized image.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }
}

/// Lifts pixel `(u, v)` at depth `d` into camera coordinates.
pub fn backproject(u: f64, v: f64, d: f64, k: &Intrinsics) -> Result<[f64; 3]> {
    if !(d > 0.0) {
        return Err(Error::invalid("backproject", format!("depth {d} is not positive")));
    }
    Ok([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d])
}

/// Projects a camera-space point. The flag is false when the point is not in
/// front of the camera, in which case the coordinates are meaningless.
pub fn project(x: [f64; 3], k: &Intrinsics) -> ([f64; 2], bool) {
    if x[2] <= Z_EPS {
        return ([f64::NAN; 2], false);
    }
    ([k.fx * x[0] / x[2] + k.cx, k.fy * x[1] / x[2] + k.cy], true)
}

/// Rigid transform as axis-angle rotation plus translation: `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self { rotation, translation }
    }

    /// Rodrigues exponential of the rotation vector.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Rotation3::from_scaled_axis(Vector3::from(self.rotation)).into_inner()
    }

    /// Builds a pose from a rotation matrix (projected onto SO(3)) and a
    /// translation.
    pub fn from_matrix(r: &Matrix3<f64>, t: [f64; 3]) -> Self {
        let rot = Rotation3::from_matrix(r);
        Self {
            rotation: rot.scaled_axis().into(),
            translation: t,
        }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation_matrix();
        let t = -(r.transpose() * Vector3::from(self.translation));
        Self {
            rotation: (-Vector3::from(self.rotation)).into(),
            translation: t.into(),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        let ra = self.rotation_matrix();
        let r = ra * other.rotation_matrix();
        let t = ra * Vector3::from(other.translation) + Vector3::from(self.translation);
        Self::from_matrix(&r, t.into())
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        (self.rotation_matrix() * Vector3::from(x) + Vector3::from(self.translation)).into()
    }

    /// `[ωx, ωy, ωz, tx, ty, tz]`, the layout used when the pose is optimised.
    pub fn to_tensor(&self) -> Tensor {
        let mut v = self.rotation.to_vec();
        v.extend_from_slice(&self.translation);
        Tensor::new(&[6], v).expect("shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 6 {
            return Err(Error::invalid("PoseSE3", format!("expected 6 values, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("pose parameters".into()));
        }
        Ok(Self::new([d[0], d[1], d[2]], [d[3], d[4], d[5]]))
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        Vector3::from(self.rotation).norm()
    }
}

/// Strictly positive depth map, `[H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Tensor);

impl DepthMap {
    /// Validates finiteness and the `[d_min, d_max]` range.
    pub fn new(depth: Tensor, d_min: f64, d_max: f64) -> Result<Self> {
        let (h, w, c) = depth.hwc()?;
        if c != 1 {
            return Err(Error::invalid("DepthMap", format!("{c} channels, expected 1")));
        }
        if !depth.is_finite() {
            return Err(Error::NonFinite("depth".into()));
        }
        if !(d_min > 0.0) {
            return Err(Error::invalid("DepthMap", "d_min must be positive"));
        }
        if let Some(v) = depth.data().iter().find(|&&v| v < d_min || v > d_max) {
            return Err(Error::invalid("DepthMap", format!("depth {v} outside [{d_min}, {d_max}]")));
        }
        Ok(Self(depth.reshape(&[h, w, 1])?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Pixel-centre coordinates `[H, W, 2]` with channel 0 = x, channel 1 = y.
pub fn pixel_grid(h: usize, w: usize) -> Tensor {
    Tensor::image(h, w, 2, |y, x, c| if c == 0 { x as f64 } else { y as f64 })
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Matrix `M(ω)` with `∂(R(ω) x)/∂ω = -R [x]× M(ω)`.
fn rotation_jacobian_factor(omega: &Vector3<f64>, r: &Matrix3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    if theta2 < 1e-16 {
        return Matrix3::identity();
    }
    (omega * omega.transpose() + (r.transpose() - Matrix3::identity()) * skew(omega)) / theta2
}

impl<'t> Var<'t> {
    /// Target-to-source flow `[H, W, 2]` induced by target depth `self`
    /// (`[H, W]` or `[H, W, 1]`), pose `[6]` and intrinsics `[4]`.
    ///
    /// Also returns the `[H, W]` in-front mask. Pixels whose transformed point
    /// is not in front of the source camera get zero flow and zero gradient.
    pub fn rigid_flow(self, pose: Var<'t>, intrinsics: Var<'t>) -> Result<(Var<'t>, Tensor)> {
        let dv = self.value();
        let (h, w, c) = dv.hwc()?;
        if c != 1 {
            return Err(Error::invalid("rigid_flow", format!("depth has {c} channels")));
        }
        let p = PoseSE3::from_tensor(&pose.value())?;
        let k = Intrinsics::from_tensor(&intrinsics.value())?;
        let r = p.rotation_matrix();
        let t = Vector3::from(p.translation);
        let n = h * w;
        let mut flow = vec![0.0; n * 2];
        let mut front = vec![0.0; n];
        // per-pixel camera point before (x) and after (xs) the transform
        let mut cache: Vec<Option<(Vector3<f64>, Vector3<f64>)>> = vec![None; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = dv.data()[i];
                if !(d > 0.0) || !d.is_finite() {
                    continue;
                }
                let xc = Vector3::new((x as f64 - k.cx) / k.fx * d, (y as f64 - k.cy) / k.fy * d, d);
                let xs = r * xc + t;
                if xs.z <= Z_EPS {
                    continue;
                }
                front[i] = 1.0;
                flow[2 * i] = k.fx * xs.x / xs.z + k.cx - x as f64;
                flow[2 * i + 1] = k.fy * xs.y / xs.z + k.cy - y as f64;
                cache[i] = Some((xc, xs));
            }
        }
        let omega = Vector3::from(p.rotation);
        let m = rotation_jacobian_factor(&omega, &r);
        let depth_shape = dv.shape().to_vec();
        let backward: BackwardFn = Box::new(move |ctx: &BackwardCtx<'_>| {
            let g = ctx.grad.data();
            let mut gd = vec![0.0; n];
            let mut gt = Vector3::zeros();
            let mut gw = Vector3::zeros();
            let mut gk = [0.0; 4];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let Some((xc, xs)) = cache[i] else { continue };
                    let (gu, gv) = (g[2 * i], g[2 * i + 1]);
                    let iz = 1.0 / xs.z;
                    // adjoint of the source-camera point
                    let a = Vector3::new(
                        gu * k.fx * iz,
                        gv * k.fy * iz,
                        -(gu * k.fx * xs.x + gv * k.fy * xs.y) * iz * iz,
                    );
                    let ra = r.transpose() * a;
                    let d = xc.z;
                    gd[i] = ra.dot(&(xc / d));
                    gt += a;
                    gw += m.transpose() * xc.cross(&ra);
                    gk[0] += gu * xs.x * iz - ra.x * xc.x / k.fx;
                    gk[1] += gv * xs.y * iz - ra.y * xc.y / k.fy;
                    gk[2] += gu - ra.x * d / k.fx;
                    gk[3] += gv - ra.y * d / k.fy;
                }
            }
            vec![
                ctx.needs[0].then(|| Tensor::new(&depth_shape, gd.clone()).expect("shape")),
                ctx.needs[1].then(|| {
                    Tensor::new(&[6], vec![gw.x, gw.y, gw.z, gt.x, gt.y, gt.z]).expect("shape")
                }),
                ctx.needs[2].then(|| Tensor::new(&[4], gk.to_vec()).expect("shape")),
            ]
        });
        let value = Tensor::new(&[h, w, 2], flow)?;
        let var = self.tape().push(value, &[self, pose, intrinsics], backward);
        Ok((var, Tensor::new(&[h, w], front)?))
    }

    /// Samples source image `self` at `p + flow(p)`. The mask marks samples
    /// that land inside the image.
    pub fn flow_warp(self, flow: Var<'t>) -> Result<(Var<'t>, Tensor)> {
        let fv = flow.value();
        let (h, w, c) = fv.hwc()?;
        if c != 2 {
            return Err(Error::invalid("flow_warp", format!("flow has {c} channels, expected 2")));
        }
        let grid = self.tape().constant(pixel_grid(h, w));
        self.bilinear_sample(grid.add(flow)?)
    }

    /// Inverse warp of source image `self` into the target view using target
    /// depth, pose (target → source) and intrinsics. The mask is the
    /// product of the in-front and in-bounds tests.
    pub fn rigid_warp(
        self,
        depth: Var<'t>,
        pose: Var<'t>,
        intrinsics: Var<'t>,
    ) -> Result<(Var<'t>, Tensor)> {
        let (flow, front) = depth.rigid_flow(pose, intrinsics)?;
        let (warped, inside) = self.flow_warp(flow)?;
        let valid = front.zip_map(&inside, |a, b| a * b)?;
        Ok((warped, valid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 90.0, 10.0, 8.0).unwrap()
    }

    #[test]
    fn backproject_hand_cases() {
        let k = k();
        assert_eq!(backproject(10.0, 8.0, 1.0, &k).unwrap(), [0.0, 0.0, 1.0]);
        assert_eq!(backproject(110.0, 8.0, 2.0, &k).unwrap(), [2.0, 0.0, 2.0]);
        assert!(backproject(1.0, 1.0, 0.0, &k).is_err());
        let (p, ok) = project(backproject(3.5, 7.25, 4.0, &k).unwrap(), &k);
        assert!(ok && (p[0] - 3.5).abs() < 1e-12 && (p[1] - 7.25).abs() < 1e-12);
    }

    #[test]
    fn projection_flags_points_behind_camera() {
        let (p, ok) = project([0.0, 0.0, 1.0], &k());
        assert!(ok);
        assert_eq!(p, [10.0, 8.0]);
        assert!(!project([1.0, 1.0, 0.0], &k()).1);
        assert!(!project([1.0, 1.0, -2.0], &k()).1);
    }

    #[test]
    fn pose_group_laws() {
        assert_eq!(PoseSE3::identity().rotation_matrix(), Matrix3::identity());
        let p = PoseSE3::new([0.3, -0.2, 0.5], [1.0, 2.0, -0.5]);
        let r = p.rotation_matrix();
        assert!((r.determinant() - 1.0).abs() < 1e-9);
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-9);
        let e = p.compose(&p.inverse());
        assert!(Vector3::from(e.rotation).norm() < 1e-9);
        assert!(Vector3::from(e.translation).norm() < 1e-9);
        let q = PoseSE3::new([0.0, 0.0, FRAC_PI_2], [0.0; 3]);
        let x = q.apply([1.0, 0.0, 0.0]);
        assert!((x[0]).abs() < 1e-9 && (x[1] - 1.0).abs() < 1e-9 && x[2].abs() < 1e-9);
        let a = PoseSE3::new([0.1, 0.0, 0.2], [0.0, 1.0, 0.0]);
        let pt = [0.2, -0.4, 3.0];
        let lhs = a.compose(&p).apply(pt);
        let rhs = a.apply(p.apply(pt));
        for i in 0..3 {
            assert!((lhs[i] - rhs[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_pose_gives_zero_flow() {
        let tape = Tape::new();
        let d = tape.constant(Tensor::full(&[4, 5, 1], 2.0));
        let (flow, front) = d
            .rigid_flow(
                tape.constant(PoseSE3::identity().to_tensor()),
                tape.constant(k().to_tensor()),
            )
            .unwrap();
        assert!(flow.value().max_abs() < 1e-12);
        assert!(front.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fronto_parallel_shift() {
        let tape = Tape::new();
        let k = Intrinsics::new(100.0, 100.0, 10.0, 8.0).unwrap();
        let d = tape.constant(Tensor::full(&[16, 20, 1], 2.0));
        let pose = PoseSE3::new([0.0; 3], [0.1, 0.0, 0.0]);
        let (flow, _) = d
            .rigid_flow(tape.constant(pose.to_tensor()), tape.constant(k.to_tensor()))
            .unwrap();
        let f = flow.value();
        for px in f.data().chunks(2) {
            assert!((px[0] - 5.0).abs() < 1e-9 && px[1].abs() < 1e-12);
        }
    }

    #[test]
    fn points_pushed_behind_camera_are_masked() {
        let tape = Tape::new();
        let d = tape.constant(Tensor::full(&[3, 3, 1], 1.0));
        let pose = PoseSE3::new([0.0; 3], [0.0, 0.0, -2.0]);
        let (flow, front) = d
            .rigid_flow(tape.constant(pose.to_tensor()), tape.constant(k().to_tensor()))
            .unwrap();
        assert!(front.data().iter().all(|&v| v == 0.0));
        assert!(flow.value().max_abs() == 0.0);
    }

    #[test]
    fn depth_map_validation() {
        assert!(DepthMap::new(Tensor::full(&[2, 2], 1.0), 0.1, 10.0).is_ok());
        assert!(DepthMap::new(Tensor::full(&[2, 2], 0.0), 0.1, 10.0).is_err());
        assert!(DepthMap::new(Tensor::full(&[2, 2, 1], 20.0), 0.1, 10.0).is_err());
    }

    #[test]
    fn principal_point_bounds() {
        let k = k();
        assert!(k.check_principal_point(16, 20, 0.0).is_ok());
        let far = Intrinsics::new(1.0, 1.0, 100.0, 8.0).unwrap();
        assert!(far.check_principal_point(16, 20, 1.0).is_err());
        assert!(Intrinsics::new(-1.0, 1.0, 0.0, 0.0).is_err());
    }
}
