//! Procedural scenes with known depth, pose, albedo and shading.
//!
//! A camera moves in front of a smooth heightfield wall `z = z₀ + h(x, y)`.
//! Albedo and shading are functions of the world point, so every frame sees
//! the same surface: `I_f = clamp(g_f · A ⊙ S + spec_f, 0, 1)`.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::io::{write_pfm, write_ppm};
use crate::tensor::Tensor;

/// Where the point light sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightMode {
    /// Fixed in the world: shading is view-independent.
    Fixed,
    /// Attached to the camera, as on an endoscope tip.
    Headlight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Upper bound of the per-frame specular spot count (at most 3).
    pub max_specular: usize,
    /// Per-frame brightness gains; frames beyond the list use 1.
    pub gains: Vec<f64>,
    pub light: LightMode,
    /// Texture palette, 0 or 1.
    pub family: u8,
    /// Largest per-frame camera translation (scene units).
    pub max_step_translation: f64,
    /// Largest per-frame camera rotation (degrees).
    pub max_step_rotation_deg: f64,
    /// Distance from the first camera to the mean wall.
    pub wall_distance: f64,
    /// Heightfield relief amplitude.
    pub relief: f64,
    /// Inverse-square light falloff, normalised at the wall distance.
    pub falloff: bool,
    /// Albedo texture amplitude relative to the palette span.
    pub texture_contrast: f64,
    /// Shading at grazing and at normal incidence, before the frame gain.
    pub shading_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 80,
            frames: 9,
            max_specular: 0,
            gains: Vec::new(),
            light: LightMode::Fixed,
            family: 0,
            max_step_translation: 0.05,
            max_step_rotation_deg: 1.0,
            wall_distance: 3.0,
            relief: 0.35,
            falloff: false,
            texture_contrast: 1.0,
            shading_range: (0.25, 0.8),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scene must be at least 8x8".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        if self.max_specular > 3 {
            return Err(Error::Config("at most 3 specular spots per frame".into()));
        }
        if self.gains.iter().any(|g| !(*g > 0.0 && *g < 2.0)) {
            return Err(Error::Config("gains must lie in (0, 2)".into()));
        }
        let (lo, hi) = self.shading_range;
        if !(lo > 0.0 && hi >= lo && hi <= 1.0) {
            return Err(Error::Config("shading range must satisfy 0 < lo <= hi <= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_contrast) {
            return Err(Error::Config("texture contrast must lie in [0, 1]".into()));
        }
        if self.family > 1 {
            return Err(Error::Config("family must be 0 or 1".into()));
        }
        if !(self.max_step_translation >= 0.0 && self.max_step_translation <= 0.1) {
            return Err(Error::Config("per-frame translation must be within [0, 0.1]".into()));
        }
        if !(self.max_step_rotation_deg >= 0.0 && self.max_step_rotation_deg <= 5.0) {
            return Err(Error::Config("per-frame rotation must be within [0, 5] degrees".into()));
        }
        if !(self.relief >= 0.0 && self.wall_distance - self.relief > 1.0 && self.wall_distance + self.relief < 9.0) {
            return Err(Error::Config("wall must stay within the depth range".into()));
        }
        Ok(())
    }

    pub fn gain(&self, frame: usize) -> f64 {
        self.gains.get(frame).copied().unwrap_or(1.0)
    }
}

/// Rendered frames with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub config: SceneConfig,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    /// Camera-to-world pose of every frame.
    pub trajectory: Vec<PoseSE3>,
    pub gains: Vec<f64>,
    pub frames: Vec<Tensor>,
    pub albedo: Vec<Tensor>,
    /// Shading including the frame gain, `[H, W, 1]`.
    pub shading: Vec<Tensor>,
    pub specular: Vec<Tensor>,
    /// Depth `[H, W, 1]` in scene units.
    pub depth: Vec<Tensor>,
}

impl SceneBundle {
    /// Pose mapping target-camera coordinates to source-camera coordinates.
    pub fn relative_pose(&self, target: usize, source: usize) -> PoseSE3 {
        self.trajectory[source].inverse().compose(&self.trajectory[target])
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Writes `frame_XXX.ppm`, `depth_XXX.pfm`, `shading_XXX.pfm`,
    /// `albedo_XXX.pfm`, `intrinsics.json` and `trajectory.txt`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for f in 0..self.len() {
            write_ppm(dir.join(format!("frame_{f:03}.ppm")), &self.frames[f])?;
            write_pfm(dir.join(format!("depth_{f:03}.pfm")), &self.depth[f])?;
            write_pfm(dir.join(format!("shading_{f:03}.pfm")), &self.shading[f])?;
            write_pfm(dir.join(format!("albedo_{f:03}.pfm")), &self.albedo[f])?;
        }
        let k = serde_json::to_string_pretty(&self.intrinsics)?;
        std::fs::write(dir.join("intrinsics.json"), k + "\n")?;
        let traj = crate::eval::Trajectory::new(
            self.trajectory
                .iter()
                .enumerate()
                .map(|(i, p)| (i as f64 * 0.1, *p))
                .collect(),
        )?;
        traj.write_tum(dir.join("trajectory.txt"))?;
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, salt: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ splitmix((iy as u64) ^ (salt << 40))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Quintic fade, C² continuous so bilinear resampling stays accurate.
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smooth value noise in `[0, 1]` with unit lattice spacing.
fn value_noise(seed: u64, x: f64, y: f64, salt: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (fade(x - x0), fade(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = lattice(seed, ix, iy, salt);
    let v10 = lattice(seed, ix + 1, iy, salt);
    let v01 = lattice(seed, ix, iy + 1, salt);
    let v11 = lattice(seed, ix + 1, iy + 1, salt);
    let a = v00 + (v10 - v00) * tx;
    let b = v01 + (v11 - v01) * tx;
    a + (b - a) * ty
}

/// Three octaves, normalised back to `[0, 1]`.
fn octave_noise(seed: u64, x: f64, y: f64, salt: u64) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    for o in 0..3 {
        let f = (1 << o) as f64;
        let amp = 0.5f64.powi(o);
        total += amp * value_noise(seed, x * f, y * f, salt * 8 + o as u64);
        norm += amp;
    }
    total / norm
}

/// World-space texture cell size.
const TEXTURE_CELL: f64 = 0.9375;
const RELIEF_CELL: f64 = 2.5;

struct Surface {
    seed: u64,
    z0: f64,
    relief: f64,
    family: u8,
    contrast: f64,
    shading_range: (f64, f64),
}

impl Surface {
    fn height(&self, x: f64, y: f64) -> f64 {
        self.z0 + self.relief * (2.0 * value_noise(self.seed, x / RELIEF_CELL, y / RELIEF_CELL, 99) - 1.0)
    }

    fn normal(&self, x: f64, y: f64) -> Vector3<f64> {
        let e = 1e-4;
        let hx = (self.height(x + e, y) - self.height(x - e, y)) / (2.0 * e);
        let hy = (self.height(x, y + e) - self.height(x, y - e)) / (2.0 * e);
        Vector3::new(hx, hy, -1.0).normalize()
    }

    fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        let (u, v) = (x / TEXTURE_CELL, y / TEXTURE_CELL);
        let c = self.contrast;
        let n1 = 0.5 + c * (octave_noise(self.seed, u, v, 1) - 0.5);
        let n2 = 0.5 + c * (octave_noise(self.seed, u + 17.3, v - 4.1, 2) - 0.5);
        // Two palettes: warm tissue-like and cool mucosa-like.
        let (base, span): ([f64; 3], [f64; 3]) = match self.family {
            0 => ([0.45, 0.2, 0.18], [0.35, 0.3, 0.2]),
            _ => ([0.2, 0.35, 0.42], [0.15, 0.35, 0.38]),
        };
        [
            base[0] + span[0] * n1,
            base[1] + span[1] * (0.6 * n1 + 0.4 * n2),
            base[2] + span[2] * n2,
        ]
    }

    /// Lambertian shading `lo + (hi − lo)·cos` for a light at `light`, with
    /// the cosine scaled by `(z₀/r)²` under falloff.
    fn shading(&self, p: &Vector3<f64>, light: &Vector3<f64>, falloff: bool) -> f64 {
        let (lo, hi) = self.shading_range;
        let n = self.normal(p.x, p.y);
        let to_light = light - p;
        let cos = n.dot(&to_light.normalize()).max(0.0);
        if falloff {
            lo + (hi - lo) * cos * (self.z0 * self.z0 / to_light.norm_squared())
        } else {
            lo + (hi - lo) * cos
        }
    }

    /// Distance along `dir` from `origin` to the wall.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        if dir.z <= 1e-9 {
            return None;
        }
        let mut s = (self.z0 - origin.z) / dir.z;
        for _ in 0..60 {
            let p = origin + dir * s;
            let next = (self.height(p.x, p.y) - origin.z) / dir.z;
            if (next - s).abs() < 1e-13 {
                return Some(next);
            }
            // damped fixed-point update; the relief is shallow so this converges
            s += 0.7 * (next - s);
        }
        Some(s)
    }
}

fn random_step(rng: &mut ChaCha8Rng, bound: f64) -> [f64; 3] {
    let v: [f64; 3] = [
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1.0);
    [bound * v[0] / n, bound * v[1] / n, bound * v[2] / n]
}

fn trajectory(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<PoseSE3> {
    let mut poses = vec![PoseSE3::identity()];
    let max_rot = cfg.max_step_rotation_deg.to_radians();
    // smooth motion: each step blends the previous velocity with a fresh draw
    let mut vt = random_step(rng, cfg.max_step_translation);
    let mut vr = random_step(rng, max_rot);
    for _ in 1..cfg.frames {
        let nt = random_step(rng, cfg.max_step_translation);
        let nr = random_step(rng, max_rot);
        for i in 0..3 {
            vt[i] = 0.7 * vt[i] + 0.3 * nt[i];
            vr[i] = 0.7 * vr[i] + 0.3 * nr[i];
        }
        let step = PoseSE3::new(vr, vt);
        let last = *poses.last().expect("nonempty");
        poses.push(last.compose(&step));
    }
    poses
}

/// Renders a scene. Identical seeds and configs give bit-identical bundles.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneBundle> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = 0.8 * w as f64;
    let k = Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?;
    let surface = Surface {
        seed: splitmix(seed ^ 0x5eed),
        z0: cfg.wall_distance,
        relief: cfg.relief,
        family: cfg.family,
        contrast: cfg.texture_contrast,
        shading_range: cfg.shading_range,
    };
    let poses = trajectory(cfg, &mut rng);
    let world_light = Vector3::new(0.3, -0.4, -0.5);
    let mut bundle = SceneBundle {
        config: cfg.clone(),
        seed,
        intrinsics: k,
        trajectory: poses.clone(),
        gains: (0..cfg.frames).map(|i| cfg.gain(i)).collect(),
        frames: Vec::new(),
        albedo: Vec::new(),
        shading: Vec::new(),
        specular: Vec::new(),
        depth: Vec::new(),
    };
    for (fi, pose) in poses.iter().enumerate() {
        let r = pose.rotation_matrix();
        let c = Vector3::from(pose.translation);
        let light = match cfg.light {
            LightMode::Fixed => world_light,
            LightMode::Headlight => c,
        };
        let gain = cfg.gain(fi);
        let mut albedo = Tensor::zeros(&[h, w, 3]);
        let mut shading = Tensor::zeros(&[h, w, 1]);
        let mut depth = Tensor::zeros(&[h, w, 1]);
        for y in 0..h {
            for x in 0..w {
                let ray_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let dir = r * ray_cam;
                let s = surface.intersect(&c, &dir).ok_or_else(|| {
                    Error::Config("camera ray misses the wall; reduce rotation".into())
                })?;
                let p = c + dir * s;
                depth.set3(y, x, 0, s);
                let a = surface.albedo(p.x, p.y);
                for ch in 0..3 {
                    albedo.set3(y, x, ch, a[ch]);
                }
                shading.set3(y, x, 0, gain * surface.shading(&p, &light, cfg.falloff));
            }
        }
        let mut specular = Tensor::zeros(&[h, w, 1]);
        let spots = if cfg.max_specular == 0 { 0 } else { rng.random_range(0..=cfg.max_specular) };
        for _ in 0..spots {
            let (sx, sy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let sigma = rng.random_range(1.5..3.0);
            let amp = rng.random_range(0.3..0.6);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
                    let v = specular.at3(y, x, 0) + amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    specular.set3(y, x, 0, v);
                }
            }
        }
        let frame = Tensor::image(h, w, 3, |y, x, ch| {
            (albedo.at3(y, x, ch) * shading.at3(y, x, 0) + specular.at3(y, x, 0)).clamp(0.0, 1.0)
        });
        if depth.data().iter().any(|d| !(0.5..=10.0).contains(d)) {
            return Err(Error::Config("rendered depth left [0.5, 10]".into()));
        }
        bundle.frames.push(frame);
        bundle.albedo.push(albedo);
        bundle.shading.push(shading);
        bundle.specular.push(specular);
        bundle.depth.push(depth);
    }
    Ok(bundle)
}
