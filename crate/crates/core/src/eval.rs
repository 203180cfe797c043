//! Depth metrics and absolute trajectory error.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::tensor::Tensor;

pub const SCHEMA: &str = "endogede-eval/1";
pub const DEFAULT_DEPTH_CAP: f64 = 150.0;
pub const DELTA_THRESHOLD: f64 = 1.25;
/// Timestamp association window in seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    None,
    Median,
}

impl std::str::FromStr for Scaling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scaling::None),
            "median" => Ok(Scaling::Median),
            other => Err(Error::Config(format!("unknown scaling '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: f64,
    pub n_pixels: usize,
    pub scale: f64,
    pub cap: f64,
}

impl EvalReport {
    /// Pixel-weighted mean of several reports; `scale` becomes the mean scale.
    pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
        let n: usize = reports.iter().map(|r| r.n_pixels).sum();
        if n == 0 {
            return Err(Error::invalid("merge", "no evaluated pixels"));
        }
        let w = |f: fn(&EvalReport) -> f64| {
            reports.iter().map(|r| f(r) * r.n_pixels as f64).sum::<f64>() / n as f64
        };
        // rmse values combine through their squares
        let rmse = w(|r| r.rmse * r.rmse).sqrt();
        let rmse_log = w(|r| r.rmse_log * r.rmse_log).sqrt();
        Ok(EvalReport {
            abs_rel: w(|r| r.abs_rel),
            sq_rel: w(|r| r.sq_rel),
            rmse,
            rmse_log,
            delta: w(|r| r.delta),
            n_pixels: n,
            scale: reports.iter().map(|r| r.scale).sum::<f64>() / reports.len() as f64,
            cap: reports[0].cap,
        })
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// AbsRel, SqRel, RMSE, RMSElog (natural log) and δ < 1.25 over pixels with
/// `0 < gt ≤ cap`.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, cap: f64, scaling: Scaling) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape("depth_metrics", pred.shape(), gt.shape()));
    }
    if !(cap > 0.0) {
        return Err(Error::invalid("depth_metrics", "cap must be positive"));
    }
    let pairs: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, g)| **g > 0.0 && **g <= cap)
        .map(|(p, g)| (*p, *g))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("depth_metrics", "no valid ground-truth pixels"));
    }
    if pairs.iter().any(|(p, _)| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::NonFinite("predicted depth must be positive on the valid set".into()));
    }
    let scale = match scaling {
        Scaling::None => 1.0,
        Scaling::Median => {
            let mut g: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut d: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            median(&mut g) / median(&mut d)
        }
    };
    let n = pairs.len() as f64;
    let (mut abs_rel, mut sq_rel, mut se, mut sle, mut hits) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(p, g) in &pairs {
        let p = p * scale;
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        se += diff * diff;
        sle += (p.ln() - g.ln()).powi(2);
        if (p / g).max(g / p) < DELTA_THRESHOLD {
            hits += 1.0;
        }
    }
    Ok(EvalReport {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (se / n).sqrt(),
        rmse_log: (sle / n).sqrt(),
        delta: hits / n,
        n_pixels: pairs.len(),
        scale,
        cap,
    })
}

/// Timestamped camera-to-world poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<(f64, PoseSE3)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, PoseSE3)>) -> Result<Self> {
        if poses.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::invalid("trajectory", "timestamps must be strictly increasing"));
        }
        if poses.iter().any(|(t, _)| !t.is_finite()) {
            return Err(Error::NonFinite("trajectory timestamp".into()));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[(f64, PoseSE3)] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Parses TUM lines `t tx ty tz qx qy qz qw`; `#` starts a comment.
    pub fn read_tum(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut poses = Vec::new();
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
            if vals.len() != 8 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 8 fields, found {}",
                    path.display(),
                    ln + 1,
                    vals.len()
                )));
            }
            let q = nalgebra::Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if !(q.norm() > 1e-9) {
                return Err(Error::Format(format!("{}:{}: zero quaternion", path.display(), ln + 1)));
            }
            let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
            poses.push((vals[0], PoseSE3::from_matrix(r.matrix(), [vals[1], vals[2], vals[3]])));
        }
        Self::new(poses)
    }

    pub fn write_tum(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
        for (t, p) in &self.poses {
            let q = UnitQuaternion::from_matrix(&p.rotation_matrix());
            let [x, y, z] = p.translation;
            writeln!(
                out,
                "{t:.6} {x:.9} {y:.9} {z:.9} {:.9} {:.9} {:.9} {:.9}",
                q.i, q.j, q.k, q.w
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Pairs each ground-truth pose with the nearest unused predicted pose
    /// within the association window.
    pub fn associate(&self, gt: &Trajectory) -> Vec<([f64; 3], [f64; 3])> {
        let mut used = vec![false; self.poses.len()];
        let mut out = Vec::new();
        for (tg, pg) in &gt.poses {
            let best = self
                .poses
                .iter()
                .enumerate()
                .filter(|(i, (tp, _))| !used[*i] && (tp - tg).abs() <= ASSOCIATION_WINDOW)
                .min_by(|a, b| (a.1 .0 - tg).abs().total_cmp(&(b.1 .0 - tg).abs()));
            if let Some((i, (_, pp))) = best {
                used[i] = true;
                out.push((pp.translation, pg.translation));
            }
        }
        out
    }
}

/// Least-squares similarity `(s, R, t)` mapping `src` onto `dst`.
pub fn umeyama(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::invalid("umeyama", "point sets must be nonempty and equal length"));
    }
    let n = src.len() as f64;
    let to_v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let mu_s = src.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (to_v(a) - mu_s, to_v(b) - mu_d);
        cov += db * da.transpose();
        var_s += da.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-15 {
        // all predicted positions coincide: only a translation is recoverable
        return Ok((0.0, Matrix3::identity(), mu_d));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let d = svd.singular_values;
    let trace = d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)];
    let s = trace / var_s;
    let t = mu_d - r * mu_s * s;
    Ok((s, r, t))
}

/// RMSE of position residuals after similarity alignment of `pred` to `gt`.
pub fn ate(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let pairs = pred.associate(gt);
    if pairs.len() < 3 {
        return Err(Error::invalid(
            "ate",
            format!("{} associated poses, need at least 3", pairs.len()),
        ));
    }
    let (src, dst): (Vec<[f64; 3]>, Vec<[f64; 3]>) = pairs.into_iter().unzip();
    let (s, r, t) = umeyama(&src, &dst)?;
    let se: f64 = src
        .iter()
        .zip(&dst)
        .map(|(a, b)| {
            let p = r * Vector3::new(a[0], a[1], a[2]) * s + t;
            (p - Vector3::new(b[0], b[1], b[2])).norm_squared()
        })
        .sum();
    Ok((se / src.len() as f64).sqrt())
}
