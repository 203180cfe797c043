//! Heavy-tailed spectral analysis of weight matrices and block-wise expert
//! allocation.
//!
//! The eigenvalues of `WᵀW` of every finetuned linear layer in a block are
//! pooled, the peak of their log-binned density fixes a search window, and a
//! power-law tail exponent τ is fitted inside that window by Hill estimation
//! with a Fix-finger threshold choice. Blocks with larger τ receive more
//! experts.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest spectrum accepted for fitting.
pub const MIN_EIGENVALUES: usize = 8;
/// Default number of log-spaced bins for the density estimate.
pub const DEFAULT_BINS: usize = 100;
/// Fitting window around the density peak, as multiples of λ̂.
pub const WINDOW_LOW: f64 = 0.95;
pub const WINDOW_HIGH: f64 = 1.5;

const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Ascending eigenvalues of one block (or one layer).
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSpectrum {
    values: Vec<f64>,
    pub source_block: usize,
    pub source_layers: Vec<String>,
}

impl EigenSpectrum {
    /// Sorts `values` ascending and validates them.
    pub fn new(mut values: Vec<f64>, source_block: usize, source_layers: Vec<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eigenvalue".into()));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("EigenSpectrum", "negative eigenvalue"));
        }
        if values.len() < MIN_EIGENVALUES {
            return Err(Error::invalid(
                "EigenSpectrum",
                format!("{} eigenvalues, at least {MIN_EIGENVALUES} required", values.len()),
            ));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self {
            values,
            source_block,
            source_layers,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The same spectrum without its zero eigenvalues.
    pub fn positive(&self) -> Result<Self> {
        let values = self.values.iter().copied().filter(|&v| v > 0.0).collect();
        Self::new(values, self.source_block, self.source_layers.clone())
    }

    /// Merges several spectra into one multiset.
    pub fn pooled(parts: &[EigenSpectrum], source_block: usize) -> Result<Self> {
        let values = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        let layers = parts.iter().flat_map(|p| p.source_layers.clone()).collect();
        Self::new(values, source_block, layers)
    }
}

/// Squared singular values of `weight`, ascending.
///
/// Computed from the eigen-decomposition of the smaller Gram matrix.
pub fn eigenvalues_of(weight: &Tensor) -> Result<EigenSpectrum> {
    let &[m, n] = weight.shape() else {
        return Err(Error::invalid(
            "eigenvalues_of",
            format!("weight must be a matrix, got {:?}", weight.shape()),
        ));
    };
    if !weight.is_finite() {
        return Err(Error::NonFinite("weight matrix".into()));
    }
    if m.min(n) < MIN_EIGENVALUES {
        return Err(Error::invalid(
            "eigenvalues_of",
            format!("{m}x{n} matrix is too small, min dimension must be >= {MIN_EIGENVALUES}"),
        ));
    }
    let w = DMatrix::from_row_slice(m, n, weight.data());
    let gram = if m >= n { w.transpose() * &w } else { &w * w.transpose() };
    let eig = SymmetricEigen::new(gram);
    // Round-off can push zero eigenvalues slightly negative.
    let values = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    EigenSpectrum::new(values, 0, Vec::new())
}

/// Peak λ̂ of the log-binned eigenvalue density.
///
/// Bins are log-spaced over `[min positive λ, max λ]`; the geometric centre of
/// the most populated bin is returned, ties going to the smaller-λ bin.
pub fn peak_lambda(spectrum: &EigenSpectrum, n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::invalid("peak_lambda", "n_bins must be positive"));
    }
    let positive: Vec<f64> = spectrum.values.iter().copied().filter(|&v| v > 0.0).collect();
    let (Some(&lo), Some(&hi)) = (positive.first(), positive.last()) else {
        return Err(Error::DegenerateSpectrum("all eigenvalues are zero".into()));
    };
    let (llo, lhi) = (lo.log10(), hi.log10());
    if lhi - llo <= 1e-12 {
        return Err(Error::DegenerateSpectrum("all eigenvalues are equal".into()));
    }
    let width = (lhi - llo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for v in &positive {
        let b = ((v.log10() - llo) / width).floor().max(0.0) as usize;
        counts[b.min(n_bins - 1)] += 1;
    }
    let mut best = 0;
    for (b, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = b;
        }
    }
    Ok(10f64.powf(llo + (best as f64 + 0.5) * width))
}

/// Hill-type tail exponent at threshold index `j` (1-based, ascending order):
///
/// `τ_j = 1 + (N − j) / Σ_{i=1..j} log₁₀(λ_{N−i+1} / λ_j)`
pub fn hill_tau(spectrum: &EigenSpectrum, j: usize) -> Result<f64> {
    hill_tau_sorted(&spectrum.values, j)
}

/// [`hill_tau`] on a raw ascending slice of any length ≥ 2.
pub fn hill_tau_sorted(values: &[f64], j: usize) -> Result<f64> {
    let n = values.len();
    if j < 1 || j >= n {
        return Err(Error::invalid("hill_tau", format!("index {j} outside 1..{}", n.saturating_sub(1))));
    }
    if values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("hill_tau", "eigenvalues must be ascending"));
    }
    let lj = values[j - 1];
    if lj <= 0.0 {
        return Err(Error::invalid("hill_tau", format!("λ_{j} = {lj} is not positive")));
    }
    let denom: f64 = (1..=j)
        .map(|i| (values[n - i] / lj).log10())
        .sum();
    if denom <= DENOMINATOR_FLOOR {
        return Err(Error::DegenerateTail(format!(
            "Hill denominator {denom:e} at j = {j}"
        )));
    }
    Ok(1.0 + (n - j) as f64 / denom)
}

/// Largest gap between the fitted power-law tail CDF and the empirical one,
/// for threshold index `t` (1-based) and exponent `tau`.
pub fn tail_deviation(spectrum: &EigenSpectrum, t: usize, tau: f64) -> f64 {
    let n = spectrum.values.len();
    let lt = spectrum.values[t - 1];
    let span = (n - t) as f64;
    spectrum.values[t - 1..]
        .iter()
        .enumerate()
        .map(|(i, &l)| (1.0 - (l / lt).powf(1.0 - tau) - i as f64 / span).abs())
        .fold(0.0, f64::max)
}

/// Result of fitting a power-law tail to one spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralFit {
    pub tau: f64,
    /// Density peak; set when the window was derived from it.
    pub lambda_hat: Option<f64>,
    /// Chosen 1-based threshold index t.
    pub threshold_index: usize,
    pub ks_distance: f64,
    pub window: (f64, f64),
}

/// Fix-finger threshold selection restricted to eigenvalues strictly inside
/// `window`: the candidate whose Hill exponent gives the smallest tail CDF
/// deviation wins, ties going to the smaller index.
pub fn fix_finger(spectrum: &EigenSpectrum, window: (f64, f64)) -> Result<SpectralFit> {
    let (lo, hi) = window;
    let n = spectrum.values.len();
    let candidates: Vec<usize> = (1..n)
        .filter(|&t| {
            let v = spectrum.values[t - 1];
            v > lo && v < hi && v > 0.0
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::WindowEmpty { lo, hi });
    }
    let mut best: Option<(usize, f64, f64)> = None;
    let mut last_err = None;
    for t in candidates {
        let tau = match hill_tau(spectrum, t) {
            Ok(tau) => tau,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let d = tail_deviation(spectrum, t, tau);
        if best.is_none_or(|(_, _, bd)| d < bd) {
            best = Some((t, tau, d));
        }
    }
    let (threshold_index, tau, ks_distance) = best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::DegenerateTail("no usable threshold".into()))
    })?;
    Ok(SpectralFit {
        tau,
        lambda_hat: None,
        threshold_index,
        ks_distance,
        window,
    })
}

/// Peak detection followed by Fix-finger inside `(0.95 λ̂, 1.5 λ̂)`.
pub fn fit_spectrum(spectrum: &EigenSpectrum, n_bins: usize) -> Result<SpectralFit> {
    let spectrum = spectrum.positive()?;
    let lambda_hat = peak_lambda(&spectrum, n_bins)?;
    let mut fit = fix_finger(&spectrum, (WINDOW_LOW * lambda_hat, WINDOW_HIGH * lambda_hat))?;
    fit.lambda_hat = Some(lambda_hat);
    Ok(fit)
}

/// Pools the eigenvalues of every layer in a block and fits one tail.
pub fn fit_block(layer_weights: &[Tensor], n_bins: usize) -> Result<SpectralFit> {
    if layer_weights.is_empty() {
        return Err(Error::invalid("block_tau", "block has no layers"));
    }
    let spectra = layer_weights
        .iter()
        .map(eigenvalues_of)
        .collect::<Result<Vec<_>>>()?;
    fit_spectrum(&EigenSpectrum::pooled(&spectra, 0)?, n_bins)
}

/// Tail exponent τ_b of one block.
pub fn block_tau(layer_weights: &[Tensor], n_bins: usize) -> Result<f64> {
    Ok(fit_block(layer_weights, n_bins)?.tau)
}

/// Expert budget split across blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub total_experts: usize,
    pub per_block: Vec<usize>,
    pub taus: Vec<f64>,
    pub top_k: Vec<usize>,
    #[serde(default)]
    pub fits: Vec<SpectralFit>,
}

/// Default routing fan-out per token.
pub const DEFAULT_TOP_K: usize = 2;

/// Splits `total` experts proportionally to `taus`.
///
/// Each block first gets `⌊τ_b / Σ τ · total⌋`. Blocks floored to zero are
/// raised to one, then the remaining experts go one each to the blocks with
/// the largest fractional parts (ties to the lower index). Raised blocks do
/// not take part in that second round.
pub fn allocate_experts(taus: &[f64], total: usize) -> Result<AllocationPlan> {
    let b = taus.len();
    if b == 0 {
        return Err(Error::invalid("allocate_experts", "no blocks"));
    }
    if let Some(t) = taus.iter().find(|t| !t.is_finite() || **t <= 1.0) {
        return Err(Error::invalid("allocate_experts", format!("tau {t} must be finite and > 1")));
    }
    if total < b {
        return Err(Error::Infeasible(format!("{total} experts cannot cover {b} blocks")));
    }
    let sum: f64 = taus.iter().sum();
    let quotas: Vec<f64> = taus.iter().map(|t| t / sum * total as f64).collect();
    let mut per_block: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let raised: Vec<bool> = per_block.iter().map(|&e| e == 0).collect();
    for (e, &r) in per_block.iter_mut().zip(&raised) {
        if r {
            *e = 1;
        }
    }
    let assigned: usize = per_block.iter().sum();
    if assigned > total {
        // Raising empty blocks overdrew the budget: take experts back from
        // the blocks furthest above their quota.
        let mut excess = assigned - total;
        while excess > 0 {
            let donor = (0..b)
                .filter(|&i| per_block[i] > 1)
                .max_by(|&i, &j| {
                    (per_block[i] as f64 - quotas[i])
                        .total_cmp(&(per_block[j] as f64 - quotas[j]))
                        .then(j.cmp(&i))
                })
                .ok_or_else(|| Error::Infeasible("cannot fund minimum allocation".into()))?;
            per_block[donor] -= 1;
            excess -= 1;
        }
    } else {
        let mut order: Vec<usize> = (0..b).filter(|&i| !raised[i]).collect();
        let frac = |i: usize| quotas[i] - quotas[i].floor();
        order.sort_by(|&i, &j| frac(j).total_cmp(&frac(i)).then(i.cmp(&j)));
        for &i in order.iter().take(total - assigned) {
            per_block[i] += 1;
        }
    }
    let top_k = per_block.iter().map(|&e| DEFAULT_TOP_K.min(e)).collect();
    Ok(AllocationPlan {
        total_experts: total,
        per_block,
        taus: taus.to_vec(),
        top_k,
        fits: Vec::new(),
    })
}
