//! Gap filling for gridded series.
//!
//! Five strategies: drop the missing cells, fill with zero, piecewise-linear
//! interpolation, a global least-squares polynomial, and k-nearest-neighbour
//! regression in the feature space of the device's other fields. Present
//! cells are never modified.
//!
//! KNN neighbours are slots where the target and every companion field are
//! present. Features are the companion values (plus sin/cos of time-of-day
//! when enabled), z-scored over the neighbour rows. A query slot uses the
//! features it has; the imputed value is the plain mean of the `k` nearest
//! neighbours' targets, ties broken by slot order.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaps::GriddedSeries;
use crate::metrics::mse;
use crate::model::{Field, MILLIS_PER_DAY};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImputeError {
    #[error("{strategy} needs {needed} supporting cells, found {available}")]
    InsufficientSupport { strategy: String, needed: usize, available: usize },
    #[error("knn imputation needs companion series")]
    MissingCompanions,
    #[error("companion series {0} is not on the target's grid")]
    CompanionMismatch(Field),
    #[error("design matrix is rank deficient: need {needed} distinct x values, found {distinct}")]
    DegenerateDesign { needed: usize, distinct: usize },
    #[error("invalid strategy `{0}`")]
    InvalidStrategy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub k: usize,
    /// Companion fields to use; empty means every companion supplied.
    pub feature_set: Vec<Field>,
    pub time_features: bool,
    pub standardize: bool,
}

impl KnnConfig {
    pub fn with_k(k: usize) -> Self {
        KnnConfig { k, ..KnnConfig::default() }
    }
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 5, feature_set: Vec::new(), time_features: true, standardize: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImputeStrategy {
    Drop,
    Zero,
    Linear,
    Poly(usize),
    Knn(KnnConfig),
}

impl ImputeStrategy {
    pub fn knn(k: usize) -> Self {
        ImputeStrategy::Knn(KnnConfig::with_k(k))
    }
}

impl fmt::Display for ImputeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImputeStrategy::Drop => f.write_str("drop"),
            ImputeStrategy::Zero => f.write_str("zero"),
            ImputeStrategy::Linear => f.write_str("linear"),
            ImputeStrategy::Poly(n) => write!(f, "poly:{n}"),
            ImputeStrategy::Knn(c) => write!(f, "knn:{}", c.k),
        }
    }
}

/// A strategy as requested on the command line; `knn:auto` resolves to
/// `knn:k*` via [`select_k`].
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyArg {
    Fixed(ImputeStrategy),
    KnnAuto,
}

impl fmt::Display for StrategyArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyArg::Fixed(s) => s.fmt(f),
            StrategyArg::KnnAuto => f.write_str("knn:auto"),
        }
    }
}

impl FromStr for StrategyArg {
    type Err = ImputeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ImputeError::InvalidStrategy(s.to_string());
        Ok(match s {
            "drop" => StrategyArg::Fixed(ImputeStrategy::Drop),
            "zero" => StrategyArg::Fixed(ImputeStrategy::Zero),
            "linear" => StrategyArg::Fixed(ImputeStrategy::Linear),
            "knn:auto" => StrategyArg::KnnAuto,
            _ => match s.split_once(':') {
                Some(("poly", n)) => match n.parse::<usize>() {
                    Ok(n @ (2 | 3)) => StrategyArg::Fixed(ImputeStrategy::Poly(n)),
                    _ => return Err(bad()),
                },
                Some(("knn", k)) => match k.parse::<usize>() {
                    Ok(k) if k > 0 => StrategyArg::Fixed(ImputeStrategy::knn(k)),
                    _ => return Err(bad()),
                },
                _ => return Err(bad()),
            },
        })
    }
}

fn insufficient(strategy: &ImputeStrategy, needed: usize, available: usize) -> ImputeError {
    ImputeError::InsufficientSupport { strategy: strategy.to_string(), needed, available }
}

/// Fills missing cells of `series`. `companions` must share its grid and are
/// only read by KNN.
pub fn impute(
    series: &GriddedSeries,
    strategy: &ImputeStrategy,
    companions: &[GriddedSeries],
) -> Result<GriddedSeries, ImputeError> {
    if series.is_complete() && !matches!(strategy, ImputeStrategy::Knn(_)) {
        return Ok(series.clone());
    }
    let present = series.len() - series.missing_count();
    let filled = match strategy {
        ImputeStrategy::Drop => return Ok(excise(series)),
        ImputeStrategy::Zero => series.values.iter().map(|v| v.unwrap_or(0.0)).collect(),
        ImputeStrategy::Linear => {
            if present < 2 {
                return Err(insufficient(strategy, 2, present));
            }
            linear_fill(series)
        }
        ImputeStrategy::Poly(order) => {
            if present < order + 1 {
                return Err(insufficient(strategy, order + 1, present));
            }
            poly_fill(series, *order)?
        }
        ImputeStrategy::Knn(cfg) => {
            if series.is_complete() {
                return Ok(series.clone());
            }
            knn_fill(series, cfg, companions)?
        }
    };
    Ok(GriddedSeries { values: filled.into_iter().map(Some).collect(), ..series.clone() })
}

fn excise(series: &GriddedSeries) -> GriddedSeries {
    let (slots, values): (Vec<usize>, Vec<Option<f64>>) = series
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_some())
        .map(|(i, v)| (series.slot(i), *v))
        .unzip();
    GriddedSeries { values, slot_map: Some(slots), ..series.clone() }
}

fn present_points(series: &GriddedSeries) -> (Vec<f64>, Vec<f64>) {
    series
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (series.slot(i) as f64, v)))
        .unzip()
}

fn observed_range(ys: &[f64]) -> (f64, f64) {
    ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)))
}

/// Piecewise-linear between neighbouring present cells; edge runs extend the
/// outermost segment, clamped to the observed range.
fn linear_fill(series: &GriddedSeries) -> Vec<f64> {
    let (xs, ys) = present_points(series);
    let (lo, hi) = observed_range(&ys);
    let line = |j: usize, x: f64| ys[j] + (ys[j + 1] - ys[j]) * (x - xs[j]) / (xs[j + 1] - xs[j]);
    let last = xs.len() - 1;
    let mut seg = 0;
    (0..series.len())
        .map(|i| {
            if let Some(v) = series.values[i] {
                return v;
            }
            let x = series.slot(i) as f64;
            if x < xs[0] {
                return line(0, x).clamp(lo, hi);
            }
            if x > xs[last] {
                return line(last - 1, x).clamp(lo, hi);
            }
            while xs[seg + 1] < x {
                seg += 1;
            }
            line(seg, x)
        })
        .collect()
}

/// Polynomial in a centred, scaled abscissa `t = (x - center) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPoly {
    pub center: f64,
    pub scale: f64,
    /// Coefficients of `t^0 .. t^n`.
    pub coef: Vec<f64>,
}

impl ScaledPoly {
    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.center) / self.scale;
        self.coef.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    /// Re-expands into coefficients of `x^0 .. x^n`.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        let n = self.coef.len();
        let mut out = vec![0.0; n];
        // ((x - c) / s)^j = s^-j * sum_i C(j,i) x^i (-c)^(j-i)
        for (j, b) in self.coef.iter().enumerate() {
            let mut binom = 1.0;
            for i in 0..=j {
                if i > 0 {
                    binom = binom * (j - i + 1) as f64 / i as f64;
                }
                out[i] += b * binom * (-self.center).powi((j - i) as i32) / self.scale.powi(j as i32);
            }
        }
        out
    }
}

/// Least-squares polynomial of degree `order` through `(xs, ys)`, solved via
/// normal equations on a centred and scaled abscissa.
pub fn fit_scaled_poly(xs: &[f64], ys: &[f64], order: usize) -> Result<ScaledPoly, ImputeError> {
    assert_eq!(xs.len(), ys.len());
    let mut distinct = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < order + 1 {
        return Err(ImputeError::DegenerateDesign { needed: order + 1, distinct: distinct.len() });
    }
    let (lo, hi) = observed_range(xs);
    let center = (lo + hi) / 2.0;
    let scale = if hi > lo { (hi - lo) / 2.0 } else { 1.0 };
    let m = order + 1;
    let mut gram = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    let mut powers = vec![0.0; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let t = (x - center) / scale;
        powers[0] = 1.0;
        for j in 1..m {
            powers[j] = powers[j - 1] * t;
        }
        for a in 0..m {
            rhs[a] += powers[a] * y;
            for b in 0..m {
                gram[a][b] += powers[a] * powers[b];
            }
        }
    }
    let coef = solve_dense(gram, rhs).ok_or(ImputeError::DegenerateDesign {
        needed: m,
        distinct: distinct.len(),
    })?;
    Ok(ScaledPoly { center, scale, coef })
}

/// Raw-basis least-squares coefficients `a_0 .. a_order`.
pub fn poly_fit(xs: &[f64], ys: &[f64], order: usize) -> Result<Vec<f64>, ImputeError> {
    fit_scaled_poly(xs, ys, order).map(|p| p.raw_coefficients())
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn poly_fill(series: &GriddedSeries, order: usize) -> Result<Vec<f64>, ImputeError> {
    let (xs, ys) = present_points(series);
    let poly = fit_scaled_poly(&xs, &ys, order)?;
    let (lo, hi) = observed_range(&ys);
    let (first, last) = (xs[0], xs[xs.len() - 1]);
    Ok((0..series.len())
        .map(|i| match series.values[i] {
            Some(v) => v,
            None => {
                let x = series.slot(i) as f64;
                let y = poly.eval(x);
                if x < first || x > last {
                    y.clamp(lo, hi)
                } else {
                    y
                }
            }
        })
        .collect())
}

/// Per-slot feature rows for KNN; `None` marks an absent feature.
fn knn_features(
    series: &GriddedSeries,
    cfg: &KnnConfig,
    companions: &[GriddedSeries],
) -> Result<Vec<Vec<Option<f64>>>, ImputeError> {
    let selected: Vec<&GriddedSeries> = companions
        .iter()
        .filter(|c| cfg.feature_set.is_empty() || cfg.feature_set.contains(&c.field))
        .collect();
    if selected.is_empty() && !cfg.time_features {
        return Err(ImputeError::MissingCompanions);
    }
    for c in &selected {
        if c.len() != series.len()
            || c.t0 != series.t0
            || c.cadence_millis != series.cadence_millis
            || c.slot_map != series.slot_map
        {
            return Err(ImputeError::CompanionMismatch(c.field));
        }
    }
    Ok((0..series.len())
        .map(|i| {
            let mut row: Vec<Option<f64>> = selected.iter().map(|c| c.values[i]).collect();
            if cfg.time_features {
                let phase = std::f64::consts::TAU * series.time_of(i).time_of_day_millis() as f64
                    / MILLIS_PER_DAY as f64;
                row.push(Some(phase.sin()));
                row.push(Some(phase.cos()));
            }
            row
        })
        .collect())
}

fn knn_fill(series: &GriddedSeries, cfg: &KnnConfig, companions: &[GriddedSeries]) -> Result<Vec<f64>, ImputeError> {
    if companions.is_empty() {
        return Err(ImputeError::MissingCompanions);
    }
    let strategy = ImputeStrategy::Knn(cfg.clone());
    if cfg.k == 0 {
        return Err(insufficient(&strategy, 1, 0));
    }
    let rows = knn_features(series, cfg, companions)?;
    let dims = rows.first().map_or(0, Vec::len);
    let neighbors: Vec<usize> = (0..series.len())
        .filter(|&i| series.values[i].is_some() && rows[i].iter().all(Option::is_some))
        .collect();
    if neighbors.len() < cfg.k {
        return Err(insufficient(&strategy, cfg.k, neighbors.len()));
    }

    let (mut mean, mut sd) = (vec![0.0; dims], vec![1.0; dims]);
    if cfg.standardize {
        for d in 0..dims {
            let col: Vec<f64> = neighbors.iter().map(|&i| rows[i][d].unwrap()).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            mean[d] = m;
            sd[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
    }
    let z = |i: usize, d: usize| rows[i][d].map(|v| (v - mean[d]) / sd[d]);
    let bank: Vec<f64> = neighbors.iter().flat_map(|&i| (0..dims).map(move |d| z(i, d).unwrap())).collect();
    let targets: Vec<f64> = neighbors.iter().map(|&i| series.values[i].unwrap()).collect();
    let fallback = targets.iter().sum::<f64>() / targets.len() as f64;

    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(neighbors.len());
    Ok((0..series.len())
        .map(|i| {
            if let Some(v) = series.values[i] {
                return v;
            }
            let query: Vec<(usize, f64)> = (0..dims).filter_map(|d| z(i, d).map(|v| (d, v))).collect();
            if query.is_empty() {
                return fallback;
            }
            scored.clear();
            scored.extend((0..neighbors.len()).map(|n| {
                let row = &bank[n * dims..(n + 1) * dims];
                let d2: f64 = query.iter().map(|&(d, q)| (row[d] - q) * (row[d] - q)).sum();
                (d2, n)
            }));
            let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if cfg.k < scored.len() {
                scored.select_nth_unstable_by(cfg.k - 1, by_distance);
            }
            scored[..cfg.k].iter().map(|&(_, n)| targets[n]).sum::<f64>() / cfg.k as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSelection {
    pub k_star: usize,
    pub mse_per_k: Vec<(usize, f64)>,
    /// Cells hidden for scoring.
    pub masked: Vec<usize>,
}

/// Hides `ceil(mask_fraction * len)` random cells of a complete series,
/// imputes them with each candidate `k` and returns the MSE-minimising `k`
/// (smallest on ties).
pub fn select_k(
    clean: &GriddedSeries,
    companions: &[GriddedSeries],
    mask_fraction: f64,
    k_candidates: &[usize],
    seed: u64,
    base: &KnnConfig,
) -> Result<KSelection, ImputeError> {
    let no_support = |needed, available| ImputeError::InsufficientSupport {
        strategy: "knn:auto".into(),
        needed,
        available,
    };
    if !clean.is_complete() {
        return Err(no_support(clean.len(), clean.len() - clean.missing_count()));
    }
    let n_mask = (mask_fraction * clean.len() as f64).ceil();
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) || n_mask < 1.0 || n_mask as usize >= clean.len() {
        return Err(no_support(1, 0));
    }
    if k_candidates.is_empty() {
        return Err(no_support(1, 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = sample(&mut rng, clean.len(), n_mask as usize).into_vec();
    masked.sort_unstable();
    let mut hidden = clean.clone();
    for &i in &masked {
        hidden.values[i] = None;
    }
    let truth: Vec<f64> = masked.iter().map(|&i| clean.values[i].unwrap()).collect();
    let mut candidates = k_candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let mut mse_per_k = Vec::with_capacity(candidates.len());
    for k in candidates {
        let cfg = KnnConfig { k, ..base.clone() };
        let filled = impute(&hidden, &ImputeStrategy::Knn(cfg), companions)?;
        let guess: Vec<f64> = masked.iter().map(|&i| filled.values[i].unwrap()).collect();
        mse_per_k.push((k, mse(&truth, &guess).expect("nonempty mask")));
    }
    let k_star = mse_per_k
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|&(k, _)| k)
        .expect("nonempty candidates");
    Ok(KSelection { k_star, mse_per_k, masked })
}

/// [`select_k`] on the present cells of a gappy series. Missing target cells
/// are excised from the target and companions first, so scoring only ever
/// hides known values.
pub fn select_k_known(
    series: &GriddedSeries,
    companions: &[GriddedSeries],
    mask_fraction: f64,
    k_candidates: &[usize],
    seed: u64,
    base: &KnnConfig,
) -> Result<KSelection, ImputeError> {
    let keep: Vec<usize> = (0..series.len()).filter(|&i| series.values[i].is_some()).collect();
    if keep.is_empty() {
        return Err(insufficient(&ImputeStrategy::Knn(base.clone()), 2, 0));
    }
    let excise = |s: &GriddedSeries| GriddedSeries {
        values: keep.iter().map(|&i| s.values[i]).collect(),
        slot_map: Some(keep.iter().map(|&i| s.slot(i)).collect()),
        ..s.clone()
    };
    let known = excise(series);
    let comps: Vec<GriddedSeries> = companions.iter().map(excise).collect();
    let fraction = mask_fraction.max(1.0 / known.len() as f64);
    let mut sel = select_k(&known, &comps, fraction, k_candidates, seed, base)?;
    for m in &mut sel.masked {
        *m = keep[*m];
    }
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DeviceId, Timestamp, MILLIS_PER_MINUTE};
    use proptest::prelude::*;

    const CAD: i64 = 15 * MILLIS_PER_MINUTE;

    fn series(field: Field, values: Vec<Option<f64>>) -> GriddedSeries {
        GriddedSeries::new(DeviceId::from_u64(7), field, Timestamp(0), CAD, values)
    }

    #[test]
    fn linear_midpoint() {
        let s = series(Field::Co2, vec![Some(0.0), None, Some(4.0)]);
        let out = impute(&s, &ImputeStrategy::Linear, &[]).unwrap();
        assert_eq!(out.values, vec![Some(0.0), Some(2.0), Some(4.0)]);
    }

    #[test]
    fn linear_edges_extrapolate_then_clamp() {
        let s = series(Field::Co2, vec![None, Some(1.0), Some(2.0), None, None]);
        let out = impute(&s, &ImputeStrategy::Linear, &[]).unwrap().dense();
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn poly2_extends_parabola() {
        // (0,0),(1,1),(2,4) force y = x^2; slot 3 is a trailing cell so it
        // is clamped to the observed maximum, while an interior cell is exact.
        let s = series(Field::Co2, vec![Some(0.0), Some(1.0), Some(4.0), None]);
        assert_eq!(impute(&s, &ImputeStrategy::Poly(2), &[]).unwrap().values[3], Some(4.0));
        let s = series(Field::Co2, vec![Some(0.0), Some(1.0), Some(4.0), None, Some(16.0)]);
        let v = impute(&s, &ImputeStrategy::Poly(2), &[]).unwrap().values[3].unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        let p = fit_scaled_poly(&[0.0, 1.0, 2.0], &[0.0, 1.0, 4.0], 2).unwrap();
        assert!((p.eval(3.0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn poly_fit_exact_cases() {
        let a = poly_fit(&[0.0, 1.0, 2.0], &[0.0, 1.0, 4.0], 2).unwrap();
        for (got, want) in a.iter().zip([0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12, "{a:?}");
        }
        let a = poly_fit(&[0.0, 1.0, 2.0], &[3.0, 3.0, 3.0], 1).unwrap();
        assert!((a[0] - 3.0).abs() < 1e-12 && a[1].abs() < 1e-12);
        assert!(matches!(
            poly_fit(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 1),
            Err(ImputeError::DegenerateDesign { .. })
        ));
    }

    #[test]
    fn poly_fit_matches_closed_form_regression() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let noise = [0.3, -0.2, 0.1, 0.05, -0.4, 0.25, -0.1, 0.0, 0.15, -0.3];
        let ys: Vec<f64> = xs.iter().zip(noise).map(|(x, e)| 2.0 * x + 1.0 + e).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let a = poly_fit(&xs, &ys, 1).unwrap();
        assert!((a[0] - intercept).abs() < 1e-9);
        assert!((a[1] - slope).abs() < 1e-9);
    }

    #[test]
    fn knn_mean_of_two_nearest() {
        let target = series(Field::Co2, vec![Some(10.0), Some(14.0), Some(100.0), None]);
        let comp = series(Field::Temperature, vec![Some(1.0), Some(1.2), Some(9.0), Some(1.1)]);
        let cfg = KnnConfig { k: 2, time_features: false, ..KnnConfig::default() };
        let out = impute(&target, &ImputeStrategy::Knn(cfg), &[comp]).unwrap();
        assert_eq!(out.values[3], Some(12.0));
    }

    #[test]
    fn knn_requires_companions_and_support() {
        let target = series(Field::Co2, vec![Some(1.0), None]);
        assert_eq!(impute(&target, &ImputeStrategy::knn(1), &[]).unwrap_err(), ImputeError::MissingCompanions);
        let comp = series(Field::Light, vec![Some(1.0), Some(2.0)]);
        assert!(matches!(
            impute(&target, &ImputeStrategy::knn(2), &[comp]),
            Err(ImputeError::InsufficientSupport { .. })
        ));
        let short = series(Field::Light, vec![Some(1.0)]);
        assert_eq!(
            impute(&target, &ImputeStrategy::knn(1), &[short]).unwrap_err(),
            ImputeError::CompanionMismatch(Field::Light)
        );
    }

    #[test]
    fn linear_and_poly_need_support() {
        let s = series(Field::Co2, vec![Some(1.0), None, None]);
        assert!(matches!(impute(&s, &ImputeStrategy::Linear, &[]), Err(ImputeError::InsufficientSupport { .. })));
        let s = series(Field::Co2, vec![Some(1.0), None, Some(2.0)]);
        assert!(matches!(impute(&s, &ImputeStrategy::Poly(2), &[]), Err(ImputeError::InsufficientSupport { .. })));
    }

    #[test]
    fn drop_excises_with_slot_map() {
        let s = series(Field::Co2, vec![Some(1.0), None, Some(3.0), None]);
        let out = impute(&s, &ImputeStrategy::Drop, &[]).unwrap();
        assert_eq!(out.values, vec![Some(1.0), Some(3.0)]);
        assert_eq!(out.slot_map, Some(vec![0, 2]));
        assert_eq!(out.time_of(1), Timestamp(2 * CAD));
    }

    #[test]
    fn zero_fills() {
        let s = series(Field::Co2, vec![Some(5.0), None]);
        assert_eq!(impute(&s, &ImputeStrategy::Zero, &[]).unwrap().values, vec![Some(5.0), Some(0.0)]);
    }

    #[test]
    fn strategy_parsing() {
        for s in ["drop", "zero", "linear", "poly:2", "poly:3", "knn:13", "knn:auto"] {
            assert_eq!(s.parse::<StrategyArg>().unwrap().to_string(), s);
        }
        for s in ["poly:1", "poly:4", "knn:0", "knn:x", "spline"] {
            assert!(s.parse::<StrategyArg>().is_err(), "{s}");
        }
    }

    #[test]
    fn select_k_finds_exact_duplicate_neighbour() {
        // target is a function of a repeating companion, so each masked cell
        // has an identical-feature twin somewhere else
        let n = 200;
        let feat: Vec<Option<f64>> = (0..n).map(|i| Some((i % 10) as f64)).collect();
        let target: Vec<Option<f64>> = (0..n).map(|i| Some(((i % 10) as f64).powi(2) + 3.0)).collect();
        let cfg = KnnConfig { time_features: false, ..KnnConfig::default() };
        let sel = select_k(
            &series(Field::Co2, target),
            &[series(Field::Temperature, feat)],
            0.1,
            &[1, 3, 5],
            11,
            &cfg,
        )
        .unwrap();
        assert_eq!(sel.k_star, 1);
        assert_eq!(sel.mse_per_k[0], (1, 0.0));
        assert_eq!(sel.masked.len(), 20);
    }

    #[test]
    fn select_k_rejects_empty_mask() {
        let s = series(Field::Co2, vec![Some(1.0); 10]);
        let c = series(Field::Light, vec![Some(1.0); 10]);
        assert!(matches!(
            select_k(&s, &[c.clone()], 0.0, &[1], 1, &KnnConfig::default()),
            Err(ImputeError::InsufficientSupport { .. })
        ));
        assert!(select_k(&s, &[c], 0.01, &[1], 1, &KnnConfig::default()).is_ok());
    }

    fn arb_gappy() -> impl Strategy<Value = Vec<Option<f64>>> {
        prop::collection::vec(prop::option::weighted(0.7, -100.0f64..100.0), 6..60)
    }

    proptest! {
        #[test]
        fn present_cells_untouched_and_complete_series_unchanged(values in arb_gappy()) {
            let present = values.iter().filter(|v| v.is_some()).count();
            prop_assume!(present >= 4);
            let s = series(Field::Co2, values.clone());
            let comp = series(Field::Temperature, (0..values.len()).map(|i| Some(i as f64)).collect());
            for strat in [ImputeStrategy::Zero, ImputeStrategy::Linear, ImputeStrategy::Poly(2),
                          ImputeStrategy::Poly(3), ImputeStrategy::knn(2)] {
                let out = impute(&s, &strat, std::slice::from_ref(&comp)).unwrap();
                prop_assert!(out.is_complete());
                for (a, b) in values.iter().zip(&out.values) {
                    if let Some(a) = a {
                        prop_assert_eq!(a.to_bits(), b.unwrap().to_bits());
                    }
                }
                let again = impute(&out, &strat, std::slice::from_ref(&comp)).unwrap();
                prop_assert_eq!(&again, &out);
            }
        }

        #[test]
        fn knn_stays_within_neighbour_range(values in arb_gappy(), k in 1usize..4) {
            let present: Vec<f64> = values.iter().flatten().copied().collect();
            prop_assume!(present.len() >= k);
            let s = series(Field::Co2, values.clone());
            let comp = series(Field::Temperature, (0..values.len()).map(|i| Some((i % 7) as f64)).collect());
            let out = impute(&s, &ImputeStrategy::knn(k), &[comp]).unwrap();
            let (lo, hi) = observed_range(&present);
            for v in out.values.iter().flatten() {
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
            }
        }

        #[test]
        fn interpolation_reproduces_low_degree_polynomials(
            coef in prop::collection::vec(-5.0f64..5.0, 4),
            holes in prop::collection::vec(1usize..38, 1..10),
        ) {
            let n = 40;
            let p = |x: f64| coef[0] + coef[1] * x + coef[2] * x * x + coef[3] * x * x * x;
            let mut values: Vec<Option<f64>> = (0..n).map(|i| Some(p(i as f64))).collect();
            for &h in &holes {
                values[h] = None;
            }
            let s = series(Field::Co2, values);
            let out = impute(&s, &ImputeStrategy::Poly(3), &[]).unwrap().dense();
            let scale = (0..n).map(|i| p(i as f64).abs()).fold(1.0, f64::max);
            for &h in &holes {
                prop_assert!((out[h] - p(h as f64)).abs() <= 1e-9 * scale);
            }
        }
    }
}
