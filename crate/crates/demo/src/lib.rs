//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns a JSON string, so the page
//! needs no bundler or generated type glue beyond `wasm-bindgen --target web`.
//! The `*_json` functions are the same operations for native callers.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use smartcampus::gaps::{align_on, detect_gaps_fcnt, GriddedSeries};
use smartcampus::impute::{impute, select_k, ImputeStrategy, KnnConfig};
use smartcampus::metrics::rmse;
use smartcampus::model::{Field, MILLIS_PER_DAY};
use smartcampus::simnet::{generate, SimConfig, SyntheticDataset};
use wasm_bindgen::prelude::*;

const COMPANIONS: [Field; 4] = [Field::Temperature, Field::Humidity, Field::Light, Field::Motion];
const MAX_DAYS: u32 = 60;

/// One simulated CO2 room.
fn room(seed: u32, days: u32, drop_prob: f64) -> Result<SyntheticDataset, String> {
    if days == 0 || days > MAX_DAYS {
        return Err(format!("days must be between 1 and {MAX_DAYS}"));
    }
    let base = SimConfig::default();
    let cfg = SimConfig {
        n_devices: 1,
        kind_mix: [1.0, 0.0, 0.0],
        end: base.start.offset(i64::from(days) * MILLIS_PER_DAY),
        drop_prob,
        seed: u64::from(seed),
        occupancy_rooms: 1,
        ..base
    };
    generate(&cfg).map_err(|e| e.to_string())
}

fn grid(ds: &SyntheticDataset, field: Field) -> Result<GriddedSeries, String> {
    align_on(&ds.readings, field, ds.start, ds.cadence_millis, ds.n_slots)
        .map(|(s, _)| s)
        .map_err(|e| e.to_string())
}

fn clean_room(seed: u32, days: u32) -> Result<(GriddedSeries, Vec<GriddedSeries>), String> {
    let ds = room(seed, days, 0.0)?;
    let target = grid(&ds, Field::Co2)?;
    let companions = COMPANIONS.iter().map(|&f| grid(&ds, f)).collect::<Result<_, _>>()?;
    Ok((target, companions))
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("demo payloads serialize")
}

#[derive(Serialize)]
struct Curve {
    name: String,
    values: Vec<f64>,
    rmse: f64,
}

#[derive(Serialize)]
struct Curves {
    truth: Vec<f64>,
    masked: Vec<usize>,
    curves: Vec<Curve>,
}

/// Hides `mask_fraction` of a clean CO2 series and fills it with zero,
/// linear, poly:2 and knn:k. RMSE is over the hidden cells only.
pub fn imputation_curves_json(seed: u32, days: u32, mask_fraction: f64, k: usize) -> Result<String, String> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err("mask fraction must lie in (0, 1)".into());
    }
    if k == 0 {
        return Err("k must be positive".into());
    }
    let (clean, companions) = clean_room(seed, days)?;
    let truth = clean.dense();
    let n_mask = ((mask_fraction * truth.len() as f64).ceil() as usize).min(truth.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed) ^ 0x6d61_736b);
    let mut masked = sample(&mut rng, truth.len(), n_mask).into_vec();
    masked.sort_unstable();
    let mut hidden = clean.clone();
    for &i in &masked {
        hidden.values[i] = None;
    }
    let hidden_truth: Vec<f64> = masked.iter().map(|&i| truth[i]).collect();
    let strategies = [
        ImputeStrategy::Zero,
        ImputeStrategy::Linear,
        ImputeStrategy::Poly(2),
        ImputeStrategy::Knn(KnnConfig::with_k(k)),
    ];
    let mut curves = Vec::new();
    for s in strategies {
        let values = impute(&hidden, &s, &companions).map_err(|e| e.to_string())?.dense();
        let guess: Vec<f64> = masked.iter().map(|&i| values[i]).collect();
        let rmse = rmse(&hidden_truth, &guess).map_err(|e| e.to_string())?;
        curves.push(Curve { name: s.to_string(), values, rmse });
    }
    Ok(to_json(&Curves { truth, masked, curves }))
}

#[derive(Serialize)]
struct KCurve {
    k_star: usize,
    mse_per_k: Vec<(usize, f64)>,
}

/// Validation MSE of KNN imputation for k = 1..=max_k on a clean series.
pub fn knn_k_curve_json(seed: u32, days: u32, mask_fraction: f64, max_k: usize) -> Result<String, String> {
    if max_k == 0 {
        return Err("max k must be positive".into());
    }
    let (clean, companions) = clean_room(seed, days)?;
    let candidates: Vec<usize> = (1..=max_k).collect();
    let sel = select_k(&clean, &companions, mask_fraction, &candidates, u64::from(seed), &KnnConfig::default())
        .map_err(|e| e.to_string())?;
    Ok(to_json(&KCurve { k_star: sel.k_star, mse_per_k: sel.mse_per_k }))
}

#[derive(Serialize)]
struct GapRun {
    start: usize,
    len: u32,
}

#[derive(Serialize)]
struct GapComparison {
    n_slots: usize,
    gaps: Vec<GapRun>,
    detected: Vec<usize>,
    truth: Vec<usize>,
    exact: bool,
}

/// Frame-counter gap detection on one simulated device against the slots
/// the simulator actually dropped.
pub fn fcnt_gaps_json(seed: u32, days: u32, drop_prob: f64) -> Result<String, String> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err("drop probability must lie in [0, 1)".into());
    }
    let ds = room(seed, days, drop_prob)?;
    let scan = detect_gaps_fcnt(&ds.packets, ds.cadence_millis).map_err(|e| e.to_string())?;
    let slot_of = |t: smartcampus::model::Timestamp| ((t.millis() - ds.start.millis()) / ds.cadence_millis) as usize;
    let gaps: Vec<GapRun> =
        scan.gaps.iter().map(|g| GapRun { start: slot_of(g.slot_start), len: g.missing_count }).collect();
    let detected: Vec<usize> = scan.gaps.iter().flat_map(|g| g.slots().map(slot_of).collect::<Vec<_>>()).collect();
    let truth: Vec<usize> = ds.truth_mask.values().flatten().map(|&t| slot_of(t)).collect();
    let exact = detected == truth;
    Ok(to_json(&GapComparison { n_slots: ds.n_slots, gaps, detected, truth, exact }))
}

#[wasm_bindgen]
pub fn imputation_curves(seed: u32, days: u32, mask_fraction: f64, k: usize) -> Result<String, JsError> {
    imputation_curves_json(seed, days, mask_fraction, k).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn knn_k_curve(seed: u32, days: u32, mask_fraction: f64, max_k: usize) -> Result<String, JsError> {
    knn_k_curve_json(seed, days, mask_fraction, max_k).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fcnt_gaps(seed: u32, days: u32, drop_prob: f64) -> Result<String, JsError> {
    fcnt_gaps_json(seed, days, drop_prob).map_err(|e| JsError::new(&e))
}
