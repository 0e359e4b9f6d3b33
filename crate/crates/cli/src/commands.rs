//! Subcommand bodies. Each reads its inputs through [`Run`] so the manifest
//! records their digests, and writes every output through it atomically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;
use smartcampus::gaps::{align_on, align_to_grid, detect_gaps_cadence, detect_gaps_fcnt, write_gap_csv, FcntWarning, GriddedSeries};
use smartcampus::impute::{impute as impute_series, select_k_known, ImputeStrategy, KnnConfig, StrategyArg};
use smartcampus::ingest::{parse_lora_csv, parse_sensor_csv, remove_outliers, write_lora_csv, write_sensor_csv, ParseReport};
use smartcampus::metrics::{report as class_report, ConfusionMatrix};
use smartcampus::model::{DeviceId, Field, LoraPacketMeta, SensorReading, Timestamp, MILLIS_PER_MINUTE};
use smartcampus::pipeline::counter::occupancy_fields;
use smartcampus::pipeline::{evaluate_imputation, occupancy_dataset, train_counter, EvalSpec};
use smartcampus::simnet::{generate, render_dataset, TruthFile};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::Run;
use crate::{log, CountArgs, ForecastEvalArgs, GapMethod, GapsArgs, ImputeArgs, IngestArgs, ReportArgs};

const MAX_LOGGED_REJECTIONS: usize = 5;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn pretty_json(v: &impl serde::Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

fn log_report(path: &Path, report: &ParseReport) {
    log(&format!("{}: {} rows ok, {} rejected", path.display(), report.rows_ok, report.rows_rejected));
    for r in report.rejections.iter().take(MAX_LOGGED_REJECTIONS) {
        log(&format!("{}:{}: {}", path.display(), r.line, r.reason));
    }
}

fn read_sensors(run: &mut Run, path: &Path) -> Result<(Vec<SensorReading>, ParseReport)> {
    let bytes = run.read_input(path)?;
    let (rows, report) = parse_sensor_csv(&bytes[..]).map_err(|e| CliError::input(path, e))?;
    log_report(path, &report);
    Ok((rows, report))
}

fn read_lora(run: &mut Run, path: &Path) -> Result<(Vec<LoraPacketMeta>, ParseReport)> {
    let bytes = run.read_input(path)?;
    let (rows, report) = parse_lora_csv(&bytes[..]).map_err(|e| CliError::input(path, e))?;
    log_report(path, &report);
    Ok((rows, report))
}

/// Groups rows by device, each group stably sorted by time.
fn by_device<T: Clone>(rows: &[T], device: impl Fn(&T) -> &DeviceId, ts: impl Fn(&T) -> Timestamp) -> BTreeMap<DeviceId, Vec<T>> {
    let mut map: BTreeMap<DeviceId, Vec<T>> = BTreeMap::new();
    for r in rows {
        map.entry(device(r).clone()).or_default().push(r.clone());
    }
    for v in map.values_mut() {
        v.sort_by_key(&ts);
    }
    map
}

fn parse_field(s: &str) -> Result<Field> {
    s.parse().map_err(|e| CliError::Usage(format!("--field: {e}")))
}

fn parse_device(s: &str) -> Result<DeviceId> {
    s.parse().map_err(|e| CliError::Usage(format!("--device: {e}")))
}

fn cadence_millis(cfg: &RunConfig) -> i64 {
    i64::from(cfg.grid.cadence_minutes) * MILLIS_PER_MINUTE
}

/// The target field on the device's grid plus its companion fields (the
/// device's other measured fields, battery excluded) on the same grid.
fn device_series(readings: &[SensorReading], field: Field, cadence: i64) -> Result<(GriddedSeries, Vec<GriddedSeries>)> {
    let (target, warnings) = align_to_grid(readings, field, cadence).map_err(runtime)?;
    if !warnings.is_empty() {
        log(&format!("{} slots received more than one reading; kept the later", warnings.len()));
    }
    if target.values.iter().all(Option::is_none) {
        return Err(CliError::Usage(format!("device {} does not report {field}", target.device)));
    }
    let companions = match readings.iter().find_map(|r| r.kind().ok()) {
        Some(kind) => occupancy_fields(kind)
            .into_iter()
            .filter(|&f| f != field)
            .map(|f| align_on(readings, f, target.t0, cadence, target.len()).map(|(s, _)| s).map_err(runtime))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok((target, companions))
}

pub fn synth(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let ds = generate(&cfg.sim).map_err(runtime)?;
    for (name, bytes) in render_dataset(&ds) {
        run.write(name, &bytes)?;
    }
    run.seed("sim", cfg.sim.seed);
    run.summary("devices", ds.devices.len());
    run.summary("readings", ds.readings.len());
    run.summary("packets", ds.packets.len());
    run.summary("dropped_slots", ds.truth_mask.values().map(Vec::len).sum::<usize>());
    Ok(())
}

pub fn ingest(args: &IngestArgs, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    if args.lora.is_none() && args.sensors.is_none() {
        return Err(CliError::Usage("ingest needs --lora and/or --sensors".into()));
    }
    let mut report = serde_json::Map::new();
    if let Some(path) = &args.lora {
        let (packets, parse) = read_lora(run, path)?;
        let mut out = Vec::new();
        write_lora_csv(&mut out, &packets)?;
        run.write("lora.csv", &out)?;
        run.summary("lora_rows", parse.rows_ok);
        report.insert("lora".into(), serde_json::to_value(&parse).expect("serializes"));
    }
    if let Some(path) = &args.sensors {
        let (mut readings, parse) = read_sensors(run, path)?;
        let mut outliers = Vec::new();
        if cfg.ingest.remove_outliers {
            let (cleaned, found) = strip_outliers(&readings, cfg.ingest.iqr_factor);
            let emptied = readings.len() - cleaned.len();
            if emptied > 0 {
                log(&format!("{emptied} readings had every value removed and were dropped"));
            }
            readings = cleaned;
            outliers = found;
        }
        let mut out = Vec::new();
        write_sensor_csv(&mut out, &readings)?;
        run.write("sensors.csv", &out)?;
        run.summary("sensor_rows", readings.len());
        report.insert("sensors".into(), serde_json::to_value(&parse).expect("serializes"));
        report.insert("outliers".into(), serde_json::Value::Array(outliers));
    }
    run.write("ingest_report.json", &pretty_json(&report))?;
    Ok(())
}

/// Applies IQR fences per device and field; series too short for fences are
/// left alone.
fn strip_outliers(readings: &[SensorReading], factor: f64) -> (Vec<SensorReading>, Vec<serde_json::Value>) {
    let mut groups: BTreeMap<&DeviceId, Vec<usize>> = BTreeMap::new();
    for (i, r) in readings.iter().enumerate() {
        groups.entry(&r.device).or_default().push(i);
    }
    let mut values: Vec<[Option<f64>; 10]> = readings.iter().map(|r| *r.values()).collect();
    let mut found = Vec::new();
    for (dev, idx) in &groups {
        for field in Field::ALL {
            let column: Vec<Option<f64>> = idx.iter().map(|&i| values[i][field.index()]).collect();
            if column.iter().all(Option::is_none) {
                continue;
            }
            let Ok((cleaned, rep)) = remove_outliers(&column, factor) else { continue };
            for (&i, v) in idx.iter().zip(cleaned) {
                values[i][field.index()] = v;
            }
            if !rep.removed_indices.is_empty() {
                found.push(json!({
                    "deveui": dev.as_str(),
                    "field": field.name(),
                    "lower_fence": rep.lower_fence,
                    "upper_fence": rep.upper_fence,
                    "removed": rep.removed_indices.len(),
                }));
            }
        }
    }
    let kept = readings
        .iter()
        .zip(values)
        .filter_map(|(r, v)| SensorReading::new(r.ts, r.device.clone(), v))
        .collect();
    (kept, found)
}

pub fn gaps(args: &GapsArgs, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let cadence = cadence_millis(cfg);
    let mut all = Vec::new();
    let mut n_warnings = 0usize;
    match args.method {
        GapMethod::Fcnt => {
            let (packets, _) = read_lora(run, &args.input)?;
            for (dev, pk) in by_device(&packets, |p| p.device(), |p| p.ts()) {
                let scan = detect_gaps_fcnt(&pk, cadence).map_err(runtime)?;
                for w in &scan.warnings {
                    let msg = match w {
                        FcntWarning::DuplicateCounter { index } => format!("repeated frame counter at {}", pk[*index].ts()),
                        FcntWarning::CounterAnomaly { index, implied_missing } => {
                            format!("implausible counter jump of {implied_missing} at {}", pk[*index].ts())
                        }
                    };
                    log(&format!("{dev}: {msg}"));
                }
                n_warnings += scan.warnings.len();
                all.extend(scan.gaps);
            }
        }
        GapMethod::Cadence => {
            let field = parse_field(&args.field)?;
            let (readings, _) = read_sensors(run, &args.input)?;
            for (_, rs) in by_device(&readings, |r| &r.device, |r| r.ts) {
                let (series, _) = align_to_grid(&rs, field, cadence).map_err(runtime)?;
                all.extend(detect_gaps_cadence(&series));
            }
            run.param("field", field.name());
        }
    }
    run.param("method", format!("{:?}", args.method).to_lowercase());
    let mut out = Vec::new();
    write_gap_csv(&mut out, &all)?;
    run.write("gaps.csv", &out)?;
    run.summary("gaps", all.len());
    run.summary("missing_slots", all.iter().map(|g| u64::from(g.missing_count)).sum::<u64>());
    run.summary("warnings", n_warnings);
    Ok(())
}

fn select_readings(readings: &[SensorReading], device: Option<&str>, field: Field) -> Result<(DeviceId, Vec<SensorReading>)> {
    let groups = by_device(readings, |r| &r.device, |r| r.ts);
    let id = match device {
        Some(d) => parse_device(d)?,
        None => groups
            .iter()
            .find(|(_, rs)| rs.iter().any(|r| r.get(field).is_some()))
            .map(|(d, _)| d.clone())
            .ok_or_else(|| CliError::Usage(format!("no device reports {field}")))?,
    };
    let rows = groups.get(&id).cloned().ok_or_else(|| CliError::Usage(format!("device {id} not found in input")))?;
    Ok((id, rows))
}

pub fn impute(args: &ImputeArgs, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let field = parse_field(&args.field)?;
    let strategy_arg: StrategyArg = args.strategy.parse().map_err(|e| CliError::Usage(format!("--strategy: {e}")))?;
    let (readings, _) = read_sensors(run, &args.input)?;
    let n_devices = by_device(&readings, |r| &r.device, |r| r.ts).len();
    if args.device.is_none() && n_devices > 1 {
        return Err(CliError::Usage(format!("input holds {n_devices} devices; pick one with --device")));
    }
    let (device, rows) = select_readings(&readings, args.device.as_deref(), field)?;
    let (target, companions) = device_series(&rows, field, cadence_millis(cfg))?;
    let strategy = match strategy_arg {
        StrategyArg::Fixed(ImputeStrategy::Knn(c)) => ImputeStrategy::Knn(KnnConfig { k: c.k, ..cfg.knn.clone() }),
        StrategyArg::Fixed(s) => s,
        StrategyArg::KnnAuto => {
            let sel = select_k_known(&target, &companions, cfg.eval.mask_fraction, &cfg.eval.k_candidates, cfg.eval.seed, &cfg.knn)?;
            run.seed("eval", cfg.eval.seed);
            run.summary("k_star", sel.k_star);
            run.summary("mse_per_k", &sel.mse_per_k);
            ImputeStrategy::Knn(KnnConfig { k: sel.k_star, ..cfg.knn.clone() })
        }
    };
    let filled = impute_series(&target, &strategy, &companions)?;
    let mut csv = String::from("time,deveui,field,value,imputed\n");
    for (i, v) in filled.values.iter().enumerate() {
        let v = v.expect("imputed series is complete");
        let imputed = u8::from(target.values[filled.slot(i)].is_none());
        writeln!(csv, "{},{device},{field},{v},{imputed}", filled.time_of(i)).unwrap();
    }
    run.write("grid.csv", csv.as_bytes())?;
    run.param("device", device.as_str());
    run.param("field", field.name());
    run.param("strategy", &args.strategy);
    run.summary("resolved", strategy.to_string());
    run.summary("slots", target.len());
    run.summary("missing", target.missing_count());
    Ok(())
}

/// Longest run `[a, b)` where the target and every companion are present.
fn longest_complete(target: &GriddedSeries, companions: &[GriddedSeries]) -> (usize, usize) {
    let ok = |i: usize| target.values[i].is_some() && companions.iter().all(|c| c.values[i].is_some());
    let (mut best, mut start) = ((0, 0), 0);
    for i in 0..=target.len() {
        if i == target.len() || !ok(i) {
            if i - start > best.1 - best.0 {
                best = (start, i);
            }
            start = i + 1;
        }
    }
    best
}

pub fn forecast_eval(args: &ForecastEvalArgs, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let field = parse_field(&args.field)?;
    let (readings, _) = read_sensors(run, &args.input)?;
    let (device, rows) = select_readings(&readings, args.device.as_deref(), field)?;
    let (target, companions) = device_series(&rows, field, cadence_millis(cfg))?;
    let (a, mut b) = longest_complete(&target, &companions);
    if let Some(m) = args.max_slots {
        b = b.min(a + m);
    }
    if b == a {
        return Err(CliError::Runtime(format!("device {device} has no slot with {field} and all companions present")));
    }
    if b - a < target.len() {
        log(&format!("evaluating the complete stretch of {} slots starting {}", b - a, target.time_of(a)));
    }
    let clean = target.window(a, b);
    let comps: Vec<GriddedSeries> = companions.iter().map(|c| c.window(a, b)).collect();
    let spec = EvalSpec {
        strategies: cfg.eval.parsed_strategies()?,
        mask_fraction: cfg.eval.mask_fraction,
        knn: cfg.knn.clone(),
        k_candidates: cfg.eval.k_candidates.clone(),
        seed: cfg.eval.seed,
    };
    let eval = evaluate_imputation(&clean, &comps, &spec, &cfg.forecast)?;

    let mut rmse = String::from("strategy,rmse\n");
    let mut curves = String::from("strategy,epoch,train_loss,val_loss\n");
    let mut overlay = String::from("strategy,slot,truth,predicted\n");
    let mut resolved = BTreeMap::new();
    for r in &eval.results {
        writeln!(rmse, "{},{}", r.strategy, r.rmse).unwrap();
        for e in &r.history {
            writeln!(curves, "{},{},{},{}", r.strategy, e.epoch, e.train_loss, e.val_loss).unwrap();
        }
        for (slot, truth, pred) in &r.overlay {
            writeln!(overlay, "{},{slot},{truth},{pred}", r.strategy).unwrap();
        }
        resolved.insert(r.strategy.clone(), r.resolved.clone());
        log(&format!("{} ({}): rmse {:.4}", r.strategy, r.resolved, r.rmse));
    }
    run.write("rmse_by_strategy.csv", rmse.as_bytes())?;
    run.write("loss_curves.csv", curves.as_bytes())?;
    run.write("forecast_overlay.csv", overlay.as_bytes())?;
    run.seed("eval", cfg.eval.seed);
    run.seed("forecast", cfg.forecast.seed);
    run.param("device", device.as_str());
    run.param("field", field.name());
    run.param("max_slots", args.max_slots);
    run.summary("stretch_start", clean.t0);
    run.summary("slots", clean.len());
    run.summary("masked_cells", eval.mask.len());
    run.summary("test_start", eval.test_start);
    run.summary("resolved", resolved);
    Ok(())
}

type Labels = BTreeMap<DeviceId, Vec<(Timestamp, u32)>>;

/// `truth.json` from `synth`, or a CSV with header `time,deveui,people`.
fn read_labels(run: &mut Run, path: &Path) -> Result<Labels> {
    let bytes = run.read_input(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::input(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        return TruthFile::from_json(&text).and_then(|t| t.occupancy()).map_err(|e| CliError::input(path, e));
    }
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "time,deveui,people")) => {}
        _ => return Err(CliError::input(path, "expected header `time,deveui,people`")),
    }
    let mut labels = Labels::new();
    for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let at = |msg: String| CliError::input(path, format!("line {}: {msg}", i + 1));
        let cells: Vec<&str> = line.split(',').collect();
        let [ts, dev, n] = cells[..] else { return Err(at(format!("expected 3 columns, found {}", cells.len()))) };
        let ts = Timestamp::parse_joined(ts).map_err(|e| at(e.to_string()))?;
        let dev = DeviceId::new(dev).map_err(|e| at(e.to_string()))?;
        let n: u32 = n.parse().map_err(|_| at(format!("bad head count `{n}`")))?;
        labels.entry(dev).or_default().push((ts, n));
    }
    Ok(labels)
}

pub fn count(args: &CountArgs, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let (readings, _) = read_sensors(run, &args.sensors)?;
    let labels = read_labels(run, &args.labels)?;
    let ds = occupancy_dataset(&readings, &labels, args.max_rows)?;
    log(&format!("{} labelled rows over {} classes", ds.len(), ds.classes.len()));
    let trained = train_counter(&ds, &cfg.counter)?;

    let mut history = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
    for e in &trained.history {
        writeln!(history, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.train_acc, e.val_acc).unwrap();
    }
    let model = trained.checkpoint().to_json().map_err(runtime)?;
    run.write("report.json", trained.report.to_json().as_bytes())?;
    run.write("confusion.csv", trained.confusion.to_csv().as_bytes())?;
    run.write("history.csv", history.as_bytes())?;
    run.write("model.json", model.as_bytes())?;
    run.seed("counter", cfg.counter.seed);
    run.param("max_rows", args.max_rows);
    run.summary("rows", ds.len());
    run.summary("classes", &ds.classes);
    run.summary("features", &ds.feature_names);
    run.summary("split_sizes", trained.split_sizes);
    run.summary("best_epoch", trained.best_epoch);
    run.summary("test_accuracy", trained.report.accuracy);
    print!("{}", trained.report);
    Ok(())
}

pub fn report(args: &ReportArgs, run: &mut Run) -> Result<()> {
    let bytes = run.read_input(&args.input)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::input(&args.input, e))?;
    let cm = ConfusionMatrix::from_csv(&text).map_err(|e| CliError::input(&args.input, e))?;
    let rep = class_report(&cm).map_err(|e| CliError::input(&args.input, e))?;
    let table = rep.to_string();
    run.write("report.txt", table.as_bytes())?;
    run.write("report.json", rep.to_json().as_bytes())?;
    run.summary("accuracy", rep.accuracy);
    run.summary("total", rep.total);
    print!("{table}");
    Ok(())
}
