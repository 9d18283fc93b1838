//! The pipeline stages. Each reads its upstream artifacts from the run
//! directory and writes its outputs plus `report.json` into its own
//! subdirectory.

use crate::config::CenterMode;
use crate::heatmap;
use crate::report::Report;
use crate::run::{in_split, load_knees, patch_samples, Knee, Run};
use anyhow::{bail, Context, Result};
use klgrade::classify::{
    build_balanced_validation, predict_pipeline, train_with_restarts, write_epoch_log, CenterSource, ClassifierEpoch,
    InputMode, KlClassifier, PipelineOutput, NUM_GRADES,
};
use klgrade::curate::{
    apply_exclusions, map_grades, read_manifest, split_by_patient, split_counts, write_manifest, Side, Split, View,
};
use klgrade::detect::{
    detection_ious, detection_metrics, train_detector, DetectionMetrics, DetectorSet, GridDetector, LabeledInput,
    prepare_input,
};
use klgrade::classify::native_to_reference;
use klgrade::evalstats::{
    accuracy, kappa, pairwise_kappa_matrix, reader_study_summary, ConfusionMatrix, RatingsTable, Role, WeightScheme,
};
use klgrade::phantom::{generate_cohort, simulate_reader, SimulatedReaderModel};
use klgrade::preprocess::preprocess_raw;
use klgrade::rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn grade_counts(grades: impl Iterator<Item = u8>) -> [usize; NUM_GRADES] {
    let mut c = [0; NUM_GRADES];
    for g in grades {
        c[g as usize] += 1;
    }
    c
}

/// Table row label of each input mode.
pub fn mode_label(mode: InputMode) -> &'static str {
    match mode {
        InputMode::Lat => "LAT",
        InputMode::Pa => "PA",
        InputMode::Multi => "PA+LAT",
    }
}

// ---------------------------------------------------------------------------

pub fn generate(run: &Run, patients: Option<usize>) -> Result<Report> {
    let mut cfg = run.cfg.phantom.clone();
    cfg.seed = run.cfg.phantom_seed();
    if let Some(n) = patients {
        cfg.n_patients = n;
    }
    let dir = run.cohort_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir).with_context(|| format!("cannot clear {}", dir.display()))?;
    }
    let cohort = generate_cohort(&cfg, cfg.n_patients, cfg.visits_per_patient, &cfg.grade_distribution, &dir)?;
    let mut report = Report::new(
        "generate",
        run.cfg.seeds.base,
        json!({
            "patients": cfg.n_patients,
            "knee_visits": cohort.truth.len(),
            "images": cohort.manifest.len(),
            "grade_counts": grade_counts(cohort.truth.iter().map(|t| t.kl_grade)),
        }),
    );
    report.outputs = vec!["cohort/manifest.csv".into(), "cohort/truth.csv".into(), "cohort/images/".into()];
    report.write(&dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------

pub fn curate(run: &Run) -> Result<Report> {
    let manifest = read_manifest(&run.upstream("cohort/manifest.csv", "generate")?)?;
    let seed = run.cfg.stage_seed("curate");
    let (kept, exclusions) = apply_exclusions(&manifest, seed);
    let mapped = map_grades(&kept)?;
    let splits = split_by_patient(&mapped, run.cfg.curate.split_fractions, seed)?;
    let dir = run.stage_dir("curate")?;
    write_manifest(&dir.join("curated_manifest.csv"), &mapped)?;
    exclusions.write_csv(create(&dir.join("exclusions.csv"))?)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("splits.csv"))?);
    w.write_record(["patient_id", "split"])?;
    for (p, s) in &splits {
        w.write_record([p.as_str(), s.name()])?;
    }
    w.flush()?;

    let knees = load_knees(run)?;
    let mut per_split = serde_json::Map::new();
    for s in Split::ALL {
        let k = in_split(&knees, s);
        per_split.insert(
            s.name().into(),
            json!({
                "knees": k.len(),
                "grade_counts": grade_counts(k.iter().map(|k| k.exam.grade)),
            }),
        );
    }
    let counts = split_counts(&splits);
    let mut report = Report::new(
        "curate",
        run.cfg.seeds.base,
        json!({
            "exclusions": exclusions,
            "grade_1_9_mapped": kept.iter().filter(|r| r.kl_grade == 1.9).count(),
            "patients": {"train": counts[0], "validation": counts[1], "test": counts[2]},
            "knees": per_split,
        }),
    );
    report.outputs = vec![
        "curate/curated_manifest.csv".into(),
        "curate/exclusions.csv".into(),
        "curate/splits.csv".into(),
    ];
    report.write(&dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------

/// Annotated detector inputs of one (view, side) model for the train,
/// validation and test splits. Knees are drawn by a seeded shuffle of each
/// split; a shared model takes both sides with left images mirrored.
fn detector_sets(run: &Run, knees: &[Knee], view: View, side: Side) -> Result<[Vec<LabeledInput>; 3]> {
    let d = &run.cfg.detect;
    let seed = run.cfg.stage_seed("detect");
    let wanted = [d.train_knees, d.val_knees, d.test_knees];
    let size = d.model.input_size;
    let mut out: [Vec<LabeledInput>; 3] = Default::default();
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let mut pool: Vec<&Knee> = knees
            .iter()
            .filter(|k| k.split == split && (d.shared_across_sides || k.exam.knee.side == side))
            .collect();
        pool.shuffle(&mut rng::stream(seed, &[split as u64, view as u64, side as u64]));
        pool.truncate(wanted[i]);
        if pool.is_empty() {
            bail!("no {} knees available to train the {view} {side} detector", split.name());
        }
        out[i] = pool
            .par_iter()
            .map(|k| -> Result<LabeledInput> {
                let raw = run.load_image(k.record(view))?;
                let pre = preprocess_raw(&raw)?;
                let mut center = native_to_reference(k.truth_center(view)?, &raw, &pre);
                let img = if d.shared_across_sides && k.exam.knee.side == Side::Left {
                    center.0 = (pre.width as f64 - 1.0) - center.0;
                    pre.flip_horizontal()
                } else {
                    pre
                };
                Ok(LabeledInput {
                    input: prepare_input(&img, size)?,
                    center,
                })
            })
            .collect::<Result<_>>()?;
    }
    Ok(out)
}

fn key_name(run: &Run, view: View, side: Side) -> String {
    if run.cfg.detect.shared_across_sides {
        format!("{view}_shared")
    } else {
        format!("{view}_{side}")
    }
}

#[derive(Serialize)]
struct DetectorSummary {
    model: String,
    train_knees: usize,
    val_knees: usize,
    best_epoch: usize,
    best_val_mean_iou: f64,
    test: DetectionMetrics,
}

pub fn train_detector_cmd(run: &Run) -> Result<Report> {
    let knees = load_knees(run)?;
    let dir = run.stage_dir("detect")?;
    let seed = run.cfg.stage_seed("detect");
    let mut summaries = Vec::new();
    let mut outputs = Vec::new();
    for (view, side) in run.detector_keys() {
        let name = key_name(run, view, side);
        let [train, val, test] = detector_sets(run, &knees, view, side)?;
        eprintln!("detector {name}: {} train, {} val, {} test knees", train.len(), val.len(), test.len());
        let trained = train_detector(
            run.cfg.detect.model.clone(),
            &train,
            &val,
            rng::mix(seed, &[view as u64, side as u64]),
            |e| eprintln!("  epoch {:>3} loss {:.5} val IoU {:.4} ({:.1}s)", e.epoch, e.loss, e.val_mean_iou, e.seconds),
        )?;
        let file = run.detector_file(view, side);
        trained.model.save(&run.root.join(&file))?;
        let log = format!("detect/epochs_{name}.csv");
        let mut w = create(&run.root.join(&log))?;
        writeln!(w, "epoch,loss,val_mean_iou,seconds")?;
        for e in &trained.history {
            writeln!(w, "{},{:.6},{:.6},{:.3}", e.epoch, e.loss, e.val_mean_iou, e.seconds)?;
        }
        w.flush()?;
        let mut model = trained.model;
        let test_metrics = detection_metrics(&detection_ious(&mut model, &test)?)?;
        summaries.push(DetectorSummary {
            model: name,
            train_knees: train.len(),
            val_knees: val.len(),
            best_epoch: trained.best_epoch,
            best_val_mean_iou: trained.best_val_iou,
            test: test_metrics,
        });
        outputs.push(file);
        outputs.push(log);
    }
    let mut report = Report::new("train-detector", run.cfg.seeds.base, json!({ "detectors": summaries }));
    report.outputs = outputs;
    report.write(&dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------

fn needed_views(modes: &[InputMode]) -> Vec<View> {
    let mut v: Vec<View> = modes.iter().flat_map(|m| m.views().iter().copied()).collect();
    v.sort();
    v.dedup();
    v
}

fn maybe_detectors(run: &Run) -> Result<Option<DetectorSet>> {
    match run.cfg.classify.center_source {
        CenterMode::Detector => Ok(Some(run.load_detectors()?)),
        CenterMode::GroundTruth => Ok(None),
    }
}

pub fn train_classifier_cmd(run: &Run) -> Result<Report> {
    let knees = load_knees(run)?;
    let detectors = maybe_detectors(run)?;
    let modes = &run.cfg.classify.modes;
    let views = needed_views(modes);
    let seed = run.cfg.stage_seed("classify");

    let train_knees = in_split(&knees, Split::Train);
    let val_pool = in_split(&knees, Split::Validation);
    let val_grades: Vec<u8> = val_pool.iter().map(|k| k.exam.grade).collect();
    let val_idx = build_balanced_validation(&val_grades, rng::mix(seed, &[0xBA1]))
        .context("cannot build the balanced validation set")?;
    let val_knees: Vec<&Knee> = val_idx.iter().map(|&i| val_pool[i]).collect();
    eprintln!("classifier data: {} train knees, {} balanced validation knees", train_knees.len(), val_knees.len());
    let train = patch_samples(run, &train_knees, &views, detectors.as_ref())?;
    let val = patch_samples(run, &val_knees, &views, detectors.as_ref())?;

    let dir = run.stage_dir("classify")?;
    let mut per_mode = serde_json::Map::new();
    let mut outputs = Vec::new();
    for &mode in modes {
        let mut logs: Vec<Vec<ClassifierEpoch>> = vec![Vec::new(); run.cfg.classify.model.restarts];
        let outcome = train_with_restarts(
            &run.cfg.classify.model,
            mode,
            &train,
            &val,
            rng::mix(seed, &[mode as u64]),
            |i, e| {
                eprintln!(
                    "{} restart {} epoch {:>3} [{}] loss {:.5} val acc {:.4} ({:.1}s)",
                    mode,
                    i,
                    e.epoch,
                    e.phase.name(),
                    e.loss,
                    e.val_accuracy,
                    e.seconds
                );
                logs[i].push(e.clone());
            },
        )?;
        let file = format!("classify/classifier_{mode}.klpm");
        outcome.model.model.save(&run.root.join(&file))?;
        outputs.push(file);
        for (i, log) in logs.iter().enumerate() {
            let name = format!("classify/epochs_{mode}_r{i}.csv");
            let mut w = create(&run.root.join(&name))?;
            write_epoch_log(&mut w, log)?;
            w.flush()?;
            outputs.push(name);
        }
        per_mode.insert(
            mode.name().into(),
            json!({
                "best_restart": outcome.best_index,
                "best_epoch": outcome.model.best_epoch,
                "best_val_accuracy": outcome.score,
                "restarts": outcome.restarts,
            }),
        );
    }
    let mut report = Report::new(
        "train-classifier",
        run.cfg.seeds.base,
        json!({
            "train_knees": train.len(),
            "val_knees": val.len(),
            "train_grade_counts": grade_counts(train.iter().map(|s| s.grade)),
            "val_grade_counts": grade_counts(val.iter().map(|s| s.grade)),
            "modes": per_mode,
        }),
    );
    report.outputs = outputs;
    report.write(&dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------

/// Runs the full image-to-grade chain on each knee, in parallel, with
/// results in knee order.
fn pipeline_predictions(
    run: &Run,
    classifier: &KlClassifier,
    detectors: Option<&DetectorSet>,
    knees: &[&Knee],
) -> Result<Vec<PipelineOutput>> {
    let views = classifier.mode.views();
    knees
        .par_iter()
        .map_init(
            || (classifier.clone(), detectors.cloned()),
            |(model, dets), knee| -> Result<PipelineOutput> {
                let exam = knee.raw_exam(run, views)?;
                let mut source = match dets.as_mut() {
                    Some(set) => CenterSource::Detectors(set),
                    None => CenterSource::Known {
                        pa: Some(knee.truth_center(View::Pa)?),
                        lat: Some(knee.truth_center(View::Lat)?),
                    },
                };
                Ok(predict_pipeline(model, &exam, &mut source)?)
            },
        )
        .collect()
}

#[derive(Debug, serde::Deserialize, Serialize)]
pub struct PredictionRow {
    pub knee_id: String,
    pub patient_id: String,
    pub visit: u32,
    pub side: Side,
    pub grade: u8,
    pub predicted: u8,
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
}

fn write_predictions(path: &Path, knees: &[&Knee], outs: &[PipelineOutput]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "knee_id", "patient_id", "visit", "side", "grade", "predicted", "p0", "p1", "p2", "p3", "p4", "pa_center_x",
        "pa_center_y", "lat_center_x", "lat_center_y",
    ])?;
    for (k, o) in knees.iter().zip(outs) {
        let mut rec = vec![
            k.id(),
            k.exam.knee.patient_id.clone(),
            k.exam.knee.visit.to_string(),
            k.exam.knee.side.to_string(),
            k.exam.grade.to_string(),
            o.prediction.grade.to_string(),
        ];
        rec.extend(o.prediction.scores.iter().map(|p| format!("{p:.6}")));
        for view in [View::Pa, View::Lat] {
            match o.centers.iter().find(|(v, _)| *v == view) {
                Some((_, c)) => rec.extend([format!("{:.3}", c.0), format!("{:.3}", c.1)]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    rdr.records()
        .map(|r| {
            let r = r?;
            Ok(r.deserialize(Some(&headers)).with_context(|| format!("bad row in {}", path.display()))?)
        })
        .collect()
}

fn load_classifier(run: &Run, mode: InputMode) -> Result<KlClassifier> {
    let p = run.upstream(&format!("classify/classifier_{mode}.klpm"), "train-classifier")?;
    let m = KlClassifier::load(&p)?;
    if m.mode != mode {
        bail!("{} holds a {} model, expected {mode}", p.display(), m.mode);
    }
    Ok(m)
}

pub fn infer(run: &Run) -> Result<Report> {
    let knees = load_knees(run)?;
    let detectors = maybe_detectors(run)?;
    let test = in_split(&knees, Split::Test);
    if test.is_empty() {
        bail!("the test split is empty");
    }
    let dir = run.stage_dir("infer")?;
    let mut per_mode = serde_json::Map::new();
    let mut outputs = Vec::new();
    for &mode in &run.cfg.classify.modes {
        let model = load_classifier(run, mode)?;
        let outs = pipeline_predictions(run, &model, detectors.as_ref(), &test)?;
        let file = format!("infer/predictions_{mode}.csv");
        write_predictions(&run.root.join(&file), &test, &outs)?;
        outputs.push(file);
        let preds: Vec<u8> = outs.iter().map(|o| o.prediction.grade).collect();
        let labels: Vec<u8> = test.iter().map(|k| k.exam.grade).collect();
        per_mode.insert(
            mode.name().into(),
            json!({ "n": preds.len(), "accuracy": accuracy(&preds, &labels)? }),
        );
    }
    let mut report = Report::new(
        "infer",
        run.cfg.seeds.base,
        json!({ "center_source": run.cfg.classify.center_source, "modes": per_mode }),
    );
    report.outputs = outputs;
    report.write(&dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------

fn confusion_outputs(run: &Run, mode: InputMode, cm: &ConfusionMatrix, outputs: &mut Vec<String>) -> Result<()> {
    for normalize in [false, true] {
        let suffix = if normalize { "_normalized" } else { "" };
        let name = format!("eval/confusion_{mode}{suffix}.csv");
        let mut w = create(&run.root.join(&name))?;
        cm.write_csv(&mut w, normalize)?;
        w.flush()?;
        outputs.push(name);
    }
    let norm: Vec<Vec<f64>> = cm.normalized().iter().map(|r| r.to_vec()).collect();
    let labels: Vec<String> = (0..NUM_GRADES).map(|g| format!("KL {g}")).collect();
    let pgm = format!("eval/confusion_{mode}.pgm");
    heatmap::write_pgm(&run.root.join(&pgm), &norm, 0.0, 1.0, run.cfg.eval.heatmap_cell_px)?;
    let svg = format!("eval/confusion_{mode}.svg");
    heatmap::write_svg(
        &run.root.join(&svg),
        &format!("{} confusion (rows: reference, columns: predicted)", mode_label(mode)),
        &labels,
        &labels,
        &norm,
        0.0,
        1.0,
        2,
    )?;
    outputs.push(pgm);
    outputs.push(svg);
    Ok(())
}

pub fn eval(run: &Run) -> Result<Report> {
    let dir = run.stage_dir("eval")?;
    let mut outputs = Vec::new();

    let detection = if run.cfg.classify.center_source == CenterMode::Detector {
        let knees = load_knees(run)?;
        let mut rows = Vec::new();
        for (view, side) in run.detector_keys() {
            let p = run.upstream(&run.detector_file(view, side), "train-detector")?;
            let mut model = GridDetector::load(&p)?;
            let [_, _, test] = detector_sets(run, &knees, view, side)?;
            let m = detection_metrics(&detection_ious(&mut model, &test)?)?;
            rows.push((key_name(run, view, side), m));
        }
        let name = "eval/detection.csv".to_string();
        let mut w = create(&run.root.join(&name))?;
        writeln!(w, "model,n,fraction_iou_at_least_075,mean_iou,std_iou")?;
        for (k, m) in &rows {
            writeln!(w, "{k},{},{:.6},{:.4},{:.4}", m.n, m.fraction_iou_at_least_075, m.mean_iou, m.std_iou)?;
        }
        w.flush()?;
        outputs.push(name);
        json!(rows.iter().map(|(k, m)| json!({"model": k, "metrics": m})).collect::<Vec<_>>())
    } else {
        serde_json::Value::Null
    };

    let mut table = Vec::new();
    for mode in InputMode::ALL {
        if !run.cfg.classify.modes.contains(&mode) {
            continue;
        }
        let rows = read_predictions(&run.upstream(&format!("infer/predictions_{mode}.csv"), "infer")?)?;
        if rows.is_empty() {
            bail!("infer/predictions_{mode}.csv has no rows");
        }
        let preds: Vec<u8> = rows.iter().map(|r| r.predicted).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.grade).collect();
        let cm = ConfusionMatrix::new(&preds, &labels)?;
        confusion_outputs(run, mode, &cm, &mut outputs)?;
        let mut kappas = BTreeMap::new();
        for s in WeightScheme::ALL {
            kappas.insert(s.name(), kappa(&preds, &labels, s)?);
        }
        table.push(json!({
            "input": mode_label(mode),
            "mode": mode.name(),
            "n": rows.len(),
            "accuracy": accuracy(&preds, &labels)?,
            "kappa": kappas,
        }));
    }
    let name = "eval/accuracy.csv".to_string();
    let mut w = create(&run.root.join(&name))?;
    writeln!(w, "input,n,accuracy,kappa_none,kappa_linear,kappa_quadratic")?;
    for r in &table {
        let k = &r["kappa"];
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r["input"].as_str().unwrap_or_default(),
            r["n"],
            r["accuracy"].as_f64().unwrap_or(f64::NAN),
            k["none"].as_f64().unwrap_or(f64::NAN),
            k["linear"].as_f64().unwrap_or(f64::NAN),
            k["quadratic"].as_f64().unwrap_or(f64::NAN),
        )?;
    }
    w.flush()?;
    outputs.push(name);

    let mut report = Report::new(
        "eval",
        run.cfg.seeds.base,
        json!({ "detection": detection, "classification": table }),
    );
    report.outputs = outputs;
    report.write(&dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------

pub fn reader_study(run: &Run) -> Result<Report> {
    let knees = load_knees(run)?;
    let mut test = in_split(&knees, Split::Test);
    let n = run.cfg.eval.reader_cases;
    if n > test.len() {
        bail!("reader study asks for {n} cases but the test split has only {} knees", test.len());
    }
    let seed = run.cfg.stage_seed("reader-study");
    test.shuffle(&mut rng::stream(seed, &[0xCA5E]));
    test.truncate(n);
    test.sort_by(|a, b| a.exam.knee.cmp(&b.exam.knee));

    let model = load_classifier(run, InputMode::Multi)
        .context("the reader study compares readers with the multi-input model")?;
    let detectors = maybe_detectors(run)?;
    let outs = pipeline_predictions(run, &model, detectors.as_ref(), &test)?;

    let mut readers_cfg = run.cfg.phantom.readers.clone();
    if !run.cfg.eval.reader_noise {
        readers_cfg.boundary_probabilities = [0.0; 4];
    }
    let panel = SimulatedReaderModel::panel(&readers_cfg, rng::mix(seed, &[0x4EAD]));
    let mut table = RatingsTable::new();
    for r in &panel {
        table.add_rater(&r.name, Role::Reader)?;
    }
    table.add_rater("model", Role::Model)?;
    table.add_rater("reference", Role::Reference)?;
    for (k, o) in test.iter().zip(&outs) {
        let case = k.id();
        for r in &panel {
            table.insert(&case, &r.name, Role::Reader, simulate_reader(r, &case, k.exam.grade))?;
        }
        table.insert(&case, "model", Role::Model, o.prediction.grade)?;
        table.insert(&case, "reference", Role::Reference, k.exam.grade)?;
    }

    let dir = run.stage_dir("reader_study")?;
    let mut outputs = vec!["reader_study/ratings.csv".to_string()];
    let mut w = create(&dir.join("ratings.csv"))?;
    table.write_csv(&mut w)?;
    w.flush()?;

    let mut schemes = serde_json::Map::new();
    for scheme in WeightScheme::ALL {
        let m = pairwise_kappa_matrix(&table, scheme)?;
        let summary = reader_study_summary(&m)?;
        let stem = format!("reader_study/kappa_{}", scheme.name());
        let mut w = create(&run.root.join(format!("{stem}.csv")))?;
        m.write_csv(&mut w)?;
        w.flush()?;
        heatmap::write_pgm(&run.root.join(format!("{stem}.pgm")), &m.values, 0.0, 1.0, run.cfg.eval.heatmap_cell_px)?;
        heatmap::write_svg(
            &run.root.join(format!("{stem}.svg")),
            &format!("Pairwise kappa ({} weights)", scheme.name()),
            &m.raters,
            &m.raters,
            &m.values,
            0.0,
            1.0,
            3,
        )?;
        outputs.extend(["csv", "pgm", "svg"].map(|e| format!("{stem}.{e}")));
        schemes.insert(scheme.name().into(), json!({ "matrix": m, "summary": summary }));
    }
    let mut report = Report::new(
        "reader-study",
        run.cfg.seeds.base,
        json!({
            "cases": n,
            "reader_labels": table.count_role(Role::Reader),
            "reader_noise": run.cfg.eval.reader_noise,
            "readers": panel,
            "schemes": schemes,
        }),
    );
    report.outputs = outputs;
    report.write(&dir.join("report.json"))?;
    Ok(report)
}
