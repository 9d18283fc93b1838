//! Run directory layout and the data loading shared by the stages.
//!
//! ```text
//! <output>/config.json          verbatim copy of the config
//! <output>/cohort/              generate: images/, manifest.csv, truth.csv
//! <output>/curate/              curated_manifest.csv, splits.csv, exclusions.csv
//! <output>/detect/              detector_<VIEW>_<side>.klpm, logs
//! <output>/classify/            classifier_<mode>.klpm, logs
//! <output>/infer/               predictions_<mode>.csv
//! <output>/eval/                tables, confusion matrices, heat maps
//! <output>/reader_study/        ratings, kappa matrices, heat maps
//! ```
//! Every stage also writes `report.json` into its directory.

use crate::config::{CenterMode, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use klgrade::classify::{extract_patches, CenterSource, PatchSample, RawExam};
use klgrade::curate::{pair_exams, read_manifest, ExamRecord, KneeExam, KneeVisit, Side, Split, View};
use klgrade::detect::{DetectorSet, GridDetector};
use klgrade::phantom::{read_truth, TruthRow};
use klgrade::preprocess::{read_pgm, Raster16};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
}

impl Run {
    /// Applies the command-line overrides, creates the run directory and
    /// echoes the config text into it.
    pub fn open(mut cfg: RunConfig, config_text: &str, seed: Option<u64>, output: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            cfg.seeds.base = s;
        }
        if let Some(o) = output {
            cfg.output_dir = o;
        }
        let root = cfg.output_dir.clone();
        std::fs::create_dir_all(&root).with_context(|| format!("cannot create {}", root.display()))?;
        std::fs::write(root.join("config.json"), config_text).context("cannot echo the config")?;
        Ok(Run { cfg, root })
    }

    pub fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let d = self.root.join(stage);
        std::fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
        Ok(d)
    }

    /// Path of an upstream artifact, which must already exist.
    pub fn upstream(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if !p.exists() {
            bail!("missing upstream artifact {} (run `klgrade {producer}` first)", p.display());
        }
        Ok(p)
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn load_image(&self, rec: &ExamRecord) -> Result<Raster16> {
        let p = self.cohort_dir().join(&rec.image_path);
        Ok(read_pgm(&p, rec.pixel_spacing)?)
    }

    pub fn detector_file(&self, view: View, side: Side) -> String {
        if self.cfg.detect.shared_across_sides {
            format!("detect/detector_{view}_shared.klpm")
        } else {
            format!("detect/detector_{view}_{side}.klpm")
        }
    }

    pub fn detector_keys(&self) -> Vec<(View, Side)> {
        let sides: &[Side] = if self.cfg.detect.shared_across_sides { &[Side::Right] } else { &[Side::Left, Side::Right] };
        [View::Pa, View::Lat]
            .iter()
            .flat_map(|&v| sides.iter().map(move |&s| (v, s)))
            .collect()
    }

    pub fn load_detectors(&self) -> Result<DetectorSet> {
        let mut set = DetectorSet {
            shared: self.cfg.detect.shared_across_sides,
            models: BTreeMap::new(),
        };
        for (view, side) in self.detector_keys() {
            let p = self.upstream(&self.detector_file(view, side), "train-detector")?;
            set.models.insert((view, side), GridDetector::load(&p)?);
        }
        Ok(set)
    }
}

/// A curated knee with its split and (phantom) ground truth.
#[derive(Clone, Debug)]
pub struct Knee {
    pub exam: KneeExam,
    pub split: Split,
    pub truth: Option<TruthRow>,
}

impl Knee {
    pub fn id(&self) -> String {
        self.exam.knee.to_string()
    }

    pub fn record(&self, view: View) -> &ExamRecord {
        match view {
            View::Pa => &self.exam.pa,
            View::Lat => &self.exam.lat,
        }
    }

    /// Annotated joint center in native pixels.
    pub fn truth_center(&self, view: View) -> Result<(f64, f64)> {
        let t = self
            .truth
            .as_ref()
            .ok_or_else(|| anyhow!("knee {} has no annotated center in truth.csv", self.id()))?;
        Ok(match view {
            View::Pa => (t.pa_center_x, t.pa_center_y),
            View::Lat => (t.lat_center_x, t.lat_center_y),
        })
    }

    pub fn raw_exam(&self, run: &Run, views: &[View]) -> Result<RawExam> {
        let load = |v: View| -> Result<Option<Raster16>> {
            if views.contains(&v) {
                Ok(Some(run.load_image(self.record(v))?))
            } else {
                Ok(None)
            }
        };
        Ok(RawExam {
            id: self.id(),
            side: self.exam.knee.side,
            pa: load(View::Pa)?,
            lat: load(View::Lat)?,
        })
    }
}

pub fn read_splits(path: &Path) -> Result<BTreeMap<String, Split>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let (pid, split): (String, Split) = row.with_context(|| format!("bad row in {}", path.display()))?;
        out.insert(pid, split);
    }
    Ok(out)
}

/// Curated knees in knee order, each tagged with its split.
pub fn load_knees(run: &Run) -> Result<Vec<Knee>> {
    let manifest = read_manifest(&run.upstream("curate/curated_manifest.csv", "curate")?)?;
    let splits = read_splits(&run.upstream("curate/splits.csv", "curate")?)?;
    let truth_path = run.cohort_dir().join("truth.csv");
    let truth: BTreeMap<KneeVisit, TruthRow> = if truth_path.exists() {
        read_truth(&truth_path)?
            .into_iter()
            .map(|t| {
                (
                    KneeVisit {
                        patient_id: t.patient_id.clone(),
                        visit: t.visit,
                        side: t.side,
                    },
                    t,
                )
            })
            .collect()
    } else {
        BTreeMap::new()
    };
    pair_exams(&manifest)?
        .into_iter()
        .map(|exam| {
            let split = *splits
                .get(&exam.knee.patient_id)
                .ok_or_else(|| anyhow!("patient {} has no split assignment", exam.knee.patient_id))?;
            let truth = truth.get(&exam.knee).cloned();
            Ok(Knee { exam, split, truth })
        })
        .collect()
}

pub fn in_split(knees: &[Knee], split: Split) -> Vec<&Knee> {
    knees.iter().filter(|k| k.split == split).collect()
}

/// Patches of every knee for the given views, with crop centers from the
/// detectors or the annotations. Runs on the rayon pool; output order
/// follows `knees`.
pub fn patch_samples(run: &Run, knees: &[&Knee], views: &[View], detectors: Option<&DetectorSet>) -> Result<Vec<PatchSample>> {
    let size = run.cfg.classify.model.input_size;
    let mode = run.cfg.classify.center_source;
    knees
        .par_iter()
        .map_init(
            || detectors.cloned(),
            |dets, knee| -> Result<PatchSample> {
                let exam = knee.raw_exam(run, views)?;
                let mut source = match (mode, dets.as_mut()) {
                    (CenterMode::Detector, Some(set)) => CenterSource::Detectors(set),
                    (CenterMode::Detector, None) => bail!("detector centers requested but no detectors loaded"),
                    (CenterMode::GroundTruth, _) => CenterSource::Known {
                        pa: Some(knee.truth_center(View::Pa)?),
                        lat: Some(knee.truth_center(View::Lat)?),
                    },
                };
                let (sample, _) = extract_patches(&exam, views, &mut source, size, knee.exam.grade)?;
                Ok(sample)
            },
        )
        .collect()
}

/// Configures the global rayon pool from `KLP_THREADS` (default 1).
pub fn init_threads() -> Result<usize> {
    let n = match std::env::var("KLP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("KLP_THREADS must be a positive integer, got `{v}`"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot configure the thread pool")?;
    Ok(n)
}
