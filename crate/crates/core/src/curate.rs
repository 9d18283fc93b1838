//! Manifest IO, exclusion rules, grade mapping and patient-level splits.

use crate::error::{invalid, Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

pub const MANIFEST_COLUMNS: [&str; 10] = [
    "patient_id",
    "visit",
    "side",
    "view",
    "image_path",
    "pixel_spacing",
    "kl_grade",
    "jsn_grade",
    "osteo_grade",
    "flags",
];

/// Grades a manifest may carry before mapping.
pub const RAW_GRADES: [f64; 6] = [0.0, 1.0, 1.9, 2.0, 3.0, 4.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            _ => Err(invalid!("side must be `left` or `right`, got `{s}`")),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "LAT")]
    Lat,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Pa => "PA",
            View::Lat => "LAT",
        }
    }
}

impl FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PA" => Ok(View::Pa),
            "LAT" => Ok(View::Lat),
            _ => Err(invalid!("view must be `PA` or `LAT`, got `{s}`")),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One image of one knee at one visit.
#[derive(Clone, Debug, PartialEq)]
pub struct ExamRecord {
    pub patient_id: String,
    pub visit: u32,
    pub side: Side,
    pub view: View,
    pub image_path: String,
    pub pixel_spacing: f64,
    pub kl_grade: f64,
    pub jsn_grade: Option<u8>,
    pub osteo_grade: Option<u8>,
    pub flags: BTreeSet<String>,
}

impl ExamRecord {
    pub fn knee_visit(&self) -> KneeVisit {
        KneeVisit {
            patient_id: self.patient_id.clone(),
            visit: self.visit,
            side: self.side,
        }
    }

    /// The integer grade; fails for 1.9 and anything else off the 0..=4 grid.
    pub fn grade(&self) -> Result<u8> {
        if self.kl_grade.fract() == 0.0 && (0.0..=4.0).contains(&self.kl_grade) {
            Ok(self.kl_grade as u8)
        } else {
            Err(invalid!(
                "kl_grade {} of {} is not an integer grade (run map_grades first)",
                self.kl_grade,
                self.knee_visit()
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct KneeVisit {
    pub patient_id: String,
    pub visit: u32,
    pub side: Side,
}

impl fmt::Display for KneeVisit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/V{}/{}", self.patient_id, self.visit, self.side)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRow {
    patient_id: String,
    visit: String,
    side: String,
    view: String,
    image_path: String,
    pixel_spacing: String,
    kl_grade: String,
    jsn_grade: String,
    osteo_grade: String,
    flags: String,
}

fn parse_row(raw: RawRow) -> Result<ExamRecord> {
    if raw.patient_id.is_empty() {
        return Err(invalid!("empty patient_id"));
    }
    let visit = raw
        .visit
        .parse()
        .map_err(|_| invalid!("visit `{}` is not a non-negative integer", raw.visit))?;
    let pixel_spacing: f64 = raw
        .pixel_spacing
        .parse()
        .map_err(|_| invalid!("pixel_spacing `{}` is not a number", raw.pixel_spacing))?;
    if !(pixel_spacing > 0.0 && pixel_spacing.is_finite()) {
        return Err(invalid!("pixel_spacing must be positive, got {pixel_spacing}"));
    }
    let kl_grade: f64 = raw
        .kl_grade
        .parse()
        .map_err(|_| invalid!("kl_grade `{}` is not a number", raw.kl_grade))?;
    if !RAW_GRADES.contains(&kl_grade) {
        return Err(invalid!("kl_grade {kl_grade} not in {{0, 1, 1.9, 2, 3, 4}}"));
    }
    let opt = |s: &str, name: &str| -> Result<Option<u8>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| invalid!("{name} `{s}` is not a small integer"))
        }
    };
    Ok(ExamRecord {
        patient_id: raw.patient_id,
        visit,
        side: raw.side.parse()?,
        view: raw.view.parse()?,
        image_path: raw.image_path,
        pixel_spacing,
        kl_grade,
        jsn_grade: opt(&raw.jsn_grade, "jsn_grade")?,
        osteo_grade: opt(&raw.osteo_grade, "osteo_grade")?,
        flags: raw
            .flags
            .split(';')
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .map(String::from)
            .collect(),
    })
}

pub fn read_manifest_from<R: Read>(input: R) -> Result<Vec<ExamRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != MANIFEST_COLUMNS {
        return Err(Error::Manifest {
            line: 1,
            message: format!("expected header {}, found {}", MANIFEST_COLUMNS.join(","), header.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RawRow>().enumerate() {
        let line = i + 2;
        let rec = row
            .map_err(|e| Error::Manifest { line, message: e.to_string() })
            .and_then(|r| parse_row(r).map_err(|e| Error::Manifest { line, message: e.to_string() }))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ExamRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest_from(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Manifest { line, message } => Error::Manifest {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_manifest_to<W: Write>(out: W, records: &[ExamRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MANIFEST_COLUMNS)?;
    for r in records {
        let opt = |v: Option<u8>| v.map(|g| g.to_string()).unwrap_or_default();
        w.write_record([
            r.patient_id.clone(),
            r.visit.to_string(),
            r.side.to_string(),
            r.view.to_string(),
            r.image_path.clone(),
            r.pixel_spacing.to_string(),
            r.kl_grade.to_string(),
            opt(r.jsn_grade),
            opt(r.osteo_grade),
            r.flags.iter().cloned().collect::<Vec<_>>().join(";"),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[ExamRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest_to(std::io::BufWriter::new(file), records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// Knee-visit carries a quality or missing-data flag.
    Flagged,
    /// JSN or osteophyte grade absent.
    MissingGrades,
    /// PA or side-matched LAT image absent.
    UnpairedViews,
    /// Extra images of the same knee, visit and view.
    DuplicateImage,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 4] = [
        ExclusionReason::Flagged,
        ExclusionReason::MissingGrades,
        ExclusionReason::UnpairedViews,
        ExclusionReason::DuplicateImage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExclusionReason::Flagged => "flagged",
            ExclusionReason::MissingGrades => "missing_grades",
            ExclusionReason::UnpairedViews => "unpaired_views",
            ExclusionReason::DuplicateImage => "duplicate_image",
        }
    }
}

/// Counts per reason. The first three count knee-visits (each excluded
/// knee-visit is charged to the first matching reason in declaration
/// order); `DuplicateImage` counts dropped image rows.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExclusionReport {
    pub counts: BTreeMap<ExclusionReason, usize>,
    pub input_rows: usize,
    pub output_rows: usize,
    pub input_knee_visits: usize,
    pub output_knee_visits: usize,
}

impl ExclusionReport {
    pub fn count(&self, reason: ExclusionReason) -> usize {
        self.counts.get(&reason).copied().unwrap_or(0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["reason", "count"])?;
        for r in ExclusionReason::ALL {
            w.write_record([r.name().to_string(), self.count(r).to_string()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Drops flagged, incompletely graded and unpaired knee-visits, then keeps
/// one seeded-random image per (knee, visit, view). Surviving rows keep
/// their input order.
pub fn apply_exclusions(records: &[ExamRecord], seed: u64) -> (Vec<ExamRecord>, ExclusionReport) {
    let mut groups: BTreeMap<KneeVisit, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.knee_visit()).or_default().push(i);
    }
    let mut report = ExclusionReport {
        input_rows: records.len(),
        input_knee_visits: groups.len(),
        ..Default::default()
    };
    let mut keep = vec![false; records.len()];
    for (kv, rows) in &groups {
        let reason = if rows.iter().any(|&i| !records[i].flags.is_empty()) {
            Some(ExclusionReason::Flagged)
        } else if rows
            .iter()
            .any(|&i| records[i].jsn_grade.is_none() || records[i].osteo_grade.is_none())
        {
            Some(ExclusionReason::MissingGrades)
        } else if !rows.iter().any(|&i| records[i].view == View::Pa)
            || !rows.iter().any(|&i| records[i].view == View::Lat)
        {
            Some(ExclusionReason::UnpairedViews)
        } else {
            None
        };
        if let Some(r) = reason {
            *report.counts.entry(r).or_default() += 1;
            continue;
        }
        report.output_knee_visits += 1;
        for view in [View::Pa, View::Lat] {
            let same: Vec<usize> = rows.iter().copied().filter(|&i| records[i].view == view).collect();
            let pick = if same.len() == 1 {
                same[0]
            } else {
                let mut r = rng::stream(
                    seed,
                    &[rng::hash_str(&kv.patient_id), kv.visit as u64, kv.side as u64, view as u64],
                );
                *report.counts.entry(ExclusionReason::DuplicateImage).or_default() += same.len() - 1;
                same[r.random_range(0..same.len())]
            };
            keep[pick] = true;
        }
    }
    let out: Vec<ExamRecord> = records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    report.output_rows = out.len();
    (out, report)
}

/// Maps the 1.9 reading-protocol grade to 2; all grades become integers.
pub fn map_grades(records: &[ExamRecord]) -> Result<Vec<ExamRecord>> {
    records
        .iter()
        .map(|r| {
            if !RAW_GRADES.contains(&r.kl_grade) {
                return Err(invalid!("kl_grade {} of {} not in {{0, 1, 1.9, 2, 3, 4}}", r.kl_grade, r.knee_visit()));
            }
            let mut r = r.clone();
            if r.kl_grade == 1.9 {
                r.kl_grade = 2.0;
            }
            Ok(r)
        })
        .collect()
}

/// A curated PA + LAT pair of one knee-visit.
#[derive(Clone, Debug, PartialEq)]
pub struct KneeExam {
    pub knee: KneeVisit,
    pub grade: u8,
    pub pa: ExamRecord,
    pub lat: ExamRecord,
}

/// Groups curated, grade-mapped records into PA + LAT pairs, sorted by knee.
pub fn pair_exams(records: &[ExamRecord]) -> Result<Vec<KneeExam>> {
    let mut groups: BTreeMap<KneeVisit, (Option<&ExamRecord>, Option<&ExamRecord>)> = BTreeMap::new();
    for r in records {
        let slot = groups.entry(r.knee_visit()).or_default();
        let target = match r.view {
            View::Pa => &mut slot.0,
            View::Lat => &mut slot.1,
        };
        if target.is_some() {
            return Err(invalid!("{} has more than one {} image", r.knee_visit(), r.view));
        }
        *target = Some(r);
    }
    groups
        .into_iter()
        .map(|(knee, (pa, lat))| {
            let pa = pa.ok_or_else(|| invalid!("{knee} has no PA image"))?;
            let lat = lat.ok_or_else(|| invalid!("{knee} has no LAT image"))?;
            Ok(KneeExam {
                grade: pa.grade()?,
                knee,
                pa: pa.clone(),
                lat: lat.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Default train / validation / test patient fractions.
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.728, 0.092, 0.180];

pub type SplitAssignment = BTreeMap<String, Split>;

/// Shuffles the distinct patients with a seeded RNG and cuts the list at
/// `round(f_train·n)` and `round((f_train + f_val)·n)`.
pub fn split_by_patient(records: &[ExamRecord], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if records.is_empty() {
        return Err(invalid!("cannot split an empty manifest"));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid!("split fractions {fractions:?} must be in [0, 1] and sum to 1"));
    }
    let mut patients: Vec<&str> = records
        .iter()
        .map(|r| r.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    patients.shuffle(&mut rng::stream(seed, &[0x5911]));
    let n = patients.len();
    let cut1 = ((fractions[0] * n as f64).round() as usize).min(n);
    let cut2 = (((fractions[0] + fractions[1]) * n as f64).round() as usize).clamp(cut1, n);
    Ok(patients
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = if i < cut1 {
                Split::Train
            } else if i < cut2 {
                Split::Validation
            } else {
                Split::Test
            };
            (p.to_string(), s)
        })
        .collect())
}

pub fn split_counts(assignment: &SplitAssignment) -> [usize; 3] {
    let mut c = [0; 3];
    for s in assignment.values() {
        c[*s as usize] += 1;
    }
    c
}
