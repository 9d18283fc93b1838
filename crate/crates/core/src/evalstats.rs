//! Accuracy, confusion matrices, weighted kappa and the multi-reader study.

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

/// Number of KL grades.
pub const K: usize = 5;

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    check_pair(predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_pair(a: &[u8], b: &[u8]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("empty rating vector"));
    }
    if a.len() != b.len() {
        return Err(invalid!("rating vectors differ in length: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

fn check_grades(v: &[u8]) -> Result<()> {
    match v.iter().find(|&&g| g as usize >= K) {
        Some(g) => Err(invalid!("grade {g} outside 0..{}", K - 1)),
        None => Ok(()),
    }
}

/// Rows are labels (or the first rater), columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn new(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        check_pair(predictions, labels)?;
        check_grades(predictions)?;
        check_grades(labels)?;
        let mut counts = [[0u64; K]; K];
        for (&p, &l) in predictions.iter().zip(labels) {
            counts[l as usize][p as usize] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn normalized(&self) -> [[f64; K]; K] {
        let mut out = [[0.0; K]; K];
        for (row, counts) in out.iter_mut().zip(&self.counts) {
            let s: u64 = counts.iter().sum();
            if s > 0 {
                for (o, &c) in row.iter_mut().zip(counts) {
                    *o = c as f64 / s as f64;
                }
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W, normalize: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string()];
        header.extend((0..K).map(|g| format!("pred_{g}")));
        w.write_record(&header)?;
        let norm = self.normalized();
        for l in 0..K {
            let mut rec = vec![l.to_string()];
            if normalize {
                rec.extend(norm[l].iter().map(|v| format!("{v:.6}")));
            } else {
                rec.extend(self.counts[l].iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// `confusion(predictions, labels, normalize)`: raw counts or row-normalized
/// proportions as a dense K×K table.
pub fn confusion(predictions: &[u8], labels: &[u8], normalize: bool) -> Result<Vec<Vec<f64>>> {
    let m = ConfusionMatrix::new(predictions, labels)?;
    Ok(if normalize {
        m.normalized().iter().map(|r| r.to_vec()).collect()
    } else {
        m.counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    None,
    Linear,
    Quadratic,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 3] = [WeightScheme::None, WeightScheme::Linear, WeightScheme::Quadratic];

    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::None => "none",
            WeightScheme::Linear => "linear",
            WeightScheme::Quadratic => "quadratic",
        }
    }

    /// Weight numerator; the common denominator (1, K−1 or (K−1)²) cancels
    /// in the kappa ratio.
    fn numerator(self, i: usize, j: usize) -> u64 {
        let d = i.abs_diff(j) as u64;
        match self {
            WeightScheme::None => (d != 0) as u64,
            WeightScheme::Linear => d,
            WeightScheme::Quadratic => d * d,
        }
    }

    pub fn denominator(self) -> u64 {
        let m = (K - 1) as u64;
        match self {
            WeightScheme::None => 1,
            WeightScheme::Linear => m,
            WeightScheme::Quadratic => m * m,
        }
    }

    /// Normalized weight w_ij in [0, 1].
    pub fn weight(self, i: usize, j: usize) -> f64 {
        self.numerator(i, j) as f64 / self.denominator() as f64
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WeightScheme::None),
            "linear" => Ok(WeightScheme::Linear),
            "quadratic" => Ok(WeightScheme::Quadratic),
            _ => Err(invalid!("unknown weight scheme `{s}`")),
        }
    }
}

/// Weighted Cohen's kappa over the fixed 0..=4 grade scale.
///
/// Computed from integer counts as `1 − n·Σw·O / Σw·r·c`, so it is exactly
/// symmetric and order invariant. Identical constant ratings give 1.
pub fn kappa(a: &[u8], b: &[u8], scheme: WeightScheme) -> Result<f64> {
    check_pair(a, b)?;
    check_grades(a)?;
    check_grades(b)?;
    let mut obs = [[0u64; K]; K];
    let mut rows = [0u64; K];
    let mut cols = [0u64; K];
    for (&x, &y) in a.iter().zip(b) {
        obs[x as usize][y as usize] += 1;
        rows[x as usize] += 1;
        cols[y as usize] += 1;
    }
    let n = a.len() as u128;
    let mut observed: u128 = 0;
    let mut expected: u128 = 0;
    for i in 0..K {
        for j in 0..K {
            let w = scheme.numerator(i, j) as u128;
            observed += w * obs[i][j] as u128;
            expected += w * rows[i] as u128 * cols[j] as u128;
        }
    }
    if expected == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n * observed) as f64 / expected as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reader,
    Reference,
    Model,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Reader => "reader",
            Role::Reference => "reference",
            Role::Model => "model",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reader" => Ok(Role::Reader),
            "reference" => Ok(Role::Reference),
            "model" => Ok(Role::Model),
            _ => Err(invalid!("unknown rater role `{s}`")),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RatingRow {
    case_id: String,
    rater_id: String,
    role: String,
    grade: u8,
}

/// Cases × raters grade table. Case and rater order follow first appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatingsTable {
    cases: Vec<String>,
    raters: Vec<(String, Role)>,
    case_index: HashMap<String, usize>,
    rater_index: HashMap<String, usize>,
    cells: BTreeMap<(usize, usize), u8>,
}

impl RatingsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_rater(&mut self, rater: &str, role: Role) -> Result<usize> {
        if let Some(&r) = self.rater_index.get(rater) {
            if self.raters[r].1 != role {
                return Err(invalid!(
                    "rater `{rater}` listed as both {} and {}",
                    self.raters[r].1.name(),
                    role.name()
                ));
            }
            return Ok(r);
        }
        self.raters.push((rater.to_string(), role));
        self.rater_index.insert(rater.to_string(), self.raters.len() - 1);
        Ok(self.raters.len() - 1)
    }

    pub fn insert(&mut self, case: &str, rater: &str, role: Role, grade: u8) -> Result<()> {
        if grade as usize >= K {
            return Err(invalid!("grade {grade} for case `{case}` outside 0..{}", K - 1));
        }
        let r = self.add_rater(rater, role)?;
        let c = match self.case_index.get(case) {
            Some(&c) => c,
            None => {
                self.cases.push(case.to_string());
                self.case_index.insert(case.to_string(), self.cases.len() - 1);
                self.cases.len() - 1
            }
        };
        if self.cells.insert((c, r), grade).is_some() {
            return Err(invalid!("duplicate rating for case `{case}` by `{rater}`"));
        }
        Ok(())
    }

    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut t = RatingsTable::new();
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["case_id", "rater_id", "role", "grade"] {
            return Err(Error::Manifest {
                line: 1,
                message: format!("expected header case_id,rater_id,role,grade, found {}", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        for (i, row) in rdr.deserialize::<RatingRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Manifest { line, message: e.to_string() })?;
            let role = row.role.parse().map_err(|e: Error| Error::Manifest { line, message: e.to_string() })?;
            t.insert(&row.case_id, &row.rater_id, role, row.grade)
                .map_err(|e| Error::Manifest { line, message: e.to_string() })?;
        }
        Ok(t)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (&(c, r), &grade) in &self.cells {
            w.serialize(RatingRow {
                case_id: self.cases[c].clone(),
                rater_id: self.raters[r].0.clone(),
                role: self.raters[r].1.name().to_string(),
                grade,
            })?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn cases(&self) -> &[String] {
        &self.cases
    }

    pub fn raters(&self) -> &[(String, Role)] {
        &self.raters
    }

    pub fn num_ratings(&self) -> usize {
        self.cells.len()
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.cells.keys().filter(|(_, r)| self.raters[*r].1 == role).count()
    }

    pub fn get(&self, case: &str, rater: &str) -> Option<u8> {
        let c = *self.case_index.get(case)?;
        let r = *self.rater_index.get(rater)?;
        self.cells.get(&(c, r)).copied()
    }

    /// Every (case, rater) pair without a grade.
    pub fn missing_cells(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (c, case) in self.cases.iter().enumerate() {
            for (r, (rater, _)) in self.raters.iter().enumerate() {
                if !self.cells.contains_key(&(c, r)) {
                    out.push((case.clone(), rater.clone()));
                }
            }
        }
        out
    }

    /// One rater's grades in case order; the table must be complete.
    pub fn column(&self, rater: usize) -> Vec<u8> {
        (0..self.cases.len()).map(|c| self.cells[&(c, rater)]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KappaMatrix {
    pub scheme: WeightScheme,
    pub raters: Vec<String>,
    pub roles: Vec<Role>,
    pub values: Vec<Vec<f64>>,
}

impl KappaMatrix {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["rater".to_string()];
        header.extend(self.raters.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.raters.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

pub fn pairwise_kappa_matrix(table: &RatingsTable, scheme: WeightScheme) -> Result<KappaMatrix> {
    if table.cases.is_empty() {
        return Err(invalid!("ratings table has no cases"));
    }
    let missing = table.missing_cells();
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(20).map(|(c, r)| format!("({c}, {r})")).collect();
        return Err(invalid!(
            "ratings table incomplete, {} missing cells: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 20 { ", ..." } else { "" }
        ));
    }
    let columns: Vec<Vec<u8>> = (0..table.raters.len()).map(|r| table.column(r)).collect();
    let m = columns.len();
    let mut values = vec![vec![1.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let k = kappa(&columns[i], &columns[j], scheme)?;
            values[i][j] = k;
            values[j][i] = k;
        }
    }
    Ok(KappaMatrix {
        scheme,
        raters: table.raters.iter().map(|(n, _)| n.clone()).collect(),
        roles: table.raters.iter().map(|(_, r)| *r).collect(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReaderStudySummary {
    pub mean_reader_pairs: f64,
    pub mean_model_vs_readers: f64,
    pub mean_readers_vs_reference: f64,
    pub reader_pairs: usize,
    pub model_reader_entries: usize,
    pub reader_reference_entries: usize,
}

pub fn reader_study_summary(matrix: &KappaMatrix) -> Result<ReaderStudySummary> {
    let idx = |role| -> Vec<usize> { (0..matrix.roles.len()).filter(|&i| matrix.roles[i] == role).collect() };
    let readers = idx(Role::Reader);
    let models = idx(Role::Model);
    let refs = idx(Role::Reference);
    if readers.len() < 2 {
        return Err(invalid!("reader study needs at least two raters with role `reader`"));
    }
    if models.is_empty() {
        return Err(invalid!("reader study needs a rater with role `model`"));
    }
    if refs.is_empty() {
        return Err(invalid!("reader study needs a rater with role `reference`"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut pairs = Vec::new();
    for (a, &i) in readers.iter().enumerate() {
        for &j in &readers[a + 1..] {
            pairs.push(matrix.values[i][j]);
        }
    }
    let cross = |others: &[usize]| -> Vec<f64> {
        others
            .iter()
            .flat_map(|&o| readers.iter().map(move |&r| matrix.values[o][r]))
            .collect()
    };
    let mr = cross(&models);
    let rr = cross(&refs);
    Ok(ReaderStudySummary {
        mean_reader_pairs: mean(&pairs),
        mean_model_vs_readers: mean(&mr),
        mean_readers_vs_reference: mean(&rr),
        reader_pairs: pairs.len(),
        model_reader_entries: mr.len(),
        reader_reference_entries: rr.len(),
    })
}
