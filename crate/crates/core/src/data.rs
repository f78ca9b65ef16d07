//! Longitudinal data container, CSV ingestion and the subject-weighted
//! empirical inner product.
//!
//! Observations are stored contiguously, subject by subject:
//! `offsets[i]..offsets[i + 1]` indexes subject `i`'s observations in
//! `times`, `y` and each covariate row. Covariates are stored covariate-major
//! (`x[k * N + obs]`) because screening sweeps one covariate at a time.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalDataset {
    subject_ids: Vec<String>,
    offsets: Vec<usize>,
    times: Vec<f64>,
    y: Vec<f64>,
    x: Vec<f64>,
    names: Vec<String>,
}

/// One subject's observations, used when building a dataset by hand.
#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// `p` rows, one per covariate, each of length `m_i`.
    pub covariates: Vec<Vec<f64>>,
}

impl LongitudinalDataset {
    /// Builds a dataset, validating every invariant. Within-subject order is
    /// kept as given; callers that need sorting do it before this point.
    pub fn new(names: Vec<String>, subjects: Vec<SubjectRecord>) -> Result<Self> {
        let p = names.len();
        let mut seen = HashMap::new();
        for (k, name) in names.iter().enumerate() {
            if let Some(prev) = seen.insert(name.as_str(), k) {
                return Err(Error::InvalidInput(format!("covariate label {name:?} used for columns {prev} and {k}")));
            }
        }
        if subjects.is_empty() {
            return Err(Error::InvalidInput("dataset has no subjects".into()));
        }
        let total: usize = subjects.iter().map(|s| s.times.len()).sum();
        let mut offsets = Vec::with_capacity(subjects.len() + 1);
        let mut times = Vec::with_capacity(total);
        let mut y = Vec::with_capacity(total);
        let mut x = vec![0.0; p * total];
        let mut ids = Vec::with_capacity(subjects.len());
        offsets.push(0);
        for s in subjects {
            let m = s.times.len();
            if m == 0 {
                return Err(Error::InvalidInput(format!("subject {:?} has no observations", s.id)));
            }
            if s.y.len() != m {
                return Err(Error::Shape(format!("subject {:?}: {} responses for {} times", s.id, s.y.len(), m)));
            }
            if s.covariates.len() != p {
                return Err(Error::Shape(format!(
                    "subject {:?}: {} covariate rows, expected {p}",
                    s.id,
                    s.covariates.len()
                )));
            }
            if let Some(&t) = s.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::InvalidInput(format!("subject {:?}: time {t} outside [0, 1]", s.id)));
            }
            let start = times.len();
            for (k, row) in s.covariates.iter().enumerate() {
                if row.len() != m {
                    return Err(Error::Shape(format!(
                        "subject {:?}: covariate {k} has {} values for {m} times",
                        s.id,
                        row.len()
                    )));
                }
                x[k * total + start..k * total + start + m].copy_from_slice(row);
            }
            times.extend_from_slice(&s.times);
            y.extend_from_slice(&s.y);
            offsets.push(times.len());
            ids.push(s.id);
        }
        Ok(Self { subject_ids: ids, offsets, times, y, x, names })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn subject_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn subject_len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// All `N` observations of covariate `k`.
    pub fn covariate(&self, k: usize) -> &[f64] {
        let n = self.n_obs();
        &self.x[k * n..(k + 1) * n]
    }

    pub fn x(&self, k: usize, obs: usize) -> f64 {
        self.x[k * self.n_obs() + obs]
    }

    /// Subject `i`'s covariates as a `p x m_i` matrix.
    pub fn subject_covariates(&self, i: usize) -> DMatrix<f64> {
        let r = self.subject_range(i);
        DMatrix::from_fn(self.n_covariates(), r.len(), |k, j| self.x(k, r.start + j))
    }

    /// Weight `1 / (n m_i)` of every observation in the empirical inner product.
    pub fn obs_weights(&self) -> Vec<f64> {
        let n = self.n_subjects() as f64;
        let mut w = Vec::with_capacity(self.n_obs());
        for i in 0..self.n_subjects() {
            let m = self.subject_len(i);
            w.extend(std::iter::repeat_n(1.0 / (n * m as f64), m));
        }
        w
    }

    /// Subject index of every observation.
    pub fn obs_subjects(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.n_obs());
        for i in 0..self.n_subjects() {
            s.extend(std::iter::repeat_n(i, self.subject_len(i)));
        }
        s
    }

    fn records(&self) -> impl Iterator<Item = SubjectRecord> + '_ {
        (0..self.n_subjects()).map(move |i| {
            let r = self.subject_range(i);
            SubjectRecord {
                id: self.subject_ids[i].clone(),
                times: self.times[r.clone()].to_vec(),
                y: self.y[r.clone()].to_vec(),
                covariates: (0..self.n_covariates()).map(|k| self.covariate(k)[r.clone()].to_vec()).collect(),
            }
        })
    }

    /// Dataset restricted to the given subjects (repeats allowed, as in a
    /// bootstrap resample; repeated ids get a `#copy` suffix).
    pub fn subset_subjects(&self, subjects: &[usize]) -> Result<Self> {
        let all: Vec<SubjectRecord> = self.records().collect();
        let mut count: HashMap<usize, usize> = HashMap::new();
        let picked = subjects
            .iter()
            .map(|&i| {
                let c = count.entry(i).or_insert(0);
                let mut rec = all[i].clone();
                if *c > 0 {
                    rec.id = format!("{}#{}", rec.id, c);
                }
                *c += 1;
                rec
            })
            .collect();
        Self::new(self.names.clone(), picked)
    }

    /// Dataset keeping only the listed covariates, in the given order.
    pub fn select_covariates(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&k) = idx.iter().find(|&&k| k >= self.n_covariates()) {
            return Err(Error::InvalidInput(format!("covariate index {k} out of range")));
        }
        let n = self.n_obs();
        let mut x = Vec::with_capacity(idx.len() * n);
        for &k in idx {
            x.extend_from_slice(self.covariate(k));
        }
        let names: Vec<String> = idx.iter().map(|&k| self.names[k].clone()).collect();
        let mut seen = std::collections::HashSet::new();
        if names.iter().any(|nm| !seen.insert(nm)) {
            return Err(Error::InvalidInput("duplicate covariate selection".into()));
        }
        Ok(Self { x, names, ..self.clone() })
    }

    /// Same design, new response values.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(Error::Shape(format!("{} responses for {} observations", y.len(), self.n_obs())));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Pooled standard deviation of the response across all observations.
    pub fn response_sd(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        let ss: f64 = self.y.iter().map(|v| (v - mean) * (v - mean)).sum();
        if n > 1.0 {
            (ss / (n - 1.0)).sqrt()
        } else {
            0.0
        }
    }
}

/// Reads the long CSV layout `subject,time,y,x1,...,xp`.
///
/// With `normalize_time` set, times are mapped affinely onto `[0, 1]` using
/// the global minimum and maximum; otherwise any time outside `[0, 1]` is an
/// error.
pub fn load_long_csv(path: impl AsRef<Path>, normalize_time: bool) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_long_csv(file, normalize_time)
}

pub fn read_long_csv<R: Read>(reader: R, normalize_time: bool) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let expected = ["subject", "time", "y"];
    for (pos, want) in expected.iter().enumerate() {
        match header.get(pos) {
            Some(h) if h.eq_ignore_ascii_case(want) => {}
            Some(h) => {
                return Err(Error::Parse { line: 1, msg: format!("column {} must be {want:?}, found {h:?}", pos + 1) })
            }
            None => return Err(Error::Parse { line: 1, msg: format!("missing column {want:?}") }),
        }
    }
    let names: Vec<String> = header.iter().skip(3).map(str::to_owned).collect();
    let p = names.len();

    struct Row {
        time: f64,
        y: f64,
        x: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != p + 3 {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", p + 3, rec.len()) });
        }
        let num = |col: usize| -> Result<f64> {
            let cell = &rec[col];
            if cell.is_empty() {
                return Err(Error::Parse { line, msg: format!("missing value in column {:?}", &header[col]) });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric value {cell:?} in column {:?}", &header[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("non-finite value in column {:?}", &header[col]) });
            }
            Ok(v)
        };
        let id = rec[0].to_owned();
        if id.is_empty() {
            return Err(Error::Parse { line, msg: "empty subject id".into() });
        }
        let time = num(1)?;
        if !normalize_time && !(0.0..=1.0).contains(&time) {
            return Err(Error::Parse {
                line,
                msg: format!("time {time} outside [0, 1] (enable time normalization to rescale)"),
            });
        }
        let row = Row { time, y: num(2)?, x: (0..p).map(|k| num(3 + k)).collect::<Result<_>>()? };
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(row);
    }
    if order.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }

    let (lo, hi) = groups
        .values()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.time), hi.max(r.time)));
    let map_time = |t: f64| -> f64 {
        if normalize_time {
            if hi > lo {
                ((t - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        } else {
            t
        }
    };

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        // Stable: tied times keep input order.
        rows.sort_by(|a, b| a.time.total_cmp(&b.time));
        subjects.push(SubjectRecord {
            id,
            times: rows.iter().map(|r| map_time(r.time)).collect(),
            y: rows.iter().map(|r| r.y).collect(),
            covariates: (0..p).map(|k| rows.iter().map(|r| r.x[k]).collect()).collect(),
        });
    }
    LongitudinalDataset::new(names, subjects)
}

/// Writes the dataset in the long CSV layout with 17 significant digits, which
/// reloads bit-identically.
pub fn write_long_csv<W: Write>(ds: &LongitudinalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject".to_owned(), "time".to_owned(), "y".to_owned()];
    header.extend(ds.names().iter().cloned());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..ds.n_subjects() {
        for obs in ds.subject_range(i) {
            row.clear();
            row.push(ds.subject_ids()[i].clone());
            row.push(fmt17(ds.times()[obs]));
            row.push(fmt17(ds.y()[obs]));
            for k in 0..ds.n_covariates() {
                row.push(fmt17(ds.x(k, obs)));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_long_csv(ds: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_long_csv(ds, std::io::BufWriter::new(file))
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// A process sampled at every observation of a dataset, `dim` values per
/// observation, laid out observation-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledFunction {
    dim: usize,
    values: Vec<f64>,
}

impl SampledFunction {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values cannot have dimension {dim}", values.len())));
        }
        Ok(Self { dim, values })
    }

    pub fn scalar(values: Vec<f64>) -> Self {
        Self { dim: 1, values }
    }

    /// Evaluates `f(obs_index, time)` at every observation.
    pub fn from_fn(ds: &LongitudinalDataset, dim: usize, mut f: impl FnMut(usize, f64, &mut [f64])) -> Self {
        let mut values = vec![0.0; ds.n_obs() * dim];
        for (obs, chunk) in values.chunks_mut(dim).enumerate() {
            f(obs, ds.times()[obs], chunk);
        }
        Self { dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, obs: usize) -> &[f64] {
        &self.values[obs * self.dim..(obs + 1) * self.dim]
    }

    fn check(&self, ds: &LongitudinalDataset) -> Result<()> {
        if self.values.len() != ds.n_obs() * self.dim {
            return Err(Error::Shape(format!(
                "sampled function has {} values; dataset needs {} x {}",
                self.values.len(),
                ds.n_obs(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// `<u, v^T>_n = (1/n) sum_i (1/m_i) sum_j u_i(t_ij) v_i(t_ij)^T`.
pub fn empirical_inner(ds: &LongitudinalDataset, u: &SampledFunction, v: &SampledFunction) -> Result<DMatrix<f64>> {
    u.check(ds)?;
    v.check(ds)?;
    let (k, l) = (u.dim, v.dim);
    let n = ds.n_subjects() as f64;
    let mut out = DMatrix::zeros(k, l);
    for i in 0..ds.n_subjects() {
        let mut block = DMatrix::<f64>::zeros(k, l);
        for obs in ds.subject_range(i) {
            let (a, b) = (u.at(obs), v.at(obs));
            for r in 0..k {
                for c in 0..l {
                    block[(r, c)] += a[r] * b[c];
                }
            }
        }
        out += block / (ds.subject_len(i) as f64);
    }
    Ok(out / n)
}

/// `||u||_n^2` for a scalar sampled process.
pub fn empirical_norm_sq(ds: &LongitudinalDataset, u: &SampledFunction) -> Result<f64> {
    if u.dim != 1 {
        return Err(Error::Shape(format!("norm needs a scalar process, got dimension {}", u.dim)));
    }
    Ok(empirical_inner(ds, u, u)?[(0, 0)])
}
