//! Domain-shift datasets: synthetic generators, CSV ingestion and
//! source-fitted standardization.
//!
//! Target ground truth only ever lives in a [`LabeledSet`] tagged
//! [`Domain::TargetEval`]; the training path takes an [`UnlabeledSet`].

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
    /// Target ground truth, for evaluation only.
    TargetEval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
    domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Matrix,
    domain: Domain,
}

impl LabeledSet {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        n_classes: usize,
        domain: Domain,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Validation("labeled set is empty".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Shape {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            domain,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Drops the labels.
    pub fn to_unlabeled(&self, domain: Domain) -> UnlabeledSet {
        UnlabeledSet {
            features: self.features.clone(),
            domain,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

impl UnlabeledSet {
    pub fn new(features: Matrix, domain: Domain) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Validation("unlabeled set is empty".into()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self { features, domain })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

/// Labeled source, unlabeled target, and the held-out target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub source: LabeledSet,
    pub target: UnlabeledSet,
    pub target_eval: LabeledSet,
}

impl DomainSplit {
    fn from_target_eval(source: LabeledSet, target_eval: LabeledSet) -> Self {
        Self {
            target: target_eval.to_unlabeled(Domain::Target),
            source,
            target_eval,
        }
    }
}

/// One domain of the two interleaved half circles, rotated about the origin.
/// Labels alternate `0, 1, 0, …`.
pub fn two_moons_domain(
    n: usize,
    rotation_degrees: f64,
    noise_std: f64,
    domain: Domain,
    rng: &mut Rng,
) -> Result<LabeledSet> {
    if n < 2 {
        return Err(Error::Validation("two moons needs n >= 2".into()));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::Validation(format!(
            "noise std {noise_std} must be non-negative"
        )));
    }
    let (sin, cos) = rotation_degrees.to_radians().sin_cos();
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = std::f64::consts::PI * rng.uniform();
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let x = x + noise_std * rng.normal();
        let y = y + noise_std * rng.normal();
        data.push(cos * x - sin * y);
        data.push(sin * x + cos * y);
        labels.push(label);
    }
    LabeledSet::new(Matrix::from_vec(n, 2, data)?, labels, 2, domain)
}

/// Source moons on stream 0 of `seed`, target (rotated) moons on stream 1.
pub fn gen_two_moons(
    n_per_domain: usize,
    rotation_degrees: f64,
    noise_std: f64,
    seed: u64,
) -> Result<DomainSplit> {
    let source = two_moons_domain(
        n_per_domain,
        0.0,
        noise_std,
        Domain::Source,
        &mut Rng::with_stream(seed, 0),
    )?;
    let target_eval = two_moons_domain(
        n_per_domain,
        rotation_degrees,
        noise_std,
        Domain::TargetEval,
        &mut Rng::with_stream(seed, 1),
    )?;
    Ok(DomainSplit::from_target_eval(source, target_eval))
}

fn blobs_domain(
    n: usize,
    centers: &[Vec<f64>],
    offset: &[f64],
    domain: Domain,
    rng: &mut Rng,
) -> Result<LabeledSet> {
    let k = centers.len();
    let d = offset.len();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        for (c, o) in centers[label].iter().zip(offset) {
            data.push(c + o + rng.normal());
        }
        labels.push(label);
    }
    LabeledSet::new(Matrix::from_vec(n, d, data)?, labels, k, domain)
}

/// `k` unit-variance Gaussians with centers uniform in `[-5, 5]^d`; the
/// target translates every center by `shift`.
pub fn gen_gaussian_blobs(
    n_per_domain: usize,
    k: usize,
    d: usize,
    shift: &[f64],
    seed: u64,
) -> Result<DomainSplit> {
    if k < 2 || d < 2 {
        return Err(Error::Validation("blobs need K >= 2 and D >= 2".into()));
    }
    if n_per_domain < k {
        return Err(Error::Validation(
            "blobs need at least one sample per class".into(),
        ));
    }
    if shift.len() != d {
        return Err(Error::Shape {
            expected: d,
            got: shift.len(),
        });
    }
    let mut center_rng = Rng::with_stream(seed, 2);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| center_rng.uniform_in(-5.0, 5.0)).collect())
        .collect();
    let source = blobs_domain(
        n_per_domain,
        &centers,
        &vec![0.0; d],
        Domain::Source,
        &mut Rng::with_stream(seed, 0),
    )?;
    let target_eval = blobs_domain(
        n_per_domain,
        &centers,
        shift,
        Domain::TargetEval,
        &mut Rng::with_stream(seed, 1),
    )?;
    Ok(DomainSplit::from_target_eval(source, target_eval))
}

/// Columns of a CSV file to read.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: Option<String>,
    /// Label strings; a label's position in this list is its class index.
    pub classes: Vec<String>,
}

impl CsvSchema {
    /// Features `x0..x{d-1}`, optional `label` column, classes `"0".."k-1"`.
    pub fn numbered(d: usize, k: Option<usize>) -> Self {
        Self {
            feature_columns: (0..d).map(|i| format!("x{i}")).collect(),
            label_column: k.map(|_| "label".to_string()),
            classes: (0..k.unwrap_or(0)).map(|c| c.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CsvData {
    Labeled(LabeledSet),
    Unlabeled(UnlabeledSet),
}

impl CsvData {
    pub fn features(&self) -> &Matrix {
        match self {
            CsvData::Labeled(s) => s.features(),
            CsvData::Unlabeled(s) => s.features(),
        }
    }

    pub fn into_labeled(self) -> Option<LabeledSet> {
        match self {
            CsvData::Labeled(s) => Some(s),
            CsvData::Unlabeled(_) => None,
        }
    }

    pub fn into_unlabeled(self) -> UnlabeledSet {
        match self {
            CsvData::Labeled(s) => s.to_unlabeled(Domain::Target),
            CsvData::Unlabeled(s) => s,
        }
    }
}

/// Reads a CSV file with a header row. Row numbers in errors are 1-based
/// file lines, the header being line 1.
pub fn load_csv(path: &Path, schema: &CsvSchema, domain: Domain) -> Result<CsvData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(1, format!("missing column '{name}'")))
    };
    let feature_idx = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let label_idx = schema.label_column.as_deref().map(column).transpose()?;

    let d = feature_idx.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        for (&col, name) in feature_idx.iter().zip(&schema.feature_columns) {
            let cell = record.get(col).unwrap_or("").trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("column '{name}': cannot parse '{cell}'")))?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("column '{name}': non-finite value '{cell}'"),
                ));
            }
            data.push(v);
        }
        if let Some(col) = label_idx {
            let cell = record.get(col).unwrap_or("").trim();
            let class = schema
                .classes
                .iter()
                .position(|c| c == cell)
                .ok_or_else(|| parse_err(line, format!("unknown label '{cell}'")))?;
            labels.push(class);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(2, "no data rows".into()));
    }
    let features = Matrix::from_vec(rows, d, data)?;
    Ok(match label_idx {
        Some(_) => CsvData::Labeled(LabeledSet::new(
            features,
            labels,
            schema.classes.len(),
            domain,
        )?),
        None => CsvData::Unlabeled(UnlabeledSet::new(features, domain)?),
    })
}

/// Writes features (and labels, when given) using [`CsvSchema::numbered`]
/// column names. Floats are written in shortest round-trip form.
pub fn write_csv(path: &Path, features: &Matrix, labels: Option<&[usize]>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (0..features.cols()).map(|i| format!("x{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    writer.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (r, row) in features.iter_rows().enumerate() {
        let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(labels) = labels {
            record.push(labels[r].to_string());
        }
        writer.write_record(&record).map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Per-feature affine map `(x - mean) / std` fitted on source features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Matrix) -> Result<Self> {
        let n = features.rows() as f64;
        if features.rows() == 0 {
            return Err(Error::Validation("cannot standardize an empty set".into()));
        }
        let d = features.cols();
        let mut mean = vec![0.0; d];
        for row in features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        for (c, (s, m)) in std.iter().zip(&mean).enumerate() {
            if !(*s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::Validation(format!("feature {c} has zero variance")));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.mean.len() {
            return Err(Error::Shape {
                expected: self.mean.len(),
                got: features.cols(),
            });
        }
        let mut out = features.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn apply_labeled(&self, set: &LabeledSet) -> Result<LabeledSet> {
        LabeledSet::new(
            self.apply(&set.features)?,
            set.labels.clone(),
            set.n_classes,
            set.domain,
        )
    }

    pub fn apply_unlabeled(&self, set: &UnlabeledSet) -> Result<UnlabeledSet> {
        UnlabeledSet::new(self.apply(&set.features)?, set.domain)
    }

    /// Two lines, `mean ...` and `std ...`.
    pub fn to_text(&self) -> String {
        let line = |name: &str, v: &[f64]| {
            let mut s = name.to_string();
            for x in v {
                s.push_str(&format!(" {x:e}"));
            }
            s.push('\n');
            s
        };
        line("mean", &self.mean) + &line("std", &self.std)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut read = |name: &str| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Validation(format!("standardizer: missing '{name}' line")))?;
            let mut fields = line.split_ascii_whitespace();
            if fields.next() != Some(name) {
                return Err(Error::Validation(format!(
                    "standardizer: expected '{name}' line"
                )));
            }
            fields
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Validation(format!("standardizer: {e}")))
        };
        let mean = read("mean")?;
        let std = read("std")?;
        if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation(
                "standardizer: inconsistent mean/std".into(),
            ));
        }
        Ok(Self { mean, std })
    }
}

/// Fits on the source set and maps every set of the split with it.
pub fn standardize(split: &DomainSplit) -> Result<(DomainSplit, Standardizer)> {
    let st = Standardizer::fit(split.source.features())?;
    Ok((
        DomainSplit {
            source: st.apply_labeled(&split.source)?,
            target: st.apply_unlabeled(&split.target)?,
            target_eval: st.apply_labeled(&split.target_eval)?,
        },
        st,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    #[test]
    fn zero_rotation_with_shared_seed_is_identical() {
        let a = two_moons_domain(100, 0.0, 0.1, Domain::Source, &mut Rng::new(5)).unwrap();
        let b = two_moons_domain(100, 0.0, 0.1, Domain::Target, &mut Rng::new(5)).unwrap();
        assert_eq!(a.features(), b.features());
        let c = two_moons_domain(100, 360.0, 0.1, Domain::Target, &mut Rng::new(5)).unwrap();
        for (x, y) in a.features().data().iter().zip(c.features().data()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_radius() {
        let a = two_moons_domain(50, 0.0, 0.0, Domain::Source, &mut Rng::new(1)).unwrap();
        let b = two_moons_domain(50, 30.0, 0.0, Domain::Source, &mut Rng::new(1)).unwrap();
        for (ra, rb) in a.features().iter_rows().zip(b.features().iter_rows()) {
            assert_abs_diff_eq!(ra[0].hypot(ra[1]), rb[0].hypot(rb[1]), epsilon = 1e-12);
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(
            gen_two_moons(64, 30.0, 0.1, 3).unwrap(),
            gen_two_moons(64, 30.0, 0.1, 3).unwrap()
        );
        let shift = [1.0, 2.0, 3.0];
        assert_eq!(
            gen_gaussian_blobs(60, 3, 3, &shift, 8).unwrap(),
            gen_gaussian_blobs(60, 3, 3, &shift, 8).unwrap()
        );
        let split = gen_two_moons(64, 30.0, 0.1, 3).unwrap();
        assert_eq!(split.target.features(), split.target_eval.features());
        assert_eq!(split.target_eval.domain(), Domain::TargetEval);
    }

    #[test]
    fn blobs_have_balanced_classes() {
        let split = gen_gaussian_blobs(101, 4, 2, &[0.0, 0.0], 2).unwrap();
        for c in split.source.class_counts() {
            assert!(c == 25 || c == 26);
        }
        assert!(gen_gaussian_blobs(10, 1, 2, &[0.0, 0.0], 2).is_err());
        assert!(gen_gaussian_blobs(10, 2, 2, &[0.0], 2).is_err());
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_loads_labeled_rows() {
        let f = write_tmp("x0,x1,label\n1.5,-2,cat\n0.25,3e2,dog\n");
        let schema = CsvSchema {
            feature_columns: vec!["x0".into(), "x1".into()],
            label_column: Some("label".into()),
            classes: vec!["dog".into(), "cat".into()],
        };
        let set = load_csv(f.path(), &schema, Domain::Source)
            .unwrap()
            .into_labeled()
            .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.dim(), 2);
        assert_eq!(set.labels(), &[1, 0]);
        assert_eq!(set.features().row(1), &[0.25, 300.0]);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let schema = CsvSchema::numbered(2, Some(2));
        let f = write_tmp("x0,x1,label\n1,2,0\n1,NaN,1\n");
        let err = load_csv(f.path(), &schema, Domain::Source).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
        let f = write_tmp("x0,x1,label\n1,2,7\n");
        assert!(matches!(
            load_csv(f.path(), &schema, Domain::Source),
            Err(Error::Parse { row: 2, .. })
        ));
        let f = write_tmp("x0,label\n1,0\n");
        assert!(matches!(
            load_csv(f.path(), &schema, Domain::Source),
            Err(Error::Parse { row: 1, .. })
        ));
        let f = write_tmp("x0,x1,label\n1,abc,0\n");
        assert!(load_csv(f.path(), &schema, Domain::Source).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let split = gen_gaussian_blobs(40, 3, 4, &[0.5, -0.5, 1.0, 0.0], 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("src.csv");
        write_csv(&path, split.source.features(), Some(split.source.labels())).unwrap();
        let back = load_csv(&path, &CsvSchema::numbered(4, Some(3)), Domain::Source)
            .unwrap()
            .into_labeled()
            .unwrap();
        assert_eq!(back, split.source);
        let path = dir.path().join("tgt.csv");
        write_csv(&path, split.target.features(), None).unwrap();
        let back = load_csv(&path, &CsvSchema::numbered(4, None), Domain::Target).unwrap();
        assert_eq!(back, CsvData::Unlabeled(split.target.clone()));
    }

    #[test]
    fn standardized_source_has_zero_mean_unit_std() {
        let split = gen_gaussian_blobs(500, 3, 3, &[4.0, 0.0, -2.0], 4).unwrap();
        let (std_split, st) = standardize(&split).unwrap();
        let refit = Standardizer::fit(std_split.source.features()).unwrap();
        for (m, s) in refit.mean.iter().zip(&refit.std) {
            assert_abs_diff_eq!(*m, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(*s, 1.0, epsilon = 1e-10);
        }
        // already standardized input maps to itself
        let again = refit.apply(std_split.source.features()).unwrap();
        for (a, b) in again.data().iter().zip(std_split.source.features().data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
        // target moved by the source map, not by its own statistics
        let manual = (split.target.features().get(0, 0) - st.mean[0]) / st.std[0];
        assert_eq!(std_split.target.features().get(0, 0), manual);
        assert_eq!(Standardizer::from_text(&st.to_text()).unwrap(), st);
    }

    #[test]
    fn constant_feature_is_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 0.3], vec![2.0, 0.3], vec![3.0, 0.3]]).unwrap();
        assert!(Standardizer::fit(&m).is_err());
    }
}
