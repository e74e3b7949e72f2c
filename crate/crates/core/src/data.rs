//! Synthetic specialty-clustered classification data and CSV ingestion.
//!
//! Classes are split evenly into `S` specialty groups. Each group sits at a
//! scaled corner of a hypercube; each class inside it is an isotropic
//! Gaussian cluster around a mean drawn near that corner.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_specialty_groups: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub inter_group_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_specialty_groups: 4,
            input_dim: 16,
            samples_per_class: 300,
            cluster_spread: 1.0,
            inter_group_separation: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_specialty_groups == 0 {
            return bad("need at least one specialty group".into());
        }
        if self.num_classes == 0 || self.num_classes % self.num_specialty_groups != 0 {
            return bad(format!(
                "{} classes do not split evenly into {} groups",
                self.num_classes, self.num_specialty_groups
            ));
        }
        if self.input_dim == 0 || self.samples_per_class == 0 {
            return bad("input_dim and samples_per_class must be positive".into());
        }
        if self.corner_bits() > self.input_dim {
            return bad(format!(
                "{} groups need more than {} input dimensions",
                self.num_specialty_groups, self.input_dim
            ));
        }
        if !(self.cluster_spread >= 0.0) || !self.cluster_spread.is_finite() {
            return bad(format!("cluster_spread {} must be finite and >= 0", self.cluster_spread));
        }
        if !(self.inter_group_separation >= 0.0) || !self.inter_group_separation.is_finite() {
            return bad(format!(
                "inter_group_separation {} must be finite and >= 0",
                self.inter_group_separation
            ));
        }
        Ok(())
    }

    pub fn classes_per_group(&self) -> usize {
        self.num_classes / self.num_specialty_groups
    }

    /// Specialty group of a class.
    pub fn group_of(&self, class: usize) -> usize {
        class / self.classes_per_group()
    }

    fn corner_bits(&self) -> usize {
        (usize::BITS - (self.num_specialty_groups - 1).leading_zeros()) as usize
    }

    /// Corner of group `g`: coordinate `d` is `+sep` when bit `d mod b` of `g`
    /// is set and `-sep` otherwise, with `b` bits enough to index the groups.
    pub fn group_center(&self, group: usize) -> Vec<f64> {
        let b = self.corner_bits().max(1);
        (0..self.input_dim)
            .map(|d| {
                let sign = if (group >> (d % b)) & 1 == 1 { 1.0 } else { -1.0 };
                sign * self.inter_group_separation
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Generation parameters, when synthetic.
    pub metadata: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidDimension(format!(
                "{} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            metadata: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            metadata: self.metadata.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Writes `x0,...,x{n-1},label` with a header row. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offset_scale = spec.inter_group_separation / 2.0;
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| {
            spec.group_center(spec.group_of(c))
                .into_iter()
                .map(|m| m + offset_scale * rng.random_range(-1.0..=1.0))
                .collect()
        })
        .collect();
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in mean {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.cluster_spread * e);
            }
            labels.push(c);
        }
    }
    let mut ds = Dataset::new(Matrix::from_vec(n, spec.input_dim, data)?, labels, spec.num_classes)?;
    ds.metadata = Some(spec.clone());
    Ok(ds)
}

/// Reads comma-separated rows of `N_in` reals followed by an integer label.
/// A first line that does not parse as numbers is taken as a header.
pub fn load_tabular(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let looks_numeric = record.iter().all(|f| f.parse::<f64>().is_ok());
        if idx == 0 && !looks_numeric {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_err(line, format!("expected features and a label, found {} field", record.len())));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(line, format!("expected {w} columns, found {}", record.len())));
            }
            _ => {}
        }
        let n_feat = record.len() - 1;
        for (col, field) in record.iter().take(n_feat).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: '{field}' is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: '{field}' is not finite", col + 1)));
            }
            data.push(v);
        }
        let raw = &record[n_feat];
        let label: usize = raw
            .parse()
            .map_err(|_| parse_err(line, format!("label '{raw}' is not a non-negative integer")))?;
        labels.push(label);
    }
    let Some(width) = width else {
        return Err(parse_err(1, "no data rows".into()));
    };
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let ds = Dataset::new(
        Matrix::from_vec(labels.len(), width - 1, data)?,
        labels,
        num_classes,
    )?;
    if let Some(empty) = ds.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "{}: class {empty} has no samples",
            path.display()
        )));
    }
    Ok(ds)
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalization {
    /// Column means and population standard deviations, floored at
    /// [`STD_FLOOR`].
    pub fn fit(features: &Matrix) -> Result<Self> {
        let (n, d) = features.shape();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("normalization needs >= 2 rows, got {n}")));
        }
        let mean: Vec<f64> = features.column_sums().into_iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.input_dim() != self.mean.len() {
            return Err(Error::InvalidDimension(format!(
                "normalization fitted on {} columns, data has {}",
                self.mean.len(),
                ds.input_dim()
            )));
        }
        let mut out = ds.clone();
        for i in 0..out.len() {
            for ((x, m), s) in out.features.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }
}

/// Standardizes every column; returns the statistics for reuse on other
/// splits.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, Normalization)> {
    let norm = Normalization::fit(&ds.features)?;
    Ok((norm.apply(ds)?, norm))
}

/// Train, validation, and test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.75, 0.083, 0.167);

/// Shuffled disjoint split; train and val get `round(f * N)` samples and the
/// remainder goes to test.
pub fn split_dataset(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(*f >= 0.0)) || (ft + fv + fs - 1.0).abs() > 0.01 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be >= 0 and sum to 1"
        )));
    }
    let n = ds.len();
    if n < 12 {
        return Err(Error::InvalidArgument(format!("dataset of {n} samples is too small to split")));
    }
    let n_train = (ft * n as f64).round() as usize;
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Splits {
        train: ds.subset(&idx[..n_train]),
        val: ds.subset(&idx[n_train..n_train + n_val]),
        test: ds.subset(&idx[n_train + n_val..]),
    })
}

impl Splits {
    /// Standardizes all three splits with statistics from the training split.
    pub fn normalized(&self) -> Result<(Splits, Normalization)> {
        let norm = Normalization::fit(&self.train.features)?;
        Ok((
            Splits {
                train: norm.apply(&self.train)?,
                val: norm.apply(&self.val)?,
                test: norm.apply(&self.test)?,
            },
            norm,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            samples_per_class: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![20; 8]);
        assert_eq!(a.input_dim(), 16);
    }

    #[test]
    fn zero_spread_collapses_clusters() {
        let spec = SyntheticSpec {
            cluster_spread: 0.0,
            ..small_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for c in 0..8 {
            let rows: Vec<&[f64]> = ds
                .features
                .iter_rows()
                .zip(&ds.labels)
                .filter(|(_, &y)| y == c)
                .map(|(r, _)| r)
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = SyntheticSpec {
            num_classes: 7,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&bad), Err(Error::InvalidArgument(_))));
        let bad = SyntheticSpec {
            num_specialty_groups: 0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn group_centers_are_distinct_corners() {
        let spec = SyntheticSpec::default();
        let centers: Vec<Vec<f64>> = (0..4).map(|g| spec.group_center(g)).collect();
        for i in 0..4 {
            assert!(centers[i].iter().all(|v| v.abs() == spec.inter_group_separation));
            for j in 0..i {
                assert_ne!(centers[i], centers[j]);
            }
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn tabular_parsing() {
        let f = write_tmp("1.0,2.0,0\n3.0,4.0,1\n5.5,-6,1\n");
        let ds = load_tabular(f.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.features.row(2), &[5.5, -6.0]);

        let f = write_tmp("a,b,label\n1,2,0\n3,4,1\n");
        assert_eq!(load_tabular(f.path()).unwrap().len(), 2);
    }

    #[test]
    fn tabular_errors_name_the_line() {
        let f = write_tmp("1,2,0\n3,1\n");
        match load_tabular(f.path()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("columns"));
            }
            other => panic!("{other:?}"),
        }
        let f = write_tmp("1,2,0\n3,x,1\n");
        match load_tabular(f.path()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("not a number"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            load_tabular(Path::new("/nonexistent/data.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn export_round_trips() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.export(&path).unwrap();
        let back = load_tabular(&path).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn normalization_examples() {
        let x = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]).unwrap();
        let ds = Dataset::new(x, vec![0, 0, 0], 1).unwrap();
        let (out, norm) = normalize(&ds).unwrap();
        assert!(out.features.as_slice().iter().skip(1).step_by(2).all(|&v| v == 0.0));
        assert_eq!(norm.std[1], STD_FLOOR);
        let (again, _) = normalize(&out).unwrap();
        assert!(again.features.max_abs_diff(&out.features) < 1e-9);
        let col: Vec<f64> = out.features.iter_rows().map(|r| r[0]).collect();
        let mean = col.iter().sum::<f64>() / 3.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let spec = SyntheticSpec {
            samples_per_class: 150,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let s = split_dataset(&ds, DEFAULT_SPLIT, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (900, 100, 200));
        assert_eq!(s, split_dataset(&ds, DEFAULT_SPLIT, 3).unwrap());
        let tiny = ds.subset(&[0, 1, 2]);
        assert!(split_dataset(&tiny, DEFAULT_SPLIT, 0).is_err());
    }
}
