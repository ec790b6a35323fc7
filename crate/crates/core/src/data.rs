//! Datasets: the synthetic multi-mode benchmark and CSV ingestion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Ground-truth mode of each sample, for synthetic data.
    pub modes: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let d = Self {
            features,
            labels,
            classes,
            modes: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.rows() {
            return Err(Error::shape(
                format!("{} labels", self.features.rows()),
                self.labels.len(),
            ));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::invalid(format!("label {y} outside [0, {})", self.classes)));
        }
        if !self.features.is_finite() {
            return Err(Error::invalid("features contain NaN or infinity"));
        }
        if let Some(m) = &self.modes {
            if m.len() != self.labels.len() {
                return Err(Error::shape(format!("{} mode ids", self.labels.len()), m.len()));
            }
        }
        Ok(())
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

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            modes: self.modes.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// CSV with header `x0,..,x{d-1},label`. Floats use the shortest
    /// round-tripping representation.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for i in 0..self.dim() {
            let _ = write!(s, "x{i},");
        }
        s.push_str("label\n");
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            for v in row {
                let _ = write!(s, "{v:?},");
            }
            let _ = writeln!(s, "{y}");
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }
}

/// Per-mode relation between the latent point and its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Same class geometry in every mode.
    Shared,
    /// Same geometry, class ids permuted per mode.
    Permuted,
    /// Per-mode random rotation plus class permutation.
    Rotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub modes: usize,
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    /// Distance of each mode centre from the origin.
    pub mode_separation: f64,
    pub label_rule: LabelRule,
    /// Feature noise added after the label is fixed.
    pub noise_std: f64,
    pub prototypes_per_class: usize,
    /// Dimension of the space the class prototypes live in; each mode embeds
    /// it into its own subspace. 0 means `dim`.
    pub latent_dim: usize,
    /// Spread of each class blob around its prototype.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::coe4_synth()
    }
}

pub const COE4_TRAIN: usize = 20_000;
pub const COE4_VAL: usize = 4_000;

impl SyntheticSpec {
    /// The fixed benchmark: 4 modes, 8 classes, 32 dims, 20000 + 4000 samples.
    pub fn coe4_synth() -> Self {
        Self {
            modes: 4,
            classes: 8,
            dim: 32,
            samples: COE4_TRAIN + COE4_VAL,
            mode_separation: 8.0,
            label_rule: LabelRule::Rotated,
            noise_std: 0.05,
            prototypes_per_class: 16,
            latent_dim: 4,
            cluster_spread: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.classes == 0 || self.dim == 0 || self.prototypes_per_class == 0 {
            return Err(Error::invalid("synthetic spec counts must be positive"));
        }
        if self.latent_dim > self.dim {
            return Err(Error::invalid("latent_dim larger than dim"));
        }
        if self.samples < self.modes * self.classes {
            return Err(Error::invalid(format!(
                "need at least modes*classes = {} samples, got {}",
                self.modes * self.classes,
                self.samples
            )));
        }
        for (name, v) in [
            ("mode_separation", self.mode_separation),
            ("noise_std", self.noise_std),
            ("cluster_spread", self.cluster_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn latent_width(&self) -> usize {
        if self.latent_dim == 0 {
            self.dim
        } else {
            self.latent_dim
        }
    }

    /// Unit-norm mode centre directions scaled by the separation.
    pub fn mode_centers(&self) -> Matrix {
        let mut rng = rng_for(self.seed, "synthetic/centers");
        let mut c = Matrix::zeros(self.modes, self.dim);
        for i in 0..self.modes {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (o, x) in c.row_mut(i).iter_mut().zip(&v) {
                *o = self.mode_separation * x / norm;
            }
        }
        c
    }
}

/// Orthonormalised Gaussian matrix (modified Gram–Schmidt on rows).
fn random_rotation(dim: usize, rng: &mut impl rand::Rng) -> Matrix {
    let mut q = Matrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    for i in 0..dim {
        for j in 0..i {
            let proj: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            let rj = q.row(j).to_vec();
            for (a, b) in q.row_mut(i).iter_mut().zip(&rj) {
                *a -= proj * b;
            }
        }
        let norm = q.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        q.row_mut(i).iter_mut().for_each(|a| *a /= norm);
    }
    q
}

/// Draws `samples` points. Mode and class cycle through every combination,
/// so class and mode counts are as even as `samples` allows, and the order is
/// then shuffled.
///
/// A sample of mode `i` and class `c` is
/// `centre_i + R_i·(prototype + spread·u) + noise·ε`, where the prototype is
/// one of the prototypes of class `π_i(c)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (m, c, d, k) = (spec.modes, spec.classes, spec.dim, spec.prototypes_per_class);
    let q = spec.latent_width();
    let centers = spec.mode_centers();

    let mut rule_rng = rng_for(spec.seed, "synthetic/rule");
    let prototypes = Matrix::from_fn(c * k, q, |_, _| StandardNormal.sample(&mut rule_rng));
    let mut rotations = Vec::with_capacity(m);
    let mut perms = Vec::with_capacity(m);
    for i in 0..m {
        let mut perm: Vec<usize> = (0..c).collect();
        match spec.label_rule {
            LabelRule::Shared => rotations.push(None),
            LabelRule::Permuted => {
                if i > 0 {
                    perm.shuffle(&mut rule_rng);
                }
                rotations.push(None);
            }
            LabelRule::Rotated => {
                if i > 0 {
                    perm.shuffle(&mut rule_rng);
                }
                rotations.push(Some(random_rotation(d, &mut rule_rng)));
            }
        }
        perms.push(perm);
    }

    let mut rng = rng_for(spec.seed, "synthetic/samples");
    let mut order: Vec<usize> = (0..spec.samples).collect();
    order.shuffle(&mut rng);

    let mut features = Matrix::zeros(spec.samples, d);
    let mut labels = vec![0; spec.samples];
    let mut modes = vec![0; spec.samples];
    let mut latent = vec![0.0; q];
    for (slot, &j) in order.iter().enumerate() {
        let mode = j % m;
        let class = (j / m) % c;
        let proto = perms[mode][class] * k + rand::Rng::random_range(&mut rng, 0..k);
        for (l, p) in latent.iter_mut().zip(prototypes.row(proto)) {
            let u: f64 = StandardNormal.sample(&mut rng);
            *l = p + spec.cluster_spread * u;
        }
        let row = features.row_mut(slot);
        match &rotations[mode] {
            Some(r) => {
                for (o, ri) in row.iter_mut().zip(r.iter_rows()) {
                    *o = ri.iter().zip(&latent).map(|(a, b)| a * b).sum();
                }
            }
            None => row[..q].copy_from_slice(&latent),
        }
        for (o, ctr) in row.iter_mut().zip(centers.row(mode)) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *o += ctr + spec.noise_std * e;
        }
        labels[slot] = class;
        modes[slot] = mode;
    }

    let ds = Dataset {
        features,
        labels,
        classes: c,
        modes: Some(modes),
    };
    ds.validate()?;
    Ok(ds)
}

/// The benchmark's train and validation splits.
pub fn coe4_synth() -> Result<(Dataset, Dataset)> {
    let ds = generate_synthetic(&SyntheticSpec::coe4_synth())?;
    Ok(ds.split_at(COE4_TRAIN))
}

/// Reads `features.., label` rows. A first row that does not parse as numbers
/// is taken as a header. The class count is `max label + 1` and every class
/// below it must occur.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let rows = read_numeric_rows(path)?;
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} contains no samples", path.display())));
    }
    let mut features = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let (label, feats) = row.split_last().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: "empty row".into(),
        })?;
        if feats.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "row needs at least one feature and a label".into(),
            });
        }
        if label.fract() != 0.0 || *label < 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("label {label} is not a non-negative integer"),
            });
        }
        labels.push(*label as usize);
        features.push(feats.to_vec());
    }
    let classes = labels.iter().max().map_or(0, |&y| y + 1);
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&y| seen[y] = true);
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::invalid(format!(
            "{}: labels are not contiguous, class {missing} never occurs below max label {}",
            path.display(),
            classes - 1
        )));
    }
    let features = Matrix::from_rows(&features).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    Dataset::new(features, labels, classes)
}

/// Headerless numeric CSV into a matrix, e.g. a cost matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = read_numeric_rows(path)?.into_iter().map(|(_, r)| r).collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} is empty", path.display())));
    }
    Matrix::from_rows(&rows)
}

/// `(line, values)` per data row.
fn read_numeric_rows(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut out = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("malformed number: {e}"),
                })
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "non-finite value".into(),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("expected {w} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        out.push((line, values));
    }
    Ok(out)
}

/// Which part of a synthetic dataset to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

/// A `--data` argument: a CSV path or a synthetic spec string such as
/// `coe4-synth`, `synthetic:modes=2,classes=4,samples=2000,train=1600` or
/// `coe4-synth:split=val`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic {
        spec: SyntheticSpec,
        train: usize,
        split: Option<Split>,
    },
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self> {
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        if head != "coe4-synth" && head != "synthetic" {
            return Ok(DataSource::Csv(PathBuf::from(s)));
        }
        let mut spec = SyntheticSpec::coe4_synth();
        let mut train = None;
        let mut split = None;
        for kv in rest.unwrap_or("").split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got {kv:?}")))?;
            let bad = || Error::invalid(format!("bad value for {k}: {v:?}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let real = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "modes" => spec.modes = int()?,
                "classes" => spec.classes = int()?,
                "dim" => spec.dim = int()?,
                "samples" => spec.samples = int()?,
                "train" => train = Some(int()?),
                "sep" | "separation" => spec.mode_separation = real()?,
                "noise" => spec.noise_std = real()?,
                "protos" => spec.prototypes_per_class = int()?,
                "spread" => spec.cluster_spread = real()?,
                "latent" => spec.latent_dim = int()?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "rule" => {
                    spec.label_rule = match v {
                        "shared" => LabelRule::Shared,
                        "permuted" => LabelRule::Permuted,
                        "rotated" => LabelRule::Rotated,
                        _ => return Err(bad()),
                    }
                }
                "split" => {
                    split = Some(match v {
                        "train" => Split::Train,
                        "val" => Split::Val,
                        "all" => Split::All,
                        _ => return Err(bad()),
                    })
                }
                _ => return Err(Error::invalid(format!("unknown synthetic key {k:?}"))),
            }
        }
        spec.validate()?;
        let train = train.unwrap_or(spec.samples * COE4_TRAIN / (COE4_TRAIN + COE4_VAL));
        if train > spec.samples {
            return Err(Error::invalid("train split larger than sample count"));
        }
        Ok(DataSource::Synthetic { spec, train, split })
    }

    /// Training set and, for synthetic sources, the held-out split.
    pub fn load_train_val(&self) -> Result<(Dataset, Option<Dataset>)> {
        match self {
            DataSource::Csv(p) => Ok((load_csv(p)?, None)),
            DataSource::Synthetic { spec, train, .. } => {
                let (t, v) = generate_synthetic(spec)?.split_at(*train);
                Ok((t, Some(v)))
            }
        }
    }

    /// The split named in the source, `default` if none was given.
    pub fn load(&self, default: Split) -> Result<Dataset> {
        match self {
            DataSource::Csv(p) => load_csv(p),
            DataSource::Synthetic { spec, train, split } => {
                let all = generate_synthetic(spec)?;
                Ok(match split.unwrap_or(default) {
                    Split::All => all,
                    Split::Train => all.split_at(*train).0,
                    Split::Val => all.split_at(*train).1,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::argmax;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            samples: 640,
            ..SyntheticSpec::coe4_synth()
        }
    }

    #[test]
    fn nearest_centroid_identifies_modes_without_noise() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            mode_separation: 200.0,
            ..small()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let centers = spec.mode_centers();
        let modes = ds.modes.as_ref().unwrap();
        for (row, &mode) in ds.features.iter_rows().zip(modes) {
            let neg_dist: Vec<f64> = centers
                .iter_rows()
                .map(|c| -c.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            assert_eq!(argmax(&neg_dist), mode);
        }
    }

    #[test]
    fn seeded_generation_is_bit_identical() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn class_balance() {
        // N = 10·M·C exactly
        let spec = SyntheticSpec { samples: 320, ..small() };
        let ds = generate_synthetic(&spec).unwrap();
        let expect = spec.samples as f64 / spec.classes as f64;
        for n in ds.class_counts() {
            assert!((n as f64 - expect).abs() <= 0.01 * expect);
        }
    }

    #[test]
    fn rejects_invalid_spec() {
        assert!(generate_synthetic(&SyntheticSpec { modes: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { samples: 10, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { noise_std: -1.0, ..small() }).is_err());
    }

    #[test]
    fn rotation_is_orthonormal() {
        let q = random_rotation(6, &mut rng_for(0, "r"));
        let qqt = q.matmul_t(&q).unwrap();
        assert!(qqt.max_abs_diff(&Matrix::identity(6)) < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SyntheticSpec { samples: 64, dim: 3, latent_dim: 2, ..small() }).unwrap();
        let p = dir.path().join("d.csv");
        ds.save_csv(&p).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.classes, ds.classes);

        let fixture = dir.path().join("f.csv");
        std::fs::write(&fixture, "0.5,1.0,0\n-1,2,2\n3,4,1\n").unwrap();
        let f = load_csv(&fixture).unwrap();
        assert_eq!((f.len(), f.classes, f.dim()), (3, 3, 2));

        let empty = dir.path().join("e.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_csv(&empty).is_err());

        let gap = dir.path().join("g.csv");
        std::fs::write(&gap, "1,0\n2,2\n").unwrap();
        let err = load_csv(&gap).unwrap_err().to_string();
        assert!(err.contains("contiguous"), "{err}");

        let bad = dir.path().join("b.csv");
        std::fs::write(&bad, "1,0\n2,1\nfoo,1\n").unwrap();
        match load_csv(&bad).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn data_source_parsing() {
        assert_eq!(
            DataSource::parse("x.csv").unwrap(),
            DataSource::Csv(PathBuf::from("x.csv"))
        );
        match DataSource::parse("coe4-synth").unwrap() {
            DataSource::Synthetic { spec, train, split } => {
                assert_eq!(spec, SyntheticSpec::coe4_synth());
                assert_eq!(train, COE4_TRAIN);
                assert_eq!(split, None);
            }
            _ => panic!(),
        }
        match DataSource::parse("synthetic:modes=2,samples=100,train=80,split=val").unwrap() {
            DataSource::Synthetic { spec, train, split } => {
                assert_eq!((spec.modes, spec.samples, train), (2, 100, 80));
                assert_eq!(split, Some(Split::Val));
            }
            _ => panic!(),
        }
        assert!(DataSource::parse("synthetic:bogus=1").is_err());
        assert!(DataSource::parse("synthetic:samples=100,train=200").is_err());
    }
}
