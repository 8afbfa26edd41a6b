//! Datasets, client partitions and the representation alignment set.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Labeled features. Rows taken for the alignment set are marked reserved
/// and skipped by every partitioner.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    reserved: Vec<bool>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if labels.len() != features.rows() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} out of range for {num_classes} classes")));
        }
        let reserved = vec![false; labels.len()];
        Ok(Dataset {
            features,
            labels,
            num_classes,
            reserved,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
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

    pub fn is_reserved(&self, row: usize) -> bool {
        self.reserved[row]
    }

    /// Indices of rows not reserved for the alignment set, ascending.
    pub fn available(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.reserved[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            reserved: vec![false; indices.len()],
        }
    }

    /// Features followed by the label as the last column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (r, label) in self.labels.iter().enumerate() {
            for v in self.features.row(r) {
                let _ = write!(out, "{v:?},");
            }
            let _ = writeln!(out, "{label}");
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Gaussian class means on a sphere; samples are mean plus isotropic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub means: Matrix,
    pub noise_std: f64,
}

impl MixtureModel {
    pub fn new(classes: usize, dim: usize, separation: f64, noise_std: f64, rng: &mut RngStream) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if !(separation > 0.0) || !separation.is_finite() {
            return Err(Error::Config(format!("separation must be positive, got {separation}")));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {noise_std}")));
        }
        let mut data = Vec::with_capacity(classes * dim);
        for _ in 0..classes {
            let dir: Vec<f64> = loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-8 {
                    break v.into_iter().map(|x| separation * x / n).collect();
                }
            };
            data.extend(dir);
        }
        Ok(MixtureModel {
            means: Matrix::new(classes, dim, data)?,
            noise_std,
        })
    }

    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    /// Same mixture with every mean translated by `offset`.
    pub fn shifted(&self, offset: &[f64]) -> Result<MixtureModel> {
        Ok(MixtureModel {
            means: self.means.add_row_vector(offset)?,
            noise_std: self.noise_std,
        })
    }

    /// `per_class` points of every class, shuffled.
    pub fn sample(&self, per_class: usize, rng: &mut RngStream) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        let k = self.classes();
        let mut labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        rng.shuffle(&mut labels);
        let dim = self.means.cols();
        let mut data = Vec::with_capacity(labels.len() * dim);
        for &c in &labels {
            for &m in self.means.row(c) {
                let noise = if self.noise_std > 0.0 { self.noise_std * rng.normal() } else { 0.0 };
                data.push(m + noise);
            }
        }
        Dataset::new(Matrix::new(labels.len(), dim, data)?, labels, k)
    }
}

/// `K`-class Gaussian mixture in `d` dimensions with `per_class` points each.
pub fn synth_mixture(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    MixtureModel::new(classes, dim, separation, noise_std, rng)?.sample(per_class, rng)
}

/// Parses comma-separated rows; `label_column` (0-based) holds the integer
/// class and every other column is a feature. Blank lines are skipped.
pub fn parse_csv(text: &str, label_column: usize) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if label_column >= fields.len() {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("label column {label_column} missing ({} fields)", fields.len()),
            });
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("expected {w} fields, found {}", fields.len()),
                })
            }
            _ => {}
        }
        for (c, f) in fields.iter().enumerate() {
            if c == label_column {
                let label: usize = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    detail: format!("label {f:?} is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    detail: format!("field {} ({f:?}) is not numeric", c + 1),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        detail: format!("field {} is not finite", c + 1),
                    });
                }
                features.push(v);
            }
        }
    }
    let dim = width.map_or(0, |w| w - 1);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::new(labels.len(), dim, features)?, labels, k)
}

pub fn load_csv(path: impl AsRef<Path>, label_column: usize) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?, label_column)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Noniid,
}

/// Row indices per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    pub client_indices: Vec<Vec<usize>>,
    /// Classes held by each client (non-IID only).
    pub client_classes: Option<Vec<Vec<usize>>>,
    pub classes_per_client: Option<usize>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Structured text listing each client's rows as compact ranges.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            PartitionMode::Iid => "iid",
            PartitionMode::Noniid => "noniid",
        };
        let _ = writeln!(out, "mode = \"{mode}\"");
        if let Some(c) = self.classes_per_client {
            let _ = writeln!(out, "classes_per_client = {c}");
        }
        for (k, idx) in self.client_indices.iter().enumerate() {
            let _ = writeln!(out, "\n[[client]]\nid = {k}");
            if let Some(classes) = &self.client_classes {
                let _ = writeln!(out, "classes = {:?}", classes[k]);
            }
            let _ = writeln!(out, "rows = {}", idx.len());
            let _ = writeln!(out, "ranges = {:?}", ranges(idx));
        }
        out
    }
}

fn ranges(indices: &[usize]) -> Vec<String> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i];
        let mut end = start;
        while i + 1 < sorted.len() && sorted[i + 1] == end + 1 {
            i += 1;
            end = sorted[i];
        }
        out.push(if start == end { format!("{start}") } else { format!("{start}-{end}") });
        i += 1;
    }
    out
}

/// Uniform random split of the available rows into `clients` shards whose
/// sizes differ by at most one.
pub fn partition_iid(ds: &Dataset, clients: usize, rng: &mut RngStream) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let mut rows = ds.available();
    rng.shuffle(&mut rows);
    let base = rows.len() / clients;
    let extra = rows.len() % clients;
    let mut client_indices = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let size = base + usize::from(k < extra);
        let mut shard = rows[start..start + size].to_vec();
        shard.sort_unstable();
        client_indices.push(shard);
        start += size;
    }
    Ok(PartitionPlan {
        mode: PartitionMode::Iid,
        client_indices,
        client_classes: None,
        classes_per_client: None,
    })
}

/// Shuffles the classes and gives each client every available row of
/// `K / N` of them. Requires `N ≤ K` and `K mod N = 0`.
pub fn partition_noniid(ds: &Dataset, clients: usize, rng: &mut RngStream) -> Result<PartitionPlan> {
    let k = ds.num_classes();
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if clients > k || k % clients != 0 {
        return Err(Error::Config(format!(
            "disjoint-class partition needs the class count ({k}) to be a multiple of the client count ({clients}); use the iid mode instead"
        )));
    }
    let per = k / clients;
    let mut classes: Vec<usize> = (0..k).collect();
    rng.shuffle(&mut classes);
    let mut owner = vec![0usize; k];
    let mut client_classes = Vec::with_capacity(clients);
    for (c, group) in classes.chunks(per).enumerate() {
        let mut g = group.to_vec();
        g.sort_unstable();
        for &class in &g {
            owner[class] = c;
        }
        client_classes.push(g);
    }
    let mut client_indices = vec![Vec::new(); clients];
    for row in ds.available() {
        client_indices[owner[ds.labels[row]]].push(row);
    }
    Ok(PartitionPlan {
        mode: PartitionMode::Noniid,
        client_indices,
        client_classes: Some(client_classes),
        classes_per_client: Some(per),
    })
}

pub fn partition(ds: &Dataset, clients: usize, mode: PartitionMode, rng: &mut RngStream) -> Result<PartitionPlan> {
    match mode {
        PartitionMode::Iid => partition_iid(ds, clients, rng),
        PartitionMode::Noniid => partition_noniid(ds, clients, rng),
    }
}

/// Unlabeled alignment rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RadSet {
    pub features: Matrix,
    pub source: String,
    /// Rows of the pool the set was drawn from, when drawn from one.
    pub pool_rows: Vec<usize>,
}

impl RadSet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Draws `size` available rows without replacement, reserving them in `pool`
/// so later partitions exclude them. Labels are dropped.
pub fn sample_rad(pool: &mut Dataset, size: usize, rng: &mut RngStream) -> Result<RadSet> {
    let mut rows = pool.available();
    if size < 2 {
        return Err(Error::Config(format!("alignment set needs at least 2 rows, got {size}")));
    }
    if size > rows.len() {
        return Err(Error::Config(format!(
            "alignment set of {size} rows requested from a pool of {}",
            rows.len()
        )));
    }
    rng.shuffle(&mut rows);
    rows.truncate(size);
    rows.sort_unstable();
    for &r in &rows {
        pool.reserved[r] = true;
    }
    Ok(RadSet {
        features: pool.features.select_rows(&rows),
        source: "pool".into(),
        pool_rows: rows,
    })
}

/// Alignment rows drawn from a separate (usually shifted) mixture.
pub fn sample_rad_from(model: &MixtureModel, size: usize, rng: &mut RngStream) -> Result<RadSet> {
    if size < 2 {
        return Err(Error::Config(format!("alignment set needs at least 2 rows, got {size}")));
    }
    let per_class = size.div_ceil(model.classes());
    let ds = model.sample(per_class, rng)?;
    let rows: Vec<usize> = (0..size).collect();
    Ok(RadSet {
        features: ds.features.select_rows(&rows),
        source: "shifted".into(),
        pool_rows: Vec::new(),
    })
}

/// Stratified split: within every class the first `train_fraction` of rows
/// (after a seeded shuffle) go to train, the rest to test.
pub fn stratified_split(ds: &Dataset, train_fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..ds.num_classes {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        rng.shuffle(&mut rows);
        let cut = (rows.len() as f64 * train_fraction).round() as usize;
        train.extend_from_slice(&rows[..cut]);
        test.extend_from_slice(&rows[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}
