//! Datasets: IDX ingestion, parent partitions over fine labels, a synthetic
//! Gaussian-blob generator and seeded splits.
//!
//! Fine labels are 0-based (MNIST digits 0-9); parent labels are 1-based.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TrainingData;
use crate::numeric::Matrix;
use crate::rng::{stream_rng, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw unsigned-byte images from an IDX3 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, payload: usize) -> Result<()> {
    let expected = header + payload;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, IDX_IMAGES_MAGIC)?;
        let count = read_u32(bytes, 4)? as usize;
        let rows = read_u32(bytes, 8)? as usize;
        let cols = read_u32(bytes, 12)? as usize;
        check_payload(bytes, 16, count * rows * cols)?;
        Ok(Self {
            count,
            rows,
            cols,
            pixels: bytes[16..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGES_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Row-major pixels scaled to `[0, 1]` by `/255`.
    pub fn to_features(&self) -> Matrix {
        let d = self.rows * self.cols;
        Matrix::from_vec(
            self.count,
            d,
            self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
        .expect("pixel count checked at parse time")
    }

    /// Inverse of [`IdxImages::to_features`].
    pub fn from_features(features: &Matrix, rows: usize, cols: usize) -> Result<Self> {
        if features.cols() != rows * cols {
            return Err(Error::shape("IdxImages::from_features", features.shape(), (rows, cols)));
        }
        Ok(Self {
            count: features.rows(),
            rows,
            cols,
            pixels: features
                .data()
                .iter()
                .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxLabels(pub Vec<u8>);

impl IdxLabels {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, IDX_LABELS_MAGIC)?;
        let count = read_u32(bytes, 4)? as usize;
        check_payload(bytes, 8, count)?;
        Ok(Self(bytes[8..].to_vec()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.0.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.0.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.0);
        out
    }
}

/// Features with their fine labels, before any parent partition.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Image geometry when the features are pixels.
    pub image_shape: Option<(usize, usize)>,
    pub source: String,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_shape: self.image_shape,
            source: self.source.clone(),
        }
    }

    /// Distinct fine labels in ascending order.
    pub fn label_set(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Re-encodes as an (images, labels) IDX pair.
    pub fn to_idx(&self) -> Result<(IdxImages, IdxLabels)> {
        let (rows, cols) = self
            .image_shape
            .ok_or_else(|| Error::Config("dataset has no image geometry".into()))?;
        let labels = self
            .labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| Error::Config(format!("label {l} exceeds a byte"))))
            .collect::<Result<Vec<_>>>()?;
        Ok((IdxImages::from_features(&self.features, rows, cols)?, IdxLabels(labels)))
    }
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<RawDataset> {
    let images = IdxImages::parse(images)?;
    let labels = IdxLabels::parse(labels)?;
    if images.count != labels.0.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.0.len(),
        });
    }
    Ok(RawDataset {
        features: images.to_features(),
        labels: labels.0.iter().map(|&l| usize::from(l)).collect(),
        image_shape: Some((images.rows, images.cols)),
        source: String::new(),
    })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let mut raw = parse_idx(&images, &labels)?;
    raw.source = format!("idx:{}", ip.display());
    Ok(raw)
}

/// Maps fine labels to 1-based parents; excluded fine labels are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentPartition {
    assignment: BTreeMap<usize, usize>,
    excluded: BTreeSet<usize>,
}

impl ParentPartition {
    /// `groups[p]` lists the fine labels of parent `p + 1`.
    pub fn from_groups(groups: &[Vec<usize>]) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (p, group) in groups.iter().enumerate() {
            for &label in group {
                if assignment.insert(label, p + 1).is_some() {
                    return Err(Error::Config(format!(
                        "fine label {label} assigned to more than one parent"
                    )));
                }
            }
        }
        let out = Self {
            assignment,
            excluded: BTreeSet::new(),
        };
        out.validate()?;
        Ok(out)
    }

    /// Labels below `threshold` go to parent 1, the rest of `labels` to parent 2.
    pub fn threshold(labels: impl IntoIterator<Item = usize>, threshold: usize) -> Result<Self> {
        let (low, high): (Vec<usize>, Vec<usize>) =
            labels.into_iter().partition(|&l| l < threshold);
        Self::from_groups(&[low, high])
    }

    /// Every fine label is its own parent.
    pub fn identity(labels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let groups: Vec<Vec<usize>> = labels.into_iter().map(|l| vec![l]).collect();
        Self::from_groups(&groups)
    }

    /// Label `l` at position `i` of `labels` goes to parent `(i mod n_p) + 1`,
    /// mirroring the interleaved node-to-parent layout of the output layer.
    pub fn interleaved(labels: &[usize], n_parents: usize) -> Result<Self> {
        let mut groups = vec![Vec::new(); n_parents];
        for (i, &l) in labels.iter().enumerate() {
            groups[i % n_parents].push(l);
        }
        Self::from_groups(&groups)
    }

    /// Seeded shuffle of `labels` cut into `n_parents` near-equal groups.
    pub fn random(labels: &[usize], n_parents: usize, seed: u64) -> Result<Self> {
        if n_parents < 2 || labels.len() < n_parents {
            return Err(Error::Config(format!(
                "cannot split {} labels into {n_parents} parents",
                labels.len()
            )));
        }
        let mut shuffled = labels.to_vec();
        shuffled.shuffle(&mut stream_rng(seed, Stream::Partition));
        let base = labels.len() / n_parents;
        let extra = labels.len() % n_parents;
        let mut groups = Vec::with_capacity(n_parents);
        let mut start = 0;
        for p in 0..n_parents {
            let len = base + usize::from(p < extra);
            let mut g = shuffled[start..start + len].to_vec();
            g.sort_unstable();
            groups.push(g);
            start += len;
        }
        Self::from_groups(&groups)
    }

    pub fn excluding(mut self, labels: impl IntoIterator<Item = usize>) -> Result<Self> {
        for l in labels {
            self.assignment.remove(&l);
            self.excluded.insert(l);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let used: BTreeSet<usize> = self.assignment.values().copied().collect();
        if used.len() < 2 {
            return Err(Error::Config("a partition needs at least two non-empty parents".into()));
        }
        let max = *used.iter().max().unwrap();
        if used.len() != max {
            return Err(Error::Config(format!(
                "parents must be numbered 1..={max} without gaps"
            )));
        }
        Ok(())
    }

    pub fn n_parents(&self) -> usize {
        self.assignment.values().copied().max().unwrap_or(0)
    }

    pub fn parent_of(&self, fine: usize) -> Option<usize> {
        self.assignment.get(&fine).copied()
    }

    pub fn is_excluded(&self, fine: usize) -> bool {
        self.excluded.contains(&fine)
    }

    pub fn excluded(&self) -> impl Iterator<Item = usize> + '_ {
        self.excluded.iter().copied()
    }

    /// Fine labels of each parent, in parent order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_parents()];
        for (&fine, &p) in &self.assignment {
            groups[p - 1].push(fine);
        }
        groups
    }

    /// `{0,1,2,3,4}|{5,6,7,8,9}`.
    pub fn describe(&self) -> String {
        self.groups()
            .iter()
            .map(|g| {
                let inner: Vec<String> = g.iter().map(|l| l.to_string()).collect();
                format!("{{{}}}", inner.join(" "))
            })
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Features, 1-based parent labels and (for evaluation only) fine labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub parents: Vec<usize>,
    pub fine: Option<Vec<usize>>,
    pub n_parents: usize,
    pub meta: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    /// The view training consumes: features and parents, never fine labels.
    pub fn training_data(&self) -> TrainingData<'_> {
        TrainingData {
            features: &self.features,
            parents: &self.parents,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            parents: indices.iter().map(|&i| self.parents[i]).collect(),
            fine: self
                .fine
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
            n_parents: self.n_parents,
            meta: self.meta.clone(),
        }
    }

    /// Indices of examples whose parent is `parent`.
    pub fn indices_of_parent(&self, parent: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.parents[i] == parent).collect()
    }

    /// CSV with header `parent,fine,x0,...`; `fine` is empty when unknown.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parent,fine");
        for j in 0..self.features.cols() {
            write!(out, ",x{j}").unwrap();
        }
        out.push('\n');
        for i in 0..self.len() {
            write!(out, "{}", self.parents[i]).unwrap();
            match &self.fine {
                Some(f) => write!(out, ",{}", f[i]).unwrap(),
                None => out.push(','),
            }
            for x in self.features.row(i) {
                write!(out, ",{x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn apply_partition(raw: &RawDataset, partition: &ParentPartition) -> Result<LabeledDataset> {
    let mut keep = Vec::with_capacity(raw.len());
    let mut parents = Vec::with_capacity(raw.len());
    for (i, &label) in raw.labels.iter().enumerate() {
        if partition.is_excluded(label) {
            continue;
        }
        let p = partition.parent_of(label).ok_or(Error::UnmappedLabel(label))?;
        keep.push(i);
        parents.push(p);
    }
    Ok(LabeledDataset {
        features: raw.features.select_rows(&keep),
        parents,
        fine: Some(keep.iter().map(|&i| raw.labels[i]).collect()),
        n_parents: partition.n_parents(),
        meta: format!("{} partition={}", raw.source, partition.describe()),
    })
}

/// Centers of `count` clusters in `dim` dimensions, pairwise at least
/// `separation` apart, by rejection sampling in a cube that grows when
/// placement stalls.
fn place_centers(count: usize, dim: usize, separation: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut half = separation * (count as f64).powf(1.0 / dim as f64);
    loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
        let mut tries = 0;
        while centers.len() < count && tries < 10_000 {
            tries += 1;
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-half..=half)).collect();
            let ok = centers.iter().all(|o| {
                let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 >= separation * separation
            });
            if ok {
                centers.push(c);
            }
        }
        if centers.len() == count {
            return centers;
        }
        half *= 1.25;
    }
}

/// `count` isotropic unit-variance Gaussian clusters; the fine label of
/// each example is its cluster id.
pub fn synthetic_raw(
    clusters: usize,
    per_cluster: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<RawDataset> {
    if clusters == 0 || per_cluster == 0 || dim == 0 {
        return Err(Error::Config("synthetic blobs need positive sizes".into()));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let centers = place_centers(clusters, dim, separation, &mut rng);
    let m = clusters * per_cluster;
    let mut data = Vec::with_capacity(m * dim);
    let mut labels = Vec::with_capacity(m);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            data.extend(center.iter().map(|&mu| mu + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    Ok(RawDataset {
        features: Matrix::from_vec(m, dim, data)?,
        labels,
        image_shape: None,
        source: format!(
            "synthetic:clusters={clusters},per_cluster={per_cluster},dim={dim},separation={separation},seed={seed}"
        ),
    })
}

/// `n_p·k` blobs; cluster `c` belongs to parent `(c mod n_p) + 1`.
pub fn synthetic_blobs(
    n_parents: usize,
    k: usize,
    per_cluster: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let raw = synthetic_raw(n_parents * k, per_cluster, dim, separation, seed)?;
    let labels: Vec<usize> = (0..n_parents * k).collect();
    apply_partition(&raw, &ParentPartition::interleaved(&labels, n_parents)?)
}

/// Seeded split of `0..m` into (kept, held-out) index lists, each ascending.
pub fn split_indices(m: usize, held_out: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(rng);
    let mut held: Vec<usize> = perm[..held_out.min(m)].to_vec();
    let mut kept: Vec<usize> = perm[held_out.min(m)..].to_vec();
    held.sort_unstable();
    kept.sort_unstable();
    (kept, held)
}

pub fn split_validation(
    data: &LabeledDataset,
    size: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if size >= data.len() {
        return Err(Error::Config(format!(
            "validation size {size} must be smaller than the dataset ({})",
            data.len()
        )));
    }
    let (train, val) = split_indices(data.len(), size, &mut stream_rng(seed, Stream::Validation));
    Ok((data.subset(&train), data.subset(&val)))
}

/// Per-feature affine map to zero mean and unit variance, fit on one
/// sample and applied to others. Constant features are only centered.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        let m = x.rows();
        if m == 0 {
            return Err(Error::Config("cannot standardize an empty sample".into()));
        }
        let mean: Vec<f64> = x.column_sums().iter().map(|s| s / m as f64).collect();
        let mut var = vec![0.0; x.cols()];
        for row in x.row_iter() {
            for ((v, &a), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *v += (a - mu) * (a - mu);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / m as f64).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &mut Matrix) -> Result<()> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("standardize", x.shape(), (1, self.mean.len())));
        }
        for r in 0..x.rows() {
            for ((a, mu), sd) in x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *a = (*a - mu) / sd;
            }
        }
        Ok(())
    }
}
