//! Evaluation: unsupervised clustering accuracy, parent accuracy, the
//! k-means baseline, and graph / embedding exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::acol::AnnotationAssignment;
use crate::error::{Error, Result};
use crate::numeric::{matmul_nt, Matrix};
use crate::rng::{stream_rng, Stream};

/// Cluster-by-label count table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    /// Distinct true labels, ascending; column `c` counts `labels[c]`.
    pub labels: Vec<usize>,
    /// `counts[cluster - 1][c]`.
    pub counts: Vec<Vec<usize>>,
}

/// Counts of (1-based cluster, true label) pairs. The number of rows is the
/// largest cluster id seen.
pub fn contingency(assignments: &[usize], truth: &[usize]) -> Result<Contingency> {
    if assignments.len() != truth.len() {
        return Err(Error::Length {
            op: "contingency",
            left: assignments.len(),
            right: truth.len(),
        });
    }
    if assignments.contains(&0) {
        return Err(Error::Config("cluster ids are 1-based".into()));
    }
    let mut label_index = BTreeMap::new();
    for &t in truth {
        label_index.entry(t).or_insert(0usize);
    }
    for (i, v) in label_index.values_mut().enumerate() {
        *v = i;
    }
    let n = assignments.iter().copied().max().unwrap_or(0);
    let mut counts = vec![vec![0usize; label_index.len()]; n];
    for (&a, t) in assignments.iter().zip(truth) {
        counts[a - 1][label_index[t]] += 1;
    }
    Ok(Contingency {
        labels: label_index.into_keys().collect(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMapping {
    /// `mapping[cluster - 1]` is the matched true label, `None` if unmatched.
    pub mapping: Vec<Option<usize>>,
    pub matched: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl ClusterMapping {
    pub fn unmatched_clusters(&self) -> Vec<usize> {
        self.mapping
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_none())
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with row/column potentials). Returns `row_of_col`.
fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; index 0 is the virtual column
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    p[1..].iter().map(|&r| r - 1).collect()
}

/// Best one-to-one cluster-to-label mapping and its accuracy.
///
/// `assignments` are 1-based cluster ids. Clusters may outnumber labels;
/// the surplus clusters stay unmatched and score nothing.
pub fn clustering_accuracy(assignments: &[usize], truth: &[usize]) -> Result<ClusterMapping> {
    let table = contingency(assignments, truth)?;
    let rows = table.counts.len();
    let cols = table.labels.len();
    let size = rows.max(cols);
    let max = table.counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    let mut cost = vec![vec![max; size]; size];
    for (r, row) in table.counts.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            cost[r][c] = max - count as i64;
        }
    }
    let row_of_col = hungarian_min(&cost);
    let mut mapping = vec![None; rows];
    let mut matched = 0;
    for (c, &r) in row_of_col.iter().enumerate() {
        if r < rows && c < cols && table.counts[r][c] > 0 {
            mapping[r] = Some(table.labels[c]);
            matched += table.counts[r][c];
        }
    }
    let total = truth.len();
    Ok(ClusterMapping {
        mapping,
        matched,
        total,
        accuracy: if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        },
    })
}

/// Node ids of a list of annotations, ready for [`clustering_accuracy`].
pub fn annotation_nodes(annotations: &[AnnotationAssignment]) -> Vec<usize> {
    annotations.iter().map(|a| a.node).collect()
}

/// Fraction of rows whose argmax (lowest index on ties) is the 1-based label.
pub fn parent_accuracy(parent_probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if parent_probs.rows() != labels.len() {
        return Err(Error::Length {
            op: "parent_accuracy",
            left: parent_probs.rows(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let correct = (0..labels.len())
        .filter(|&r| parent_probs.row_argmax(r) + 1 == labels[r])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 300,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Matrix,
    /// 0-based cluster of each training row.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and the squared distance to it.
fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(x: &Matrix, n: usize, rng: &mut impl Rng) -> Matrix {
    let m = x.rows();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < n {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // every point coincides with a chosen center; take any unchosen index
            (0..m).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn lloyd(x: &Matrix, mut centroids: Matrix, max_iter: usize) -> KMeans {
    let (m, dim) = x.shape();
    let n = centroids.rows();
    let mut assignments = vec![usize::MAX; m];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; m];
        for i in 0..m {
            let (c, d) = nearest(x.row(i), &centroids);
            if c != assignments[i] {
                assignments[i] = c;
                changed = true;
            }
            inertia += d;
            dists[i] = d;
        }
        history.push(inertia);
        if !changed || iterations >= max_iter {
            return KMeans {
                centroids,
                assignments,
                inertia,
                history,
                iterations,
            };
        }
        iterations += 1;

        let mut sums = Matrix::zeros(n, dim);
        let mut counts = vec![0usize; n];
        for i in 0..m {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..n {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // re-seat an empty cluster on the worst-served point
                let far = (0..m).max_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap();
                centroids.row_mut(c).copy_from_slice(x.row(far));
                dists[far] = 0.0;
            }
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `params.restarts` runs
/// by inertia.
pub fn kmeans(x: &Matrix, n: usize, seed: u64, params: KMeansParams) -> Result<KMeans> {
    if n == 0 || n > x.rows() {
        return Err(Error::Config(format!(
            "k-means needs 1 <= n <= m, got n = {n}, m = {}",
            x.rows()
        )));
    }
    let mut rng = stream_rng(seed, Stream::KMeans);
    let mut best: Option<KMeans> = None;
    for _ in 0..params.restarts.max(1) {
        let init = plus_plus_seed(x, n, &mut rng);
        let run = lloyd(x, init, params.max_iter);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

impl KMeans {
    /// 0-based nearest centroid of every row.
    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        x.row_iter().map(|r| nearest(r, &self.centroids).0).collect()
    }
}

/// The baseline that knows the parent labels: `k` clusters are fit inside
/// each parent separately and the results combined. Cluster `s` of parent
/// `p` (both 1-based) gets the id `(s - 1)·n_p + p`, the same numbering as
/// the ACOL output nodes.
#[derive(Debug, Clone)]
pub struct PerParentKMeans {
    pub n_parents: usize,
    pub k: usize,
    pub models: Vec<KMeans>,
}

impl PerParentKMeans {
    pub fn fit(
        x: &Matrix,
        parents: &[usize],
        n_parents: usize,
        k: usize,
        seed: u64,
        params: KMeansParams,
    ) -> Result<Self> {
        if x.rows() != parents.len() {
            return Err(Error::Length {
                op: "PerParentKMeans::fit",
                left: x.rows(),
                right: parents.len(),
            });
        }
        let mut models = Vec::with_capacity(n_parents);
        for p in 1..=n_parents {
            let idx: Vec<usize> = (0..parents.len()).filter(|&i| parents[i] == p).collect();
            if idx.len() < k {
                return Err(Error::Config(format!(
                    "parent {p} has {} examples, fewer than k = {k}",
                    idx.len()
                )));
            }
            models.push(kmeans(&x.select_rows(&idx), k, seed.wrapping_add(p as u64), params)?);
        }
        Ok(Self { n_parents, k, models })
    }

    /// 1-based combined cluster ids for rows with known parents.
    pub fn predict(&self, x: &Matrix, parents: &[usize]) -> Result<Vec<usize>> {
        if x.rows() != parents.len() {
            return Err(Error::Length {
                op: "PerParentKMeans::predict",
                left: x.rows(),
                right: parents.len(),
            });
        }
        x.row_iter()
            .zip(parents)
            .map(|(row, &p)| {
                let model = self.models.get(p.wrapping_sub(1)).ok_or(Error::LabelOutOfRange {
                    index: 0,
                    label: p,
                    n_parents: self.n_parents,
                })?;
                let sub = nearest(row, &model.centroids).0;
                Ok(sub * self.n_parents + p)
            })
            .collect()
    }
}

/// Six significant digits, `%g` style.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// Edges `i < j` (1-based) of `A·Aᵀ` whose weight exceeds `threshold`.
pub fn graph_edges(activity: &Matrix, threshold: f64) -> Vec<(usize, usize, f64)> {
    let m = matmul_nt(activity, activity).expect("A·Aᵀ is always conformable");
    let mut edges = Vec::new();
    for i in 0..m.rows() {
        for j in i + 1..m.cols() {
            let w = m[(i, j)];
            if w > threshold {
                edges.push((i + 1, j + 1, w));
            }
        }
    }
    edges
}

/// Writes the similarity graph `A·Aᵀ` (with `A` either `B` or `Y`) as an
/// edge list: `i j weight` per line. Optional vertex labels are written
/// first as `# v i label` comment lines.
pub fn export_graph(
    activity: &Matrix,
    threshold: f64,
    truth: Option<&[usize]>,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    if let Some(t) = truth {
        if t.len() != activity.rows() {
            return Err(Error::Length {
                op: "export_graph",
                left: activity.rows(),
                right: t.len(),
            });
        }
    }
    let edges = graph_edges(activity, threshold);
    let mut out = String::new();
    writeln!(
        out,
        "# {} vertices, {} edges, threshold {}",
        activity.rows(),
        edges.len(),
        format_sig6(threshold)
    )
    .unwrap();
    if let Some(t) = truth {
        for (i, label) in t.iter().enumerate() {
            writeln!(out, "# v {} {label}", i + 1).unwrap();
        }
    }
    for (i, j, w) in &edges {
        writeln!(out, "{i} {j} {}", format_sig6(*w)).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(edges.len())
}

/// One row per example: `z1..zn,assigned,parent,sub,truth`. Values use the
/// shortest representation that parses back exactly; `truth` is empty when
/// unknown.
pub fn embeddings_csv(
    z: &Matrix,
    annotations: &[AnnotationAssignment],
    truth: Option<&[usize]>,
) -> Result<String> {
    if annotations.len() != z.rows() {
        return Err(Error::Length {
            op: "export_embeddings",
            left: z.rows(),
            right: annotations.len(),
        });
    }
    if let Some(t) = truth {
        if t.len() != z.rows() {
            return Err(Error::Length {
                op: "export_embeddings",
                left: z.rows(),
                right: t.len(),
            });
        }
    }
    let mut out = String::new();
    for j in 1..=z.cols() {
        write!(out, "z{j},").unwrap();
    }
    out.push_str("assigned,parent,sub,truth\n");
    for (i, a) in annotations.iter().enumerate() {
        for v in z.row(i) {
            write!(out, "{v},").unwrap();
        }
        write!(out, "{},{},{},", a.node, a.parent, a.sub).unwrap();
        if let Some(t) = truth {
            write!(out, "{}", t[i]).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(
    z: &Matrix,
    annotations: &[AnnotationAssignment],
    truth: Option<&[usize]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let csv = embeddings_csv(z, annotations, truth)?;
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acol::{assign_annotations, AcolHead};
    use crate::data::synthetic_blobs;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over injective cluster-to-label maps.
    fn brute_force_acc(assignments: &[usize], truth: &[usize]) -> usize {
        let n = *assignments.iter().max().unwrap();
        let mut labels: Vec<usize> = truth.to_vec();
        labels.sort_unstable();
        labels.dedup();
        let mut best = 0;
        let mut mapping = vec![None; n];
        fn rec(
            c: usize,
            mapping: &mut Vec<Option<usize>>,
            used: &mut Vec<bool>,
            labels: &[usize],
            a: &[usize],
            t: &[usize],
            best: &mut usize,
        ) {
            if c == mapping.len() {
                let score = a
                    .iter()
                    .zip(t)
                    .filter(|(&ai, &ti)| mapping[ai - 1] == Some(ti))
                    .count();
                *best = (*best).max(score);
                return;
            }
            mapping[c] = None;
            rec(c + 1, mapping, used, labels, a, t, best);
            for (li, &l) in labels.iter().enumerate() {
                if !used[li] {
                    used[li] = true;
                    mapping[c] = Some(l);
                    rec(c + 1, mapping, used, labels, a, t, best);
                    used[li] = false;
                }
            }
            mapping[c] = None;
        }
        let mut used = vec![false; labels.len()];
        rec(0, &mut mapping, &mut used, &labels, assignments, truth, &mut best);
        best
    }

    #[test]
    fn permuted_assignments_score_one() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let assign = [3, 3, 1, 1, 2, 2, 2];
        let acc = clustering_accuracy(&assign, &truth).unwrap();
        assert_eq!(acc.accuracy, 1.0);
        assert_eq!(acc.mapping, vec![Some(1), Some(2), Some(0)]);
    }

    #[test]
    fn single_cluster_two_classes() {
        let acc = clustering_accuracy(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(acc.accuracy, 0.5);
    }

    #[test]
    fn surplus_clusters_unmatched() {
        let acc = clustering_accuracy(&[1, 2, 3, 4], &[0, 0, 1, 1]).unwrap();
        assert_eq!(acc.accuracy, 0.5);
        assert_eq!(acc.unmatched_clusters().len(), 2);
    }

    #[test]
    fn matches_brute_force_on_30_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let assign: Vec<usize> = (0..30).map(|_| rng.random_range(1..=4)).collect();
        let truth: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
        let acc = clustering_accuracy(&assign, &truth).unwrap();
        assert_eq!(acc.matched, brute_force_acc(&assign, &truth));
    }

    #[test]
    fn length_mismatch() {
        assert!(clustering_accuracy(&[1, 2], &[0]).is_err());
        assert!(parent_accuracy(&Matrix::zeros(2, 2), &[1]).is_err());
    }

    #[test]
    fn parent_accuracy_cases() {
        let onehot = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(parent_accuracy(&onehot, &[1, 2, 1]).unwrap(), 1.0);
        // uniform rows resolve to parent 1
        let uniform = Matrix::from_fn(4, 2, |_, _| 0.5);
        assert_eq!(parent_accuracy(&uniform, &[1, 1, 1, 1]).unwrap(), 1.0);
        assert_eq!(parent_accuracy(&uniform, &[1, 2, 1, 2]).unwrap(), 0.5);
        assert_eq!(parent_accuracy(&uniform, &[2, 2, 1, 2]).unwrap(), 0.25);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = Matrix::from_fn(25, 3, |_, _| rng.random::<f64>());
        let t: Vec<usize> = (0..25).map(|_| rng.random_range(1..=3)).collect();
        let mut correct = 0;
        for r in 0..25 {
            let row = y.row(r);
            let mut best = 0;
            for j in 1..3 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best + 1 == t[r] {
                correct += 1;
            }
        }
        assert_eq!(parent_accuracy(&y, &t).unwrap(), correct as f64 / 25.0);
    }

    #[test]
    fn kmeans_separable_pairs() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [100.0, 100.0], [101.0, 100.0]]);
        let km = kmeans(&x, 2, 1, KMeansParams::default()).unwrap();
        assert_eq!(km.assignments[0], km.assignments[1]);
        assert_eq!(km.assignments[2], km.assignments[3]);
        assert_ne!(km.assignments[0], km.assignments[2]);
        // each pair sits 1 apart: 2 · (0.5² + 0.5²)
        assert!((km.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_one_cluster_per_point() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [3.0, 1.0], [5.0, 5.0]]);
        let km = kmeans(&x, 3, 2, KMeansParams::default()).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut a = km.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
        assert!(kmeans(&x, 4, 2, KMeansParams::default()).is_err());
    }

    #[test]
    fn kmeans_recovers_blobs() {
        let d = synthetic_blobs(2, 3, 100, 8, 10.0, 6).unwrap();
        let km = kmeans(&d.features, 6, 0, KMeansParams::default()).unwrap();
        let assign: Vec<usize> = km.assignments.iter().map(|a| a + 1).collect();
        let acc = clustering_accuracy(&assign, d.fine.as_ref().unwrap()).unwrap();
        assert!(acc.accuracy >= 0.99, "{}", acc.accuracy);

        let pp = PerParentKMeans::fit(&d.features, &d.parents, 2, 3, 0, KMeansParams::default())
            .unwrap();
        let ids = pp.predict(&d.features, &d.parents).unwrap();
        assert!(ids.iter().zip(&d.parents).all(|(id, p)| (id - 1) % 2 + 1 == *p));
        let acc = clustering_accuracy(&ids, d.fine.as_ref().unwrap()).unwrap();
        assert!(acc.accuracy >= 0.99, "{}", acc.accuracy);
    }

    #[test]
    fn kmeans_is_seeded() {
        let d = synthetic_blobs(2, 2, 30, 3, 2.0, 1).unwrap();
        let a = kmeans(&d.features, 4, 5, KMeansParams::default()).unwrap();
        let b = kmeans(&d.features, 4, 5, KMeansParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_export_cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        assert_eq!(export_graph(&Matrix::identity(2), 0.5, None, &path).unwrap(), 0);
        let b = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(export_graph(&b, 0.5, Some(&[3, 3]), &path).unwrap(), 1);
        let text = fs::read_to_string(&path).unwrap();
        let edges: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(edges, vec!["1 2 1"]);
        assert!(text.contains("# v 2 3"));
        assert!(export_graph(&b, 0.5, None, dir.path().join("missing/g.txt")).is_err());
    }

    #[test]
    fn graph_export_matches_direct_product() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = Matrix::from_fn(7, 3, |_, _| rng.random_range(0.0..1.0));
        export_graph(&b, 0.3, None, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut expected = Vec::new();
        for i in 0..7 {
            for j in i + 1..7 {
                let w: f64 = (0..3).map(|c| b[(i, c)] * b[(j, c)]).sum();
                if w > 0.3 {
                    expected.push((i + 1, j + 1, w));
                }
            }
        }
        let got: Vec<(usize, usize, f64)> = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| {
                let f: Vec<&str> = l.split(' ').collect();
                (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
            })
            .collect();
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(&expected) {
            assert_eq!((g.0, g.1), (e.0, e.1));
            assert!((g.2 - e.2).abs() <= 1e-5 * e.2.abs());
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(0.0000123456), "1.23456e-5");
        assert_eq!(format_sig6(12.5), "12.5");
        assert_eq!(format_sig6(0.0), "0");
    }

    #[test]
    fn embeddings_roundtrip() {
        let head = AcolHead::new(2, 2).unwrap();
        let z = Matrix::from_rows(&[
            [0.1, -2.5, 3.25, 1.0 / 3.0],
            [9.0, 1.0, 2.0, 3.0],
            [-1e-7, 5.0, 4.0, 0.0],
        ]);
        let ann = assign_annotations(&z, &head).unwrap();
        let csv = embeddings_csv(&z, &ann, Some(&[4, 1, 7])).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "z1,z2,z3,z4,assigned,parent,sub,truth");
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), z.cols() + 4);
            for j in 0..4 {
                let v: f64 = fields[j].parse().unwrap();
                assert_eq!(v, z[(i, j)]);
            }
            assert_eq!(fields[4].parse::<usize>().unwrap(), ann[i].node);
        }
        let no_truth = embeddings_csv(&z, &ann, None).unwrap();
        assert!(no_truth.lines().nth(1).unwrap().ends_with(','));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hungarian_equals_brute_force(
            n in 1usize..=5, classes in 1usize..=5, m in 1usize..=30, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<usize> = (0..m).map(|_| rng.random_range(1..=n)).collect();
            let t: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
            let acc = clustering_accuracy(&a, &t).unwrap();
            prop_assert_eq!(acc.matched, brute_force_acc(&a, &t));
        }

        #[test]
        fn acc_invariant_under_relabeling(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<usize> = (0..40).map(|_| rng.random_range(1..=5)).collect();
            let t: Vec<usize> = (0..40).map(|_| rng.random_range(0..4)).collect();
            let mut cperm: Vec<usize> = (1..=5).collect();
            cperm.shuffle(&mut rng);
            let mut lperm: Vec<usize> = (10..14).collect();
            lperm.shuffle(&mut rng);
            let a2: Vec<usize> = a.iter().map(|&c| cperm[c - 1]).collect();
            let t2: Vec<usize> = t.iter().map(|&l| lperm[l]).collect();
            let base = clustering_accuracy(&a, &t).unwrap().matched;
            prop_assert_eq!(clustering_accuracy(&a2, &t2).unwrap().matched, base);
        }

        #[test]
        fn acc_beats_any_fixed_mapping(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<usize> = (0..40).map(|_| rng.random_range(1..=4)).collect();
            let t: Vec<usize> = (0..40).map(|_| rng.random_range(0..4)).collect();
            let best = clustering_accuracy(&a, &t).unwrap().matched;
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rng);
            let fixed = a.iter().zip(&t).filter(|(&c, &l)| perm[c - 1] == l).count();
            prop_assert!(best >= fixed);
        }

        #[test]
        fn lloyd_inertia_never_increases(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_fn(60, 3, |_, _| rng.random_range(-5.0..5.0));
            let km = kmeans(&x, 4, seed, KMeansParams { max_iter: 100, restarts: 1 }).unwrap();
            for w in km.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
        }
    }
}
