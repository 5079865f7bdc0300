//! Hierarchical Ward clustering with the Lance–Williams recursion applied to
//! raw (non-squared) distances — the "ward.D" convention. A ward.D2 variant
//! squaring the input is available for sensitivity checks.
//!
//! The agglomeration runs the nearest-neighbor-chain algorithm, which is
//! O(n²) and produces the same stepwise dendrogram as greedy minimal-pair
//! merging for reducible linkages such as Ward.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sphere::{spherical_distance, SpherePoint};

/// A symmetric, zero-diagonal, non-negative distance matrix, stored as the
/// condensed upper triangle.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    condensed: Vec<f64>,
}

impl DistanceMatrix {
    /// Validate and condense a full matrix: symmetry within 1e-12, exactly
    /// zero diagonal, non-negative entries.
    pub fn from_full(full: &DMatrix<f64>) -> Result<Self> {
        let n = full.nrows();
        if full.ncols() != n {
            return Err(Error::Dimension(format!(
                "distance matrix must be square, got {}×{}",
                n,
                full.ncols()
            )));
        }
        for i in 0..n {
            if full[(i, i)] != 0.0 {
                return Err(Error::Range(format!(
                    "diagonal entry ({i},{i}) = {} is not exactly 0",
                    full[(i, i)]
                )));
            }
            for j in (i + 1)..n {
                if (full[(i, j)] - full[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Range(format!(
                        "asymmetry at ({i},{j}): {} vs {}",
                        full[(i, j)],
                        full[(j, i)]
                    )));
                }
                if full[(i, j)] < 0.0 {
                    return Err(Error::Range(format!(
                        "negative distance {} at ({i},{j})",
                        full[(i, j)]
                    )));
                }
            }
        }
        let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                condensed.push(full[(i, j)]);
            }
        }
        Ok(Self { n, condensed })
    }

    /// Build from a symmetric pairwise function evaluated on i < j. The
    /// condensed buffer is preallocated and filled by parallel row slices,
    /// so peak memory stays at one copy of the matrix.
    pub fn from_fn<F>(n: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<f64> + Sync,
    {
        if n == 0 {
            return Err(Error::Range("no observations to compare".into()));
        }
        let mut condensed = vec![0.0; n * (n - 1) / 2];
        let mut slices: Vec<(usize, &mut [f64])> = Vec::with_capacity(n);
        let mut rest: &mut [f64] = &mut condensed;
        for i in 0..(n.saturating_sub(1)) {
            let (row, tail) = std::mem::take(&mut rest).split_at_mut(n - i - 1);
            slices.push((i, row));
            rest = tail;
        }
        slices
            .into_par_iter()
            .try_for_each(|(i, row)| -> Result<()> {
                for (offset, j) in ((i + 1)..n).enumerate() {
                    let v = f(i, j)?;
                    if v < 0.0 {
                        return Err(Error::Range(format!(
                            "negative distance {v} at ({i},{j})"
                        )));
                    }
                    row[offset] = v;
                }
                Ok(())
            })?;
        Ok(Self { n, condensed })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.condensed[self.index(i, j)],
            std::cmp::Ordering::Greater => self.condensed[self.index(j, i)],
            std::cmp::Ordering::Equal => 0.0,
        }
    }
}

/// Pairwise great-circle distances between sphere points.
pub fn great_circle_distance_matrix(points: &[SpherePoint]) -> Result<DistanceMatrix> {
    if points.is_empty() {
        return Err(Error::Range("no points to compare".into()));
    }
    let dim = points[0].dim();
    for p in points {
        if p.dim() != dim {
            return Err(Error::Dimension(format!(
                "sphere dimensions differ: {} vs {}",
                dim,
                p.dim()
            )));
        }
    }
    DistanceMatrix::from_fn(points.len(), |i, j| spherical_distance(&points[i], &points[j]))
}

/// Pairwise Euclidean distances between the rows of a matrix.
pub fn euclidean_distance_matrix(rows: &DMatrix<f64>) -> Result<DistanceMatrix> {
    let n = rows.nrows();
    if n == 0 {
        return Err(Error::Range("no rows to compare".into()));
    }
    DistanceMatrix::from_fn(n, |i, j| {
        Ok((rows.row(i) - rows.row(j)).norm())
    })
}

/// Linkage convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkageVariant {
    /// Lance–Williams Ward coefficients on the raw input distances.
    WardD,
    /// The same recursion on squared distances, reporting square-rooted
    /// merge heights.
    WardD2,
}

/// One agglomeration step. Cluster ids follow the usual convention:
/// observations are 0..n−1 and the cluster created by merge t is n+t.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// A stepwise dendrogram.
#[derive(Debug, Clone)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    observations: usize,
}

impl Dendrogram {
    /// Reassemble a dendrogram from a stored merge table.
    pub fn from_parts(merges: Vec<Merge>, observations: usize) -> Self {
        Self {
            merges,
            observations,
        }
    }

    pub fn observations(&self) -> usize {
        self.observations
    }
}

/// The Lance–Williams Ward update for d(k, i∪j).
#[inline]
fn ward_update(d_ki: f64, d_kj: f64, d_ij: f64, n_i: f64, n_j: f64, n_k: f64) -> f64 {
    let t = n_i + n_j + n_k;
    (n_i + n_k) / t * d_ki + (n_j + n_k) / t * d_kj - n_k / t * d_ij
}

/// Ward linkage by nearest-neighbor chains.
pub fn ward_linkage(d: &DistanceMatrix, variant: LinkageVariant) -> Dendrogram {
    let n = d.n;
    let mut work = d.condensed.clone();
    if variant == LinkageVariant::WardD2 {
        for v in work.iter_mut() {
            *v *= *v;
        }
    }
    let idx = |i: usize, j: usize| -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        a * n - a * (a + 1) / 2 + (b - a - 1)
    };

    let mut active: Vec<bool> = vec![true; n];
    let mut sizes: Vec<usize> = vec![1; n];
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    // Raw merges as (representative_a, representative_b, height); cluster
    // membership is resolved afterwards.
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n.saturating_sub(1));

    while raw.len() + 1 < n {
        if chain.is_empty() {
            let first = active.iter().position(|&a| a).unwrap();
            chain.push(first);
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = if chain.len() >= 2 {
                Some(chain[chain.len() - 2])
            } else {
                None
            };
            // Nearest active neighbor; the chain predecessor wins ties so
            // reciprocal pairs are detected, otherwise the smallest index.
            let mut nearest = usize::MAX;
            let mut nearest_d = f64::INFINITY;
            if let Some(p) = prev {
                nearest = p;
                nearest_d = work[idx(a, p)];
            }
            // Strict improvement only: with the predecessor seeded first,
            // it wins ties (detecting reciprocal pairs), and among the rest
            // the smallest index wins.
            for b in 0..n {
                if b == a || !active[b] || Some(b) == prev {
                    continue;
                }
                let dist = work[idx(a, b)];
                if dist < nearest_d {
                    nearest = b;
                    nearest_d = dist;
                }
            }
            if Some(nearest) == prev {
                // Reciprocal nearest neighbors: merge a and prev.
                let b = prev.unwrap();
                chain.pop();
                chain.pop();
                let (keep, gone) = if a < b { (a, b) } else { (b, a) };
                let height = work[idx(a, b)];
                let (n_i, n_j) = (sizes[keep] as f64, sizes[gone] as f64);
                for k in 0..n {
                    if !active[k] || k == keep || k == gone {
                        continue;
                    }
                    let n_k = sizes[k] as f64;
                    let updated = ward_update(
                        work[idx(k, keep)],
                        work[idx(k, gone)],
                        height,
                        n_i,
                        n_j,
                        n_k,
                    );
                    work[idx(k, keep)] = updated;
                }
                active[gone] = false;
                sizes[keep] += sizes[gone];
                raw.push((keep, gone, height));
                break;
            }
            chain.push(nearest);
        }
    }

    // Stable-sort merges by height (ward.D is monotone, so this recovers
    // the greedy merge order for tie-free inputs) and rewrite ids into the
    // observation/new-cluster labelling.
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&x, &y| raw[x].2.partial_cmp(&raw[y].2).unwrap().then(x.cmp(&y)));

    let mut current_label: Vec<usize> = (0..n).collect();
    let mut member_count: Vec<usize> = vec![1; n];
    let mut merges = Vec::with_capacity(raw.len());
    if variant == LinkageVariant::WardD2 {
        for t in &mut raw {
            t.2 = t.2.sqrt();
        }
    }
    for (t, &o) in order.iter().enumerate() {
        let (rep_a, rep_b, height) = raw[o];
        let (la, lb) = (current_label[rep_a], current_label[rep_b]);
        let (left, right) = if la < lb { (la, lb) } else { (lb, la) };
        let size = member_count[rep_a] + member_count[rep_b];
        merges.push(Merge {
            left,
            right,
            height,
            size,
        });
        current_label[rep_a] = n + t;
        current_label[rep_b] = n + t;
        member_count[rep_a] = size;
        member_count[rep_b] = size;
    }

    Dendrogram {
        merges,
        observations: n,
    }
}

/// Cut a dendrogram into `k` clusters. Labels are 1..=k, renumbered by the
/// order of each cluster's first member.
pub fn cut(dendrogram: &Dendrogram, k: usize) -> Result<Vec<usize>> {
    let n = dendrogram.observations;
    if k == 0 || k > n {
        return Err(Error::Range(format!("cluster count {k} outside 1..={n}")));
    }
    // Union-find over observation ids plus merge-created cluster ids.
    let total = n + dendrogram.merges.len();
    let mut parent: Vec<usize> = (0..total).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (t, merge) in dendrogram.merges.iter().take(n - k).enumerate() {
        let cluster_id = n + t;
        let ra = find(&mut parent, merge.left);
        let rb = find(&mut parent, merge.right);
        parent[ra] = cluster_id;
        parent[rb] = cluster_id;
    }
    let mut label_of_root: std::collections::HashMap<usize, usize> =
        std::collections::HashMap::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let root = find(&mut parent, i);
        let next = label_of_root.len() + 1;
        let label = *label_of_root.entry(root).or_insert(next);
        labels.push(label);
    }
    Ok(labels)
}

/// Ward ("ward.D") clustering into `k` groups.
pub fn ward_cluster(d: &DistanceMatrix, k: usize) -> Result<Vec<usize>> {
    let dendrogram = ward_linkage(d, LinkageVariant::WardD);
    cut(&dendrogram, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_sphere_point;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_distance_matrix(rng: &mut ChaCha8Rng, n: usize) -> DistanceMatrix {
        // Distances from random points in the plane: continuous, so ties
        // have probability zero.
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0))
            .collect();
        DistanceMatrix::from_fn(n, |i, j| {
            let dx = pts[i].0 - pts[j].0;
            let dy = pts[i].1 - pts[j].1;
            Ok((dx * dx + dy * dy).sqrt())
        })
        .unwrap()
    }

    /// Brute-force greedy Lance–Williams recursion on a full matrix,
    /// entirely independent of the production path.
    pub(crate) fn greedy_oracle(d: &DistanceMatrix) -> Vec<Merge> {
        let n = d.len();
        let mut full = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                full[i][j] = d.get(i, j);
            }
        }
        struct Cluster {
            id: usize,
            row: usize,
            size: usize,
        }
        let mut clusters: Vec<Cluster> = (0..n)
            .map(|i| Cluster {
                id: i,
                row: i,
                size: 1,
            })
            .collect();
        let mut merges = Vec::new();
        for t in 0..(n - 1) {
            let mut best = (0usize, 1usize, f64::INFINITY);
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let dist = full[clusters[a].row][clusters[b].row];
                    if dist < best.2 {
                        best = (a, b, dist);
                    }
                }
            }
            let (a, b, height) = best;
            let (ia, ib) = (clusters[a].row, clusters[b].row);
            let (na, nb) = (clusters[a].size as f64, clusters[b].size as f64);
            for c in 0..clusters.len() {
                if c == a || c == b {
                    continue;
                }
                let ic = clusters[c].row;
                let nc = clusters[c].size as f64;
                let t_sum = na + nb + nc;
                let updated = (na + nc) / t_sum * full[ic][ia] + (nb + nc) / t_sum * full[ic][ib]
                    - nc / t_sum * height;
                full[ic][ia] = updated;
                full[ia][ic] = updated;
            }
            let (id_a, id_b) = (clusters[a].id, clusters[b].id);
            let (left, right) = if id_a < id_b { (id_a, id_b) } else { (id_b, id_a) };
            let size = clusters[a].size + clusters[b].size;
            merges.push(Merge {
                left,
                right,
                height,
                size,
            });
            clusters[a].id = n + t;
            clusters[a].size = size;
            clusters.remove(b);
        }
        merges
    }

    #[test]
    fn distance_matrix_validation() {
        let mut bad = DMatrix::zeros(3, 3);
        bad[(0, 1)] = 1.0;
        bad[(1, 0)] = 2.0;
        assert!(matches!(
            DistanceMatrix::from_full(&bad),
            Err(Error::Range(_))
        ));

        let mut diag = DMatrix::zeros(2, 2);
        diag[(0, 0)] = 0.1;
        assert!(DistanceMatrix::from_full(&diag).is_err());
    }

    #[test]
    fn great_circle_matrix_entries() {
        let e1 = SpherePoint::new(nalgebra::DVector::from_row_slice(&[1.0, 0.0, 0.0])).unwrap();
        let e2 = SpherePoint::new(nalgebra::DVector::from_row_slice(&[0.0, 1.0, 0.0])).unwrap();
        let d = great_circle_distance_matrix(&[e1.clone(), e2, e1.clone()]).unwrap();
        assert_eq!(d.get(0, 1), FRAC_PI_2);
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(d.get(1, 2), FRAC_PI_2);
    }

    #[test]
    fn great_circle_matrix_matches_entrywise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<SpherePoint> = (0..5).map(|_| random_sphere_point(&mut rng, 3)).collect();
        let d = great_circle_distance_matrix(&pts).unwrap();
        for i in 0..5 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..5 {
                if i == j {
                    continue;
                }
                let expected = spherical_distance(&pts[i], &pts[j]).unwrap();
                assert!((d.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trivial_cuts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_distance_matrix(&mut rng, 6);
        let all_separate = ward_cluster(&d, 6).unwrap();
        let mut sorted = all_separate.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2, 3, 4, 5, 6]);

        let one = ward_cluster(&d, 1).unwrap();
        assert!(one.iter().all(|&l| l == 1));

        assert!(ward_cluster(&d, 0).is_err());
        assert!(ward_cluster(&d, 7).is_err());
    }

    #[test]
    fn merge_sequence_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let n = 3 + (trial % 6);
            let d = random_distance_matrix(&mut rng, n);
            let ours = ward_linkage(&d, LinkageVariant::WardD);
            let oracle = greedy_oracle(&d);
            assert_eq!(ours.merges.len(), oracle.len());
            for (step, (a, b)) in ours.merges.iter().zip(oracle.iter()).enumerate() {
                assert_eq!(a.left, b.left, "trial {trial} step {step}");
                assert_eq!(a.right, b.right, "trial {trial} step {step}");
                assert_eq!(a.size, b.size, "trial {trial} step {step}");
                // NN-chain assembles clusters in a different interleaving
                // than greedy, so heights agree only up to rounding.
                assert!(
                    (a.height - b.height).abs() <= 1e-9 * b.height.max(1.0),
                    "trial {trial} step {step}: {} vs {}",
                    a.height,
                    b.height
                );
            }
        }
    }

    #[test]
    fn assignments_match_oracle_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..30 {
            let n = 4 + (trial % 5);
            let d = random_distance_matrix(&mut rng, n);
            let k = 1 + (trial % n);
            let ours = ward_cluster(&d, k).unwrap();
            let oracle_merges = greedy_oracle(&d);
            let oracle_dend = Dendrogram {
                merges: oracle_merges,
                observations: n,
            };
            let oracle_labels = cut(&oracle_dend, k).unwrap();
            assert_eq!(ours, oracle_labels, "trial {trial} k {k}");
        }
    }

    #[test]
    fn permutation_invariance_up_to_relabelling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0))
            .collect();
        let dist = |a: &(f64, f64), b: &(f64, f64)| {
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        };
        let d = DistanceMatrix::from_fn(n, |i, j| Ok(dist(&pts[i], &pts[j]))).unwrap();
        let labels = ward_cluster(&d, 3).unwrap();

        let perm: Vec<usize> = (0..n).rev().collect();
        let d_perm =
            DistanceMatrix::from_fn(n, |i, j| Ok(dist(&pts[perm[i]], &pts[perm[j]]))).unwrap();
        let labels_perm = ward_cluster(&d_perm, 3).unwrap();

        // Same partition after undoing the permutation.
        for i in 0..n {
            for j in 0..n {
                let same_orig = labels[perm[i]] == labels[perm[j]];
                let same_perm = labels_perm[i] == labels_perm[j];
                assert_eq!(same_orig, same_perm);
            }
        }
    }

    #[test]
    fn scaling_invariance_of_merges() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_distance_matrix(&mut rng, 10);
        let scaled = DistanceMatrix::from_fn(10, |i, j| Ok(d.get(i, j) * 7.25)).unwrap();
        let a = ward_linkage(&d, LinkageVariant::WardD);
        let b = ward_linkage(&scaled, LinkageVariant::WardD);
        for (ma, mb) in a.merges.iter().zip(b.merges.iter()) {
            assert_eq!(ma.left, mb.left);
            assert_eq!(ma.right, mb.right);
            assert!((mb.height - ma.height * 7.25).abs() < 1e-9);
        }
    }

    #[test]
    fn adjacent_cuts_differ_by_one_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_distance_matrix(&mut rng, 15);
        let dend = ward_linkage(&d, LinkageVariant::WardD);
        for k in 1..15 {
            let coarse = cut(&dend, k).unwrap();
            let fine = cut(&dend, k + 1).unwrap();
            // Count distinct (coarse, fine) label pairs: exactly k+1, and
            // the fine partition refines the coarse one.
            let mut pairs = std::collections::HashSet::new();
            for i in 0..15 {
                pairs.insert((coarse[i], fine[i]));
            }
            assert_eq!(pairs.len(), k + 1);
            let mut fine_to_coarse = std::collections::HashMap::new();
            for i in 0..15 {
                let prev = fine_to_coarse.insert(fine[i], coarse[i]);
                if let Some(p) = prev {
                    assert_eq!(p, coarse[i], "fine cluster split across coarse clusters");
                }
            }
        }
    }

    #[test]
    fn ward_d2_squares_and_unsquares() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_distance_matrix(&mut rng, 8);
        let dend = ward_linkage(&d, LinkageVariant::WardD2);
        // Heights are square roots of the recursion on squared distances;
        // the first merge height equals the smallest pairwise distance.
        let mut min_d = f64::INFINITY;
        for i in 0..8 {
            for j in (i + 1)..8 {
                min_d = min_d.min(d.get(i, j));
            }
        }
        assert!((dend.merges[0].height - min_d).abs() < 1e-12);
    }
}
