//! Temporal transition analysis: per-run empirical transition matrices,
//! Hellinger distances, equilibrium distributions, temporal clustering of
//! runs and final-location probabilities.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cluster::{ward_cluster, DistanceMatrix};
use crate::error::{Error, Result};

/// Row sums of externally supplied probability matrices may be off by
/// rounding; they are accepted within this tolerance and renormalized.
const ROW_SUM_TOL: f64 = 5e-4;
/// Max-norm change at which power iteration stops.
const POWER_TOL: f64 = 1e-13;
/// Power iteration cap.
const POWER_MAX_ITER: usize = 1_000_000;
/// Verification tolerance for πᵀP = πᵀ.
const STATIONARY_TOL: f64 = 1e-10;

/// A labelled state sequence for one run; labels are 1-based in {1..K}.
#[derive(Debug, Clone)]
pub struct StateSequence {
    pub run_id: String,
    labels: Vec<usize>,
    k: usize,
}

impl StateSequence {
    pub fn new(run_id: impl Into<String>, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Range(format!(
                "state sequence needs at least 2 observations, got {}",
                labels.len()
            )));
        }
        if k == 0 {
            return Err(Error::Range("state count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < 1 || l > k) {
            return Err(Error::Range(format!(
                "state label {bad} outside 1..={k}"
            )));
        }
        Ok(Self {
            run_id: run_id.into(),
            labels,
            k,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn state_count(&self) -> usize {
        self.k
    }

    pub fn last_state(&self) -> usize {
        *self.labels.last().unwrap()
    }
}

/// A K×K row-stochastic transition matrix with its count provenance.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    probs: DMatrix<f64>,
    counts: DMatrix<u64>,
    row_support: Vec<bool>,
}

impl TransitionMatrix {
    /// Build from transition counts. Rows with no observed transitions get
    /// a unit self-transition and are flagged as unsupported.
    pub fn from_counts(counts: DMatrix<u64>) -> Result<Self> {
        let k = counts.nrows();
        if counts.ncols() != k || k == 0 {
            return Err(Error::Dimension(format!(
                "count matrix must be square and nonempty, got {}×{}",
                k,
                counts.ncols()
            )));
        }
        let mut probs = DMatrix::zeros(k, k);
        let mut row_support = vec![false; k];
        for r in 0..k {
            let total: u64 = (0..k).map(|c| counts[(r, c)]).sum();
            if total == 0 {
                probs[(r, r)] = 1.0;
            } else {
                row_support[r] = true;
                for c in 0..k {
                    probs[(r, c)] = counts[(r, c)] as f64 / total as f64;
                }
            }
        }
        Ok(Self {
            probs,
            counts,
            row_support,
        })
    }

    /// Build from a probability matrix. Entries must be non-negative and
    /// each row must sum to 1 within 5e-4 (typical of tabulated values
    /// rounded to a few decimals); rows are renormalized exactly.
    pub fn from_probabilities(probs: DMatrix<f64>) -> Result<Self> {
        let k = probs.nrows();
        if probs.ncols() != k || k == 0 {
            return Err(Error::Dimension(format!(
                "probability matrix must be square and nonempty, got {}×{}",
                k,
                probs.ncols()
            )));
        }
        let mut normalized = probs;
        for r in 0..k {
            let mut sum = 0.0;
            for c in 0..k {
                let v = normalized[(r, c)];
                if v < 0.0 {
                    return Err(Error::Range(format!(
                        "negative probability {v} at ({r},{c})"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Range(format!(
                    "row {r} sums to {sum}, outside 1 ± {ROW_SUM_TOL}"
                )));
            }
            for c in 0..k {
                normalized[(r, c)] /= sum;
            }
        }
        Ok(Self {
            probs: normalized,
            counts: DMatrix::zeros(k, k),
            row_support: vec![true; k],
        })
    }

    pub fn state_count(&self) -> usize {
        self.probs.nrows()
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn counts(&self) -> &DMatrix<u64> {
        &self.counts
    }

    /// Per-row flags: false when the row was never visited and is a filler
    /// self-transition.
    pub fn row_support(&self) -> &[bool] {
        &self.row_support
    }
}

/// Empirical transition matrix of one run.
pub fn estimate_transition_matrix(seq: &StateSequence) -> TransitionMatrix {
    let k = seq.state_count();
    let mut counts = DMatrix::zeros(k, k);
    for w in seq.labels().windows(2) {
        counts[(w[0] - 1, w[1] - 1)] += 1u64;
    }
    TransitionMatrix::from_counts(counts).expect("square count matrix")
}

/// Pool runs by summing their transition counts, then row-normalize.
pub fn pool_transition_matrix(seqs: &[StateSequence]) -> Result<TransitionMatrix> {
    let k = common_state_count(seqs)?;
    let mut counts = DMatrix::zeros(k, k);
    for seq in seqs {
        for w in seq.labels().windows(2) {
            counts[(w[0] - 1, w[1] - 1)] += 1u64;
        }
    }
    TransitionMatrix::from_counts(counts)
}

/// The alternative pooling mode: entrywise average of the per-run
/// probability matrices (rows stay stochastic). Counts are still summed for
/// provenance; a row is supported when any run supports it.
pub fn average_transition_matrix(seqs: &[StateSequence]) -> Result<TransitionMatrix> {
    let k = common_state_count(seqs)?;
    let mats: Vec<TransitionMatrix> = seqs.iter().map(estimate_transition_matrix).collect();
    let mut probs = DMatrix::zeros(k, k);
    let mut counts = DMatrix::zeros(k, k);
    let mut row_support = vec![false; k];
    for m in &mats {
        probs += m.probs();
        for r in 0..k {
            row_support[r] |= m.row_support[r];
            for c in 0..k {
                counts[(r, c)] += m.counts[(r, c)];
            }
        }
    }
    probs /= mats.len() as f64;
    Ok(TransitionMatrix {
        probs,
        counts,
        row_support,
    })
}

fn common_state_count(seqs: &[StateSequence]) -> Result<usize> {
    let k = seqs
        .first()
        .ok_or_else(|| Error::Range("no state sequences given".into()))?
        .state_count();
    for s in seqs {
        if s.state_count() != k {
            return Err(Error::Dimension(format!(
                "state counts differ: {} vs {}",
                k,
                s.state_count()
            )));
        }
    }
    Ok(k)
}

/// Hellinger distance H(A, B) = (1/√2)·‖√A − √B‖_F between row-stochastic
/// matrices.
pub fn hellinger_distance(a: &TransitionMatrix, b: &TransitionMatrix) -> Result<f64> {
    if a.state_count() != b.state_count() {
        return Err(Error::Dimension(format!(
            "state counts differ: {} vs {}",
            a.state_count(),
            b.state_count()
        )));
    }
    let mut sum = 0.0;
    for (x, y) in a.probs.iter().zip(b.probs.iter()) {
        let d = x.sqrt() - y.sqrt();
        sum += d * d;
    }
    Ok(sum.sqrt() / std::f64::consts::SQRT_2)
}

/// A stationary distribution π with πᵀP = πᵀ.
#[derive(Debug, Clone)]
pub struct EquilibriumDistribution {
    probs: DVector<f64>,
}

impl EquilibriumDistribution {
    pub fn probs(&self) -> &DVector<f64> {
        &self.probs
    }
}

/// Closed communicating classes of the positive-entry transition graph.
fn closed_class_count(probs: &DMatrix<f64>) -> usize {
    let k = probs.nrows();
    // Reachability closure (Floyd–Warshall on booleans).
    let mut reach = vec![vec![false; k]; k];
    for i in 0..k {
        reach[i][i] = true;
        for j in 0..k {
            if probs[(i, j)] > 0.0 {
                reach[i][j] = true;
            }
        }
    }
    for mid in 0..k {
        for i in 0..k {
            if reach[i][mid] {
                for j in 0..k {
                    if reach[mid][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    // A class is closed when nothing outside it is reachable from it.
    let mut counted = vec![false; k];
    let mut closed = 0;
    for i in 0..k {
        if counted[i] {
            continue;
        }
        let class: Vec<usize> = (0..k).filter(|&j| reach[i][j] && reach[j][i]).collect();
        for &j in &class {
            counted[j] = true;
        }
        let is_closed = class
            .iter()
            .all(|&j| (0..k).all(|l| !reach[j][l] || class.contains(&l)));
        if is_closed {
            closed += 1;
        }
    }
    closed
}

/// Equilibrium distribution by power iteration of Pᵀ from the uniform
/// vector, stopping when successive iterates differ by < 1e-13 in max norm.
///
/// Requires a single recurrent class; the identity matrix (every
/// distribution stationary) and periodic chains that fail to converge are
/// rejected.
pub fn equilibrium(p: &TransitionMatrix) -> Result<EquilibriumDistribution> {
    let k = p.state_count();
    let closed = closed_class_count(&p.probs);
    if closed != 1 {
        return Err(Error::NoUniqueEquilibrium(format!(
            "{closed} closed communicating classes (need exactly 1)"
        )));
    }
    let pt = p.probs.transpose();
    let mut pi = DVector::from_element(k, 1.0 / k as f64);
    let mut converged = false;
    for _ in 0..POWER_MAX_ITER {
        let next = &pt * &pi;
        let diff = (&next - &pi).amax();
        pi = next;
        if diff < POWER_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoUniqueEquilibrium(format!(
            "power iteration did not converge within {POWER_MAX_ITER} iterations \
             (the chain may be periodic)"
        )));
    }
    pi /= pi.sum();
    let residual = (p.probs.transpose() * &pi - &pi).amax();
    if residual > STATIONARY_TOL {
        return Err(Error::NoUniqueEquilibrium(format!(
            "stationarity residual {residual:e} exceeds {STATIONARY_TOL:e}"
        )));
    }
    Ok(EquilibriumDistribution { probs: pi })
}

/// Temporal clustering of runs by Ward linkage on pairwise Hellinger
/// distances between their transition matrices.
#[derive(Debug, Clone)]
pub struct TemporalClustering {
    /// 1-based temporal-cluster label per input matrix.
    pub labels: Vec<usize>,
    /// Count-pooled transition matrix of each temporal cluster.
    pub pooled: Vec<TransitionMatrix>,
    /// Equilibrium of each pooled matrix, when it exists.
    pub equilibria: Vec<Option<EquilibriumDistribution>>,
}

pub fn temporal_cluster(mats: &[TransitionMatrix], k_tc: usize) -> Result<TemporalClustering> {
    if mats.len() < k_tc {
        return Err(Error::Range(format!(
            "cannot form {k_tc} temporal clusters from {} matrices",
            mats.len()
        )));
    }
    let k = mats
        .first()
        .ok_or_else(|| Error::Range("no transition matrices given".into()))?
        .state_count();
    for m in mats {
        if m.state_count() != k {
            return Err(Error::Dimension(format!(
                "state counts differ: {} vs {}",
                k,
                m.state_count()
            )));
        }
    }
    let distances =
        DistanceMatrix::from_fn(mats.len(), |i, j| hellinger_distance(&mats[i], &mats[j]))?;
    let labels = ward_cluster(&distances, k_tc)?;

    let pooled: Vec<TransitionMatrix> = (1..=k_tc)
        .map(|tc| {
            let mut counts = DMatrix::zeros(k, k);
            for (m, &l) in mats.iter().zip(labels.iter()) {
                if l == tc {
                    for r in 0..k {
                        for c in 0..k {
                            counts[(r, c)] += m.counts()[(r, c)];
                        }
                    }
                }
            }
            TransitionMatrix::from_counts(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    let equilibria = pooled
        .par_iter()
        .map(|m| equilibrium(m).ok())
        .collect();

    Ok(TemporalClustering {
        labels,
        pooled,
        equilibria,
    })
}

/// Per-temporal-cluster empirical distribution of each run's final state.
pub fn final_location_probabilities(
    seqs: &[StateSequence],
    tc_labels: &[usize],
) -> Result<Vec<DVector<f64>>> {
    if seqs.len() != tc_labels.len() {
        return Err(Error::Dimension(format!(
            "{} sequences but {} temporal labels",
            seqs.len(),
            tc_labels.len()
        )));
    }
    let k = common_state_count(seqs)?;
    let k_tc = *tc_labels
        .iter()
        .max()
        .ok_or_else(|| Error::Range("no temporal labels".into()))?;
    let mut result = Vec::with_capacity(k_tc);
    for tc in 1..=k_tc {
        let mut tally = DVector::zeros(k);
        let mut count = 0.0;
        for (seq, &l) in seqs.iter().zip(tc_labels.iter()) {
            if l == tc {
                tally[seq.last_state() - 1] += 1.0;
                count += 1.0;
            }
        }
        if count > 0.0 {
            tally /= count;
        }
        result.push(tally);
    }
    Ok(result)
}
