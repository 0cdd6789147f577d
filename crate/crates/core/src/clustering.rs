//! Affinity propagation over actuator similarities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::morphology::DistanceMatrix;

#[derive(Debug, thiserror::Error)]
pub enum ClusteringError {
    #[error("similarity matrix must be non-empty and square")]
    NotSquare,
    #[error("similarity matrix contains a non-finite entry at ({0}, {1})")]
    NonFiniteSimilarity(usize, usize),
    #[error("preference vector has {got} entries, expected {expected}")]
    PreferenceLength { expected: usize, got: usize },
    #[error("message passing overflowed")]
    NumericalOverflow,
    #[error("invalid clustering parameter: {0}")]
    InvalidConfig(String),
}

/// Square similarity matrix; the diagonal holds per-point preferences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    s: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, ClusteringError> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(ClusteringError::NotSquare);
        }
        let s: Vec<f64> = rows.into_iter().flatten().collect();
        if let Some(p) = s.iter().position(|v| !v.is_finite()) {
            return Err(ClusteringError::NonFiniteSimilarity(p / n, p % n));
        }
        Ok(Self { n, s })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.s.chunks(self.n).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApConfig {
    pub damping: f64,
    pub max_iter: usize,
    /// Consecutive iterations with unchanged exemplar choices that count
    /// as convergence.
    pub stable_window: usize,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self { damping: 0.5, max_iter: 200, stable_window: 15 }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<(), ClusteringError> {
        if !(0.5..1.0).contains(&self.damping) {
            return Err(ClusteringError::InvalidConfig(format!("damping {} outside [0.5, 1)", self.damping)));
        }
        if self.max_iter == 0 || self.stable_window == 0 {
            return Err(ClusteringError::InvalidConfig("max_iter and stable_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Exemplar indices in ascending order.
    pub centers: Vec<usize>,
    /// Exemplar of every point; centers map to themselves.
    pub exemplar_of: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }

    /// Cluster label of every point, clusters numbered by center order.
    pub fn labels(&self) -> Vec<usize> {
        self.exemplar_of.iter().map(|e| self.centers.binary_search(e).expect("exemplar is a center")).collect()
    }
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Damped responsibility/availability message passing.
///
/// Points whose own `r + a` score wins their row become exemplars; every
/// other point then joins the exemplar it is most similar to. Hitting
/// `max_iter` without a stable window yields `converged = false` with the
/// last assignment, not an error.
pub fn affinity_propagation(s: &SimilarityMatrix, cfg: &ApConfig) -> Result<ClusterResult, ClusteringError> {
    cfg.validate()?;
    let n = s.n;
    let sim = &jittered(&s.s);
    let lam = cfg.damping;
    let mut r = vec![0.0; n * n];
    let mut a = vec![0.0; n * n];
    let mut choice = vec![usize::MAX; n];
    let mut stable = 0;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iter {
        iterations = it;
        for i in 0..n {
            let row = i * n;
            let (mut first, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for j in 0..n {
                let v = a[row + j] + sim[row + j];
                if v > first {
                    second = first;
                    first = v;
                    arg = j;
                } else if v > second {
                    second = v;
                }
            }
            for j in 0..n {
                let competitor = if j == arg { second } else { first };
                // With a single point there is no competitor.
                let fresh = if n == 1 { sim[row] } else { sim[row + j] - competitor };
                r[row + j] = lam * r[row + j] + (1.0 - lam) * fresh;
            }
        }
        for j in 0..n {
            let support: f64 = (0..n).filter(|&i| i != j).map(|i| r[i * n + j].max(0.0)).sum();
            for i in 0..n {
                let fresh = if i == j { support } else { (r[j * n + j] + support - r[i * n + j].max(0.0)).min(0.0) };
                a[i * n + j] = lam * a[i * n + j] + (1.0 - lam) * fresh;
            }
        }
        if r.iter().chain(&a).any(|v| !v.is_finite()) {
            return Err(ClusteringError::NumericalOverflow);
        }

        let mut changed = false;
        for i in 0..n {
            let c = argmax_lowest((0..n).map(|j| r[i * n + j] + a[i * n + j]));
            if c != choice[i] {
                choice[i] = c;
                changed = true;
            }
        }
        stable = if changed { 0 } else { stable + 1 };
        if stable >= cfg.stable_window {
            converged = true;
            break;
        }
    }

    let mut centers: Vec<usize> = (0..n).filter(|&i| choice[i] == i).collect();
    if centers.is_empty() {
        centers.push(argmax_lowest((0..n).map(|i| r[i * n + i] + a[i * n + i])));
    }
    // Each cluster keeps the member with the largest summed similarity to
    // the rest of it, then members are reassigned once.
    let first = assign(&s.s, n, &centers);
    let mut refined: Vec<usize> = centers
        .iter()
        .map(|&c| {
            let members: Vec<usize> = (0..n).filter(|&i| first[i] == c).collect();
            let best = argmax_lowest(members.iter().map(|&j| members.iter().map(|&i| s.s[i * n + j]).sum::<f64>()));
            members[best]
        })
        .collect();
    refined.sort_unstable();
    let exemplar_of = assign(&s.s, n, &refined);
    Ok(ClusterResult { centers: refined, exemplar_of, converged, iterations })
}

fn assign(s: &[f64], n: usize, centers: &[usize]) -> Vec<usize> {
    (0..n)
        .map(|i| if centers.contains(&i) { i } else { centers[argmax_lowest(centers.iter().map(|&c| s[i * n + c]))] })
        .collect()
}

/// Adds seeded noise far below any meaningful similarity gap, so exactly
/// symmetric inputs cannot trap the messages in an oscillation.
fn jittered(s: &[f64]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    s.iter().map(|&v| v + JITTER * (v.abs() + 1e-3) * rng.random_range(-1.0..1.0)).collect()
}

const JITTER: f64 = 1e-9;

/// Sum of member-to-exemplar similarities plus exemplar self-similarities;
/// members join their most similar exemplar. This is the quantity affinity
/// propagation maximizes.
pub fn net_similarity(s: &SimilarityMatrix, centers: &[usize]) -> f64 {
    (0..s.n)
        .map(|i| {
            if centers.contains(&i) {
                s.get(i, i)
            } else {
                centers.iter().map(|&c| s.get(i, c)).fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .sum()
}

/// Off-diagonal `exp(-hops)`; the diagonal is the preference vector, or
/// the median off-diagonal similarity when no preference is given.
pub fn build_similarity(
    distances: &DistanceMatrix,
    preference: Option<&[f64]>,
) -> Result<SimilarityMatrix, ClusteringError> {
    let k = distances.len();
    if k == 0 {
        return Err(ClusteringError::NotSquare);
    }
    let mut rows = vec![vec![0.0; k]; k];
    let mut off = Vec::with_capacity(k * k - k);
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                *v = (-f64::from(distances.get(i, j))).exp();
                off.push(*v);
            }
        }
    }
    let diag = match preference {
        Some(p) if p.len() != k => return Err(ClusteringError::PreferenceLength { expected: k, got: p.len() }),
        Some(p) => p.to_vec(),
        None => vec![median(&mut off).unwrap_or(0.0); k],
    };
    for (i, row) in rows.iter_mut().enumerate() {
        row[i] = diag[i];
    }
    SimilarityMatrix::new(rows)
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
