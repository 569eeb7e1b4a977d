//! Trimmed k-means.
//!
//! Each start seeds `k` centers with k-means++ and then repeats concentration
//! steps: compute every row's squared distance to its nearest center, trim the
//! `h = ⌈alpha·n⌉` rows farthest from any center, assign the rest to their
//! nearest center and move each center to the mean of its rows. The trimmed
//! objective (sum of squared distances of the retained rows) never increases.
//! The best start by objective wins.
//!
//! Ties are always broken toward the lower index: equidistant centers go to the
//! lower center, and at the trim boundary the lower row index is retained.
//! Final centers are renumbered `1..=k` in lexicographic coordinate order and
//! trimmed rows get label 0.
//!
//! Plain Lloyd k-means is the same procedure with `h = 0`.

use std::cmp::Ordering;

use itertools::Itertools;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimmedKMeansConfig {
    pub k: usize,
    pub alpha: f64,
    pub n_starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrimmedKMeansConfig {
    fn default() -> Self {
        TrimmedKMeansConfig {
            k: 8,
            alpha: 0.01,
            n_starts: 10,
            max_iter: 100,
            tol: 1e-9,
            seed: 0,
        }
    }
}

/// `⌈alpha·n⌉`, treating products within 1e-9 of an integer as that integer
/// so that e.g. `0.07 × 100` trims 7 rows rather than 8.
pub fn trim_count(alpha: f64, n: usize) -> usize {
    let x = alpha * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

impl TrimmedKMeansConfig {
    /// Checks the parameters alone, without reference to a data set.
    pub fn validate_params(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && (0.0..1.0).contains(&self.alpha)) {
            return Err(Error::Config(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if self.n_starts == 0 {
            return Err(Error::Config("n_starts must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }

    /// Validates against `n` rows and returns the trim count.
    pub fn validate(&self, n: usize) -> Result<usize> {
        self.validate_params()?;
        let h = trim_count(self.alpha, n);
        if n < self.k + h {
            return Err(Error::Config(format!(
                "{n} rows cannot hold k={} clusters after trimming {h}",
                self.k
            )));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `k × d`; row `j` is the center of label `j + 1`.
    pub centers: Array2<f64>,
    pub objective: f64,
    pub trim_count: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentTable {
    /// 0 for trimmed rows, otherwise `1..=k`.
    pub labels: Vec<u32>,
    /// Euclidean distance to the nearest center (the assigned one for retained rows).
    pub distances: Vec<f64>,
}

impl AssignmentTable {
    pub fn n_trimmed(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 0).count()
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center and squared distance for every row.
fn nearest_centers(data: ArrayView2<f64>, centers: ArrayView2<f64>) -> Vec<(usize, f64)> {
    (0..data.nrows())
        .into_par_iter()
        .map(|i| {
            let row = data.row(i);
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.rows().into_iter().enumerate() {
                let d = sq_dist(row, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Evaluation {
    nearest: Vec<(usize, f64)>,
    trimmed: Vec<bool>,
    objective: f64,
}

impl Evaluation {
    fn same_assignment(&self, other: &Evaluation) -> bool {
        self.trimmed == other.trimmed
            && self
                .nearest
                .iter()
                .zip(&other.nearest)
                .zip(&self.trimmed)
                .all(|((a, b), &t)| t || a.0 == b.0)
    }
}

fn evaluate(data: ArrayView2<f64>, centers: ArrayView2<f64>, h: usize) -> Evaluation {
    let nearest = nearest_centers(data, centers);
    let n = nearest.len();
    let mut trimmed = vec![false; n];
    if h > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let by_distance_then_index =
            |a: &usize, b: &usize| nearest[*a].1.total_cmp(&nearest[*b].1).then(a.cmp(b));
        order.select_nth_unstable_by(n - h, by_distance_then_index);
        for &i in &order[n - h..] {
            trimmed[i] = true;
        }
    }
    let objective = nearest
        .iter()
        .zip(&trimmed)
        .filter(|(_, &t)| !t)
        .map(|(nd, _)| nd.1)
        .sum();
    Evaluation {
        nearest,
        trimmed,
        objective,
    }
}

/// Means of the retained rows per center. Empty clusters are reseeded at the
/// retained rows farthest from their centers.
fn update_centers(data: ArrayView2<f64>, eval: &Evaluation, k: usize) -> Array2<f64> {
    let d = data.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, (&(j, _), &t)) in eval.nearest.iter().zip(&eval.trimmed).enumerate() {
        if !t {
            let mut s = sums.row_mut(j);
            s += &data.row(i);
            counts[j] += 1;
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums.row_mut(j).mapv_inplace(|v| v / c as f64);
        }
    }
    if !empty.is_empty() {
        let mut far: Vec<usize> = (0..data.nrows()).filter(|&i| !eval.trimmed[i]).collect();
        far.sort_by(|&a, &b| {
            eval.nearest[b]
                .1
                .total_cmp(&eval.nearest[a].1)
                .then(a.cmp(&b))
        });
        for (&j, &i) in empty.iter().zip(&far) {
            sums.row_mut(j).assign(&data.row(i));
        }
    }
    sums
}

/// k-means++ seeding over all rows.
pub fn kmeans_plus_plus(data: ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centers = Array2::<f64>::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    let mut weights: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for j in 1..k {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                chosen = Some(i);
                if acc > target {
                    break;
                }
            }
            chosen.expect("positive total weight")
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(j).assign(&data.row(pick));
        for (i, w) in weights.iter_mut().enumerate() {
            *w = w.min(sq_dist(data.row(i), data.row(pick)));
        }
    }
    centers
}

/// Result of the concentration iterations of one start.
#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub centers: Array2<f64>,
    pub objective: f64,
    /// Trimmed objective of the initial centers followed by every accepted step.
    pub history: Vec<f64>,
}

/// Runs concentration steps from `init` until the assignment is stable, the
/// relative improvement drops to `tol` or below, or `max_iter` steps are done.
/// A step that would raise the objective is rejected and ends the run.
pub fn concentrate(
    data: ArrayView2<f64>,
    init: Array2<f64>,
    trim: usize,
    max_iter: usize,
    tol: f64,
) -> StartOutcome {
    let k = init.nrows();
    let mut centers = init;
    let mut eval = evaluate(data, centers.view(), trim);
    let mut history = vec![eval.objective];
    for _ in 0..max_iter {
        let next_centers = update_centers(data, &eval, k);
        let next = evaluate(data, next_centers.view(), trim);
        if next.objective > eval.objective {
            break;
        }
        let improvement = eval.objective - next.objective;
        let stable = next.same_assignment(&eval) || improvement <= tol * eval.objective;
        centers = next_centers;
        eval = next;
        history.push(eval.objective);
        if stable {
            break;
        }
    }
    StartOutcome {
        centers,
        objective: eval.objective,
        history,
    }
}

fn lexicographic(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn check_finite(matrix: &Array2<f64>) -> Result<()> {
    if let Some((idx, _)) = matrix.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite value at row {}, column {}",
            idx.0, idx.1
        )));
    }
    Ok(())
}

fn fit(matrix: &Array2<f64>, config: &TrimmedKMeansConfig, trim: usize) -> (ClusterModel, AssignmentTable) {
    let data = matrix.view();
    let outcomes: Vec<StartOutcome> = (0..config.n_starts)
        .into_par_iter()
        .map(|start| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(start as u64));
            let init = kmeans_plus_plus(data, config.k, &mut rng);
            concentrate(data, init, trim, config.max_iter, config.tol)
        })
        .collect();
    let best = outcomes
        .into_iter()
        .reduce(|best, o| if o.objective < best.objective { o } else { best })
        .expect("at least one start");

    let mut order: Vec<usize> = (0..config.k).collect();
    order.sort_by(|&a, &b| lexicographic(best.centers.row(a), best.centers.row(b)).then(a.cmp(&b)));
    let mut centers = Array2::<f64>::zeros(best.centers.dim());
    for (pos, &old) in order.iter().enumerate() {
        centers.row_mut(pos).assign(&best.centers.row(old));
    }

    let eval = evaluate(data, centers.view(), trim);
    let labels = eval
        .nearest
        .iter()
        .zip(&eval.trimmed)
        .map(|(&(j, _), &t)| if t { 0 } else { j as u32 + 1 })
        .collect();
    let distances = eval.nearest.iter().map(|&(_, d)| d.sqrt()).collect();
    (
        ClusterModel {
            centers,
            objective: eval.objective,
            trim_count: trim,
        },
        AssignmentTable { labels, distances },
    )
}

pub fn trimmed_kmeans(
    matrix: &Array2<f64>,
    config: &TrimmedKMeansConfig,
) -> Result<(ClusterModel, AssignmentTable)> {
    let trim = config.validate(matrix.nrows())?;
    check_finite(matrix)?;
    Ok(fit(matrix, config, trim))
}

/// Standard k-means: `config.alpha` is ignored and nothing is trimmed.
pub fn lloyd_kmeans(
    matrix: &Array2<f64>,
    config: &TrimmedKMeansConfig,
) -> Result<(ClusterModel, AssignmentTable)> {
    let config = TrimmedKMeansConfig {
        alpha: 0.0,
        ..*config
    };
    trimmed_kmeans(matrix, &config)
}

/// Sum of squared distances of rows with a nonzero label to center `label - 1`.
pub fn objective(matrix: &Array2<f64>, centers: &Array2<f64>, labels: &[u32]) -> Result<f64> {
    if labels.len() != matrix.nrows() {
        return Err(Error::Validation(format!(
            "{} labels for {} rows",
            labels.len(),
            matrix.nrows()
        )));
    }
    let k = centers.nrows();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l as usize > k {
            return Err(Error::Validation(format!("label {l} out of range 0..={k}")));
        }
        if l > 0 {
            total += sq_dist(matrix.row(i), centers.row(l as usize - 1));
        }
    }
    Ok(total)
}

/// Exhaustive global optimum of the trimmed objective for tiny instances
/// (n ≤ 12, k ≤ 2, at most 2 trimmed rows). Used as a test oracle.
pub fn brute_force_trimmed_kmeans(matrix: &Array2<f64>, k: usize, alpha: f64) -> Result<f64> {
    let n = matrix.nrows();
    let h = trim_count(alpha, n);
    if n > 12 || k == 0 || k > 2 || h > 2 || n < k + h {
        return Err(Error::Config(format!(
            "brute force limited to n<=12, 1<=k<=2, trim<=2 (got n={n}, k={k}, trim={h})"
        )));
    }
    let d = matrix.ncols();
    let mut best = f64::INFINITY;
    for trimmed in (0..n).combinations(h) {
        let kept: Vec<usize> = (0..n).filter(|i| !trimmed.contains(i)).collect();
        let m = kept.len();
        for code in 0..k.pow(m as u32) {
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            let mut c = code;
            let mut groups = Vec::with_capacity(m);
            for &i in &kept {
                let g = c % k;
                c /= k;
                groups.push(g);
                counts[g] += 1;
                for (s, x) in sums[g].iter_mut().zip(matrix.row(i)) {
                    *s += x;
                }
            }
            let mut cost = 0.0;
            for (&i, &g) in kept.iter().zip(&groups) {
                for (s, x) in sums[g].iter().zip(matrix.row(i)) {
                    let diff = x - s / counts[g] as f64;
                    cost += diff * diff;
                }
            }
            best = best.min(cost);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn config(k: usize, alpha: f64) -> TrimmedKMeansConfig {
        TrimmedKMeansConfig {
            k,
            alpha,
            ..Default::default()
        }
    }

    #[test]
    fn trims_the_far_point_in_one_dimension() {
        let m = array![[0.0], [1.0], [2.0], [100.0]];
        let (model, asg) = trimmed_kmeans(&m, &config(1, 0.25)).unwrap();
        assert_eq!(asg.labels, vec![1, 1, 1, 0]);
        assert_eq!(model.centers[[0, 0]], 1.0);
        assert_eq!(model.objective, 2.0);
        assert_eq!(brute_force_trimmed_kmeans(&m, 1, 0.25).unwrap(), 2.0);
    }

    #[test]
    fn symmetric_two_cluster_optimum() {
        let m = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let (model, asg) = trimmed_kmeans(&m, &config(2, 0.0)).unwrap();
        assert_eq!(model.centers, array![[0.0, 0.5], [10.0, 0.5]]);
        assert_eq!(model.objective, 1.0);
        assert_eq!(asg.labels, vec![1, 1, 2, 2]);
    }

    #[test]
    fn paper_defaults_give_nine_categories() {
        let m = Array2::from_shape_fn((300, 2), |(i, j)| ((i * 7 + j * 13) % 101) as f64);
        let (_, asg) = trimmed_kmeans(&m, &TrimmedKMeansConfig::default()).unwrap();
        assert!(asg.labels.iter().all(|&l| l <= 8));
        assert_eq!(asg.n_trimmed(), 3);
    }

    #[test]
    fn k_equal_n_puts_every_point_on_a_center() {
        let m = array![[0.0], [3.0], [7.0]];
        let (model, asg) = lloyd_kmeans(&m, &config(3, 0.5)).unwrap();
        assert_eq!(model.objective, 0.0);
        assert_eq!(asg.labels, vec![1, 2, 3]);
        assert_eq!(asg.n_trimmed(), 0);
    }

    #[test]
    fn k_one_is_the_mean() {
        let m = array![[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]];
        let (model, _) = lloyd_kmeans(&m, &config(1, 0.0)).unwrap();
        assert_eq!(model.centers, array![[3.0, 3.0]]);
    }

    #[test]
    fn objective_function() {
        let m = array![[0.0], [1.0], [2.0], [100.0]];
        let c = array![[1.0]];
        assert_eq!(objective(&m, &c, &[1, 1, 1, 0]).unwrap(), 2.0);
        assert_eq!(objective(&m, &c, &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(objective(&array![[1.0]], &c, &[1]).unwrap(), 0.0);
        assert!(objective(&m, &c, &[2, 1, 1, 0]).is_err());
        assert!(objective(&m, &c, &[1]).is_err());
    }

    #[test]
    fn brute_force_closed_forms_and_guard() {
        let m = array![[1.0], [2.0], [6.0]];
        // sum of squared deviations from the mean 3: 4 + 1 + 9
        assert_eq!(brute_force_trimmed_kmeans(&m, 1, 0.0).unwrap(), 14.0);
        assert_eq!(brute_force_trimmed_kmeans(&array![[1.0], [5.0]], 2, 0.0).unwrap(), 0.0);
        assert!(brute_force_trimmed_kmeans(&Array2::zeros((13, 1)), 1, 0.0).is_err());
        assert!(brute_force_trimmed_kmeans(&m, 3, 0.0).is_err());
        assert!(brute_force_trimmed_kmeans(&Array2::zeros((12, 1)), 1, 0.25).is_err());
    }

    #[test]
    fn config_errors() {
        let m = array![[0.0], [1.0]];
        for bad in [config(0, 0.0), config(1, 1.0), config(1, -0.1), config(1, 1.5), config(2, 0.4)] {
            assert!(matches!(trimmed_kmeans(&m, &bad), Err(Error::Config(_))), "{bad:?}");
        }
        let nan = array![[0.0], [f64::NAN]];
        assert!(matches!(trimmed_kmeans(&nan, &config(1, 0.0)), Err(Error::Validation(_))));
    }

    #[test]
    fn trim_count_rounding() {
        assert_eq!(trim_count(0.01, 100), 1);
        assert_eq!(trim_count(0.01, 101), 2);
        assert_eq!(trim_count(0.07, 100), 7);
        assert_eq!(trim_count(0.1, 10), 1);
        assert_eq!(trim_count(0.0, 10), 0);
        assert_eq!(trim_count(0.01, 5_305_678), 53_057);
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // two identical initial centers: one cluster starts empty
        let m = array![[0.0], [0.1], [10.0], [10.1]];
        let out = concentrate(m.view(), array![[0.0], [0.0]], 0, 10, 1e-9);
        let mut c: Vec<f64> = out.centers.iter().copied().collect();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12 && (c[1] - 10.05).abs() < 1e-12, "{c:?}");
    }

    fn arb_data() -> impl Strategy<Value = Array2<f64>> {
        (4usize..40, 1usize..4).prop_flat_map(|(n, d)| {
            prop::collection::vec(-5.0f64..5.0, n * d)
                .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn trim_exactness_and_separation(m in arb_data(), k in 1usize..4, alpha in 0.0f64..0.3, seed in any::<u64>()) {
            let cfg = TrimmedKMeansConfig { k, alpha, n_starts: 3, seed, ..Default::default() };
            prop_assume!(cfg.validate(m.nrows()).is_ok());
            let (model, asg) = trimmed_kmeans(&m, &cfg).unwrap();
            prop_assert_eq!(asg.n_trimmed(), trim_count(alpha, m.nrows()));
            let kept_max = asg.labels.iter().zip(&asg.distances).filter(|(l, _)| **l != 0).map(|(_, d)| *d).fold(0.0, f64::max);
            let trim_min = asg.labels.iter().zip(&asg.distances).filter(|(l, _)| **l == 0).map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
            prop_assert!(kept_max <= trim_min);
            let recomputed = objective(&m, &model.centers, &asg.labels).unwrap();
            prop_assert!((recomputed - model.objective).abs() <= 1e-9 * model.objective.max(1.0));
        }

        #[test]
        fn objective_is_monotone_within_a_start(m in arb_data(), k in 1usize..4, seed in any::<u64>()) {
            prop_assume!(m.nrows() >= k + 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = kmeans_plus_plus(m.view(), k, &mut rng);
            let out = concentrate(m.view(), init, 2, 100, 1e-12);
            for w in out.history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
