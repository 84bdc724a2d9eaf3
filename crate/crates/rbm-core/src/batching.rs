//! Random batch divisions and their indicator statistics.
//!
//! A division splits the `N = n*p` particles into `n` batches of equal size
//! `p`, drawn uniformly over all unordered divisions by a Fisher-Yates
//! shuffle chopped into consecutive blocks. For small systems every division
//! can be enumerated, which turns the indicator-moment identities into exact
//! checks instead of statistical ones.

use crate::error::{RbmError, Result};
use crate::rng::RngStream;

/// One random division of `{0..N}` into `n = N/p` batches of size `p`.
///
/// Batch membership lists are kept sorted ascending; the sets are unordered
/// mathematically, and the fixed order makes force accumulation independent
/// of the shuffle that produced the division.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPartition {
    batch_size: usize,
    /// Concatenated batch members: batch `q` occupies `members[q*p..(q+1)*p]`.
    members: Vec<u32>,
    /// Particle index -> batch id.
    assignment: Vec<u32>,
}

impl BatchPartition {
    fn from_members(batch_size: usize, members: Vec<u32>) -> Self {
        let mut assignment = vec![0u32; members.len()];
        for (pos, &particle) in members.iter().enumerate() {
            assignment[particle as usize] = (pos / batch_size) as u32;
        }
        BatchPartition {
            batch_size,
            members,
            assignment,
        }
    }

    /// Builds a division from an explicit membership list (consecutive
    /// blocks of `batch_size`); validates that it is a permutation.
    pub fn from_batches(batch_size: usize, members: Vec<u32>) -> Result<Self> {
        if batch_size == 0 || members.is_empty() || !members.len().is_multiple_of(batch_size) {
            return Err(RbmError::invalid_argument(
                "membership list length must be a positive multiple of the batch size",
            ));
        }
        let mut sorted = members.clone();
        for chunk in sorted.chunks_exact_mut(batch_size) {
            chunk.sort_unstable();
        }
        let partition = BatchPartition::from_members(batch_size, sorted);
        partition.validate()?;
        Ok(partition)
    }

    pub fn n_particles(&self) -> usize {
        self.members.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_batches(&self) -> usize {
        self.members.len() / self.batch_size
    }

    /// Batch id of particle `i`.
    pub fn batch_of(&self, i: usize) -> u32 {
        self.assignment[i]
    }

    /// Members of batch `q`, sorted ascending.
    pub fn batch(&self, q: u32) -> &[u32] {
        let p = self.batch_size;
        &self.members[q as usize * p..(q as usize + 1) * p]
    }

    /// Batch containing particle `i`, sorted ascending.
    pub fn batch_containing(&self, i: usize) -> &[u32] {
        self.batch(self.assignment[i])
    }

    pub fn batches(&self) -> impl Iterator<Item = &[u32]> {
        self.members.chunks_exact(self.batch_size)
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Checks the structural invariants: every index in exactly one batch,
    /// every batch of size `p`, assignment consistent with membership.
    pub fn validate(&self) -> Result<()> {
        let n = self.members.len();
        if self.batch_size == 0 || !n.is_multiple_of(self.batch_size) {
            return Err(RbmError::invalid_argument(
                "batch size must divide particle count",
            ));
        }
        let mut seen = vec![false; n];
        for (pos, &particle) in self.members.iter().enumerate() {
            let particle = particle as usize;
            if particle >= n || seen[particle] {
                return Err(RbmError::invalid_argument(
                    "membership list is not a permutation",
                ));
            }
            seen[particle] = true;
            if self.assignment[particle] as usize != pos / self.batch_size {
                return Err(RbmError::invalid_argument(
                    "assignment inconsistent with membership",
                ));
            }
        }
        Ok(())
    }
}

/// Draws a uniform random division of `n_particles` into batches of size
/// `batch_size`: Fisher-Yates shuffle of `[0..N)` chopped into consecutive
/// blocks. Costs O(N).
pub fn random_partition(
    n_particles: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<BatchPartition> {
    if batch_size < 2 {
        return Err(RbmError::invalid_argument(format!(
            "batch size {batch_size} must be at least 2"
        )));
    }
    if n_particles == 0 || !n_particles.is_multiple_of(batch_size) {
        return Err(RbmError::invalid_argument(format!(
            "batch size {batch_size} does not divide particle count {n_particles}"
        )));
    }
    let mut members: Vec<u32> = (0..n_particles as u32).collect();
    for i in (1..n_particles).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        members.swap(i, j);
    }
    for chunk in members.chunks_exact_mut(batch_size) {
        chunk.sort_unstable();
    }
    Ok(BatchPartition::from_members(batch_size, members))
}

/// Whether particles `i` and `j` share a batch (the indicator `I_ij`).
pub fn same_batch(partition: &BatchPartition, i: usize, j: usize) -> Result<bool> {
    let n = partition.n_particles();
    if i >= n || j >= n {
        return Err(RbmError::invalid_argument(format!(
            "particle index out of range: ({i}, {j}) with N = {n}"
        )));
    }
    if i == j {
        return Err(RbmError::invalid_argument(
            "same_batch requires distinct particle indices",
        ));
    }
    Ok(partition.assignment[i] == partition.assignment[j])
}

/// Number of unordered divisions of `n` particles into batches of size `p`,
/// or `None` when it does not fit in `u64`. Computed as the product of
/// binomials `C(n-1-k*p, p-1)`: repeatedly pin the smallest unassigned
/// particle and pick its batch mates.
pub fn n_divisions(n_particles: usize, batch_size: usize) -> Option<u64> {
    if batch_size == 0 || !n_particles.is_multiple_of(batch_size) {
        return None;
    }
    let mut total: u64 = 1;
    let mut remaining = n_particles;
    while remaining > 0 {
        let c = binomial(remaining - 1, batch_size - 1)?;
        total = total.checked_mul(c)?;
        remaining -= batch_size;
    }
    Some(total)
}

fn binomial(n: usize, k: usize) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u64)?;
        acc /= (i + 1) as u64;
    }
    Some(acc)
}

/// Visits every unordered division exactly once. The visitor receives a
/// partition whose batches are in canonical order (each anchored by its
/// smallest member).
pub fn for_each_division<F: FnMut(&BatchPartition)>(
    n_particles: usize,
    batch_size: usize,
    mut visit: F,
) -> Result<()> {
    if batch_size < 2 {
        return Err(RbmError::invalid_argument(format!(
            "batch size {batch_size} must be at least 2"
        )));
    }
    if n_particles == 0 || !n_particles.is_multiple_of(batch_size) {
        return Err(RbmError::invalid_argument(format!(
            "batch size {batch_size} does not divide particle count {n_particles}"
        )));
    }
    let free: Vec<u32> = (0..n_particles as u32).collect();
    let mut members: Vec<u32> = Vec::with_capacity(n_particles);
    recurse_divisions(&free, batch_size, &mut members, &mut visit);
    Ok(())
}

fn recurse_divisions<F: FnMut(&BatchPartition)>(
    free: &[u32],
    p: usize,
    members: &mut Vec<u32>,
    visit: &mut F,
) {
    if free.is_empty() {
        let partition = BatchPartition::from_members(p, members.clone());
        visit(&partition);
        return;
    }
    let anchor = free[0];
    let rest = &free[1..];
    let mut combo = vec![0usize; p - 1];
    choose_rec(rest, 0, 0, &mut combo, &mut |mates: &[usize]| {
        members.push(anchor);
        for &idx in mates {
            members.push(rest[idx]);
        }
        let mut next_free: Vec<u32> = Vec::with_capacity(rest.len() - (p - 1));
        let mut mate_iter = mates.iter().peekable();
        for (idx, &v) in rest.iter().enumerate() {
            if mate_iter.peek() == Some(&&idx) {
                mate_iter.next();
            } else {
                next_free.push(v);
            }
        }
        recurse_divisions(&next_free, p, members, visit);
        members.truncate(members.len() - p);
    });
}

fn choose_rec<F: FnMut(&[usize])>(
    pool: &[u32],
    start: usize,
    depth: usize,
    combo: &mut Vec<usize>,
    emit: &mut F,
) {
    let want = combo.len();
    if depth == want {
        emit(combo);
        return;
    }
    for idx in start..=(pool.len() - (want - depth)) {
        combo[depth] = idx;
        choose_rec(pool, idx + 1, depth + 1, combo, emit);
    }
}

/// Estimates (or enumerates) the indicator moments `E I_ij` and
/// `E I_ij I_il` for distinct `i, j, l`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct IndicatorMomentReport {
    /// Estimate of `E I_ij`.
    pub first: f64,
    /// Estimate of `E I_ij I_il` (zero when `N < 3` makes it undefined).
    pub second: f64,
    pub first_stderr: f64,
    pub second_stderr: f64,
    /// `(p-1)/(N-1)`.
    pub predicted_first: f64,
    /// `(p-1)(p-2)/((N-1)(N-2))`.
    pub predicted_second: f64,
    /// True when every division was enumerated instead of sampled.
    pub exhaustive: bool,
    pub samples: u64,
}

/// Enumeration is used whenever the number of divisions is at most this;
/// otherwise the report falls back to Monte Carlo sampling.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

/// Indicator-moment report for the pair `(0, 1)` and triple `(0, 1, 2)`;
/// by exchangeability of the division law the choice of indices is
/// immaterial. Uses exact enumeration when there are at most
/// [`ENUMERATION_LIMIT`] divisions, Monte Carlo with `samples` draws
/// otherwise.
pub fn indicator_moment_check(
    n_particles: usize,
    batch_size: usize,
    samples: u64,
    rng: &mut RngStream,
) -> Result<IndicatorMomentReport> {
    if samples == 0 {
        return Err(RbmError::invalid_argument("sample count must be positive"));
    }
    if n_particles < 3 {
        return Err(RbmError::invalid_argument(
            "second indicator moment needs at least 3 particles",
        ));
    }
    if batch_size < 2 || !n_particles.is_multiple_of(batch_size) {
        return Err(RbmError::invalid_argument(format!(
            "batch size {batch_size} invalid for N = {n_particles}"
        )));
    }
    let nf = n_particles as f64;
    let pf = batch_size as f64;
    let predicted_first = (pf - 1.0) / (nf - 1.0);
    let predicted_second = (pf - 1.0) * (pf - 2.0) / ((nf - 1.0) * (nf - 2.0));

    let exhaustive = matches!(n_divisions(n_particles, batch_size), Some(c) if c <= ENUMERATION_LIMIT);
    let (mut sum1, mut sum2, mut count) = (0.0f64, 0.0f64, 0u64);
    let mut tally = |partition: &BatchPartition| {
        let i01 = (partition.assignment[0] == partition.assignment[1]) as u64 as f64;
        let i02 = (partition.assignment[0] == partition.assignment[2]) as u64 as f64;
        sum1 += i01;
        sum2 += i01 * i02;
        count += 1;
    };
    if exhaustive {
        for_each_division(n_particles, batch_size, &mut tally)?;
    } else {
        for _ in 0..samples {
            let partition = random_partition(n_particles, batch_size, rng)?;
            tally(&partition);
        }
    }
    let c = count as f64;
    let first = sum1 / c;
    let second = sum2 / c;
    let (first_stderr, second_stderr) = if exhaustive {
        (0.0, 0.0)
    } else {
        // Bernoulli-style standard errors of the sample means.
        let v1 = (first - first * first).max(0.0);
        let v2 = (second - second * second).max(0.0);
        ((v1 / c).sqrt(), (v2 / c).sqrt())
    };
    Ok(IndicatorMomentReport {
        first,
        second,
        first_stderr,
        second_stderr,
        predicted_first,
        predicted_second,
        exhaustive,
        samples: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamPurpose;

    fn stream(seed: u64) -> RngStream {
        RngStream::new(seed, StreamPurpose::Diagnostics, 0, 0)
    }

    #[test]
    fn two_particles_have_a_single_division() {
        let mut rng = stream(1);
        for _ in 0..32 {
            let partition = random_partition(2, 2, &mut rng).unwrap();
            assert_eq!(partition.batch(0), &[0, 1]);
        }
        assert_eq!(n_divisions(2, 2), Some(1));
    }

    #[test]
    fn rejects_bad_batch_sizes() {
        let mut rng = stream(2);
        assert!(random_partition(4, 1, &mut rng).is_err());
        assert!(random_partition(4, 3, &mut rng).is_err());
        assert!(random_partition(0, 2, &mut rng).is_err());
    }

    #[test]
    fn same_seed_reproduces_partition() {
        let a = random_partition(12, 3, &mut stream(42)).unwrap();
        let b = random_partition(12, 3, &mut stream(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partitions_are_valid() {
        let mut rng = stream(3);
        for &(n, p) in &[(4usize, 2usize), (12, 3), (20, 4), (100, 2), (30, 5)] {
            for _ in 0..20 {
                let partition = random_partition(n, p, &mut rng).unwrap();
                partition.validate().unwrap();
                assert_eq!(partition.n_batches(), n / p);
                for batch in partition.batches() {
                    assert!(batch.windows(2).all(|w| w[0] < w[1]), "batch sorted");
                }
            }
        }
    }

    #[test]
    fn same_batch_basics() {
        // Fixed division {{0,1},{2,3}}.
        let partition = BatchPartition::from_members(2, vec![0, 1, 2, 3]);
        assert!(same_batch(&partition, 0, 1).unwrap());
        assert!(!same_batch(&partition, 0, 2).unwrap());
        assert!(same_batch(&partition, 0, 0).is_err());
        assert!(same_batch(&partition, 0, 9).is_err());
    }

    #[test]
    fn pairings_of_four_are_uniform() {
        // The three pairings of N=4, p=2 each occur with frequency 1/3.
        let mut rng = stream(7);
        let mut counts = std::collections::HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            let partition = random_partition(4, 2, &mut rng).unwrap();
            let mut key: Vec<Vec<u32>> = partition.batches().map(|b| b.to_vec()).collect();
            key.sort();
            *counts.entry(key).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 3);
        // 3 sigma for a 1/3 frequency at 1e5 samples.
        let tol = 3.0 * ((1.0 / 3.0) * (2.0 / 3.0) / draws as f64).sqrt();
        for (_, c) in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() <= tol, "freq {freq} tol {tol}");
        }
    }

    #[test]
    fn division_counts_match_closed_form() {
        assert_eq!(n_divisions(4, 2), Some(3));
        assert_eq!(n_divisions(6, 2), Some(15));
        assert_eq!(n_divisions(6, 3), Some(10));
        assert_eq!(n_divisions(8, 2), Some(105));
        assert_eq!(n_divisions(8, 4), Some(35));
        assert_eq!(n_divisions(12, 2), Some(10395));
    }

    #[test]
    fn enumeration_visits_each_division_once() {
        for &(n, p) in &[(4usize, 2usize), (6, 2), (6, 3), (8, 2), (8, 4)] {
            let mut seen = std::collections::HashSet::new();
            for_each_division(n, p, |partition| {
                partition.validate().unwrap();
                let mut key: Vec<Vec<u32>> = partition.batches().map(|b| b.to_vec()).collect();
                key.sort();
                assert!(seen.insert(key), "duplicate division for N={n} p={p}");
            })
            .unwrap();
            assert_eq!(seen.len() as u64, n_divisions(n, p).unwrap());
        }
    }

    #[test]
    fn mean_indicator_matches_lemma_monte_carlo() {
        // E I_ij = (p-1)/(N-1) = 1/5 for N=6, p=2, within 3 sigma at 1e5.
        let mut rng = stream(11);
        let draws = 100_000;
        let mut hits = 0u32;
        for _ in 0..draws {
            let partition = random_partition(6, 2, &mut rng).unwrap();
            if same_batch(&partition, 2, 5).unwrap() {
                hits += 1;
            }
        }
        let freq = hits as f64 / draws as f64;
        let tol = 3.0 * (0.2 * 0.8 / draws as f64).sqrt();
        assert!((freq - 0.2).abs() <= tol, "freq {freq} tol {tol}");
    }

    #[test]
    fn indicator_moments_exact_small_n() {
        let mut rng = stream(13);
        // N=4, p=2: E I = 1/3 exactly, second moment zero because p=2
        // admits a single batch mate.
        let r = indicator_moment_check(4, 2, 10, &mut rng).unwrap();
        assert!(r.exhaustive);
        assert_eq!(r.samples, 3);
        assert!((r.first - 1.0 / 3.0).abs() <= 1e-15);
        assert_eq!(r.second, 0.0);
        assert_eq!(r.predicted_second, 0.0);

        // N=6, p=3: E I_ij I_il = (2*1)/(5*4) = 0.1 exactly under enumeration.
        let r = indicator_moment_check(6, 3, 10, &mut rng).unwrap();
        assert!(r.exhaustive);
        assert!((r.first - 2.0 / 5.0).abs() <= 1e-12);
        assert!((r.second - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn indicator_moments_monte_carlo_large_n() {
        let mut rng = stream(17);
        let r = indicator_moment_check(100, 2, 100_000, &mut rng).unwrap();
        assert!(!r.exhaustive);
        assert!((r.first - r.predicted_first).abs() <= 3.0 * r.first_stderr);
        // p = 2 forces the second moment to vanish sample by sample.
        assert_eq!(r.second, 0.0);
    }

    #[test]
    fn indicator_moments_reject_zero_samples() {
        let mut rng = stream(19);
        assert!(indicator_moment_check(6, 2, 0, &mut rng).is_err());
    }

    #[test]
    fn exchangeability_of_marginals() {
        // Relabeling particles leaves pair statistics unchanged: compare the
        // same-batch frequency of (0,1) under one seed with that of a
        // permuted pair (4,2) under another.
        let draws = 100_000;
        let freq = |i: usize, j: usize, seed: u64| {
            let mut rng = stream(seed);
            let mut hits = 0u32;
            for _ in 0..draws {
                let partition = random_partition(6, 2, &mut rng).unwrap();
                if same_batch(&partition, i, j).unwrap() {
                    hits += 1;
                }
            }
            hits as f64 / draws as f64
        };
        let f_base = freq(0, 1, 23);
        let f_perm = freq(4, 2, 29);
        let sigma = (0.2 * 0.8 / draws as f64).sqrt();
        assert!((f_base - f_perm).abs() <= 4.0 * sigma * std::f64::consts::SQRT_2);
    }
}
