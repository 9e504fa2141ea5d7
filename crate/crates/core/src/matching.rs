//! Pair matching on propensity score without replacement.
//!
//! Optimal matching is a min-cost bipartite assignment on the caliper-pruned
//! graph. Every treated row also owns a private "drop" column priced above the
//! cost of any complete matching, so the solution first maximises the number
//! of matched treated units and then minimises the summed distance among those
//! maximum-cardinality pairings. The assignment is solved row by row with
//! Dijkstra-based shortest augmenting paths over integer costs; only controls
//! inside a row's caliper window are ever touched, which keeps each augmentation
//! local when scores are dense.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::data::UnitIndex;
use crate::error::{Error, Result};

/// Default caliper on absolute propensity-score distance.
pub const DEFAULT_CALIPER: f64 = 0.02;

/// Distances are solved as integers in units of 1e-12.
pub const COST_SCALE: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchAlgorithm {
    #[default]
    Optimal,
    GreedyNearest,
}

/// Deterministic tie rule among equal-cost choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Earlier treated occurrences are placed first; among equally distant
    /// controls the lowest control index wins.
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    #[serde(default = "default_caliper")]
    pub caliper: f64,
    #[serde(default)]
    pub algorithm: MatchAlgorithm,
    #[serde(default)]
    pub tie_break: TieBreak,
}

fn default_caliper() -> f64 {
    DEFAULT_CALIPER
}

impl Default for MatchSpec {
    fn default() -> Self {
        Self {
            caliper: DEFAULT_CALIPER,
            algorithm: MatchAlgorithm::Optimal,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl MatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.caliper.is_finite() || self.caliper < 0.0 {
            return Err(Error::Config(format!(
                "caliper must be finite and >= 0, got {}",
                self.caliper
            )));
        }
        Ok(())
    }
}

/// A unit together with its propensity score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredUnit {
    pub unit: UnitIndex,
    pub score: f64,
}

impl ScoredUnit {
    pub fn new(unit: usize, score: f64) -> Self {
        Self {
            unit: UnitIndex(unit),
            score,
        }
    }
}

/// Collects `(index, scores[index])` for each index.
pub fn scored(indices: &[usize], scores: &[f64]) -> Vec<ScoredUnit> {
    indices
        .iter()
        .map(|&i| ScoredUnit::new(i, scores[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treated: UnitIndex,
    pub control: UnitIndex,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchedSample {
    /// In the order the treated occurrences were presented.
    pub pairs: Vec<MatchedPair>,
    pub dropped_treated: Vec<UnitIndex>,
    pub total_distance: f64,
}

impl MatchedSample {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn treated_units(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.treated.0)
    }

    pub fn control_units(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.control.0)
    }

    /// CSV with columns `treated_row,control_row,distance`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["treated_row", "control_row", "distance"])?;
        for p in &self.pairs {
            w.write_record([
                p.treated.to_string(),
                p.control.to_string(),
                format!("{:?}", p.distance),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<matched sample>", e))?;
        Ok(())
    }
}

/// Integer cost of a pair as used by the optimal solver.
pub fn quantized_distance(a: f64, b: f64) -> i64 {
    ((a - b).abs() * COST_SCALE).round() as i64
}

/// Matches each treated unit to a distinct control unit.
pub fn match_pairs(
    treated: &[ScoredUnit],
    controls: &[ScoredUnit],
    spec: &MatchSpec,
) -> Result<MatchedSample> {
    spec.validate()?;
    if controls.is_empty() {
        return Err(Error::NoControls);
    }
    if treated.is_empty() {
        return Err(Error::NoTreated);
    }
    let t: Vec<f64> = treated.iter().map(|u| u.score).collect();
    let c: Vec<f64> = controls.iter().map(|u| u.score).collect();
    let c_ids: Vec<usize> = controls.iter().map(|u| u.unit.0).collect();
    let assignment = match spec.algorithm {
        MatchAlgorithm::Optimal => optimal_assignment(&t, &c, &c_ids, spec.caliper),
        MatchAlgorithm::GreedyNearest => greedy_assignment(&t, &c, &c_ids, spec.caliper),
    };

    let mut out = MatchedSample::default();
    for (tu, slot) in treated.iter().zip(assignment) {
        match slot {
            Some(j) => {
                let cu = controls[j];
                let distance = (tu.score - cu.score).abs();
                out.total_distance += distance;
                out.pairs.push(MatchedPair {
                    treated: tu.unit,
                    control: cu.unit,
                    distance,
                });
            }
            None => out.dropped_treated.push(tu.unit),
        }
    }
    if out.pairs.is_empty() {
        return Err(Error::NoFeasibleMatches);
    }
    Ok(out)
}

/// Matches a bootstrap resample of treated units against a control pool.
///
/// The resample may list the same unit several times; every occurrence is
/// matched on its own and consumes a distinct control.
pub fn match_resample(
    resampled_treated: &[ScoredUnit],
    control_pool: &[ScoredUnit],
    spec: &MatchSpec,
) -> Result<MatchedSample> {
    match_pairs(resampled_treated, control_pool, spec)
}

/// Controls sorted by score (ties by unit id) for window scans.
struct SortedControls {
    scores: Vec<f64>,
    /// Position in the caller's control slice.
    slot: Vec<usize>,
    /// Caller-visible unit id, used for tie-breaking.
    unit: Vec<usize>,
}

impl SortedControls {
    fn new(scores: &[f64], units: &[usize]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(units[a].cmp(&units[b]))
                .then(a.cmp(&b))
        });
        Self {
            scores: order.iter().map(|&k| scores[k]).collect(),
            unit: order.iter().map(|&k| units[k]).collect(),
            slot: order,
        }
    }

    /// Sorted positions whose score lies within `caliper` of `s`.
    fn window(&self, s: f64, caliper: f64) -> std::ops::Range<usize> {
        let lo = self.scores.partition_point(|&c| c < s - caliper);
        let hi = self.scores.partition_point(|&c| c <= s + caliper);
        // The endpoints are computed in floating point; trim so every
        // returned position satisfies |s - c| <= caliper exactly.
        let mut lo = lo.saturating_sub(1);
        while lo < hi && (s - self.scores[lo]).abs() > caliper {
            lo += 1;
        }
        let mut hi = (hi + 1).min(self.scores.len());
        while hi > lo && (s - self.scores[hi - 1]).abs() > caliper {
            hi -= 1;
        }
        lo..hi
    }
}

const UNASSIGNED: usize = usize::MAX;

/// Maximum-cardinality, minimum-distance assignment of treated rows to
/// distinct control columns. Returns, per treated row, the index into
/// `controls` or `None` when the row is dropped.
pub(crate) fn optimal_assignment(
    treated: &[f64],
    controls: &[f64],
    control_units: &[usize],
    caliper: f64,
) -> Vec<Option<usize>> {
    let nr = treated.len();
    let sorted = SortedControls::new(controls, control_units);
    let nc = sorted.scores.len();
    let ncols = nc + nr;

    let max_edge = (caliper.min(1.0) * COST_SCALE).round() as i64 + 1;
    let drop_cost = (nr as i64 + 1) * max_edge;

    let mut u = vec![0i64; nr];
    let mut v = vec![0i64; ncols];
    let mut col4row = vec![UNASSIGNED; nr];
    let mut row4col = vec![UNASSIGNED; ncols];

    let mut spc = vec![i64::MAX; ncols];
    let mut path = vec![UNASSIGNED; ncols];
    let mut scanned = vec![false; ncols];
    let mut touched: Vec<usize> = Vec::new();
    let mut scanned_rows: Vec<usize> = Vec::new();
    let mut scanned_cols: Vec<usize> = Vec::new();
    let mut heap: BinaryHeap<Reverse<(i64, bool, usize, usize)>> = BinaryHeap::new();

    let windows: Vec<std::ops::Range<usize>> =
        treated.iter().map(|&s| sorted.window(s, caliper)).collect();

    for cur in 0..nr {
        let mut min_val = 0i64;
        let mut row = cur;
        let sink = loop {
            scanned_rows.push(row);
            let s = treated[row];
            let base = min_val - u[row];
            for j in windows[row].clone() {
                if scanned[j] {
                    continue;
                }
                let cost = quantized_distance(s, sorted.scores[j]);
                let r = base + cost - v[j];
                if r < spc[j] {
                    if spc[j] == i64::MAX {
                        touched.push(j);
                    }
                    spc[j] = r;
                    path[j] = row;
                    heap.push(Reverse((r, row4col[j] != UNASSIGNED, sorted.unit[j], j)));
                }
            }
            let dj = nc + row;
            if !scanned[dj] {
                let r = base + drop_cost - v[dj];
                if r < spc[dj] {
                    if spc[dj] == i64::MAX {
                        touched.push(dj);
                    }
                    spc[dj] = r;
                    path[dj] = row;
                    heap.push(Reverse((r, row4col[dj] != UNASSIGNED, usize::MAX, dj)));
                }
            }

            // The row's own drop column is always reachable, so the heap
            // cannot run dry before a free column is found.
            let j = loop {
                let Reverse((r, _, _, j)) = heap.pop().expect("drop column is always reachable");
                if !scanned[j] && r == spc[j] {
                    break j;
                }
            };
            scanned[j] = true;
            scanned_cols.push(j);
            min_val = spc[j];
            if row4col[j] == UNASSIGNED {
                break j;
            }
            row = row4col[j];
        };

        u[cur] += min_val;
        for &i in &scanned_rows {
            if i != cur {
                u[i] += min_val - spc[col4row[i]];
            }
        }
        for &j in &scanned_cols {
            v[j] -= min_val - spc[j];
        }

        let mut j = sink;
        loop {
            let i = path[j];
            row4col[j] = i;
            let prev = std::mem::replace(&mut col4row[i], j);
            if i == cur {
                break;
            }
            j = prev;
        }

        for &j in &touched {
            spc[j] = i64::MAX;
            scanned[j] = false;
        }
        touched.clear();
        scanned_rows.clear();
        scanned_cols.clear();
        heap.clear();
    }

    col4row
        .into_iter()
        .map(|j| (j < nc).then(|| sorted.slot[j]))
        .collect()
}

/// Greedy nearest-neighbour matching: treated rows in ascending score order
/// each take the closest unused control within the caliper.
pub(crate) fn greedy_assignment(
    treated: &[f64],
    controls: &[f64],
    control_units: &[usize],
    caliper: f64,
) -> Vec<Option<usize>> {
    let sorted = SortedControls::new(controls, control_units);
    let mut used = vec![false; sorted.scores.len()];
    let mut order: Vec<usize> = (0..treated.len()).collect();
    order.sort_by(|&a, &b| treated[a].total_cmp(&treated[b]).then(a.cmp(&b)));

    let mut out = vec![None; treated.len()];
    for row in order {
        let s = treated[row];
        let best = sorted
            .window(s, caliper)
            .filter(|&j| !used[j])
            .min_by(|&a, &b| {
                quantized_distance(s, sorted.scores[a])
                    .cmp(&quantized_distance(s, sorted.scores[b]))
                    .then(sorted.unit[a].cmp(&sorted.unit[b]))
            });
        if let Some(j) = best {
            used[j] = true;
            out[row] = Some(sorted.slot[j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn units(scores: &[f64], offset: usize) -> Vec<ScoredUnit> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredUnit::new(offset + i, s))
            .collect()
    }

    /// Exhaustive search over all injective partial assignments:
    /// (max cardinality, min integer cost among those).
    fn brute_force(t: &[f64], c: &[f64], caliper: f64) -> (usize, i64) {
        #[allow(clippy::too_many_arguments)]
        fn rec(
            i: usize,
            t: &[f64],
            c: &[f64],
            cal: f64,
            used: &mut Vec<bool>,
            card: usize,
            cost: i64,
            best: &mut (usize, i64),
        ) {
            if i == t.len() {
                if card > best.0 || (card == best.0 && cost < best.1) {
                    *best = (card, cost);
                }
                return;
            }
            rec(i + 1, t, c, cal, used, card, cost, best);
            for j in 0..c.len() {
                if !used[j] && (t[i] - c[j]).abs() <= cal {
                    used[j] = true;
                    let q = quantized_distance(t[i], c[j]);
                    rec(i + 1, t, c, cal, used, card + 1, cost + q, best);
                    used[j] = false;
                }
            }
        }
        let mut best = (0, i64::MAX);
        rec(0, t, c, caliper, &mut vec![false; c.len()], 0, 0, &mut best);
        best
    }

    fn check_invariants(m: &MatchedSample, t: &[ScoredUnit], caliper: f64) {
        let mut seen = std::collections::HashSet::new();
        for p in &m.pairs {
            assert!(seen.insert(p.control), "control reused");
            assert!(p.distance <= caliper + 1e-12);
        }
        assert_eq!(m.pairs.len() + m.dropped_treated.len(), t.len());
        let mut covered: Vec<UnitIndex> = m
            .pairs
            .iter()
            .map(|p| p.treated)
            .chain(m.dropped_treated.iter().copied())
            .collect();
        let mut expect: Vec<UnitIndex> = t.iter().map(|u| u.unit).collect();
        covered.sort();
        expect.sort();
        assert_eq!(covered, expect);
    }

    fn quantized_total(m: &MatchedSample, t: &[ScoredUnit], c: &[ScoredUnit]) -> i64 {
        let score = |u: UnitIndex, set: &[ScoredUnit]| set.iter().find(|x| x.unit == u).unwrap().score;
        m.pairs
            .iter()
            .map(|p| quantized_distance(score(p.treated, t), score(p.control, c)))
            .sum()
    }

    #[test]
    fn single_nearest_in_caliper() {
        let t = units(&[0.50], 0);
        let c = units(&[0.30, 0.49], 1);
        let m = match_pairs(&t, &c, &MatchSpec::default()).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].control, UnitIndex(2));
        assert!((m.total_distance - 0.01).abs() < 1e-12);
    }

    #[test]
    fn infeasible_treated_is_dropped() {
        let t = units(&[0.90, 0.19], 0);
        let c = units(&[0.10, 0.20], 2);
        let m = match_pairs(&t, &c, &MatchSpec::default()).unwrap();
        assert_eq!(m.dropped_treated, vec![UnitIndex(0)]);

        let t = units(&[0.90], 0);
        assert!(matches!(
            match_pairs(&t, &c, &MatchSpec::default()),
            Err(Error::NoFeasibleMatches)
        ));
    }

    #[test]
    fn empty_control_pool_is_an_error() {
        let t = units(&[0.5], 0);
        assert!(matches!(
            match_pairs(&t, &[], &MatchSpec::default()),
            Err(Error::NoControls)
        ));
    }

    #[test]
    fn repeated_treated_consume_distinct_controls() {
        let t = vec![ScoredUnit::new(0, 0.50), ScoredUnit::new(0, 0.50)];
        let c = units(&[0.49, 0.51, 0.90], 1);
        let m = match_resample(&t, &c, &MatchSpec::default()).unwrap();
        let mut used: Vec<usize> = m.control_units().collect();
        used.sort_unstable();
        assert_eq!(used, vec![1, 2]);
        assert!(m.dropped_treated.is_empty());
    }

    #[test]
    fn identity_resample_equals_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<ScoredUnit> = (0..30).map(|i| ScoredUnit::new(i, rng.random())).collect();
        let c: Vec<ScoredUnit> = (30..120).map(|i| ScoredUnit::new(i, rng.random())).collect();
        let spec = MatchSpec::default();
        assert_eq!(
            match_pairs(&t, &c, &spec).unwrap(),
            match_resample(&t, &c, &spec).unwrap()
        );
    }

    #[test]
    fn cardinality_beats_distance() {
        // Both treated can only use control 0.5; the closer one must win,
        // and a pairing that leaves the third treated unmatched is worse.
        let t = units(&[0.515, 0.501, 0.48], 0);
        let c = units(&[0.50, 0.47], 3);
        let m = match_pairs(&t, &c, &MatchSpec::default()).unwrap();
        assert_eq!(m.n_pairs(), 2);
        assert_eq!(m.dropped_treated, vec![UnitIndex(0)]);
        assert!((m.total_distance - (0.001 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_5x9() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let t: Vec<f64> = (0..5).map(|_| rng.random_range(0.3..0.7)).collect();
            let c: Vec<f64> = (0..9).map(|_| rng.random_range(0.3..0.7)).collect();
            let tu = units(&t, 0);
            let cu = units(&c, 5);
            let (card, cost) = brute_force(&t, &c, 0.05);
            match match_pairs(&tu, &cu, &MatchSpec { caliper: 0.05, ..Default::default() }) {
                Ok(m) => {
                    check_invariants(&m, &tu, 0.05);
                    assert_eq!(m.n_pairs(), card);
                    assert_eq!(quantized_total(&m, &tu, &cu), cost);
                }
                Err(Error::NoFeasibleMatches) => assert_eq!(card, 0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn resample_with_repeats_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base: Vec<f64> = (0..20).map(|_| rng.random_range(0.2..0.8)).collect();
        let pool: Vec<f64> = (0..200).map(|_| rng.random_range(0.2..0.8)).collect();
        for _ in 0..50 {
            let picks: Vec<usize> = (0..6).map(|_| rng.random_range(0..20)).collect();
            let cols: Vec<usize> = (0..10).map(|_| rng.random_range(0..200)).collect();
            let mut cols = cols;
            cols.sort_unstable();
            cols.dedup();
            let t: Vec<f64> = picks.iter().map(|&i| base[i]).collect();
            let c: Vec<f64> = cols.iter().map(|&j| pool[j]).collect();
            let tu: Vec<ScoredUnit> = picks.iter().map(|&i| ScoredUnit::new(i, base[i])).collect();
            let cu: Vec<ScoredUnit> = cols.iter().map(|&j| ScoredUnit::new(100 + j, pool[j])).collect();
            let (card, cost) = brute_force(&t, &c, 0.1);
            let spec = MatchSpec { caliper: 0.1, ..Default::default() };
            match match_resample(&tu, &cu, &spec) {
                Ok(m) => {
                    check_invariants(&m, &tu, 0.1);
                    assert_eq!(m.n_pairs(), card);
                    assert_eq!(quantized_total(&m, &tu, &cu), cost);
                }
                Err(Error::NoFeasibleMatches) => assert_eq!(card, 0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn greedy_respects_caliper_and_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<ScoredUnit> = (0..50).map(|i| ScoredUnit::new(i, rng.random())).collect();
        let c: Vec<ScoredUnit> = (50..200).map(|i| ScoredUnit::new(i, rng.random())).collect();
        let spec = MatchSpec {
            algorithm: MatchAlgorithm::GreedyNearest,
            ..Default::default()
        };
        let greedy = match_pairs(&t, &c, &spec).unwrap();
        check_invariants(&greedy, &t, spec.caliper);
        let optimal = match_pairs(&t, &c, &MatchSpec::default()).unwrap();
        assert!(optimal.n_pairs() >= greedy.n_pairs());
    }

    #[test]
    fn greedy_example() {
        let t = units(&[0.50], 0);
        let c = units(&[0.30, 0.49, 0.515], 1);
        let spec = MatchSpec {
            algorithm: MatchAlgorithm::GreedyNearest,
            ..Default::default()
        };
        let m = match_pairs(&t, &c, &spec).unwrap();
        assert_eq!(m.pairs[0].control, UnitIndex(2));
    }

    #[test]
    fn rejects_bad_caliper() {
        let t = units(&[0.5], 0);
        let c = units(&[0.5], 1);
        for caliper in [-0.1, f64::NAN, f64::INFINITY] {
            let spec = MatchSpec { caliper, ..Default::default() };
            assert!(matches!(match_pairs(&t, &c, &spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn csv_export() {
        let t = units(&[0.5], 0);
        let c = units(&[0.49], 1);
        let m = match_pairs(&t, &c, &MatchSpec::default()).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("treated_row,control_row,distance\n0,1,"));
    }

    proptest! {
        #[test]
        fn optimal_equals_exhaustive(
            t in prop::collection::vec(0.01f64..0.99, 1..=7),
            c in prop::collection::vec(0.01f64..0.99, 1..=10),
            caliper in 0.0f64..0.3,
        ) {
            let tu = units(&t, 0);
            let cu = units(&c, 100);
            let (card, cost) = brute_force(&t, &c, caliper);
            let spec = MatchSpec { caliper, ..Default::default() };
            match match_pairs(&tu, &cu, &spec) {
                Ok(m) => {
                    check_invariants(&m, &tu, caliper);
                    prop_assert_eq!(m.n_pairs(), card);
                    prop_assert_eq!(quantized_total(&m, &tu, &cu), cost);
                }
                Err(Error::NoFeasibleMatches) => prop_assert_eq!(card, 0),
                Err(e) => panic!("{e}"),
            }
        }

        #[test]
        fn deterministic(
            t in prop::collection::vec(0.01f64..0.99, 1..40),
            c in prop::collection::vec(0.01f64..0.99, 1..80),
        ) {
            let tu = units(&t, 0);
            let cu = units(&c, 100);
            let spec = MatchSpec { caliper: 0.1, ..Default::default() };
            let a = match_pairs(&tu, &cu, &spec);
            let b = match_pairs(&tu, &cu, &spec);
            prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }
}
