//! Trajectory similarity: DTW, exact 1-Wasserstein, and normalized scores.
//!
//! All metrics run on z-normalized features so state and action dimensions
//! contribute on comparable scales.

use serde::Serialize;

use crate::dataset::NormStats;
use crate::env::Trajectory;
use crate::{seeded_rng, MaqError, Result};

/// Non-empty sequence of equally sized finite feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    rows: Vec<Vec<f64>>,
}

impl FeatureSequence {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows
            .first()
            .ok_or_else(|| MaqError::Usage("feature sequence must not be empty".into()))?
            .len();
        if rows.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
            return Err(MaqError::Usage("feature rows must share one dimension and be finite".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    State,
    Action,
}

/// Normalized state or action sequence of a trajectory.
pub fn features(trajectory: &Trajectory, feature: Feature, norm: &NormStats) -> Result<FeatureSequence> {
    let rows = match feature {
        Feature::State => trajectory
            .states
            .iter()
            .map(|s| norm.normalize_state(&s.features()))
            .collect(),
        Feature::Action => trajectory
            .actions
            .iter()
            .map(|a| norm.normalize_actions(&a.to_array()))
            .collect(),
    };
    FeatureSequence::new(rows)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimal accumulated Euclidean cost over monotone alignments that pair the
/// first and the last elements of both sequences.
pub fn dtw(a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MaqError::Usage(format!("dtw dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, x) in a.rows.iter().enumerate() {
        for (j, y) in b.rows.iter().enumerate() {
            let cost = euclidean(x, y);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Mean DTW over all (human, agent) pairs.
pub fn cross_set_dtw(human: &[FeatureSequence], agent: &[FeatureSequence]) -> Result<f64> {
    if human.is_empty() || agent.is_empty() {
        return Err(MaqError::Usage("cross-set DTW needs non-empty sets".into()));
    }
    let mut total = 0.0;
    for h in human {
        let mut inner = 0.0;
        for a in agent {
            inner += dtw(h, a)?;
        }
        total += inner / agent.len() as f64;
    }
    Ok(total / human.len() as f64)
}

/// Support cap per side for [`wasserstein`].
pub const SUPPORT_CAP: usize = 200;
const SUBSAMPLE_SEED: u64 = 0x5744_5355_4253;

fn subsample(points: &[Vec<f64>], cap: usize, seed: u64) -> Vec<Vec<f64>> {
    if points.len() <= cap {
        return points.to_vec();
    }
    let mut idx = rand::seq::index::sample(&mut seeded_rng(seed), points.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i].clone()).collect()
}

/// 1-Wasserstein distance between the uniform empirical distributions of two
/// point sets, after subsampling each side to at most [`SUPPORT_CAP`] points
/// with a fixed seed.
pub fn wasserstein(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    let p = subsample(p, SUPPORT_CAP, SUBSAMPLE_SEED);
    let q = subsample(q, SUPPORT_CAP, SUBSAMPLE_SEED ^ 1);
    exact_wasserstein(&p, &q)
}

/// Exact 1-Wasserstein distance between uniform empirical distributions.
///
/// Solved as an integer transportation problem (each of the `n` sources
/// supplies `m` units, each of the `m` sinks demands `n`) with successive
/// shortest augmenting paths under Johnson potentials.
pub fn exact_wasserstein(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(MaqError::Usage("wasserstein needs non-empty supports".into()));
    }
    let dim = p[0].len();
    if p.iter().chain(q).any(|v| v.len() != dim) {
        return Err(MaqError::Usage("wasserstein dimension mismatch".into()));
    }
    let (n, m) = (p.len(), q.len());
    let cost: Vec<f64> = p.iter().flat_map(|a| q.iter().map(move |b| euclidean(a, b))).collect();
    let flow = transport(n, m, &cost);
    let total: f64 = flow.iter().zip(&cost).map(|(&f, c)| f as f64 * c).sum();
    Ok(total / (n as f64 * m as f64))
}

/// Min-cost transportation plan for supplies `m` per source, demands `n` per
/// sink, dense costs `cost[i * m + j]`. Returns integer flows.
fn transport(n: usize, m: usize, cost: &[f64]) -> Vec<i64> {
    // node layout: 0 = super source, 1..=n sources, n+1..=n+m sinks, n+m+1 = super sink
    let sink_node = |j: usize| n + 1 + j;
    let total_nodes = n + m + 2;
    let t = total_nodes - 1;
    let mut supply = vec![m as i64; n];
    let mut demand = vec![n as i64; m];
    let mut flow = vec![0i64; n * m];
    let mut pot = vec![0.0f64; total_nodes];
    let mut dist = vec![f64::INFINITY; total_nodes];
    let mut prev = vec![usize::MAX; total_nodes];
    let mut visited = vec![false; total_nodes];
    let mut remaining = (n * m) as i64;

    while remaining > 0 {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        visited.iter_mut().for_each(|v| *v = false);
        dist[0] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (v, (&d, &seen)) in dist.iter().zip(&visited).enumerate() {
                if !seen && d < best {
                    best = d;
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            visited[u] = true;
            let du = dist[u];
            let relax = |v: usize, reduced: f64, dist: &mut Vec<f64>, prev: &mut Vec<usize>| {
                let nd = du + reduced.max(0.0);
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = u;
                }
            };
            if u == 0 {
                for i in 0..n {
                    if supply[i] > 0 {
                        relax(1 + i, pot[0] - pot[1 + i], &mut dist, &mut prev);
                    }
                }
            } else if u <= n {
                let i = u - 1;
                for j in 0..m {
                    relax(sink_node(j), cost[i * m + j] + pot[u] - pot[sink_node(j)], &mut dist, &mut prev);
                }
            } else if u < t {
                let j = u - n - 1;
                for i in 0..n {
                    if flow[i * m + j] > 0 {
                        relax(1 + i, -cost[i * m + j] + pot[u] - pot[1 + i], &mut dist, &mut prev);
                    }
                }
                if demand[j] > 0 {
                    relax(t, pot[u] - pot[t], &mut dist, &mut prev);
                }
            }
        }
        let dt = dist[t];
        debug_assert!(dt.is_finite(), "transport problem is always feasible");
        for (p, d) in pot.iter_mut().zip(&dist) {
            *p += d.min(dt);
        }

        // bottleneck along the path
        let mut amount = i64::MAX;
        let mut v = t;
        while v != 0 {
            let u = prev[v];
            amount = amount.min(match (u, v) {
                (0, v) => supply[v - 1],
                (u, v) if v == t => demand[u - n - 1],
                (u, v) if u > n => flow[(v - 1) * m + (u - n - 1)],
                _ => i64::MAX,
            });
            v = u;
        }
        let mut v = t;
        while v != 0 {
            let u = prev[v];
            match (u, v) {
                (0, v) => supply[v - 1] -= amount,
                (u, v) if v == t => demand[u - n - 1] -= amount,
                (u, v) if u > n => flow[(v - 1) * m + (u - n - 1)] -= amount,
                (u, v) => flow[(u - 1) * m + (v - n - 1)] += amount,
            }
            v = u;
        }
        remaining -= amount;
    }
    flow
}

/// `1 - (agent - human) / (random - human)`: 1 is human-level, 0 random-level.
pub fn normalize_score(agent: f64, human: f64, random: f64) -> Result<f64> {
    let span = random - human;
    if span == 0.0 || !span.is_finite() {
        return Err(MaqError::Usage(format!(
            "normalization undefined: random reference {random} equals human reference {human}"
        )));
    }
    Ok(1.0 - (agent - human) / span)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub dtw_s: f64,
    pub dtw_a: f64,
    pub wd_s: f64,
    pub wd_a: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["dtw_s", "dtw_a", "wd_s", "wd_a"];

    pub fn values(&self) -> [f64; 4] {
        [self.dtw_s, self.dtw_a, self.wd_s, self.wd_a]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            dtw_s: v[0],
            dtw_a: v[1],
            wd_s: v[2],
            wd_a: v[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub agent: String,
    pub seed: u64,
    pub raw: Metrics,
    pub human_ref: Metrics,
    pub random_ref: Metrics,
    pub normalized: Metrics,
    pub success_rate: f64,
}

pub const REPORT_CSV_HEADER: &str =
    "agent,seed,dtw_s_raw,dtw_a_raw,wd_s_raw,wd_a_raw,dtw_s_norm,dtw_a_norm,wd_s_norm,wd_a_norm,success";

impl SimilarityReport {
    pub fn csv_row(&self) -> String {
        let mut fields = vec![self.agent.clone(), self.seed.to_string()];
        fields.extend(self.raw.values().iter().map(|v| format!("{v:.6}")));
        fields.extend(self.normalized.values().iter().map(|v| format!("{v:.6}")));
        fields.push(format!("{:.6}", self.success_rate));
        fields.join(",")
    }
}

/// Per-trajectory features for both kinds, ready for repeated comparisons.
struct FeatureSet {
    states: Vec<FeatureSequence>,
    actions: Vec<FeatureSequence>,
}

impl FeatureSet {
    fn new(trajectories: &[&Trajectory], norm: &NormStats) -> Result<Self> {
        Ok(Self {
            states: trajectories
                .iter()
                .map(|t| features(t, Feature::State, norm))
                .collect::<Result<_>>()?,
            actions: trajectories
                .iter()
                .map(|t| features(t, Feature::Action, norm))
                .collect::<Result<_>>()?,
        })
    }

    fn pooled(seqs: &[FeatureSequence]) -> Vec<Vec<f64>> {
        seqs.iter().flat_map(|s| s.rows.iter().cloned()).collect()
    }
}

fn compare(human: &FeatureSet, other: &FeatureSet) -> Result<Metrics> {
    Ok(Metrics::from_values([
        cross_set_dtw(&human.states, &other.states)?,
        cross_set_dtw(&human.actions, &other.actions)?,
        wasserstein(&FeatureSet::pooled(&human.states), &FeatureSet::pooled(&other.states))?,
        wasserstein(&FeatureSet::pooled(&human.actions), &FeatureSet::pooled(&other.actions))?,
    ]))
}

/// Leave-one-out human reference: each held-out trajectory against the rest.
fn human_reference(human: &[Trajectory], norm: &NormStats) -> Result<Metrics> {
    let mut sum = [0.0; 4];
    for i in 0..human.len() {
        let one = FeatureSet::new(&[&human[i]], norm)?;
        let rest: Vec<&Trajectory> = human.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, t)| t).collect();
        let rest = FeatureSet::new(&rest, norm)?;
        for (s, v) in sum.iter_mut().zip(compare(&one, &rest)?.values()) {
            *s += v;
        }
    }
    Ok(Metrics::from_values(sum.map(|s| s / human.len() as f64)))
}

/// Scores agent trajectories against held-out demonstrations, normalized by
/// the demonstrations' own spread and by random rollouts.
pub fn build_report(
    agent_tag: &str,
    seed: u64,
    agent: &[Trajectory],
    human_test: &[Trajectory],
    random: &[Trajectory],
    norm: &NormStats,
    success_rate: f64,
) -> Result<SimilarityReport> {
    if human_test.len() < 2 {
        return Err(MaqError::Usage(format!(
            "human reference needs at least two test trajectories, got {}",
            human_test.len()
        )));
    }
    if agent.is_empty() || random.is_empty() {
        return Err(MaqError::Usage("agent and random trajectory sets must be non-empty".into()));
    }
    let humans = FeatureSet::new(&human_test.iter().collect::<Vec<_>>(), norm)?;
    let raw = compare(&humans, &FeatureSet::new(&agent.iter().collect::<Vec<_>>(), norm)?)?;
    let random_ref = compare(&humans, &FeatureSet::new(&random.iter().collect::<Vec<_>>(), norm)?)?;
    let human_ref = human_reference(human_test, norm)?;
    let mut normalized = [0.0; 4];
    for (k, out) in normalized.iter_mut().enumerate() {
        *out = normalize_score(raw.values()[k], human_ref.values()[k], random_ref.values()[k])?;
    }
    Ok(SimilarityReport {
        agent: agent_tag.to_string(),
        seed,
        raw,
        human_ref,
        random_ref,
        normalized: Metrics::from_values(normalized),
        success_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{random_rollout, scripted_demo};

    fn seq(rows: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn dtw_basic_cases() {
        let a = seq(&[&[1.0, 2.0], &[0.5, 0.1], &[3.0, 3.0]]);
        assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw(&seq(&[&[0.0]]), &seq(&[&[2.0]])).unwrap(), 2.0);
        let x = seq(&[&[1.0], &[2.0], &[3.0]]);
        let y = seq(&[&[1.0], &[2.0], &[2.0], &[3.0]]);
        assert_eq!(dtw(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn dtw_rejects_empty_and_mismatched() {
        assert!(FeatureSequence::new(vec![]).is_err());
        assert!(dtw(&seq(&[&[0.0]]), &seq(&[&[0.0, 1.0]])).is_err());
    }

    #[test]
    fn cross_set_averages_pairs() {
        let h = vec![seq(&[&[0.0]])];
        let a = vec![seq(&[&[1.0]]), seq(&[&[3.0]])];
        assert_eq!(cross_set_dtw(&h, &a).unwrap(), 2.0);
        assert_eq!(cross_set_dtw(&h, &h).unwrap(), 0.0);
        let rev: Vec<_> = a.iter().rev().cloned().collect();
        assert_eq!(cross_set_dtw(&h, &rev).unwrap(), cross_set_dtw(&h, &a).unwrap());
        assert!(cross_set_dtw(&[], &a).is_err());
    }

    #[test]
    fn wasserstein_simple_cases() {
        let p = vec![vec![0.0], vec![1.0], vec![5.0]];
        assert_eq!(exact_wasserstein(&p, &p).unwrap(), 0.0);
        assert_eq!(exact_wasserstein(&[vec![0.0]], &[vec![1.0]]).unwrap(), 1.0);
        assert!(exact_wasserstein(&[vec![0.0]], &[vec![1.0, 2.0]]).is_err());
    }

    /// Closed form for one dimension: integral of |F - G|.
    fn w1_1d(p: &[f64], q: &[f64]) -> f64 {
        let mut pts: Vec<(f64, f64)> = p
            .iter()
            .map(|&x| (x, 1.0 / p.len() as f64))
            .chain(q.iter().map(|&x| (x, -1.0 / q.len() as f64)))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut cdf_diff = 0.0;
        let mut total = 0.0;
        for w in pts.windows(2) {
            cdf_diff += w[0].1;
            total += cdf_diff.abs() * (w[1].0 - w[0].0);
        }
        total
    }

    #[test]
    fn unequal_supports_match_one_dimensional_closed_form() {
        use rand::Rng as _;
        let mut rng = seeded_rng(21);
        for _ in 0..30 {
            let n = rng.random_range(1..12);
            let m = rng.random_range(1..15);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..3.0)).collect();
            let pv: Vec<Vec<f64>> = p.iter().map(|&x| vec![x]).collect();
            let qv: Vec<Vec<f64>> = q.iter().map(|&x| vec![x]).collect();
            let got = exact_wasserstein(&pv, &qv).unwrap();
            assert!((got - w1_1d(&p, &q)).abs() < 1e-9, "{got} vs {}", w1_1d(&p, &q));
        }
    }

    #[test]
    fn subsampling_caps_support() {
        let p: Vec<Vec<f64>> = (0..450).map(|i| vec![i as f64 / 450.0]).collect();
        assert_eq!(subsample(&p, SUPPORT_CAP, 1).len(), SUPPORT_CAP);
        assert_eq!(wasserstein(&p, &p[..100]).unwrap(), wasserstein(&p, &p[..100]).unwrap());
    }

    #[test]
    fn normalization_formula() {
        let s = normalize_score(266.994, 193.165, 643.789).unwrap();
        assert!((s - 0.836).abs() < 5e-4, "{s}");
        assert_eq!(normalize_score(3.0, 3.0, 7.0).unwrap(), 1.0);
        assert_eq!(normalize_score(7.0, 3.0, 7.0).unwrap(), 0.0);
        assert!(normalize_score(1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn report_for_random_agent_is_near_zero_and_demo_agent_near_one() {
        let demos: Vec<_> = (1..=8).map(|s| scripted_demo(s).unwrap()).collect();
        let norm = NormStats::compute(&demos[..5]).unwrap();
        let test = &demos[5..];
        let random: Vec<_> = (100..125).map(random_rollout).collect();
        let other_random: Vec<_> = (500..525).map(random_rollout).collect();
        let r = build_report("random", 1, &other_random, test, &random, &norm, 0.0).unwrap();
        for v in r.normalized.values() {
            assert!(v.abs() < 0.2, "{:?}", r.normalized);
        }
        let r = build_report("self", 1, test, test, &random, &norm, 1.0).unwrap();
        for v in r.normalized.values() {
            assert!(v > 0.9, "{:?}", r.normalized);
        }
        assert_eq!(r, build_report("self", 1, test, test, &random, &norm, 1.0).unwrap());
        assert_eq!(r.csv_row().split(',').count(), REPORT_CSV_HEADER.split(',').count());
        assert!(build_report("x", 1, test, &test[..1], &random, &norm, 1.0).is_err());
    }
}
