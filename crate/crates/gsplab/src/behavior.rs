//! Markov models of advertiser bid updates.
//!
//! An advertiser's next bid depends only on its current bid and the KPI
//! report it received (first-order, time-homogeneous). Two estimators are
//! provided: a tabular frequency estimator over discretized KPI buckets, and
//! a parametric model whose next-bid distribution is a Gaussian kernel around
//! a linear function of the features, normalized over the bid space.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::auction::{
    run_auction_with, AdvertiserProfile, BidSpace, BidState, KpiReport, Mechanism,
    slot_click_probability,
};
use crate::error::{Error, Result};

/// Default cap on the number of joint bid states that may be enumerated.
pub const DEFAULT_STATE_CAP: usize = 10_000;

/// One observed bid transition from the auction logs.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionObservation {
    /// Level index of the bid in the observed period.
    pub bid_from: usize,
    /// KPI report the advertiser received for that period.
    pub kpi: KpiReport,
    /// Level index of the bid in the following period.
    pub bid_to: usize,
}

/// Discretized KPI: a bucket index per signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KpiBucket {
    pub impressions_bin: usize,
    pub clicks_bin: usize,
    pub cpc_bin: usize,
}

/// Bin edges per KPI signal. A value's bucket is the number of edges at or
/// below it, so bucketing is total and deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BucketConfig {
    pub impressions_edges: Vec<f64>,
    pub clicks_edges: Vec<f64>,
    pub cpc_edges: Vec<f64>,
}

impl BucketConfig {
    /// Quantile edges (`bins` buckets per signal) from training KPI reports.
    /// Duplicate edges collapse, so constant signals yield a single bucket.
    pub fn from_quantiles(observations: &[KpiReport], bins: usize) -> BucketConfig {
        let imps: Vec<f64> = observations.iter().map(|k| k.impressions as f64).collect();
        let clicks: Vec<f64> = observations.iter().map(|k| k.clicks as f64).collect();
        let cpcs: Vec<f64> = observations.iter().map(|k| k.avg_cpc).collect();
        BucketConfig {
            impressions_edges: quantile_edges(&imps, bins),
            clicks_edges: quantile_edges(&clicks, bins),
            cpc_edges: quantile_edges(&cpcs, bins),
        }
    }

    pub fn bucket(&self, kpi: &KpiReport) -> KpiBucket {
        KpiBucket {
            impressions_bin: bucket_of(&self.impressions_edges, kpi.impressions as f64),
            clicks_bin: bucket_of(&self.clicks_edges, kpi.clicks as f64),
            cpc_bin: bucket_of(&self.cpc_edges, kpi.avg_cpc),
        }
    }
}

fn bucket_of(edges: &[f64], value: f64) -> usize {
    edges.iter().take_while(|&&e| value >= e).count()
}

fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    if values.is_empty() || bins < 2 {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges = Vec::new();
    for b in 1..bins {
        let q = b as f64 / bins as f64;
        let idx = ((sorted.len() as f64 * q).ceil() as usize).min(sorted.len()) - 1;
        let edge = sorted[idx];
        if edges.last().is_none_or(|&last| edge > last) {
            edges.push(edge);
        }
    }
    edges
}

/// Tabular transition model: one row-stochastic `|B| x |B|` matrix per
/// (advertiser, KPI bucket), epsilon-smoothed so every entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularTransition {
    pub num_advertisers: usize,
    pub num_levels: usize,
    pub epsilon: f64,
    pub buckets: BucketConfig,
    /// Flattened matrices keyed by (advertiser, bucket); rows of length
    /// `num_levels`, `num_levels` rows. Contexts never observed fall back to
    /// the uniform row.
    matrices: BTreeMap<(usize, KpiBucket), Vec<f64>>,
}

impl TabularTransition {
    pub fn row(&self, advertiser: usize, bucket: KpiBucket, bid_level: usize) -> Vec<f64> {
        match self.matrices.get(&(advertiser, bucket)) {
            Some(m) => m[bid_level * self.num_levels..(bid_level + 1) * self.num_levels].to_vec(),
            None => vec![1.0 / self.num_levels as f64; self.num_levels],
        }
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&(usize, KpiBucket), &Vec<f64>)> {
        self.matrices.iter()
    }

    pub fn insert_matrix(&mut self, advertiser: usize, bucket: KpiBucket, matrix: Vec<f64>) {
        self.matrices.insert((advertiser, bucket), matrix);
    }

    pub fn empty(
        num_advertisers: usize,
        num_levels: usize,
        epsilon: f64,
        buckets: BucketConfig,
    ) -> TabularTransition {
        TabularTransition {
            num_advertisers,
            num_levels,
            epsilon,
            buckets,
            matrices: BTreeMap::new(),
        }
    }
}

/// Frequency estimation of the per-advertiser transition matrices.
///
/// Each observed (bucket, from, to) is counted; rows are the normalized
/// counts, then smoothed as `(p + eps/|B|) / (1 + eps)` so every entry is
/// strictly positive. Rows with no observations stay uniform.
pub fn estimate_tabular(
    logs: &[Vec<TransitionObservation>],
    space: &BidSpace,
    buckets: BucketConfig,
    epsilon: f64,
) -> TabularTransition {
    let n = space.num_levels();
    let mut model = TabularTransition::empty(logs.len(), n, epsilon, buckets);
    for (adv, observations) in logs.iter().enumerate() {
        let mut counts: BTreeMap<KpiBucket, Vec<f64>> = BTreeMap::new();
        for obs in observations {
            let bucket = model.buckets.bucket(&obs.kpi);
            let m = counts.entry(bucket).or_insert_with(|| vec![0.0; n * n]);
            m[obs.bid_from * n + obs.bid_to] += 1.0;
        }
        for (bucket, counts) in counts {
            let mut matrix = vec![0.0; n * n];
            for j in 0..n {
                let row = &counts[j * n..(j + 1) * n];
                let total: f64 = row.iter().sum();
                let out = &mut matrix[j * n..(j + 1) * n];
                if total == 0.0 {
                    out.fill(1.0 / n as f64);
                } else {
                    for k in 0..n {
                        out[k] = (row[k] / total + epsilon / n as f64) / (1.0 + epsilon);
                    }
                }
            }
            model.insert_matrix(adv, bucket, matrix);
        }
    }
    model
}

/// Parametric transition model: next bid distributed over the bid levels as
/// `exp(-(level - mu)^2 / bandwidth^2)` with `mu = <w, z>` for features
/// `z = (bid, impressions, clicks, avg_cpc, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricTransition {
    /// One weight vector of length [`NUM_FEATURES`] per advertiser.
    pub weights: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

pub const NUM_FEATURES: usize = 5;

/// Feature vector for the parametric model.
pub fn features(bid_money: f64, kpi: &KpiReport) -> [f64; NUM_FEATURES] {
    [
        bid_money,
        kpi.impressions as f64,
        kpi.clicks as f64,
        kpi.avg_cpc,
        1.0,
    ]
}

impl ParametricTransition {
    pub fn predicted_mean(&self, advertiser: usize, bid_money: f64, kpi: &KpiReport) -> f64 {
        let z = features(bid_money, kpi);
        dot(&self.weights[advertiser], &z)
    }

    pub fn row(
        &self,
        advertiser: usize,
        bid_level: usize,
        kpi: &KpiReport,
        space: &BidSpace,
    ) -> Vec<f64> {
        let mu = self.predicted_mean(advertiser, space.value(bid_level), kpi);
        gaussian_row(mu, self.bandwidth, space)
    }
}

/// Normalized Gaussian kernel over the bid levels, centered at `mu`.
///
/// The exponent is shifted by its maximum before exponentiating so the row
/// stays well-scaled for any `mu`; entries are strictly positive.
pub fn gaussian_row(mu: f64, bandwidth: f64, space: &BidSpace) -> Vec<f64> {
    let inv = 1.0 / (bandwidth * bandwidth);
    let logits: Vec<f64> = space
        .values()
        .map(|b| {
            let d = b - mu;
            -d * d * inv
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut row: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = row.iter().sum();
    for p in &mut row {
        *p /= sum;
    }
    row
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of fitting the parametric model: the model plus the final
/// squared-loss value per advertiser.
#[derive(Debug, Clone)]
pub struct ParametricFit {
    pub model: ParametricTransition,
    pub final_losses: Vec<f64>,
}

/// Fits per-advertiser weights by gradient descent on the squared error
/// between `<w, z>` and the observed next bid (in money units).
///
/// Features are standardized internally for conditioning; the returned
/// weights act on raw features. Divergence (mean loss increasing for ten
/// consecutive steps) is reported as a step-size error.
pub fn fit_parametric(
    logs: &[Vec<TransitionObservation>],
    space: &BidSpace,
    learning_rate: f64,
    iterations: usize,
) -> Result<ParametricFit> {
    fit_parametric_with_bandwidth(logs, space, learning_rate, iterations, 1.0)
}

pub fn fit_parametric_with_bandwidth(
    logs: &[Vec<TransitionObservation>],
    space: &BidSpace,
    learning_rate: f64,
    iterations: usize,
    bandwidth: f64,
) -> Result<ParametricFit> {
    if bandwidth <= 0.0 {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    let mut weights = Vec::with_capacity(logs.len());
    let mut losses = Vec::with_capacity(logs.len());
    for (adv, observations) in logs.iter().enumerate() {
        if observations.len() < 2 {
            return Err(Error::invalid(format!(
                "advertiser {adv}: need at least 2 observations, got {}",
                observations.len()
            )));
        }
        let rows: Vec<[f64; NUM_FEATURES]> = observations
            .iter()
            .map(|o| features(space.value(o.bid_from), &o.kpi))
            .collect();
        let targets: Vec<f64> = observations
            .iter()
            .map(|o| space.value(o.bid_to))
            .collect();
        for row in &rows {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "advertiser {adv}: non-finite feature in training data"
                )));
            }
        }
        let (w, loss) = gradient_descent(&rows, &targets, learning_rate, iterations)?;
        weights.push(w);
        losses.push(loss);
    }
    Ok(ParametricFit {
        model: ParametricTransition {
            weights,
            bandwidth,
        },
        final_losses: losses,
    })
}

/// Plain gradient descent on mean squared error, run in standardized feature
/// coordinates and mapped back to raw-feature weights.
fn gradient_descent(
    rows: &[[f64; NUM_FEATURES]],
    targets: &[f64],
    learning_rate: f64,
    iterations: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = rows.len() as f64;
    // Standardize all but the intercept column.
    let mut mean = [0.0; NUM_FEATURES];
    let mut scale = [1.0; NUM_FEATURES];
    for j in 0..NUM_FEATURES - 1 {
        let m: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var: f64 = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        mean[j] = m;
        scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let std_rows: Vec<[f64; NUM_FEATURES]> = rows
        .iter()
        .map(|r| {
            let mut s = [0.0; NUM_FEATURES];
            for j in 0..NUM_FEATURES - 1 {
                s[j] = (r[j] - mean[j]) / scale[j];
            }
            s[NUM_FEATURES - 1] = 1.0;
            s
        })
        .collect();

    let mut w = [0.0; NUM_FEATURES];
    let mut prev_loss = f64::INFINITY;
    let mut rising = 0usize;
    let mut loss = 0.0;
    for it in 0..iterations {
        let mut grad = [0.0; NUM_FEATURES];
        loss = 0.0;
        for (row, &y) in std_rows.iter().zip(targets) {
            let err = dot(&w, row) - y;
            loss += err * err;
            for j in 0..NUM_FEATURES {
                grad[j] += 2.0 * err * row[j];
            }
        }
        loss /= n;
        if loss > prev_loss {
            rising += 1;
            if rising >= 10 {
                return Err(Error::StepSize {
                    iteration: it,
                    loss,
                });
            }
        } else {
            rising = 0;
        }
        prev_loss = loss;
        for j in 0..NUM_FEATURES {
            w[j] -= learning_rate * grad[j] / n;
        }
    }
    // Map standardized weights back to raw features.
    let mut raw = vec![0.0; NUM_FEATURES];
    let mut intercept = w[NUM_FEATURES - 1];
    for j in 0..NUM_FEATURES - 1 {
        raw[j] = w[j] / scale[j];
        intercept -= w[j] * mean[j] / scale[j];
    }
    raw[NUM_FEATURES - 1] = intercept;
    Ok((raw, loss))
}

/// Either transition model behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionModel {
    Tabular(TabularTransition),
    Parametric(ParametricTransition),
}

/// A learned advertiser behavior model over a bid space. Induces a joint
/// transition kernel over bid vectors through the per-advertiser product
/// rule.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorModel {
    pub transitions: TransitionModel,
    pub space: BidSpace,
}

impl BehaviorModel {
    pub fn num_advertisers(&self) -> usize {
        match &self.transitions {
            TransitionModel::Tabular(t) => t.num_advertisers,
            TransitionModel::Parametric(p) => p.weights.len(),
        }
    }

    /// Probability row over next-bid levels for one advertiser.
    pub fn transition_row(&self, advertiser: usize, bid_level: usize, kpi: &KpiReport) -> Vec<f64> {
        match &self.transitions {
            TransitionModel::Tabular(t) => {
                t.row(advertiser, t.buckets.bucket(kpi), bid_level)
            }
            TransitionModel::Parametric(p) => p.row(advertiser, bid_level, kpi, &self.space),
        }
    }

    /// Draws every advertiser's next bid independently from its row.
    pub fn sample_next_bids(
        &self,
        current: &BidState,
        kpis: &[KpiReport],
        rng_seed: u64,
    ) -> BidState {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self.sample_next_bids_with(current, kpis, &mut rng)
    }

    pub(crate) fn sample_next_bids_with(
        &self,
        current: &BidState,
        kpis: &[KpiReport],
        rng: &mut impl Rng,
    ) -> BidState {
        debug_assert_eq!(current.len(), kpis.len());
        let next = current
            .0
            .iter()
            .zip(kpis)
            .enumerate()
            .map(|(i, (&level, kpi))| {
                let row = self.transition_row(i, level, kpi);
                sample_categorical(&row, rng)
            })
            .collect();
        BidState(next)
    }
}

fn sample_categorical(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return idx;
        }
    }
    row.len() - 1
}

/// Dense joint transition kernel over all `|B|^m` bid vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct JointKernel {
    pub num_states: usize,
    pub num_advertisers: usize,
    pub num_levels: usize,
    /// Row-major `num_states x num_states`.
    pub matrix: Vec<f64>,
}

impl JointKernel {
    /// Bid levels of a packed state index (advertiser 0 least significant).
    pub fn decode(&self, mut state: usize) -> BidState {
        let mut levels = Vec::with_capacity(self.num_advertisers);
        for _ in 0..self.num_advertisers {
            levels.push(state % self.num_levels);
            state /= self.num_levels;
        }
        BidState(levels)
    }

    pub fn encode(&self, bids: &BidState) -> usize {
        encode_state(bids, self.num_levels)
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.matrix[state * self.num_states..(state + 1) * self.num_states]
    }
}

pub fn encode_state(bids: &BidState, num_levels: usize) -> usize {
    bids.0
        .iter()
        .rev()
        .fold(0usize, |acc, &l| acc * num_levels + l)
}

fn checked_state_count(num_levels: usize, m: usize, cap: usize) -> Result<usize> {
    let mut states: u128 = 1;
    for _ in 0..m {
        states = states.saturating_mul(num_levels as u128);
        if states > cap as u128 {
            return Err(Error::StateSpaceTooLarge { states, cap });
        }
    }
    Ok(states as usize)
}

/// Estimates the joint kernel `Q_f` by averaging, over sampled user streams,
/// the product of per-advertiser transition rows at each joint bid state.
///
/// Exact in one sample when clicks are deterministic; otherwise a Monte
/// Carlo average over `num_user_samples` streams. Memory is quadratic in the
/// state count, so the cap matters.
pub fn joint_transition_matrix(
    model: &BehaviorModel,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    user_count: u64,
    num_user_samples: usize,
    rng_seed: u64,
    cap: usize,
) -> Result<JointKernel> {
    if num_user_samples == 0 {
        return Err(Error::invalid("num_user_samples must be >= 1"));
    }
    let m = profiles.len();
    let n = model.space.num_levels();
    let num_states = checked_state_count(n, m, cap)?;
    let mut kernel = JointKernel {
        num_states,
        num_advertisers: m,
        num_levels: n,
        matrix: vec![0.0; num_states * num_states],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let inv_samples = 1.0 / num_user_samples as f64;
    for state in 0..num_states {
        let bids = kernel.decode(state);
        for _ in 0..num_user_samples {
            let outcome =
                run_auction_with(&bids, profiles, mech, &model.space, user_count, &mut rng)?;
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|i| model.transition_row(i, bids.0[i], &outcome.per_advertiser_kpi[i]))
                .collect();
            let out = &mut kernel.matrix[state * num_states..(state + 1) * num_states];
            for (next, slot) in out.iter_mut().enumerate() {
                let mut prob = inv_samples;
                let mut s = next;
                for row in rows.iter() {
                    prob *= row[s % n];
                    s /= n;
                }
                *slot += prob;
            }
        }
    }
    Ok(kernel)
}

/// Builds the joint kernel exactly by integrating clicks out analytically.
///
/// Within a period the ranking and prices are fixed, so advertiser `i`'s KPI
/// randomness is exactly its binomial click count; rows depend only on own
/// KPI, so the expectation over user behavior factorizes per advertiser.
pub fn exact_joint_kernel(
    model: &BehaviorModel,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    user_count: u64,
    cap: usize,
) -> Result<JointKernel> {
    let m = profiles.len();
    let n = model.space.num_levels();
    let num_states = checked_state_count(n, m, cap)?;
    let mut kernel = JointKernel {
        num_states,
        num_advertisers: m,
        num_levels: n,
        matrix: vec![0.0; num_states * num_states],
    };
    for state in 0..num_states {
        let bids = kernel.decode(state);
        let ranking = crate::auction::rank_ads(&bids, profiles, mech, &model.space)?;
        let prices = crate::auction::gsp_prices(&ranking, &bids, profiles, mech, &model.space)?;
        let num_shown = mech.num_slots.min(m);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let slot = ranking[..num_shown].iter().position(|&a| a == i);
                expected_row(model, profiles, mech, i, bids.0[i], slot, &prices, user_count)
            })
            .collect();
        let out = &mut kernel.matrix[state * num_states..(state + 1) * num_states];
        for (next, slot) in out.iter_mut().enumerate() {
            let mut prob = 1.0;
            let mut s = next;
            for row in rows.iter() {
                prob *= row[s % n];
                s /= n;
            }
            *slot = prob;
        }
    }
    Ok(kernel)
}

/// Transition row averaged over the advertiser's binomial click count.
fn expected_row(
    model: &BehaviorModel,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    advertiser: usize,
    bid_level: usize,
    slot: Option<usize>,
    prices: &[f64],
    user_count: u64,
) -> Vec<f64> {
    let n = model.space.num_levels();
    match slot {
        None => {
            let kpi = KpiReport::default();
            model.transition_row(advertiser, bid_level, &kpi)
        }
        Some(j) => {
            let p = slot_click_probability(&profiles[advertiser], mech, j);
            let mut acc = vec![0.0; n];
            for (clicks, pmf) in binomial_pmf(user_count, p) {
                let kpi = KpiReport {
                    impressions: user_count,
                    clicks,
                    avg_cpc: if clicks > 0 { prices[j] } else { 0.0 },
                };
                let row = model.transition_row(advertiser, bid_level, &kpi);
                for (a, r) in acc.iter_mut().zip(row) {
                    *a += pmf * r;
                }
            }
            acc
        }
    }
}

/// Binomial(n, p) support and probabilities, skipping zero-mass tails.
fn binomial_pmf(n: u64, p: f64) -> Vec<(u64, f64)> {
    if p <= 0.0 {
        return vec![(0, 1.0)];
    }
    if p >= 1.0 {
        return vec![(n, 1.0)];
    }
    let q = 1.0 - p;
    let mut pmf = q.powi(n as i32);
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push((0u64, pmf));
    for c in 0..n {
        pmf *= (n - c) as f64 / (c + 1) as f64 * (p / q);
        out.push((c + 1, pmf));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space3() -> BidSpace {
        BidSpace::new(1.0, 3.0, 1.0).unwrap()
    }

    fn kpi(impressions: u64, clicks: u64, avg_cpc: f64) -> KpiReport {
        KpiReport {
            impressions,
            clicks,
            avg_cpc,
        }
    }

    #[test]
    fn bucketing_is_total_and_ordered() {
        let cfg = BucketConfig {
            impressions_edges: vec![10.0, 20.0],
            clicks_edges: vec![2.0],
            cpc_edges: vec![],
        };
        assert_eq!(cfg.bucket(&kpi(5, 0, 0.0)).impressions_bin, 0);
        assert_eq!(cfg.bucket(&kpi(10, 0, 0.0)).impressions_bin, 1);
        assert_eq!(cfg.bucket(&kpi(25, 0, 0.0)).impressions_bin, 2);
        assert_eq!(cfg.bucket(&kpi(0, 1, 0.0)).clicks_bin, 0);
        assert_eq!(cfg.bucket(&kpi(0, 9, 0.0)).clicks_bin, 1);
        assert_eq!(cfg.bucket(&kpi(0, 0, 5.0)).cpc_bin, 0);
    }

    #[test]
    fn quantile_edges_collapse_constants() {
        let constant = vec![kpi(7, 1, 0.5); 20];
        let cfg = BucketConfig::from_quantiles(&constant, 3);
        // All values identical: at most one distinct edge, so 1-2 buckets.
        assert!(cfg.impressions_edges.len() <= 1);
    }

    #[test]
    fn tabular_frequency_counts() {
        // Observations in one bucket: 1->2, 1->2, 1->1 (levels 0-based: 0->1 etc).
        let logs = vec![vec![
            TransitionObservation { bid_from: 0, kpi: kpi(1, 0, 0.0), bid_to: 1 },
            TransitionObservation { bid_from: 0, kpi: kpi(1, 0, 0.0), bid_to: 1 },
            TransitionObservation { bid_from: 0, kpi: kpi(1, 0, 0.0), bid_to: 0 },
        ]];
        let model = estimate_tabular(&logs, &space3(), BucketConfig::default(), 0.0);
        let bucket = model.buckets.bucket(&kpi(1, 0, 0.0));
        let row = model.row(0, bucket, 0);
        assert!((row[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((row[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
    }

    #[test]
    fn tabular_unseen_rows_are_uniform() {
        let logs = vec![vec![TransitionObservation {
            bid_from: 0,
            kpi: kpi(1, 0, 0.0),
            bid_to: 1,
        }]];
        let model = estimate_tabular(&logs, &space3(), BucketConfig::default(), 0.0);
        let bucket = model.buckets.bucket(&kpi(1, 0, 0.0));
        // Seen bucket, unseen from-level.
        assert_eq!(model.row(0, bucket, 2), vec![1.0 / 3.0; 3]);
        // Entirely unseen bucket for an advertiser with no data there.
        let other = KpiBucket { impressions_bin: 9, clicks_bin: 9, cpc_bin: 9 };
        assert_eq!(model.row(0, other, 0), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn smoothing_bounds_entries_away_from_zero() {
        // One-hot empirical row, eps = |B| * c: entries >= c / (1 + |B|c).
        let c = 0.01;
        let n = 3.0;
        let eps = n * c;
        let logs = vec![vec![
            TransitionObservation { bid_from: 0, kpi: kpi(1, 0, 0.0), bid_to: 2 },
        ]];
        let model = estimate_tabular(&logs, &space3(), BucketConfig::default(), eps);
        let bucket = model.buckets.bucket(&kpi(1, 0, 0.0));
        let row = model.row(0, bucket, 0);
        let bound = c / (1.0 + n * c);
        assert!((row[0] - bound).abs() < 1e-12, "row {row:?}");
        assert!((row[1] - bound).abs() < 1e-12);
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn parametric_row_matches_hand_kernel() {
        // w = (1,0,0,0,0), bid=3, B={1,2,3}, bandwidth=1:
        // unnormalized (e^-4, e^-1, 1) -> (0.0132, 0.2654, 0.7214).
        let model = ParametricTransition {
            weights: vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]],
            bandwidth: 1.0,
        };
        let row = model.row(0, 2, &kpi(0, 0, 0.0), &space3());
        let z = 1.0 + (-1.0f64).exp() + (-4.0f64).exp();
        assert!((row[0] - (-4.0f64).exp() / z).abs() < 1e-12);
        assert!((row[1] - (-1.0f64).exp() / z).abs() < 1e-12);
        assert!((row[2] - 1.0 / z).abs() < 1e-12);
        assert!((row[0] - 0.0132).abs() < 1e-4);
        assert!((row[1] - 0.2654).abs() < 1e-4);
        assert!((row[2] - 0.7214).abs() < 1e-4);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn parametric_rows_are_strictly_positive() {
        let model = ParametricTransition {
            weights: vec![vec![2.5, 0.01, -0.3, 1.7, -4.0]],
            bandwidth: 0.7,
        };
        let space = BidSpace::new(0.5, 5.0, 0.5).unwrap();
        for level in 0..space.num_levels() {
            for k in [kpi(0, 0, 0.0), kpi(1000, 50, 4.9), kpi(3, 3, 0.1)] {
                let row = model.row(0, level, &k, &space);
                assert!(row.iter().all(|&p| p > 0.0), "row {row:?}");
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    /// Closed-form least squares via normal equations, used as the oracle
    /// for the gradient-descent fit. Gaussian elimination with partial
    /// pivoting on the 5x5 system.
    fn least_squares_oracle(rows: &[[f64; NUM_FEATURES]], targets: &[f64]) -> Vec<f64> {
        let k = NUM_FEATURES;
        let mut ata = vec![vec![0.0; k]; k];
        let mut atb = vec![0.0; k];
        for (row, &y) in rows.iter().zip(targets) {
            for i in 0..k {
                for j in 0..k {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * y;
            }
        }
        for col in 0..k {
            let pivot = (col..k)
                .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
                .unwrap();
            ata.swap(col, pivot);
            atb.swap(col, pivot);
            let d = ata[col][col];
            for r in col + 1..k {
                let f = ata[r][col] / d;
                for c in col..k {
                    ata[r][c] -= f * ata[col][c];
                }
                atb[r] -= f * atb[col];
            }
        }
        let mut w = vec![0.0; k];
        for r in (0..k).rev() {
            let mut acc = atb[r];
            for c in r + 1..k {
                acc -= ata[r][c] * w[c];
            }
            w[r] = acc / ata[r][r];
        }
        w
    }

    fn synthetic_observations(
        w_true: &[f64; NUM_FEATURES],
        count: usize,
        seed: u64,
        noise: Option<f64>, // bandwidth of the sampling kernel, None = noise-free
        space: &BidSpace,
    ) -> Vec<TransitionObservation> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let bid_level = rng.random_range(0..space.num_levels());
                let k = kpi(
                    rng.random_range(0..40),
                    rng.random_range(0..10),
                    rng.random::<f64>() * 3.0,
                );
                let z = features(space.value(bid_level), &k);
                let mu: f64 = z.iter().zip(w_true).map(|(a, b)| a * b).sum();
                let bid_to = match noise {
                    None => space.snap(mu),
                    Some(bw) => {
                        let row = gaussian_row(mu, bw, space);
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut idx = row.len() - 1;
                        for (i, &p) in row.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                idx = i;
                                break;
                            }
                        }
                        idx
                    }
                };
                TransitionObservation {
                    bid_from: bid_level,
                    kpi: k,
                    bid_to,
                }
            })
            .collect()
    }

    #[test]
    fn gradient_fit_recovers_noise_free_weights() {
        // Integer features and quarter-unit weights keep every target exactly
        // on a bid level, so the least-squares fit is exact.
        let space = BidSpace::new(0.0, 48.0, 0.25).unwrap();
        let w_true = [0.5, 0.25, 0.5, 1.5, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs: Vec<TransitionObservation> = (0..400)
            .map(|_| {
                let bid_from = 4 * rng.random_range(0..11usize); // integer money
                let k = kpi(
                    rng.random_range(0..40),
                    rng.random_range(0..10),
                    rng.random_range(0..4u32) as f64,
                );
                let z = features(space.value(bid_from), &k);
                let mu: f64 = z.iter().zip(&w_true).map(|(a, b)| a * b).sum();
                let bid_to = space.snap(mu);
                assert!((space.value(bid_to) - mu).abs() < 1e-12);
                TransitionObservation { bid_from, kpi: k, bid_to }
            })
            .collect();
        let fit = fit_parametric(&[obs], &space, 0.05, 4000).unwrap();
        for (a, b) in fit.model.weights[0].iter().zip(&w_true) {
            assert!((a - b).abs() < 1e-6, "got {:?}", fit.model.weights[0]);
        }
        assert!(fit.final_losses[0] < 1e-10);
    }

    #[test]
    fn gradient_fit_matches_normal_equations() {
        // Noisy targets sampled from the transition kernel: gradient descent
        // must land on the least-squares solution, and that solution must be
        // close to the generating weights.
        let space = BidSpace::new(0.0, 30.0, 0.25).unwrap();
        let w_true = [0.6, 0.05, 0.2, 0.8, 1.0];
        let obs = synthetic_observations(&w_true, 10_000, 11, Some(1.0), &space);
        let rows: Vec<[f64; NUM_FEATURES]> = obs
            .iter()
            .map(|o| features(space.value(o.bid_from), &o.kpi))
            .collect();
        let targets: Vec<f64> = obs.iter().map(|o| space.value(o.bid_to)).collect();
        let oracle = least_squares_oracle(&rows, &targets);

        let fit = fit_parametric(&[obs], &space, 0.05, 4000).unwrap();
        for (a, b) in fit.model.weights[0].iter().zip(&oracle) {
            assert!(
                (a - b).abs() < 1e-4,
                "gd {:?} vs ls {:?}",
                fit.model.weights[0],
                oracle
            );
        }
        for (a, b) in fit.model.weights[0].iter().zip(&w_true) {
            assert!((a - b).abs() <= 0.05, "gd {:?} vs true {w_true:?}", fit.model.weights[0]);
        }
    }

    #[test]
    fn gradient_fit_constant_target_is_intercept_only() {
        let space = BidSpace::new(0.0, 10.0, 0.5).unwrap();
        let c = 4.0;
        let obs: Vec<TransitionObservation> = synthetic_observations(
            &[0.0, 0.0, 0.0, 0.0, c],
            200,
            5,
            None,
            &space,
        );
        let fit = fit_parametric(&[obs], &space, 0.1, 2000).unwrap();
        let w = &fit.model.weights[0];
        let k = kpi(17, 3, 1.25);
        let mu = fit.model.predicted_mean(0, 2.5, &k);
        assert!((mu - c).abs() < 1e-8, "mu {mu}");
        assert!(w[NUM_FEATURES - 1].abs() < c + 1e-6);
    }

    #[test]
    fn gradient_fit_rejects_nonfinite_features() {
        let space = space3();
        let obs = vec![
            TransitionObservation { bid_from: 0, kpi: kpi(1, 0, f64::NAN), bid_to: 1 },
            TransitionObservation { bid_from: 1, kpi: kpi(1, 0, 0.0), bid_to: 1 },
        ];
        let err = fit_parametric(&[obs], &space, 0.1, 10);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradient_fit_detects_divergence() {
        let space = BidSpace::new(0.0, 10.0, 1.0).unwrap();
        let obs = synthetic_observations(&[0.5, 0.1, 0.1, 0.1, 1.0], 50, 9, Some(1.0), &space);
        let err = fit_parametric(&[obs], &space, 50.0, 1000);
        assert!(matches!(err, Err(Error::StepSize { .. })), "{err:?}");
    }

    #[test]
    fn tabular_row_lookup_is_identity_for_one_hot() {
        let mut model = TabularTransition::empty(1, 3, 0.0, BucketConfig::default());
        let bucket = KpiBucket { impressions_bin: 0, clicks_bin: 0, cpc_bin: 0 };
        let mut matrix = vec![0.0; 9];
        matrix[0 * 3 + 2] = 1.0;
        matrix[1 * 3 + 1] = 1.0;
        matrix[2 * 3 + 0] = 1.0;
        model.insert_matrix(0, bucket, matrix);
        assert_eq!(model.row(0, bucket, 0), vec![0.0, 0.0, 1.0]);
        assert_eq!(model.row(0, bucket, 1), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn sampling_respects_one_hot_rows() {
        let mut model = TabularTransition::empty(2, 3, 0.0, BucketConfig::default());
        let bucket = BucketConfig::default().bucket(&KpiReport::default());
        let mut identity = vec![0.0; 9];
        for j in 0..3 {
            identity[j * 3 + j] = 1.0;
        }
        model.insert_matrix(0, bucket, identity.clone());
        model.insert_matrix(1, bucket, identity);
        let behavior = BehaviorModel {
            transitions: TransitionModel::Tabular(model),
            space: space3(),
        };
        let current = BidState(vec![2, 0]);
        let kpis = vec![KpiReport::default(); 2];
        let next = behavior.sample_next_bids(&current, &kpis, 42);
        assert_eq!(next, current);
        // Determinism contract.
        let a = behavior.sample_next_bids(&current, &kpis, 7);
        let b = behavior.sample_next_bids(&current, &kpis, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequencies_match_row() {
        let model = ParametricTransition {
            weights: vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]],
            bandwidth: 1.0,
        };
        let space = space3();
        let row = model.row(0, 2, &KpiReport::default(), &space);
        let behavior = BehaviorModel {
            transitions: TransitionModel::Parametric(model),
            space,
        };
        let mut counts = [0u64; 3];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let kpis = vec![KpiReport::default()];
        for _ in 0..n {
            let next = behavior.sample_next_bids_with(&BidState(vec![2]), &kpis, &mut rng);
            counts[next.0[0]] += 1;
        }
        for (count, &p) in counts.iter().zip(&row) {
            let freq = *count as f64 / n as f64;
            assert!((freq - p).abs() < 0.01, "freq {freq} vs p {p}");
        }
    }

    #[test]
    fn tabular_estimator_is_consistent() {
        // Draw 10^4 samples per row from a known matrix; the frequency
        // estimate must recover every entry within 0.02.
        let space = space3();
        let truth = [
            [0.5, 0.3, 0.2],
            [0.1, 0.6, 0.3],
            [0.25, 0.25, 0.5],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut obs = Vec::new();
        let k = KpiReport::default();
        for (from, row) in truth.iter().enumerate() {
            for _ in 0..10_000 {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut to = row.len() - 1;
                for (idx, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        to = idx;
                        break;
                    }
                }
                obs.push(TransitionObservation { bid_from: from, kpi: k, bid_to: to });
            }
        }
        let model = estimate_tabular(&[obs], &space, BucketConfig::default(), 0.0);
        let bucket = model.buckets.bucket(&k);
        for (from, row) in truth.iter().enumerate() {
            let estimate = model.row(0, bucket, from);
            for (e, t) in estimate.iter().zip(row) {
                assert!((e - t).abs() <= 0.02, "estimate {estimate:?} truth {row:?}");
            }
        }
    }

    #[test]
    fn joint_kernel_single_advertiser_equals_row() {
        // KPI-independent parametric model: the joint kernel over one
        // advertiser is exactly its own transition matrix.
        let model = BehaviorModel {
            transitions: TransitionModel::Parametric(ParametricTransition {
                weights: vec![vec![0.8, 0.0, 0.0, 0.0, 0.4]],
                bandwidth: 1.0,
            }),
            space: space3(),
        };
        let profiles = vec![AdvertiserProfile { id: 0, ctr: 0.5, valuation: 5.0, initial_bid: 1.0 }];
        let mech = Mechanism::new(1.0, vec![1.0]).unwrap();
        let kernel =
            joint_transition_matrix(&model, &profiles, &mech, 10, 4, 5, DEFAULT_STATE_CAP).unwrap();
        for level in 0..3 {
            let row = model.transition_row(0, level, &KpiReport::default());
            // KPI independence: any KPI produces the same row, so the kernel
            // row must equal it no matter what clicks were sampled.
            for (a, b) in kernel.row(level).iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_kernel_factorizes_for_fixed_kpi() {
        let model = BehaviorModel {
            transitions: TransitionModel::Parametric(ParametricTransition {
                weights: vec![
                    vec![1.0, 0.0, 0.0, 0.0, 0.0],
                    vec![0.0, 0.0, 0.0, 0.0, 2.0],
                ],
                bandwidth: 1.0,
            }),
            space: BidSpace::new(1.0, 2.0, 1.0).unwrap(),
        };
        let profiles = vec![
            AdvertiserProfile { id: 0, ctr: 0.5, valuation: 5.0, initial_bid: 1.0 },
            AdvertiserProfile { id: 1, ctr: 0.4, valuation: 5.0, initial_bid: 1.0 },
        ];
        let mech = Mechanism::new(1.0, vec![1.0, 0.5]).unwrap();
        let kernel =
            joint_transition_matrix(&model, &profiles, &mech, 3, 2, 9, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(kernel.num_states, 4);
        for state in 0..4 {
            let bids = kernel.decode(state);
            let r0 = model.transition_row(0, bids.0[0], &KpiReport::default());
            let r1 = model.transition_row(1, bids.0[1], &KpiReport::default());
            for next in 0..4 {
                let nb = kernel.decode(next);
                let expect = r0[nb.0[0]] * r1[nb.0[1]];
                assert!((kernel.row(state)[next] - expect).abs() < 1e-12);
            }
            let total: f64 = kernel.row(state).iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_kernel_positive_for_parametric_model() {
        let model = BehaviorModel {
            transitions: TransitionModel::Parametric(ParametricTransition {
                weights: vec![vec![0.9, 0.0, -0.1, 0.2, 0.5], vec![0.5, 0.01, 0.0, -0.4, 1.0]],
                bandwidth: 1.0,
            }),
            space: space3(),
        };
        let profiles = vec![
            AdvertiserProfile { id: 0, ctr: 0.6, valuation: 5.0, initial_bid: 1.0 },
            AdvertiserProfile { id: 1, ctr: 0.3, valuation: 4.0, initial_bid: 1.0 },
        ];
        let mech = Mechanism::new(1.0, vec![1.0, 0.5]).unwrap();
        let kernel =
            exact_joint_kernel(&model, &profiles, &mech, 5, DEFAULT_STATE_CAP).unwrap();
        assert!(kernel.matrix.iter().all(|&p| p > 0.0));
        for state in 0..kernel.num_states {
            let total: f64 = kernel.row(state).iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn state_cap_is_enforced() {
        let model = BehaviorModel {
            transitions: TransitionModel::Parametric(ParametricTransition {
                weights: vec![vec![0.0; 5]; 8],
                bandwidth: 1.0,
            }),
            space: BidSpace::new(1.0, 10.0, 1.0).unwrap(),
        };
        let profiles: Vec<AdvertiserProfile> = (0..8)
            .map(|id| AdvertiserProfile { id, ctr: 0.5, valuation: 5.0, initial_bid: 1.0 })
            .collect();
        let mech = Mechanism::new(1.0, vec![1.0, 0.5]).unwrap();
        let err = exact_joint_kernel(&model, &profiles, &mech, 5, DEFAULT_STATE_CAP);
        assert!(matches!(err, Err(Error::StateSpaceTooLarge { .. })));
    }

    #[test]
    fn exact_kernel_matches_sampled_kernel_with_deterministic_clicks() {
        // ctr = 1 and beta = 1 make clicks deterministic, so the sampled
        // kernel with one sample equals the exact construction.
        let space = BidSpace::new(1.0, 2.0, 1.0).unwrap();
        let model = BehaviorModel {
            transitions: TransitionModel::Parametric(ParametricTransition {
                weights: vec![vec![0.5, 0.0, 0.05, -0.2, 0.7], vec![0.3, 0.01, 0.0, 0.1, 0.9]],
                bandwidth: 1.0,
            }),
            space,
        };
        let profiles = vec![
            AdvertiserProfile { id: 0, ctr: 1.0, valuation: 5.0, initial_bid: 1.0 },
            AdvertiserProfile { id: 1, ctr: 1.0, valuation: 4.0, initial_bid: 1.0 },
        ];
        let mech = Mechanism::new(1.0, vec![1.0, 1.0]).unwrap();
        let exact = exact_joint_kernel(&model, &profiles, &mech, 6, DEFAULT_STATE_CAP).unwrap();
        let sampled =
            joint_transition_matrix(&model, &profiles, &mech, 6, 1, 42, DEFAULT_STATE_CAP)
                .unwrap();
        for (a, b) in exact.matrix.iter().zip(&sampled.matrix) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn binomial_pmf_sums_to_one() {
        for (n, p) in [(10u64, 0.3), (5, 0.0), (5, 1.0), (25, 0.87)] {
            let pmf = binomial_pmf(n, p);
            let total: f64 = pmf.iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12, "n={n} p={p}");
        }
    }
}
