//! Mechanism-dependent revenue simulation.
//!
//! Rolls bid trajectories forward under a candidate mechanism using a learned
//! behavior model, averages per-period revenue, and caches whole estimates so
//! that nearby mechanisms reuse each other's simulations. A brute-force
//! stationary-distribution oracle provides the expected revenue that long
//! trajectories must converge to.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::auction::{
    expected_period_revenue, run_auction_with, AdvertiserProfile, BidState, Mechanism,
};
use crate::behavior::{exact_joint_kernel, BehaviorModel, JointKernel};
use crate::error::{Error, Result};

/// Inputs for one trajectory simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    /// Number of simulated periods.
    pub horizon: usize,
    /// Joint bid vector at the first period.
    pub initial_bids: BidState,
    /// Historical per-period user counts; each period resamples one
    /// uniformly with replacement.
    pub user_stream_pool: Vec<u64>,
    pub rng_seed: u64,
}

impl TrajectoryConfig {
    fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("trajectory horizon must be >= 1"));
        }
        if self.user_stream_pool.is_empty() {
            return Err(Error::invalid("user stream pool must be non-empty"));
        }
        Ok(())
    }
}

/// Per-period revenue trajectory and its average.
#[derive(Debug, Clone, PartialEq)]
pub struct RevenueEstimate {
    /// Mean of `per_period_series`: money per period.
    pub empirical_revenue: f64,
    pub per_period_series: Vec<f64>,
    /// Set when the estimate was served from a [`DeltaCache`] neighbor.
    pub cache_hit: bool,
}

/// One record of a simulated period, for the optional trajectory dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub period: usize,
    pub bids: BidState,
    pub revenue: f64,
}

/// Simulates `horizon` periods: resample a user stream, run the auction,
/// then draw every advertiser's next bid from the behavior model.
pub fn simulate_trajectory(
    model: &BehaviorModel,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    cfg: &TrajectoryConfig,
) -> Result<RevenueEstimate> {
    Ok(simulate_trajectory_traced(model, profiles, mech, cfg, false)?.0)
}

/// Same as [`simulate_trajectory`], optionally recording the bid vector per
/// period for debugging dumps.
pub fn simulate_trajectory_traced(
    model: &BehaviorModel,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    cfg: &TrajectoryConfig,
    trace: bool,
) -> Result<(RevenueEstimate, Vec<TrajectoryRecord>)> {
    cfg.validate()?;
    if cfg.initial_bids.len() != profiles.len() || model.num_advertisers() != profiles.len() {
        return Err(Error::invalid(
            "model, profiles, and initial bids must agree on the advertiser count",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut bids = cfg.initial_bids.clone();
    let mut series = Vec::with_capacity(cfg.horizon);
    let mut records = Vec::new();
    for t in 1..=cfg.horizon {
        let users = cfg.user_stream_pool[rng.random_range(0..cfg.user_stream_pool.len())];
        let outcome = run_auction_with(&bids, profiles, mech, &model.space, users, &mut rng)?;
        series.push(outcome.revenue);
        if trace {
            records.push(TrajectoryRecord {
                period: t,
                bids: bids.clone(),
                revenue: outcome.revenue,
            });
        }
        bids = model.sample_next_bids_with(&bids, &outcome.per_advertiser_kpi, &mut rng);
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    Ok((
        RevenueEstimate {
            empirical_revenue: mean,
            per_period_series: series,
            cache_hit: false,
        },
        records,
    ))
}

/// Ordered f64 key for the cache map.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AlphaKey(f64);

impl Eq for AlphaKey {}

impl PartialOrd for AlphaKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AlphaKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Cache of revenue estimates keyed by the mechanism exponent.
///
/// A lookup hits when some stored exponent lies within `delta`; the nearest
/// neighbor wins and ties go to the smaller exponent. With `delta = 0` only
/// exact matches hit, which leaves results bitwise identical to the uncached
/// path. Lookup-or-insert is atomic under an internal lock; a concurrent
/// insert between lookup and store may cause a redundant recompute, never a
/// wrong answer.
#[derive(Debug)]
pub struct DeltaCache {
    delta: f64,
    entries: Mutex<BTreeMap<AlphaKey, Arc<RevenueEstimate>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl DeltaCache {
    pub fn new(delta: f64) -> DeltaCache {
        assert!(delta >= 0.0, "delta must be non-negative");
        DeltaCache {
            delta,
            entries: Mutex::new(BTreeMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Simulations answered from a stored neighbor.
    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    /// Lookups that had to simulate.
    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nearest stored exponent within `delta`, ties to the smaller one.
    fn nearest(&self, alpha: f64) -> Option<Arc<RevenueEstimate>> {
        let entries = self.entries.lock().unwrap();
        let below = entries
            .range(..=AlphaKey(alpha))
            .next_back()
            .map(|(k, v)| (k.0, v.clone()));
        let above = entries
            .range(AlphaKey(alpha)..)
            .next()
            .map(|(k, v)| (k.0, v.clone()));
        let candidate = match (below, above) {
            (None, None) => None,
            (Some(b), None) => Some(b),
            (None, Some(a)) => Some(a),
            (Some(b), Some(a)) => {
                let db = (alpha - b.0).abs();
                let da = (a.0 - alpha).abs();
                // Ties to the smaller stored alpha, which is `b`.
                if db <= da {
                    Some(b)
                } else {
                    Some(a)
                }
            }
        };
        candidate.and_then(|(stored, est)| {
            if (stored - alpha).abs() <= self.delta {
                Some(est)
            } else {
                None
            }
        })
    }

    fn insert(&self, alpha: f64, estimate: Arc<RevenueEstimate>) {
        self.entries
            .lock()
            .unwrap()
            .entry(AlphaKey(alpha))
            .or_insert(estimate);
    }
}

/// Revenue of a mechanism, served from the cache when a neighbor within
/// `delta` has already been simulated.
pub fn cached_empirical_revenue(
    cache: &DeltaCache,
    model: &BehaviorModel,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    cfg: &TrajectoryConfig,
) -> Result<RevenueEstimate> {
    if let Some(stored) = cache.nearest(mech.alpha) {
        cache.hits.fetch_add(1, Ordering::Relaxed);
        let mut estimate = (*stored).clone();
        estimate.cache_hit = true;
        return Ok(estimate);
    }
    let estimate = simulate_trajectory(model, profiles, mech, cfg)?;
    cache.misses.fetch_add(1, Ordering::Relaxed);
    cache.insert(mech.alpha, Arc::new(estimate.clone()));
    Ok(estimate)
}

/// Stationary distribution of a row-stochastic kernel by power iteration.
///
/// Converges geometrically for strictly positive kernels; a residual that
/// never reaches `tol` reports a non-ergodic kernel.
pub fn stationary_distribution(
    kernel: &JointKernel,
    tol: f64,
    max_iterations: usize,
) -> Result<Vec<f64>> {
    let n = kernel.num_states;
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        next.fill(0.0);
        for (state, &mass) in pi.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (dst, &p) in kernel.row(state).iter().enumerate() {
                next[dst] += mass * p;
            }
        }
        let total: f64 = next.iter().sum();
        for v in &mut next {
            *v /= total;
        }
        residual = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        std::mem::swap(&mut pi, &mut next);
        if residual <= tol {
            return Ok(pi);
        }
    }
    Err(Error::NonErgodic {
        residual,
        iterations: max_iterations,
    })
}

pub const STATIONARY_TOL: f64 = 1e-10;
pub const STATIONARY_MAX_ITERATIONS: usize = 1_000_000;

/// Expected per-period revenue under the stationary distribution of the
/// joint bid process: the value long trajectory averages converge to.
///
/// Builds the joint kernel exactly (clicks integrated out analytically),
/// finds its stationary distribution, and weights each state's exact
/// expected period revenue by its stationary mass.
pub fn stationary_oracle(
    model: &BehaviorModel,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    user_count: u64,
    cap: usize,
) -> Result<f64> {
    let kernel = exact_joint_kernel(model, profiles, mech, user_count, cap)?;
    let pi = stationary_distribution(&kernel, STATIONARY_TOL, STATIONARY_MAX_ITERATIONS)?;
    let mut revenue = 0.0;
    for (state, &mass) in pi.iter().enumerate() {
        let bids = kernel.decode(state);
        revenue += mass * expected_period_revenue(&bids, profiles, mech, &model.space, user_count)?;
    }
    Ok(revenue)
}

/// Sample variance of the empirical revenue across independent replicates,
/// per horizon. Used to check that the variance decays as horizons grow.
pub fn variance_diagnostic(
    model: &BehaviorModel,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    template: &TrajectoryConfig,
    horizons: &[usize],
    replicates: usize,
    rng_seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if replicates < 10 {
        return Err(Error::invalid("variance diagnostic needs >= 10 replicates"));
    }
    let mut out = Vec::with_capacity(horizons.len());
    for (h_idx, &horizon) in horizons.iter().enumerate() {
        let mut means = Vec::with_capacity(replicates);
        for rep in 0..replicates {
            let cfg = TrajectoryConfig {
                horizon,
                initial_bids: template.initial_bids.clone(),
                user_stream_pool: template.user_stream_pool.clone(),
                rng_seed: crate::child_seed_n(rng_seed, (h_idx * replicates + rep) as u64),
            };
            means.push(simulate_trajectory(model, profiles, mech, &cfg)?.empirical_revenue);
        }
        let mean = means.iter().sum::<f64>() / replicates as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>()
            / (replicates as f64 - 1.0);
        out.push((horizon, var));
    }
    Ok(out)
}
