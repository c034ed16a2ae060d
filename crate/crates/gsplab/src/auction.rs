//! Generalized second price auction mechanics.
//!
//! Ads are ranked by quality score times bid, clicked ads pay the minimum
//! amount that preserves their rank, and clicks are drawn per slot with a
//! position-discounted probability. Everything here is deterministic given an
//! explicit seed and safe to share across threads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite bid space: the levels `min_bid, min_bid + unit, ..., max_bid`.
///
/// Bids are stored everywhere as level indices into this space so that state
/// enumeration and transition matrices stay exact; money values are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidSpace {
    min_bid: f64,
    max_bid: f64,
    unit: f64,
    num_levels: usize,
}

impl BidSpace {
    pub fn new(min_bid: f64, max_bid: f64, unit: f64) -> Result<Self> {
        if !(min_bid.is_finite() && max_bid.is_finite() && unit.is_finite()) {
            return Err(Error::invalid("bid space bounds must be finite"));
        }
        if min_bid < 0.0 || unit <= 0.0 || max_bid <= min_bid {
            return Err(Error::invalid(
                "bid space requires 0 <= min_bid < max_bid and unit > 0",
            ));
        }
        let span = (max_bid - min_bid) / unit;
        let steps = span.round();
        if (span - steps).abs() > 1e-6 {
            return Err(Error::invalid(
                "max_bid must sit at a whole number of units above min_bid",
            ));
        }
        let num_levels = steps as usize + 1;
        if num_levels < 2 {
            return Err(Error::invalid("bid space must contain at least 2 levels"));
        }
        Ok(BidSpace {
            min_bid,
            max_bid,
            unit,
            num_levels,
        })
    }

    pub fn min_bid(&self) -> f64 {
        self.min_bid
    }

    pub fn max_bid(&self) -> f64 {
        self.max_bid
    }

    pub fn unit(&self) -> f64 {
        self.unit
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    /// Money value of a level index.
    pub fn value(&self, level: usize) -> f64 {
        debug_assert!(level < self.num_levels);
        self.min_bid + level as f64 * self.unit
    }

    /// Nearest level index for a raw money amount, clamped into the space.
    pub fn snap(&self, raw: f64) -> usize {
        if !raw.is_finite() {
            return 0;
        }
        let idx = ((raw - self.min_bid) / self.unit).round();
        if idx <= 0.0 {
            0
        } else if idx >= (self.num_levels - 1) as f64 {
            self.num_levels - 1
        } else {
            idx as usize
        }
    }

    /// All level money values, lowest first.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.num_levels).map(|l| self.value(l))
    }
}

/// One advertiser: identity, top-position click probability, value per click,
/// and the bid it starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserProfile {
    pub id: usize,
    pub ctr: f64,
    pub valuation: f64,
    pub initial_bid: f64,
}

impl AdvertiserProfile {
    pub fn validate(&self, space: &BidSpace) -> Result<()> {
        if !(self.ctr > 0.0 && self.ctr <= 1.0) {
            return Err(Error::invalid(format!(
                "advertiser {}: ctr must lie in (0, 1], got {}",
                self.id, self.ctr
            )));
        }
        if !(self.valuation >= 0.0 && self.valuation.is_finite()) {
            return Err(Error::invalid(format!(
                "advertiser {}: valuation must be finite and >= 0",
                self.id
            )));
        }
        let snapped = space.value(space.snap(self.initial_bid));
        if (snapped - self.initial_bid).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "advertiser {}: initial bid {} is not a bid space level",
                self.id, self.initial_bid
            )));
        }
        Ok(())
    }
}

/// Checks the profile list as a whole: non-empty, ids contiguous from zero.
pub fn validate_profiles(profiles: &[AdvertiserProfile], space: &BidSpace) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::invalid("profile list must be non-empty"));
    }
    for (i, p) in profiles.iter().enumerate() {
        if p.id != i {
            return Err(Error::invalid(format!(
                "advertiser ids must be contiguous from 0; position {i} has id {}",
                p.id
            )));
        }
        p.validate(space)?;
    }
    Ok(())
}

/// Ranking and pricing rule: quality score `ctr^alpha`, `num_slots` shown
/// positions, and non-increasing position discounts with `beta[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub alpha: f64,
    pub num_slots: usize,
    pub position_discounts: Vec<f64>,
}

impl Mechanism {
    pub fn new(alpha: f64, position_discounts: Vec<f64>) -> Result<Self> {
        let mech = Mechanism {
            alpha,
            num_slots: position_discounts.len(),
            position_discounts,
        };
        mech.validate()?;
        Ok(mech)
    }

    /// Same slots and discounts, different quality-score exponent.
    pub fn with_alpha(&self, alpha: f64) -> Mechanism {
        Mechanism {
            alpha,
            num_slots: self.num_slots,
            position_discounts: self.position_discounts.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be finite and >= 0"));
        }
        if self.num_slots == 0 || self.num_slots != self.position_discounts.len() {
            return Err(Error::invalid(
                "num_slots must be positive and match position_discounts",
            ));
        }
        let betas = &self.position_discounts;
        if (betas[0] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("position discount for slot 1 must be 1"));
        }
        for w in betas.windows(2) {
            if w[1] > w[0] {
                return Err(Error::invalid("position discounts must be non-increasing"));
            }
        }
        if betas.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::invalid("position discounts must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Quality score `ctr^alpha`.
    pub fn quality_score(&self, ctr: f64) -> f64 {
        ctr.powf(self.alpha)
    }
}

/// Joint bid vector, stored as level indices into the bid space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BidState(pub Vec<usize>);

impl BidState {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn money(&self, space: &BidSpace) -> Vec<f64> {
        self.0.iter().map(|&l| space.value(l)).collect()
    }

    pub fn from_money(raw: &[f64], space: &BidSpace) -> BidState {
        BidState(raw.iter().map(|&b| space.snap(b)).collect())
    }
}

/// Per-advertiser report for one period: the only feedback an advertiser
/// sees from the auction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KpiReport {
    pub impressions: u64,
    pub clicks: u64,
    pub avg_cpc: f64,
}

/// Result of running one period of auctions for a stream of users.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionOutcome {
    /// Full ranking of all ads by descending score (ties to lower id).
    pub ranking: Vec<usize>,
    /// Number of slots actually shown: `min(num_slots, m)`.
    pub num_shown: usize,
    /// Price per shown slot; constant across the user stream.
    pub prices: Vec<f64>,
    /// Click count per shown slot, aggregated over the user stream.
    pub clicks: Vec<u64>,
    /// Users in the stream; every user sees every shown slot once.
    pub user_count: u64,
    /// Total money charged this period.
    pub revenue: f64,
    /// Per-advertiser KPI, indexed by advertiser id.
    pub per_advertiser_kpi: Vec<KpiReport>,
}

impl AuctionOutcome {
    /// Shown slot of an advertiser, if any (0-based).
    pub fn slot_of(&self, advertiser: usize) -> Option<usize> {
        self.ranking[..self.num_shown]
            .iter()
            .position(|&a| a == advertiser)
    }
}

/// Quality scores for every advertiser under a mechanism.
pub fn quality_scores(profiles: &[AdvertiserProfile], mech: &Mechanism) -> Vec<f64> {
    profiles
        .iter()
        .map(|p| mech.quality_score(p.ctr))
        .collect()
}

/// Ranks all ads by `score * bid` descending, ties broken by lower id.
///
/// Operates on raw scores so that callers can check score-scaling behavior
/// directly; `rank_ads` is the profile-level entry point.
pub fn rank_by_scores(scores: &[f64], bid_money: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = scores[a] * bid_money[a];
        let sb = scores[b] * bid_money[b];
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    order
}

/// Ranks ads by quality score times bid.
pub fn rank_ads(
    bids: &BidState,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    space: &BidSpace,
) -> Result<Vec<usize>> {
    if profiles.is_empty() {
        return Err(Error::invalid("cannot rank an empty profile list"));
    }
    if bids.len() != profiles.len() {
        return Err(Error::invalid(format!(
            "bid vector has {} entries for {} profiles",
            bids.len(),
            profiles.len()
        )));
    }
    Ok(rank_by_scores(
        &quality_scores(profiles, mech),
        &bids.money(space),
    ))
}

/// Computes the per-slot prices implied by a ranking.
///
/// The occupant of slot `j` pays `score(next) * bid(next) / score(self)`
/// where `next` is the ad ranked directly below it, shown or not. Only when
/// no lower-ranked ad exists does the slot pay `min_bid`.
pub fn gsp_prices_for_scores(
    ranking: &[usize],
    scores: &[f64],
    bid_money: &[f64],
    num_shown: usize,
    min_bid: f64,
) -> Result<Vec<f64>> {
    let mut prices = Vec::with_capacity(num_shown);
    for j in 0..num_shown {
        let occupant = ranking[j];
        let own_score = scores[occupant];
        if own_score <= 0.0 {
            return Err(Error::DegenerateScore {
                advertiser: occupant,
                slot: j,
            });
        }
        let price = if j + 1 < ranking.len() {
            let next = ranking[j + 1];
            scores[next] * bid_money[next] / own_score
        } else {
            min_bid
        };
        prices.push(price);
    }
    Ok(prices)
}

/// Prices for the shown slots of a ranking produced by [`rank_ads`].
pub fn gsp_prices(
    ranking: &[usize],
    bids: &BidState,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    space: &BidSpace,
) -> Result<Vec<f64>> {
    let num_shown = mech.num_slots.min(profiles.len());
    gsp_prices_for_scores(
        ranking,
        &quality_scores(profiles, mech),
        &bids.money(space),
        num_shown,
        space.min_bid(),
    )
}

/// Click probability of the ad at slot `j` (0-based): `ctr * beta[j]`,
/// clamped into `[0, 1]`.
pub fn slot_click_probability(profile: &AdvertiserProfile, mech: &Mechanism, slot: usize) -> f64 {
    (profile.ctr * mech.position_discounts[slot]).clamp(0.0, 1.0)
}

/// Draws one user's clicks: independently per shown slot.
pub fn simulate_clicks(
    ranking: &[usize],
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    rng_seed: u64,
) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    simulate_clicks_with(ranking, profiles, mech, &mut rng)
}

pub(crate) fn simulate_clicks_with(
    ranking: &[usize],
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    rng: &mut impl Rng,
) -> Vec<bool> {
    let num_shown = mech.num_slots.min(ranking.len());
    (0..num_shown)
        .map(|j| {
            let p = slot_click_probability(&profiles[ranking[j]], mech, j);
            rng.random::<f64>() < p
        })
        .collect()
}

/// Runs one period: `user_count` users each see the shown slots once.
///
/// The ranking and prices are fixed for the whole stream (bids do not move
/// within a period); only clicks vary per user.
pub fn run_auction(
    bids: &BidState,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    space: &BidSpace,
    user_count: u64,
    rng_seed: u64,
) -> Result<AuctionOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    run_auction_with(bids, profiles, mech, space, user_count, &mut rng)
}

pub(crate) fn run_auction_with(
    bids: &BidState,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    space: &BidSpace,
    user_count: u64,
    rng: &mut impl Rng,
) -> Result<AuctionOutcome> {
    let ranking = rank_ads(bids, profiles, mech, space)?;
    let num_shown = mech.num_slots.min(profiles.len());
    let prices = gsp_prices(&ranking, bids, profiles, mech, space)?;

    let mut clicks = vec![0u64; num_shown];
    for _ in 0..user_count {
        let user_clicks = simulate_clicks_with(&ranking, profiles, mech, rng);
        for (j, clicked) in user_clicks.iter().enumerate() {
            if *clicked {
                clicks[j] += 1;
            }
        }
    }

    let mut revenue = 0.0;
    let mut kpi = vec![KpiReport::default(); profiles.len()];
    for j in 0..num_shown {
        let paid = prices[j] * clicks[j] as f64;
        revenue += paid;
        let adv = ranking[j];
        kpi[adv] = KpiReport {
            impressions: user_count,
            clicks: clicks[j],
            avg_cpc: if clicks[j] > 0 {
                paid / clicks[j] as f64
            } else {
                0.0
            },
        };
    }

    Ok(AuctionOutcome {
        ranking,
        num_shown,
        prices,
        clicks,
        user_count,
        revenue,
        per_advertiser_kpi: kpi,
    })
}

/// Advertiser's realized utility from the period: `(value - price) * clicks`,
/// zero when unshown or unclicked.
pub fn advertiser_utility(
    advertiser: usize,
    outcome: &AuctionOutcome,
    profiles: &[AdvertiserProfile],
) -> f64 {
    match outcome.slot_of(advertiser) {
        Some(slot) => {
            (profiles[advertiser].valuation - outcome.prices[slot]) * outcome.clicks[slot] as f64
        }
        None => 0.0,
    }
}

/// Expected revenue of one period at a fixed bid state, computed from exact
/// click probabilities instead of sampled clicks.
pub fn expected_period_revenue(
    bids: &BidState,
    profiles: &[AdvertiserProfile],
    mech: &Mechanism,
    space: &BidSpace,
    user_count: u64,
) -> Result<f64> {
    let ranking = rank_ads(bids, profiles, mech, space)?;
    let num_shown = mech.num_slots.min(profiles.len());
    let prices = gsp_prices(&ranking, bids, profiles, mech, space)?;
    let per_user: f64 = (0..num_shown)
        .map(|j| prices[j] * slot_click_probability(&profiles[ranking[j]], mech, j))
        .sum();
    Ok(user_count as f64 * per_user)
}
