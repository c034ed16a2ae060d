//! Sponsored-search auction lab: GSP auction mechanics, Markov advertiser
//! behavior models learned from auction logs, mechanism-dependent revenue
//! simulation, and a genetic search over the quality-score exponent.

pub mod auction;
pub mod behavior;
pub mod revenue;
pub mod error;

pub use error::{Error, Result};

/// Derives a child seed from a master seed and a label, so that one
/// experiment seed fans out into independent streams per component.
pub fn child_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(master ^ h)
}

/// Child seed keyed by an integer (replicate index, period, advertiser).
pub fn child_seed_n(master: u64, n: u64) -> u64 {
    mix(master ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
