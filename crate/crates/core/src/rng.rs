//! Portable seeded randomness.
//!
//! Every random choice in the toolkit is drawn from ChaCha8. A 64-bit seed is
//! expanded into the 32-byte ChaCha key by four successive SplitMix64 outputs
//! written little-endian; independent sub-streams use ChaCha's 64-bit stream
//! id. Integer draws use Lemire's multiply-and-reject method on `next_u64`,
//! shuffles are descending Fisher-Yates, and unit floats take the top 53 bits
//! of `next_u64`. These rules are fixed, so another implementation following
//! them reproduces every shuffle, assignment and schedule bit for bit.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed from a parent seed and a label (FNV-1a of the label
/// folded through SplitMix64).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut state = seed ^ h;
    splitmix64(&mut state)
}

/// Uniform integer in `[0, n)`. `n` must be non-zero.
pub fn below(rng: &mut (impl RngCore + ?Sized), n: u64) -> u64 {
    assert!(n > 0, "below(0)");
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = u128::from(rng.next_u64()) * u128::from(n);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Uniform float in `[0, 1)`.
pub fn unit(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn shuffle<T>(rng: &mut (impl RngCore + ?Sized), items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// `k` distinct values from `[lo, hi)`, sorted ascending (Floyd's algorithm).
pub fn sample_distinct(rng: &mut (impl RngCore + ?Sized), lo: u64, hi: u64, k: usize) -> Vec<u64> {
    let n = hi - lo;
    assert!(k as u64 <= n, "sample of {k} from range of {n}");
    let mut chosen = std::collections::HashSet::with_capacity(k);
    for j in (n - k as u64)..n {
        let t = below(rng, j + 1);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    let mut out: Vec<u64> = chosen.into_iter().map(|v| v + lo).collect();
    out.sort_unstable();
    out
}

/// Index drawn proportionally to `weights` (non-negative, positive sum).
pub fn weighted(rng: &mut (impl RngCore + ?Sized), weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = unit(rng) * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}
