//! Seed derivation. One master seed per run; every consumer (parameter init,
//! epoch shuffles, per-sequence noise, ...) gets its own stream derived from
//! the master, a purpose tag, and a counter, so adding a consumer never
//! shifts the draws of another.

/// FNV-1a over the tag bytes; cheap, stable, collision-safe enough for a
/// handful of fixed purpose strings.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed from `(master, purpose, counter)`.
pub fn derive(master: u64, purpose: &str, counter: u64) -> u64 {
    splitmix(splitmix(master ^ tag_hash(purpose)).wrapping_add(counter))
}
