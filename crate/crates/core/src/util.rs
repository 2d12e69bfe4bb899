//! Small shared helpers.

/// Stable 64-bit FNV-1a hash; used wherever ids or serialized configs need a
/// reproducible fingerprint that does not depend on the process or platform.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
