//! Small shared helpers: seed derivation, checksums, worker pool setup.

use sha2::{Digest, Sha256};
use std::sync::OnceLock;

/// Environment variable bounding worker-thread count (the only env knob).
pub const WORKERS_ENV: &str = "BRAGGREI_WORKERS";

/// Derive an independent sub-seed from a master seed and a stage tag.
/// Splitmix64 over the master xored with a hash of the tag; stable across
/// platforms and releases.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hex SHA-256 of a byte blob.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Number of worker threads: `BRAGGREI_WORKERS` if set and valid, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Install the global rayon pool sized by [`worker_count`]. Safe to call from
/// multiple places; only the first call wins.
pub fn init_workers() {
    static INIT: OnceLock<()> = OnceLock::new();
    INIT.get_or_init(|| {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(worker_count())
            .build_global();
    });
}

/// Wall-clock an operation, returning (result, seconds).
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = std::time::Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}
