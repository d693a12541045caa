/// Independent sub-seed for `stream` derived from `seed` (splitmix64 mix).
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Sub-stream identifiers.
pub const MODEL_INIT: u64 = 1;
pub const BATCHING: u64 = 2;
pub const BUFFER: u64 = 3;
pub const SPECTRAL: u64 = 4;
pub const EVAL: u64 = 5;
pub const GDUMB: u64 = 6;
pub const STREAM: u64 = 7;
