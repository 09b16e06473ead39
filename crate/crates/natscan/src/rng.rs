//! Scanner-side randomness: local ports, sequence numbers and IPID values
//! for crafted packets, derived deterministically from (seed, target) so
//! per-target sessions replay bit-identically.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct ScanRng(ChaCha8Rng);

impl ScanRng {
    pub fn for_target(seed: u64, target: Ipv4Addr) -> Self {
        let mixed = seed ^ (u64::from(u32::from(target))).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ScanRng(ChaCha8Rng::seed_from_u64(mixed))
    }

    /// Ephemeral local port.
    pub fn local_port(&mut self) -> u16 {
        self.0.gen_range(20000..60000)
    }

    pub fn seq(&mut self) -> u32 {
        self.0.gen()
    }

    pub fn ipid(&mut self) -> u16 {
        self.0.gen()
    }
}
