//! Seeded random substreams.
//!
//! A single master seed fans out into independent ChaCha streams, one per
//! `(replication, purpose)` pair. The stream id is `replication * 16 + purpose`,
//! so the draws of one replication never depend on how many other
//! replications ran before it, or on which worker ran it.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// What a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Signal = 0,
    Matrix = 1,
    Noise = 2,
    Folds = 3,
}

/// Replication index reserved for quantities shared by all replications
/// (the fixed ground-truth signal).
pub const SHARED: u64 = u64::MAX >> 4;

pub fn substream(master: u64, replication: u64, purpose: Purpose) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream((replication << 4) | purpose as u64);
    rng
}
