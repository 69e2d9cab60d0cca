//! Named random substreams. Every stochastic component draws from a ChaCha
//! stream keyed by the run seed and selected by (name, index), so adding a new
//! consumer never perturbs the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let stream = fnv1a(
        name.bytes().chain(index.to_le_bytes()),
        0xcbf2_9ce4_8422_2325,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
