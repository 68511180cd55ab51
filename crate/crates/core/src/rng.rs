use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams derived from the single experiment seed. Every
/// consumer mixes its own stream tag so adding a consumer never shifts the
/// draws seen by another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    DataCenters,
    DataNoise,
    Partition,
    Profiles,
    Init,
    Shuffle,
    Selection,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::DataCenters => 0x01,
            Stream::DataNoise => 0x02,
            Stream::Partition => 0x03,
            Stream::Profiles => 0x04,
            Stream::Init => 0x05,
            Stream::Shuffle => 0x06,
            Stream::Selection => 0x07,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed for (stream, a, b). `a`/`b` are typically the client
/// index and round number; pass 0 when unused.
pub fn derive(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut s = splitmix64(master ^ stream.tag().wrapping_mul(0xa076_1d64_78bd_642f));
    s = splitmix64(s ^ a.wrapping_mul(0xe703_7ed1_a0b4_28db));
    splitmix64(s ^ b.wrapping_mul(0x8ebc_6af0_9c88_c6e3))
}

pub fn rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, a, b))
}
