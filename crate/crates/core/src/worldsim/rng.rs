use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one seed, so that adding draws to
/// one stage never shifts the draws of another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Scene = 1,
    Lidar = 2,
    LidarFalsePositives = 3,
    Bev = 4,
    Camera = 5,
    CameraFalsePositives = 6,
    ImageNoise = 7,
    Corruption = 8,
    Misalignment = 9,
    Calibration = 10,
    Init = 11,
    Shuffle = 12,
    /// Fixed mixing matrices shared by both branch simulators.
    Mixer = 13,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed for item `index` of a family keyed by `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
