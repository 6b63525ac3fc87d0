//! Deterministic, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed and
//! positioned on a 64-bit stream id. ChaCha is counter based, so two
//! streams with different ids never overlap, and deriving child streams
//! with [`RngStream::split`] gives parallel workers disjoint sequences
//! whose values do not depend on how many threads run them.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{Point, PointCloud};

/// Work unit for chunked Monte Carlo. Fixed so results are independent of
/// the rayon pool size.
pub const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// A fresh child stream. Depends only on `(seed, stream, key)`, never
    /// on how much of the parent has been consumed.
    pub fn split(&self, key: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream ^ mix(key.wrapping_add(0x632b_e59b_d9b4_e019))))
    }

    /// Named child stream, used for pipeline stages.
    pub fn split_named(&self, name: &str) -> RngStream {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.split(h)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(rand_distr::StandardNormal)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One draw from Uni([0,1)^d).
pub fn uniform_cube_sample(rng: &mut RngStream, d: usize) -> Point {
    assert!(d >= 1, "cube dimension must be positive");
    Point::new((0..d).map(|_| rng.uniform()).collect()).expect("uniform draws are finite")
}

/// `count` cube samples, drawn chunk-wise from child streams of `rng`.
pub fn uniform_cube_cloud(rng: &RngStream, d: usize, count: usize) -> PointCloud {
    let chunks = map_chunks(rng, count, |mut r, len| {
        (0..len * d).map(|_| r.uniform()).collect::<Vec<f64>>()
    });
    PointCloud::from_flat(d, chunks.concat()).expect("uniform draws are finite")
}

/// Splits `total` work items into [`MC_CHUNK`]-sized pieces, runs `f` on each
/// with its own child stream, and returns the per-chunk results in order.
pub fn map_chunks<T, F>(rng: &RngStream, total: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(RngStream, usize) -> T + Sync + Send,
{
    let n_chunks = total.div_ceil(MC_CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|k| {
            let len = MC_CHUNK.min(total - k * MC_CHUNK);
            f(rng.split(k as u64), len)
        })
        .collect()
}
