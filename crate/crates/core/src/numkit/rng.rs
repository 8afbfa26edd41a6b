//! Counter-based random streams keyed by what they are used for.
//!
//! Every stream is a ChaCha8 keystream. The key comes from the master seed
//! and the 64-bit stream selector is a hash of the [`StreamId`]. Two
//! streams with the same master seed and id produce the same sequence no
//! matter which thread creates them or in which order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Init,
    Augment,
    BatchOrder,
    EvalViews,
    Partition,
    Rad,
    Selection,
    Data,
    Probe,
    Split,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Identifies a stream within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub client: u64,
    pub round: u64,
    pub epoch: u64,
    pub purpose: Purpose,
    /// Free index for sub-streams (batch number, view number, ...).
    pub index: u64,
}

impl StreamId {
    pub fn new(purpose: Purpose) -> Self {
        StreamId {
            client: 0,
            round: 0,
            epoch: 0,
            purpose,
            index: 0,
        }
    }

    pub fn client(mut self, client: usize) -> Self {
        self.client = client as u64;
        self
    }

    pub fn round(mut self, round: usize) -> Self {
        self.round = round as u64;
        self
    }

    pub fn epoch(mut self, epoch: usize) -> Self {
        self.epoch = epoch as u64;
        self
    }

    pub fn index(mut self, index: u64) -> Self {
        self.index = index;
        self
    }

    fn selector(&self) -> u64 {
        let mut h = splitmix(self.purpose.tag());
        for part in [self.client, self.round, self.epoch, self.index] {
            h = splitmix(h ^ part.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        h
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    id: StreamId,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(id.selector());
        RngStream {
            master_seed,
            id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// A fresh stream that differs from this one only in `index`.
    pub fn substream(&self, index: u64) -> RngStream {
        let id = self.id;
        RngStream::new(
            self.master_seed,
            id.index(splitmix(id.index ^ 0xD1B5_4A32_D192_ED03).wrapping_add(index)),
        )
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `rows x cols` matrix of i.i.d. `N(mean, stddev²)` entries.
pub fn gaussian_sample(
    stream: &mut RngStream,
    rows: usize,
    cols: usize,
    mean: f64,
    stddev: f64,
) -> Result<Matrix> {
    if !(stddev >= 0.0) || !stddev.is_finite() || !mean.is_finite() {
        return Err(Error::Config(format!(
            "gaussian_sample needs finite mean and stddev >= 0, got mean={mean}, stddev={stddev}"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| mean + stddev * stream.normal())
        .collect();
    Matrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(purpose: Purpose) -> RngStream {
        RngStream::new(42, StreamId::new(purpose).client(1).round(2))
    }

    #[test]
    fn zero_stddev_is_constant() {
        let m = gaussian_sample(&mut stream(Purpose::Test), 3, 4, 1.5, 0.0).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn recreated_stream_repeats() {
        let a = gaussian_sample(&mut stream(Purpose::Test), 5, 5, 0.0, 1.0).unwrap();
        let b = gaussian_sample(&mut stream(Purpose::Test), 5, 5, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_ids_differ() {
        let a = gaussian_sample(&mut stream(Purpose::Test), 1, 8, 0.0, 1.0).unwrap();
        let b = gaussian_sample(&mut stream(Purpose::Init), 1, 8, 0.0, 1.0).unwrap();
        assert_ne!(a, b);
        let base = stream(Purpose::Test);
        assert_ne!(
            base.substream(0).clone().next_u64(),
            base.substream(1).clone().next_u64()
        );
    }

    #[test]
    fn negative_stddev_rejected() {
        assert!(gaussian_sample(&mut stream(Purpose::Test), 1, 1, 0.0, -1.0).is_err());
    }

    #[test]
    fn sample_moments() {
        let m = gaussian_sample(&mut stream(Purpose::Test), 1000, 100, 0.0, 1.0).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "stddev {}", var.sqrt());
    }
}
