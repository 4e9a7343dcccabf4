//! Batch assembly: normalization, random crop, horizontal flip and cutout,
//! plus shuffled batch streams.

use icdarts_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    /// Zero padding before a random crop back to the original size.
    pub crop_pad: usize,
    pub flip: bool,
    /// Side of the zeroed square; 0 disables cutout.
    pub cutout: usize,
}

impl Augment {
    pub const NONE: Augment = Augment { crop_pad: 0, flip: false, cutout: 0 };

    pub fn standard(cutout: usize) -> Self {
        Augment { crop_pad: 4, flip: true, cutout }
    }
}

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Self {
        let plane = ds.height * ds.width;
        let mut sum = vec![0.0f64; ds.channels];
        let mut sq = vec![0.0f64; ds.channels];
        for i in 0..ds.len() {
            for (c, px) in ds.image(i).chunks_exact(plane).enumerate() {
                for &p in px {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (ds.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(1e-12).sqrt()).collect();
        Normalizer { mean, std }
    }
}

/// Builds a normalized `(B, C, H, W)` batch, applying `aug` per image.
pub fn make_batch(
    ds: &Dataset,
    indices: &[usize],
    norm: &Normalizer,
    aug: Augment,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, Vec<usize>) {
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let mut data = Vec::with_capacity(indices.len() * c * h * w);
    for &i in indices {
        let img = ds.image(i);
        let (dy, dx) = if aug.crop_pad > 0 {
            (rng.random_range(0..=2 * aug.crop_pad), rng.random_range(0..=2 * aug.crop_pad))
        } else {
            (0, 0)
        };
        let flip = aug.flip && rng.random_bool(0.5);
        let start = data.len();
        for ch in 0..c {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            for y in 0..h {
                for x in 0..w {
                    // Source pixel after padding by `crop_pad` and cropping at (dy, dx).
                    let sy = (y + dy) as isize - aug.crop_pad as isize;
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = (xx + dx) as isize - aug.crop_pad as isize;
                    let raw = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        img[ch * h * w + sy as usize * w + sx as usize] as f64 / 255.0
                    } else {
                        0.0
                    };
                    data.push(((raw - m) / s) as f32);
                }
            }
        }
        if aug.cutout > 0 {
            let cy = rng.random_range(0..h) as isize;
            let cx = rng.random_range(0..w) as isize;
            let half = (aug.cutout / 2) as isize;
            let (y0, y1) = ((cy - half).max(0) as usize, ((cy + half).min(h as isize)) as usize);
            let (x0, x1) = ((cx - half).max(0) as usize, ((cx + half).min(w as isize)) as usize);
            for ch in 0..c {
                for y in y0..y1 {
                    for x in x0..x1 {
                        data[start + ch * h * w + y * w + x] = 0.0;
                    }
                }
            }
        }
    }
    let t = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch shape matches data");
    (t, indices.iter().map(|&i| ds.labels[i]).collect())
}

/// Endless stream of shuffled mini-batches over a dataset; reshuffles on
/// every pass and drops the ragged tail.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(n).max(1);
        let mut s = Self { n, batch, order: Vec::new(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn batches_per_pass(&self) -> usize {
        self.n / self.batch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }

    /// Random source for augmentation draws tied to this stream.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::synthetic;

    #[test]
    fn cutout_zeroes_at_most_square() {
        let (ds, _) = synthetic(0, 8, 0);
        let norm = Normalizer { mean: vec![0.0; 3], std: vec![1.0; 3] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aug = Augment { crop_pad: 0, flip: false, cutout: 8 };
        let (plain, _) = make_batch(&ds, &[0, 1, 2], &norm, Augment::NONE, &mut rng);
        let (cut, _) = make_batch(&ds, &[0, 1, 2], &norm, aug, &mut rng);
        let per = 16 * 16;
        for i in 0..3 {
            let changed = (0..per)
                .filter(|&p| cut.data()[i * 3 * per + p] != plain.data()[i * 3 * per + p])
                .count();
            assert!(changed <= 64);
        }
    }

    #[test]
    fn stream_covers_every_index_per_pass() {
        let mut s = BatchStream::new(10, 3, 0);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_indices()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }
}
