//! Training-time augmentation: flips, rescaling, and a fixed-size crop.

use super::Sample;
use crate::autodiff::IGNORE_INDEX;
use crate::rng::SplitMix64;

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

/// One concrete augmentation. The rescaled sample has side
/// `round(size * scale)`; the crop starts at `offset` (x, y) and pads with
/// zeros (image) and the ignore index (labels) where it leaves the sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub scale: f64,
    pub offset: (usize, usize),
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            scale: 1.0,
            offset: (0, 0),
        }
    }

    pub fn scaled_size(&self, size: usize) -> usize {
        ((size as f64 * self.scale).round() as usize).max(1)
    }

    /// Draws flips (p = 0.5 each), a scale in `[0.5, 2]`, and a uniform crop
    /// offset among the valid ones (0 when the rescaled sample is smaller).
    pub fn draw(rng: &mut SplitMix64, size: usize, out_size: usize) -> Self {
        let hflip = rng.bernoulli(0.5);
        let vflip = rng.bernoulli(0.5);
        let scale = rng.uniform(MIN_SCALE, MAX_SCALE);
        let mut a = Self {
            hflip,
            vflip,
            scale,
            offset: (0, 0),
        };
        let slack = a.scaled_size(size).saturating_sub(out_size) as u64;
        a.offset = (rng.below(slack + 1) as usize, rng.below(slack + 1) as usize);
        a
    }

    pub fn apply(&self, sample: &Sample, out_size: usize) -> Sample {
        let (p, c) = (sample.size, sample.channels);
        let s = self.scaled_size(p);
        let ratio = p as f64 / s as f64;
        // source taps along one axis of the rescaled sample, flips folded in
        let taps = |flip: bool| -> Vec<(usize, usize, f32, usize)> {
            (0..s)
                .map(|d| {
                    let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (p - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(p - 1);
                    let f = (src - i0 as f64) as f32;
                    let near = (((d as f64 + 0.5) * ratio).floor() as usize).min(p - 1);
                    if flip {
                        (p - 1 - i0, p - 1 - i1, f, p - 1 - near)
                    } else {
                        (i0, i1, f, near)
                    }
                })
                .collect()
        };
        let (tx, ty) = (taps(self.hflip), taps(self.vflip));
        let mut image = vec![0f32; c * out_size * out_size];
        let mut labels = vec![IGNORE_INDEX; out_size * out_size];
        let (ox, oy) = self.offset;
        for y in 0..out_size {
            let sy = oy + y;
            if sy >= s {
                break;
            }
            let (y0, y1, fy, ny) = ty[sy];
            for x in 0..out_size {
                let sx = ox + x;
                if sx >= s {
                    break;
                }
                let (x0, x1, fx, nx) = tx[sx];
                labels[y * out_size + x] = sample.labels[ny * p + nx];
                for ch in 0..c {
                    let src = &sample.image[ch * p * p..(ch + 1) * p * p];
                    let top = src[y0 * p + x0] * (1.0 - fx) + src[y0 * p + x1] * fx;
                    let bottom = src[y1 * p + x0] * (1.0 - fx) + src[y1 * p + x1] * fx;
                    image[(ch * out_size + y) * out_size + x] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Sample {
            channels: c,
            size: out_size,
            image,
            labels,
        }
    }
}

/// Augments `sample` with a stream seeded by `seed`.
pub fn augment(sample: &Sample, seed: u64, out_size: usize) -> Sample {
    let mut rng = SplitMix64::new(seed);
    Augmentation::draw(&mut rng, sample.size, out_size).apply(sample, out_size)
}
