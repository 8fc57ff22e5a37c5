//! Raster I/O, synthetic scenes, patch extraction, splitting, batching and
//! augmentation.

mod augment;
mod raster;
mod synth;

use std::fs;
use std::path::Path;

pub use augment::{augment, Augmentation, MAX_SCALE, MIN_SCALE};
pub use raster::{LabelMap, RasterData, RasterImage, LABEL_HEADER_BYTES, RASTER_HEADER_BYTES};
pub use synth::{census, synth_generate, ClassStyle, SceneSpec, Shape};

use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// A square training patch: image `C × S × S` in `[0, 1]` and labels `S × S`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub channels: usize,
    pub size: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Number of patch columns and rows covering a `width × height` tile.
pub fn patch_grid(width: usize, height: usize, patch: usize) -> (usize, usize) {
    (width.div_ceil(patch), height.div_ceil(patch))
}

/// Non-overlapping patches in row-major tile order. The right and bottom
/// borders are padded with 0 (image) and the ignore index (labels).
pub fn extract_patches(img: &RasterImage, labels: &LabelMap, patch: usize) -> Result<Vec<Sample>> {
    if patch == 0 {
        return Err(Error::Data("patch size must be positive".into()));
    }
    if img.width != labels.width || img.height != labels.height {
        return Err(Error::Data(format!(
            "image is {}x{} but labels are {}x{}",
            img.width, img.height, labels.width, labels.height
        )));
    }
    let (w, h, c) = (img.width, img.height, img.channels);
    let (cols, rows) = patch_grid(w, h, patch);
    let mut out = Vec::with_capacity(cols * rows);
    for ty in 0..rows {
        for tx in 0..cols {
            let mut s = Sample {
                channels: c,
                size: patch,
                image: vec![0.0; c * patch * patch],
                labels: vec![IGNORE_INDEX; patch * patch],
            };
            let (x0, y0) = (tx * patch, ty * patch);
            let (pw, ph) = (patch.min(w - x0), patch.min(h - y0));
            for y in 0..ph {
                let src = (y0 + y) * w + x0;
                s.labels[y * patch..y * patch + pw].copy_from_slice(&labels.data[src..src + pw]);
                for ch in 0..c {
                    for x in 0..pw {
                        s.image[(ch * patch + y) * patch + x] = img.data.normalized(ch * w * h + src + x);
                    }
                }
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// Training fraction `numerator / denominator`, strictly between 0 and 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            numerator: 9,
            denominator: 10,
        }
    }
}

impl SplitRatio {
    /// `(train, val)` sizes: `train = floor(n * ratio)`.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize)> {
        if self.numerator == 0 || self.numerator >= self.denominator {
            return Err(Error::Config(format!(
                "split ratio {}/{} must be strictly between 0 and 1",
                self.numerator, self.denominator
            )));
        }
        let train = (n as u128 * self.numerator as u128 / self.denominator as u128) as usize;
        Ok((train, n - train))
    }
}

/// Shuffles with a seeded stream, then takes the first `floor(n * ratio)`
/// items for training and the rest for validation.
pub fn split<T>(mut items: Vec<T>, ratio: SplitRatio, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Data("cannot split an empty sample list".into()));
    }
    let (train, _) = ratio.sizes(items.len())?;
    SplitMix64::new(seed).shuffle(&mut items);
    let val = items.split_off(train);
    Ok((items, val))
}

/// Stacks samples into a `B × C × S × S` image tensor and `B × S × S` labels.
pub fn make_batch<T: Real>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (c, s) = (first.channels, first.size);
    if let Some(bad) = samples.iter().find(|x| x.channels != c || x.size != s) {
        return Err(Error::Data(format!(
            "batch mixes {c}x{s}x{s} and {}x{}x{} samples",
            bad.channels, bad.size, bad.size
        )));
    }
    let mut image = Vec::with_capacity(samples.len() * c * s * s);
    let mut labels = Vec::with_capacity(samples.len() * s * s);
    for x in samples {
        image.extend(x.image.iter().map(|&v| T::from_f64(v as f64)));
        labels.extend_from_slice(&x.labels);
    }
    Ok((Tensor::new(&[samples.len(), c, s, s], image)?, labels))
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes tiles as `images/NNNN.cxrs`, `labels/NNNN.cxlb` and a manifest
/// listing the ids.
pub fn write_dataset(dir: &Path, tiles: &[(RasterImage, LabelMap)]) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (i, (img, labels)) in tiles.iter().enumerate() {
        let id = format!("{i:04}");
        img.write(&dir.join("images").join(format!("{id}.cxrs")))?;
        labels.write(&dir.join("labels").join(format!("{id}.cxlb")))?;
        manifest.push_str(&id);
        manifest.push('\n');
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

/// Reads every tile listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<(RasterImage, LabelMap)>> {
    let p = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut tiles = Vec::new();
    for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let img = RasterImage::read(&dir.join("images").join(format!("{id}.cxrs")))?;
        let labels = LabelMap::read(&dir.join("labels").join(format!("{id}.cxlb")))?;
        if (img.width, img.height) != (labels.width, labels.height) {
            return Err(Error::Data(format!("tile {id}: image and label sizes differ")));
        }
        tiles.push((img, labels));
    }
    if tiles.is_empty() {
        return Err(Error::Data(format!("dataset {} lists no tiles", dir.display())));
    }
    Ok(tiles)
}

/// Generates `count` tiles (tile `i` seeded by `(seed, i)`) into `dir` and
/// returns the per-class pixel census.
pub fn generate_dataset(dir: &Path, spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<u64>> {
    if count == 0 {
        return Err(Error::Config("tile count must be positive".into()));
    }
    let tiles = generate_tiles(spec, count, seed)?;
    write_dataset(dir, &tiles)?;
    let mut totals = vec![0u64; spec.num_classes];
    for (_, labels) in &tiles {
        for (t, c) in totals.iter_mut().zip(census(&labels.data, spec.num_classes)) {
            *t += c;
        }
    }
    Ok(totals)
}

/// The tiles [`generate_dataset`] would write, kept in memory.
pub fn generate_tiles(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<(RasterImage, LabelMap)>> {
    (0..count)
        .map(|i| synth_generate(spec, SplitMix64::derive(seed, &[i as u64]).next_u64()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tile(w: usize, h: usize, c: usize, seed: u64) -> (RasterImage, LabelMap) {
        let mut rng = SplitMix64::new(seed);
        let img = RasterImage::new(w, h, c, RasterData::U8((0..w * h * c).map(|_| rng.next_u64() as u8).collect())).unwrap();
        let labels = LabelMap::new(w, h, (0..w * h).map(|_| rng.below(6) as u8).collect()).unwrap();
        (img, labels)
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patch_grid(6000, 6000, 256), (24, 24));
        assert_eq!(patch_grid(256, 256, 256), (1, 1));
        let (img, labels) = tile(300, 300, 1, 1);
        let patches = extract_patches(&img, &labels, 256).unwrap();
        assert_eq!(patches.len(), 4);
        // bottom-right: 44 valid rows/cols, 212 padded
        let br = &patches[3];
        let valid = br.labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        assert_eq!(valid, 44 * 44);
        assert_eq!(br.labels[43 * 256 + 43], labels.data[299 * 300 + 299]);
        assert_eq!(br.labels[43 * 256 + 44], IGNORE_INDEX);
        assert_eq!(br.image[44 * 256], 0.0);
        let RasterData::U8(d) = &img.data else { panic!() };
        assert_eq!(br.image[0], d[256 * 300 + 256] as f32 / 255.0);

        let (img, labels) = tile(256, 256, 2, 2);
        let one = extract_patches(&img, &labels, 256).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].labels.iter().all(|&l| l != IGNORE_INDEX));
    }

    #[test]
    fn split_sizes() {
        let r = SplitRatio::default();
        assert_eq!(r.sizes(13_824).unwrap(), (12_441, 1_383));
        assert_eq!(r.sizes(10).unwrap(), (9, 1));
        assert_eq!(
            SplitRatio {
                numerator: 29,
                denominator: 100
            }
            .sizes(100)
            .unwrap(),
            (29, 71)
        );
        assert!(SplitRatio {
            numerator: 1,
            denominator: 1
        }
        .sizes(5)
        .is_err());
        assert!(split(Vec::<u8>::new(), r, 0).is_err());

        let items: Vec<u32> = (0..50).collect();
        let (a, va) = split(items.clone(), r, 3).unwrap();
        let (b, vb) = split(items.clone(), r, 3).unwrap();
        let (c, vc) = split(items, r, 4).unwrap();
        assert_eq!((&a, &va), (&b, &vb));
        assert_ne!(a, c);
        assert_eq!((a.len(), va.len()), (c.len(), vc.len()));
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            width: 40,
            height: 24,
            ..SceneSpec::default()
        };
        let census = generate_dataset(dir.path(), &spec, 3, 7).unwrap();
        assert_eq!(census.iter().sum::<u64>(), 3 * 40 * 24);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest, "0000\n0001\n0002\n");
        let tiles = read_dataset(dir.path()).unwrap();
        assert_eq!(tiles, generate_tiles(&spec, 3, 7).unwrap());
        assert!(generate_dataset(dir.path(), &spec, 0, 7).is_err());

        let empty = tempfile::tempdir().unwrap();
        assert!(read_dataset(empty.path()).is_err());
        fs::write(empty.path().join(MANIFEST), "").unwrap();
        assert!(matches!(read_dataset(empty.path()), Err(Error::Data(_))));
    }

    #[test]
    fn batches_stack_samples() {
        let (img, labels) = tile(8, 4, 3, 5);
        let patches = extract_patches(&img, &labels, 4).unwrap();
        let refs: Vec<&Sample> = patches.iter().collect();
        let (t, l) = make_batch::<f32>(&refs).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4, 4]);
        assert_eq!(&t.values()[48..], patches[1].image.as_slice());
        assert_eq!(&l[16..], patches[1].labels.as_slice());
    }

    proptest! {
        #[test]
        fn tiling_is_a_partition(w in 1usize..40, h in 1usize..40, patch in 1usize..16, seed in any::<u64>()) {
            let (img, labels) = tile(w, h, 2, seed);
            let patches = extract_patches(&img, &labels, patch).unwrap();
            let (cols, rows) = patch_grid(w, h, patch);
            prop_assert_eq!(patches.len(), cols * rows);
            let mut seen = vec![0u32; w * h];
            for (i, p) in patches.iter().enumerate() {
                let (tx, ty) = (i % cols, i / cols);
                for y in 0..patch {
                    for x in 0..patch {
                        let (gx, gy) = (tx * patch + x, ty * patch + y);
                        let l = p.labels[y * patch + x];
                        if gx < w && gy < h {
                            seen[gy * w + gx] += 1;
                            prop_assert_eq!(l, labels.data[gy * w + gx]);
                            prop_assert_eq!(p.image[(patch + y) * patch + x], img.data.normalized(w * h + gy * w + gx));
                        } else {
                            prop_assert_eq!(l, IGNORE_INDEX);
                        }
                    }
                }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
        }
    }
}
