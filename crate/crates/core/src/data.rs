//! Labeled image sets: a synthetic template generator and a CIFAR-10
//! binary reader.

use std::path::Path;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// Images stored row-major as `[M, C*H*W]` with pixels in `[-1, 1]` for
/// real data.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(shape: [usize; 3], pixels: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 {
            return Err(shape_err!("image shape {shape:?} has a zero dimension"));
        }
        if pixels.len() != labels.len() * per {
            return Err(shape_err!(
                "{} labels need {} pixels, got {}",
                labels.len(),
                labels.len() * per,
                pixels.len()
            ));
        }
        if num_classes == 0 {
            return Err(invalid!("dataset needs at least one class"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid!("label {bad} outside 0..{num_classes}"));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset pixels".into()));
        }
        Ok(Self {
            shape,
            pixels,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// `[idx.len(), C*H*W]` batch of the selected images.
    pub fn images_at(&self, idx: &[usize]) -> Result<Tensor> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(invalid!("image index {i} out of range for {} images", self.len()));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![idx.len(), per], data)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let mut labels = Vec::with_capacity(idx.len());
        let mut pixels = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            if i >= self.len() {
                return Err(invalid!("image index {i} out of range for {} images", self.len()));
            }
            labels.push(self.labels[i]);
            pixels.extend_from_slice(self.image(i));
        }
        Dataset::new(self.shape, pixels, labels, self.num_classes)
    }

    /// Every `stride`-th image starting at 0, at most `count` of them.
    pub fn stride_subset(&self, stride: usize, count: usize) -> Result<Dataset> {
        if stride == 0 {
            return Err(invalid!("stride must be positive"));
        }
        let idx: Vec<usize> = (0..self.len()).step_by(stride).take(count).collect();
        self.subset(&idx)
    }
}

/// Stride that spreads `count` picks evenly over `len` items.
pub fn even_stride(len: usize, count: usize) -> usize {
    if count == 0 {
        1
    } else {
        (len / count).max(1)
    }
}

/// Class templates on a sphere of radius `margin` plus Gaussian noise of
/// standard deviation `0.1 * margin`. Sample `i` has label `i % num_classes`.
pub fn synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    shape: [usize; 3],
    margin: f64,
    seed: u64,
) -> Result<Dataset> {
    Ok(synthetic_blobs_split(num_classes, per_class, 0, shape, margin, seed)?.0)
}

/// Train and test sets drawn around the same templates. The train set equals
/// `synthetic_blobs` with `train_per_class` for the same seed.
pub fn synthetic_blobs_split(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    shape: [usize; 3],
    margin: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(invalid!("margin must be positive, got {margin}"));
    }
    if num_classes == 0 {
        return Err(invalid!("need at least one class"));
    }
    let per: usize = shape.iter().product();
    if per == 0 {
        return Err(shape_err!("image shape {shape:?} has a zero dimension"));
    }
    let mut rng = SeededRng::new(seed);
    let mut templates = vec![0.0; num_classes * per];
    for t in templates.chunks_mut(per) {
        loop {
            rng.fill_gaussian(t);
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                t.iter_mut().for_each(|v| *v *= margin / norm);
                break;
            }
        }
    }
    let noise_std = 0.1 * margin;
    let mut draw = |count: usize| {
        let total = count * num_classes;
        let mut pixels = vec![0.0; total * per];
        rng.fill_gaussian(&mut pixels);
        let mut labels = Vec::with_capacity(total);
        for (i, img) in pixels.chunks_mut(per).enumerate() {
            let c = i % num_classes;
            let tpl = &templates[c * per..(c + 1) * per];
            img.iter_mut().zip(tpl).for_each(|(v, t)| *v = t + noise_std * *v);
            labels.push(c);
        }
        Dataset::new(shape, pixels, labels, num_classes)
    };
    let train = draw(train_per_class)?;
    let test = draw(test_per_class)?;
    Ok((train, test))
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];

pub fn byte_to_pixel(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn pixel_to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parses CIFAR-10 binary records: one label byte followed by 3072 pixel
/// bytes (R, G, B planes, each 32x32 row-major).
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {i} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| byte_to_pixel(b)));
    }
    Dataset::new(CIFAR_SHAPE, pixels, labels, 10)
}

pub fn read_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_binary(&bytes)
}

/// Inverse of [`parse_cifar10_binary`] for 3x32x32 datasets with at most
/// ten classes.
pub fn encode_cifar10_binary(data: &Dataset) -> Result<Vec<u8>> {
    if data.shape() != CIFAR_SHAPE || data.num_classes() > 10 {
        return Err(invalid!("CIFAR-10 layout needs 3x32x32 images and at most 10 classes"));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        out.push(data.labels()[i] as u8);
        out.extend(data.image(i).iter().map(|&x| pixel_to_byte(x)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_when_no_samples() {
        let d = synthetic_blobs(3, 0, [1, 4, 4], 1.0, 0).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthetic_blobs(4, 5, [1, 8, 8], 2.0, 7).unwrap();
        let b = synthetic_blobs(4, 5, [1, 8, 8], 2.0, 7).unwrap();
        let c = synthetic_blobs(4, 5, [1, 8, 8], 2.0, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let (train, test) = synthetic_blobs_split(4, 5, 3, [1, 8, 8], 2.0, 7).unwrap();
        assert_eq!(train, a);
        assert_eq!(test.len(), 12);
    }

    #[test]
    fn nearest_template_is_perfect_at_large_margin() {
        let shape = [1, 8, 8];
        let (train, test) = synthetic_blobs_split(4, 200, 200, shape, 10.0, 3).unwrap();
        let per = 64;
        let mut means = vec![0.0; 4 * per];
        let mut counts = [0usize; 4];
        for i in 0..train.len() {
            let c = train.labels()[i];
            counts[c] += 1;
            for (m, v) in means[c * per..(c + 1) * per].iter_mut().zip(train.image(i)) {
                *m += v;
            }
        }
        for c in 0..4 {
            means[c * per..(c + 1) * per].iter_mut().for_each(|m| *m /= counts[c] as f64);
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let x = test.image(i);
                let best = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&means[a * per..]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&means[b * per..]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == test.labels()[i]
            })
            .count();
        assert_eq!(correct, test.len());
    }

    #[test]
    fn cifar_single_record() {
        let mut bytes = vec![255u8; CIFAR_RECORD];
        bytes[0] = 3;
        let d = parse_cifar10_binary(&bytes).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels(), &[3]);
        assert!(d.image(0).iter().all(|&v| v == 1.0));
        assert_eq!(encode_cifar10_binary(&d).unwrap(), bytes);
    }

    #[test]
    fn cifar_rejects_truncation_and_bad_labels() {
        assert!(matches!(parse_cifar10_binary(&[0u8; 3072]), Err(Error::Format(_))));
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        assert!(matches!(parse_cifar10_binary(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn full_batch_size() {
        let bytes = vec![1u8; CIFAR_RECORD * 10_000];
        assert_eq!(parse_cifar10_binary(&bytes).unwrap().len(), 10_000);
    }

    #[test]
    fn pixel_scaling_round_trips() {
        for b in 0..=255u8 {
            let x = byte_to_pixel(b);
            assert!((-1.0..=1.0).contains(&x));
            assert!(((x + 1.0) * 127.5 - b as f64).abs() < 1e-12);
            assert_eq!(pixel_to_byte(x), b);
        }
    }

    #[test]
    fn stride_selection() {
        let d = synthetic_blobs(4, 25, [1, 2, 2], 1.0, 1).unwrap();
        let s = d.stride_subset(even_stride(d.len(), 10), 10).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.image(1), d.image(10));
        assert_eq!(s, d.stride_subset(10, 10).unwrap());
    }
}
