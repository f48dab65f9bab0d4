//! Multiband image container, preprocessing, and a synthetic image source.
//!
//! MBIF layout (little-endian): `"MBIF"`, version `u32 = 1`, bands `u16`,
//! height `u32`, width `u32`, dtype `u8 = 1` (f32), then
//! `bands · height · width` f32 values, band-major.

use std::path::{Path, PathBuf};

use djscc_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config, domain, Error, Result};

pub const MAGIC: &[u8; 4] = b"MBIF";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_BYTES: usize = 4 + 4 + 2 + 4 + 4 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MultibandImage {
    bands: usize,
    height: usize,
    width: usize,
    /// Band-major: `pixels[(b * height + y) * width + x]`.
    pixels: Vec<f32>,
}

impl MultibandImage {
    pub fn new(bands: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(domain(format!("image dimensions must be positive, got {bands}x{height}x{width}")));
        }
        if bands > u16::MAX as usize {
            return Err(domain(format!("at most {} bands supported, got {bands}", u16::MAX)));
        }
        if pixels.len() != bands * height * width {
            return Err(domain(format!(
                "{} pixels supplied for a {bands}x{height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { bands, height, width, pixels })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[b * n..(b + 1) * n]
    }

    /// Height-width-bands tensor `[H, W, bands]`, the network's item layout.
    pub fn to_hwc(&self) -> Tensor<f32> {
        let (h, w, c) = (self.height, self.width, self.bands);
        Tensor::from_fn([h, w, c], |i| {
            let (pix, b) = (i / c, i % c);
            self.pixels[b * h * w + pix]
        })
    }

    pub fn from_hwc(t: &Tensor<f32>) -> Result<Self> {
        let &[h, w, c] = t.shape() else {
            return Err(domain(format!("expected an [H, W, bands] tensor, got {:?}", t.shape())));
        };
        let mut pixels = vec![0.0; h * w * c];
        for (i, &v) in t.data().iter().enumerate() {
            pixels[(i % c) * h * w + i / c] = v;
        }
        Self::new(c, h, w, pixels)
    }

    /// Resize every band to `out_h × out_w` with [`resize_cubic`].
    pub fn resized(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let mut pixels = Vec::with_capacity(self.bands * out_h * out_w);
        for b in 0..self.bands {
            pixels.extend(resize_cubic(self.band(b), self.height, self.width, out_h, out_w)?);
        }
        Self::new(self.bands, out_h, out_w, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.bands as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.push(DTYPE_F32);
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        let take = |offset: usize, n: usize| -> Result<&[u8]> {
            bytes.get(offset..offset + n).ok_or_else(|| {
                fail(offset, format!("truncated: need {n} bytes, {} available", bytes.len().saturating_sub(offset)))
            })
        };
        if take(0, 4)? != MAGIC {
            return Err(fail(0, "bad magic, expected \"MBIF\"".into()));
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let bands = u16::from_le_bytes(take(8, 2)?.try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(take(10, 4)?.try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(take(14, 4)?.try_into().unwrap()) as usize;
        let dtype = take(18, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(fail(18, format!("unsupported dtype {dtype}")));
        }
        if bands == 0 || height == 0 || width == 0 {
            return Err(fail(8, format!("zero dimension in {bands}x{height}x{width}")));
        }
        let payload = bands
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| fail(8, format!("dimensions {bands}x{height}x{width} overflow")))?;
        let data = take(HEADER_BYTES, payload)?;
        if bytes.len() != HEADER_BYTES + payload {
            return Err(fail(HEADER_BYTES + payload, format!("{} trailing bytes", bytes.len() - HEADER_BYTES - payload)));
        }
        let pixels = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(bands, height, width, pixels)
    }
}

pub fn save_multiband(image: &MultibandImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, image.encode())?;
    Ok(())
}

pub fn load_multiband(path: impl AsRef<Path>) -> Result<MultibandImage> {
    MultibandImage::decode(&std::fs::read(path)?)
}

/// Every `.mbif` file in `dir`, sorted by file name.
pub fn load_directory(dir: impl AsRef<Path>) -> Result<Vec<MultibandImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "mbif"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(config(format!("no .mbif files in {}", dir.as_ref().display())));
    }
    paths.iter().map(load_multiband).collect()
}

fn catmull_rom(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps (clamped indices) and weights for each output coordinate.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for j in 0..4 {
                let i = base as isize + j as isize - 1;
                idx[j] = i.clamp(0, n_in as isize - 1) as usize;
                w[j] = catmull_rom(frac - (j as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Separable Catmull-Rom resampling of a row-major `in_h × in_w` band, with
/// clamped edges and pixel centres at half-integer coordinates.
pub fn resize_cubic(band: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Vec<f32>> {
    if in_h < 2 || in_w < 2 || out_h < 2 || out_w < 2 {
        return Err(domain(format!("resize needs dimensions of at least 2, got {in_h}x{in_w} -> {out_h}x{out_w}")));
    }
    if band.len() != in_h * in_w {
        return Err(domain(format!("band has {} values, expected {in_h}x{in_w}", band.len())));
    }
    let cols = cubic_taps(in_w, out_w);
    let rows = cubic_taps(in_h, out_h);
    let mut tmp = vec![0.0f64; in_h * out_w];
    for y in 0..in_h {
        let src = &band[y * in_w..(y + 1) * in_w];
        for (x, (idx, w)) in cols.iter().enumerate() {
            tmp[y * out_w + x] = (0..4).map(|j| w[j] * src[idx[j]] as f64).sum();
        }
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for (idx, w) in &rows {
        for x in 0..out_w {
            out.push((0..4).map(|j| w[j] * tmp[idx[j] * out_w + x]).sum::<f64>() as f32);
        }
    }
    Ok(out)
}

/// Largest value of each band across `images`.
pub fn band_maxima(images: &[MultibandImage]) -> Result<Vec<f32>> {
    let first = images.first().ok_or_else(|| domain("empty image list"))?;
    let mut max = vec![f32::NEG_INFINITY; first.bands];
    for img in images {
        if img.bands != first.bands {
            return Err(domain(format!("band count {} differs from {}", img.bands, first.bands)));
        }
        for (b, m) in max.iter_mut().enumerate() {
            *m = img.band(b).iter().copied().fold(*m, f32::max);
        }
    }
    Ok(max)
}

/// Divide each band by its maximum and clamp into [0, 1].
pub fn normalize(image: &MultibandImage, per_band_max: &[f32]) -> Result<MultibandImage> {
    if per_band_max.len() != image.bands {
        return Err(domain(format!("{} band maxima for {} bands", per_band_max.len(), image.bands)));
    }
    if let Some(m) = per_band_max.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
        return Err(domain(format!("band maxima must be positive, got {m}")));
    }
    let n = image.height * image.width;
    let pixels = image
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / per_band_max[i / n]).clamp(0.0, 1.0))
        .collect();
    MultibandImage::new(image.bands, image.height, image.width, pixels)
}

pub fn denormalize(image: &MultibandImage, per_band_max: &[f32]) -> Result<MultibandImage> {
    if per_band_max.len() != image.bands {
        return Err(domain(format!("{} band maxima for {} bands", per_band_max.len(), image.bands)));
    }
    let n = image.height * image.width;
    let pixels = image.pixels.iter().enumerate().map(|(i, &v)| v * per_band_max[i / n]).collect();
    MultibandImage::new(image.bands, image.height, image.width, pixels)
}

fn blur_1d(src: &[f64], dst: &mut [f64], kernel: &[f64], len: usize, stride: usize, lines: usize, line_stride: usize) {
    let r = kernel.len() / 2;
    for l in 0..lines {
        for i in 0..len {
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                // periodic boundary keeps the field statistically stationary
                let s = (i + len * 2 + j - r) % len;
                acc += k * src[l * line_stride + s * stride];
            }
            dst[l * line_stride + i * stride] = acc;
        }
    }
}

fn gaussian_field<R: Rng>(h: usize, w: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows = vec![0.0; h * w];
    blur_1d(&noise, &mut rows, &kernel, w, 1, h, w);
    let mut out = vec![0.0; h * w];
    blur_1d(&rows, &mut out, &kernel, h, w, w, 1);
    out
}

/// Smooth, band-correlated random images scaled into [0, 1].
///
/// Each band mixes a field shared by all bands with an independent one, both
/// low-pass filtered white noise, then the image is min-max scaled.
pub fn synth_dataset(seed: u64, count: usize, shape: [usize; 3]) -> Result<Vec<MultibandImage>> {
    let [h, w, bands] = shape;
    if h < 2 || w < 2 || bands == 0 {
        return Err(domain(format!("synthetic images need at least 2x2 pixels and one band, got {shape:?}")));
    }
    let sigma = (h.min(w) as f64 / 8.0).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let shared = gaussian_field(h, w, sigma, &mut rng);
            let mut pixels = Vec::with_capacity(bands * h * w);
            for _ in 0..bands {
                let gain: f64 = rng.random_range(0.6..1.0);
                let own = gaussian_field(h, w, sigma, &mut rng);
                pixels.extend(shared.iter().zip(&own).map(|(s, o)| gain * s + 0.5 * o));
            }
            let (lo, hi) = pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
            let span = (hi - lo).max(1e-12);
            let pixels = pixels.iter().map(|v| ((v - lo) / span) as f32).collect();
            MultibandImage::new(bands, h, w, pixels)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffle `0..n` with `seed` and cut it by `fractions` (train, validation,
/// test). Rounding remainders go to the test set.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config(format!("split fractions must be in [0, 1] and sum to 1, got {fractions:?}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Ok(DatasetSplit { train: idx, validation, test, seed })
}

/// Stack images into a `[B, H, W, bands]` batch.
pub fn batch_tensor(images: &[&MultibandImage]) -> Result<Tensor<f32>> {
    let items = images
        .iter()
        .map(|i| i.to_hwc().reshape([1, i.height, i.width, i.bands]))
        .collect::<djscc_tensor::Result<Vec<_>>>()?;
    Ok(Tensor::stack_batch(&items)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_file() {
        let img = MultibandImage::new(1, 1, 1, vec![0.5]).unwrap();
        let bytes = img.encode();
        assert_eq!(bytes.len(), HEADER_BYTES + 4);
        assert_eq!(MultibandImage::decode(&bytes).unwrap().pixels(), &[0.5]);
    }

    #[test]
    fn malformed_containers_report_offsets() {
        let good = MultibandImage::new(2, 3, 4, vec![0.25; 24]).unwrap().encode();
        let offset = |bytes: &[u8]| match MultibandImage::decode(bytes) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(offset(&bad_magic), 0);
        assert_eq!(offset(&good[..good.len() - 3]), HEADER_BYTES as u64);
        assert_eq!(offset(&good[..6]), 4);
        let mut bad_dtype = good.clone();
        bad_dtype[18] = 2;
        assert_eq!(offset(&bad_dtype), 18);
        let mut huge = good.clone();
        huge[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..10].copy_from_slice(&u16::MAX.to_le_bytes());
        assert!(matches!(MultibandImage::decode(&huge), Err(Error::Format { .. })));
        let mut trailing = good.clone();
        trailing.push(0);
        assert_eq!(offset(&trailing), good.len() as u64);
    }

    #[test]
    fn hwc_round_trip() {
        let img = MultibandImage::new(3, 2, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        let t = img.to_hwc();
        assert_eq!(&t.data()[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(MultibandImage::from_hwc(&t).unwrap(), img);
    }

    #[test]
    fn identity_and_constant_resize() {
        let band: Vec<f32> = (0..20).map(|v| (v as f32 * 0.37).sin()).collect();
        let same = resize_cubic(&band, 4, 5, 4, 5).unwrap();
        for (a, b) in same.iter().zip(&band) {
            assert!((a - b).abs() < 1e-6);
        }
        let flat = resize_cubic(&[0.7; 9], 3, 3, 7, 5).unwrap();
        assert!(flat.iter().all(|&v| v == 0.7f32 || (v - 0.7).abs() < 1e-7));
        assert!(resize_cubic(&[0.0; 3], 1, 3, 2, 2).is_err());
    }

    #[test]
    fn normalize_extremes() {
        let img = MultibandImage::new(2, 1, 2, vec![0.0, 4.0, 1.0, 2.0]).unwrap();
        let max = band_maxima(std::slice::from_ref(&img)).unwrap();
        assert_eq!(max, vec![4.0, 2.0]);
        let n = normalize(&img, &max).unwrap();
        assert_eq!(n.pixels(), &[0.0, 1.0, 0.5, 1.0]);
        assert!(normalize(&img, &[1.0]).is_err());
        assert!(normalize(&img, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn split_fraction_edge_cases() {
        let s = split_dataset(10, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(s.train.len(), 10);
        assert!(s.validation.is_empty() && s.test.is_empty());
        assert!(split_dataset(10, [0.5, 0.6, 0.0], 3).is_err());
    }
}
