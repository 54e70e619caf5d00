//! Image ingestion, luminance conversion, bicubic degradation, patch
//! manifests and seeded batch sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{check_scale, MAX_SCALE, MIN_SCALE};

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Smallest side of a downscaled image.
pub const MIN_DOWN_SIZE: usize = 8;

/// Luminance in `[0, 1]` from interleaved pixels whose full-scale value is
/// `max` (255 for 8-bit, 1 for float). Accepts 1 (gray), 3 (RGB) or 4 (RGBA,
/// alpha ignored) channels.
pub fn to_luminance<P: Copy + Into<f64>>(
    pixels: &[P],
    height: usize,
    width: usize,
    channels: usize,
    max: f64,
) -> Result<Tensor<f64>> {
    if !matches!(channels, 1 | 3 | 4) {
        return Err(Error::Channels(channels));
    }
    if pixels.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "{} values for a {height}x{width}x{channels} image",
            pixels.len()
        )));
    }
    let inv = 1.0 / max;
    let y = pixels
        .chunks(channels)
        .map(|p| {
            let v = if channels == 1 {
                p[0].into()
            } else {
                LUMA[0] * p[0].into() + LUMA[1] * p[1].into() + LUMA[2] * p[2].into()
            };
            (v * inv).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::from_vec(&[height, width], y)
}

/// Full-range YCbCr planes, each `[H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct YCbCr {
    pub y: Tensor<f64>,
    pub cb: Tensor<f64>,
    pub cr: Tensor<f64>,
}

impl YCbCr {
    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut y = Vec::with_capacity(w * h);
        let mut cb = Vec::with_capacity(w * h);
        let mut cr = Vec::with_capacity(w * h);
        for p in img.pixels() {
            let [r, g, b] = p.0.map(|v| v as f64 / 255.0);
            y.push(LUMA[0] * r + LUMA[1] * g + LUMA[2] * b);
            cb.push(0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b);
            cr.push(0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b);
        }
        let t = |v| Tensor::from_vec(&[h, w], v).expect("plane");
        YCbCr {
            y: t(y),
            cb: t(cb),
            cr: t(cr),
        }
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        let s = self.y.shape();
        let (h, w) = (s[0], s[1]);
        let mut out = image::RgbImage::new(w as u32, h as u32);
        let (y, cb, cr) = (self.y.data(), self.cb.data(), self.cr.data());
        for (i, p) in out.pixels_mut().enumerate() {
            let (l, b, r) = (y[i], cb[i] - 0.5, cr[i] - 0.5);
            let rgb = [
                l + 1.402 * r,
                l - 0.344_136 * b - 0.714_136 * r,
                l + 1.772 * b,
            ];
            p.0 = rgb.map(to_u8);
        }
        out
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Luminance of an image file in `[0, 1]`.
pub fn load_luminance(path: &Path) -> Result<Tensor<f64>> {
    let img = load_rgb(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    to_luminance(img.as_raw(), h, w, 3, 255.0)
}

/// Writes an `[H, W]` plane in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_luminance(img: &Tensor<f64>, path: &Path) -> Result<()> {
    let (h, w) = dims(img)?;
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let gray = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    gray.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn dims(img: &Tensor<f64>) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::Shape(format!(
            "expected a non-empty [H, W] image, got {s:?}"
        ))),
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Half-sample symmetric mirror of an index into `[0, n)`.
fn mirror(j: i64, n: usize) -> usize {
    let n = n as i64;
    let m = j.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Per-output-sample source indices and normalized weights along one axis.
/// Downscaling widens the kernel by the inverse scale (antialiasing).
fn axis_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let ks = scale.min(1.0);
    let support = 2.0 / ks;
    (0..out_len)
        .map(|i| {
            let x = (i as f64 + 0.5) / scale - 0.5;
            let lo = (x - support).ceil() as i64;
            let hi = (x + support).floor() as i64;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| (mirror(j, in_len), cubic((x - j as f64) * ks) * ks))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of an `[H, W]` plane.
pub fn resize_bicubic(img: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let (h, w) = dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!(
            "cannot resize to {out_h}x{out_w}"
        )));
    }
    let src = img.data();
    let wx = axis_weights(w, out_w);
    let mut rows = vec![0.0; h * out_w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for (x, taps) in wx.iter().enumerate() {
            rows[y * out_w + x] = taps.iter().map(|&(j, k)| line[j] * k).sum();
        }
    }
    let wy = axis_weights(h, out_h);
    let mut out = vec![0.0; out_h * out_w];
    for (y, taps) in wy.iter().enumerate() {
        let dst = &mut out[y * out_w..(y + 1) * out_w];
        for &(j, k) in taps {
            for (d, &s) in dst.iter_mut().zip(&rows[j * out_w..(j + 1) * out_w]) {
                *d += s * k;
            }
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

/// Side length after downscaling by `r`.
pub fn down_size(len: usize, r: f64) -> usize {
    ((len as f64 / r + 1e-9).floor() as usize).max(MIN_DOWN_SIZE)
}

/// Bicubic downscale by `r`, then bicubic upscale back to the input size,
/// clamped to `[0, 1]`.
pub fn degrade(hr: &Tensor<f64>, r: f64) -> Result<Tensor<f64>> {
    check_scale(r)?;
    let (h, w) = dims(hr)?;
    let small = resize_bicubic(hr, down_size(h, r), down_size(w, r))?;
    Ok(resize_bicubic(&small, h, w)?.map(|v| v.clamp(0.0, 1.0)))
}

/// The 30 training scales `1.1, 1.2, ..., 4.0`.
pub fn scale_grid() -> Vec<f64> {
    (11..=40).map(|k| k as f64 / 10.0).collect()
}

/// Top-left crop to dimensions divisible by `m`.
pub fn crop_to_multiple(img: &Tensor<f64>, m: usize) -> Result<Tensor<f64>> {
    let (h, w) = dims(img)?;
    let (ch, cw) = (h / m * m, w / m * m);
    if ch == 0 || cw == 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} image is smaller than {m}"
        )));
    }
    crop(img, 0, 0, ch, cw)
}

pub fn crop(img: &Tensor<f64>, y: usize, x: usize, ch: usize, cw: usize) -> Result<Tensor<f64>> {
    let (h, w) = dims(img)?;
    if y + ch > h || x + cw > w {
        return Err(Error::OutOfRange(format!(
            "crop {ch}x{cw} at ({y}, {x}) exceeds {h}x{w}"
        )));
    }
    let d = img.data();
    let out = (y..y + ch)
        .flat_map(|r| d[r * w + x..r * w + x + cw].iter().copied())
        .collect();
    Tensor::from_vec(&[ch, cw], out)
}

/// Top-left corners of the `size`-square crop grid with the given stride.
pub fn patch_origins(h: usize, w: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    if h < size || w < size || stride == 0 {
        return Vec::new();
    }
    let ys = (0..=h - size).step_by(stride);
    ys.flat_map(|y| (0..=w - size).step_by(stride).map(move |x| (y, x)))
        .collect()
}

/// Square patches on a deterministic grid; images smaller than `size` yield none.
pub fn crop_patches(img: &Tensor<f64>, size: usize, stride: usize) -> Result<Vec<Tensor<f64>>> {
    let (h, w) = dims(img)?;
    if h < size || w < size {
        log::warn!("skipping {h}x{w} image smaller than the {size}px patch size");
    }
    patch_origins(h, w, size, stride)
        .into_iter()
        .map(|(y, x)| crop(img, y, x, size, size))
        .collect()
}

/// Image files (PNG/BMP) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "bmp")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// File name relative to the manifest root.
    pub file: String,
    pub y: usize,
    pub x: usize,
}

/// Patch locations over a directory of images, with per-file checksums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub patch_size: usize,
    pub entries: Vec<ManifestEntry>,
    /// SHA-256 of each referenced file.
    pub checksums: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// Scans `dir` and lays a crop grid over every image.
    pub fn build(dir: &Path, split: Split, patch_size: usize, stride: usize) -> Result<Self> {
        let mut entries = Vec::new();
        let mut checksums = BTreeMap::new();
        for path in list_images(dir)? {
            let file = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Config(format!("non-UTF-8 file name {}", path.display())))?
                .to_string();
            let (w, h) = image::image_dimensions(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            let origins = patch_origins(h as usize, w as usize, patch_size, stride);
            if origins.is_empty() {
                log::warn!("{file}: {w}x{h} is smaller than {patch_size}px, skipped");
                continue;
            }
            entries.extend(origins.into_iter().map(|(y, x)| ManifestEntry {
                file: file.clone(),
                y,
                x,
            }));
            checksums.insert(file, sha256_file(&path)?);
        }
        Ok(DatasetManifest {
            root: dir.to_path_buf(),
            split,
            patch_size,
            entries,
            checksums,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }

    /// Checks that files exist, match their checksums, and contain every patch.
    pub fn verify(&self) -> Result<()> {
        for (file, sum) in &self.checksums {
            let path = self.root.join(file);
            let actual = sha256_file(&path)?;
            if &actual != sum {
                return Err(Error::Corrupt(format!(
                    "{} checksum mismatch",
                    path.display()
                )));
            }
        }
        let mut sizes = BTreeMap::new();
        for e in &self.entries {
            if !self.checksums.contains_key(&e.file) {
                return Err(Error::Config(format!("{} has no checksum", e.file)));
            }
            if !sizes.contains_key(&e.file) {
                let path = self.root.join(&e.file);
                let dims = image::image_dimensions(&path)
                    .map_err(|source| Error::Image { path, source })?;
                sizes.insert(e.file.clone(), dims);
            }
            let (w, h) = sizes[&e.file];
            if e.y + self.patch_size > h as usize || e.x + self.patch_size > w as usize {
                return Err(Error::OutOfRange(format!(
                    "{} patch at ({}, {}) exceeds {w}x{h}",
                    e.file, e.y, e.x
                )));
            }
        }
        Ok(())
    }
}

/// HR patch, its bicubic down-up degradation, and the scale used.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub hr: Tensor<f64>,
    pub lr: Tensor<f64>,
    pub scale: f64,
}

impl TrainingSample {
    pub fn new(hr: Tensor<f64>, scale: f64) -> Result<Self> {
        let lr = degrade(&hr, scale)?;
        Ok(TrainingSample { hr, lr, scale })
    }
}

/// Luminance images held in memory, addressed through a manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: BTreeMap<String, Tensor<f64>>,
}

impl Dataset {
    pub fn open(manifest: DatasetManifest) -> Result<Self> {
        if manifest.entries.is_empty() {
            return Err(Error::Empty(format!(
                "no {}px patches under {}",
                manifest.patch_size,
                manifest.root.display()
            )));
        }
        manifest.verify()?;
        let mut images = BTreeMap::new();
        for file in manifest.checksums.keys() {
            images.insert(file.clone(), load_luminance(&manifest.root.join(file))?);
        }
        Ok(Dataset { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn patch(&self, index: usize) -> Result<Tensor<f64>> {
        let e = &self.manifest.entries[index];
        let p = self.manifest.patch_size;
        crop(&self.images[&e.file], e.y, e.x, p, p)
    }

    /// Uniformly drawn patches, each with its own scale from `scales`.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        scales: &[f64],
        rng: &mut R,
    ) -> Result<Vec<TrainingSample>> {
        if scales.is_empty() {
            return Err(Error::Empty("scale sampler has no scales".into()));
        }
        (0..batch_size)
            .map(|_| {
                let idx = rng.random_range(0..self.len());
                let r = scales[rng.random_range(0..scales.len())];
                TrainingSample::new(self.patch(idx)?, r)
            })
            .collect()
    }
}

/// Produces seeded batches on a worker thread through a bounded queue. The
/// sequence is identical to calling [`Dataset::sample_batch`] in a loop with
/// the same seed.
pub struct Prefetcher {
    rx: Receiver<Result<Vec<TrainingSample>>>,
    worker: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(
        dataset: Arc<Dataset>,
        batch_size: usize,
        batches: usize,
        seed: u64,
        capacity: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let worker = std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scales = scale_grid();
            for _ in 0..batches {
                let batch = dataset.sample_batch(batch_size, &scales, &mut rng);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Prefetcher {
            rx,
            worker: Some(worker),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Result<Vec<TrainingSample>>;
    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Unblock a producer waiting on a full queue before joining it.
        while self.rx.try_recv().is_ok() {}
        let (_, dead) = sync_channel(1);
        let _ = std::mem::replace(&mut self.rx, dead);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// Whether `r` is one of the training scales.
pub fn on_grid(r: f64) -> bool {
    (MIN_SCALE - 1e-9..=MAX_SCALE + 1e-9).contains(&r)
        && ((r * 10.0).round() - r * 10.0).abs() < 1e-6
}
