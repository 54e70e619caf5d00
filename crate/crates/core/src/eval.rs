//! Inference at arbitrary scale and full-reference metrics on luminance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::BLOCK;
use crate::data::{self, degrade, resize_bicubic, YCbCr};
use crate::error::{Error, Result};
use crate::model::FreqSr;
use crate::sfd::ActionMode;
use crate::tensor::{Scalar, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Empty("empty image".into()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in [0, 1].
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over the positions where the window fits.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for c in 0..ow {
            rows[y * ow + c] = (0..n).map(|t| k[t] * x[y * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for c in 0..ow {
            out[y * ow + c] = (0..n).map(|t| k[t] * rows[(y + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM of two `[H, W]` images in [0, 1] with an 11x11 Gaussian window
/// (sigma 1.5) and population statistics, averaged over the valid region.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.len() != 2 || s[0] < SSIM_WINDOW || s[1] < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    let k = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let ux = filter_valid(x, h, w, &k);
    let uy = filter_valid(y, h, w, &k);
    let uxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let uyy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let uxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let total: f64 = (0..ux.len())
        .map(|i| {
            let (mx, my) = (ux[i], uy[i]);
            let vx = uxx[i] - mx * mx;
            let vy = uyy[i] - my * my;
            let vxy = uxy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * vxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / ux.len() as f64)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads bottom and right by reflection (edge not repeated) up to multiples of 8.
pub fn pad_to_blocks(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = img.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Shape(format!(
            "expected a non-empty [H, W] image, got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    let (ph, pw) = (h.div_ceil(BLOCK) * BLOCK, w.div_ceil(BLOCK) * BLOCK);
    let d = img.data();
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = reflect(y as isize, h);
        out.extend((0..pw).map(|x| d[sy * w + reflect(x as isize, w)]));
    }
    Tensor::from_vec(&[ph, pw], out)
}

/// `round(len * r)`, at least 1.
pub fn output_size(len: usize, r: f64) -> usize {
    ((len as f64 * r).round() as usize).max(1)
}

/// Model output for a bicubic-upsampled luminance image, cropped back to its
/// size and clamped to [0, 1]. Returns the image and the per-block actions.
pub fn refine<T: Scalar>(
    model: &FreqSr<T>,
    up: &Tensor<f64>,
    r: f64,
) -> Result<(Tensor<f64>, Vec<usize>)> {
    let (h, w) = (up.shape()[0], up.shape()[1]);
    let padded = pad_to_blocks(up)?;
    let (ph, pw) = (padded.shape()[0], padded.shape()[1]);
    let x = padded.cast::<T>().reshape(&[1, 1, ph, pw])?;
    let (y, actions) = model.run(&x, &[r], ActionMode::Greedy, 0)?;
    if !y.all_finite() {
        return Err(Error::NonFinite("model output".into()));
    }
    let yd = y.to_f64_vec();
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        out.extend(yd[row * pw..row * pw + w].iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok((Tensor::from_vec(&[h, w], out)?, actions))
}

fn clamp01(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Bicubic upsampling to `out_h x out_w`, clamped to [0, 1].
pub fn bicubic_to(lr: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    Ok(clamp01(&resize_bicubic(lr, out_h, out_w)?))
}

/// Super-resolves a luminance image to an explicit size.
pub fn super_resolve_to<T: Scalar>(
    model: &FreqSr<T>,
    lr: &Tensor<f64>,
    r: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<f64>> {
    crate::check_scale(r)?;
    refine(model, &bicubic_to(lr, out_h, out_w)?, r).map(|(t, _)| t)
}

/// Super-resolves a luminance image by `r`; the output is `round(dims * r)`.
pub fn super_resolve_luma<T: Scalar>(
    model: &FreqSr<T>,
    lr: &Tensor<f64>,
    r: f64,
) -> Result<Tensor<f64>> {
    crate::check_scale(r)?;
    let s = lr.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected an [H, W] image, got {s:?}")));
    }
    super_resolve_to(model, lr, r, output_size(s[0], r), output_size(s[1], r))
}

/// Super-resolves the luminance of a color image; chroma is upsampled bicubically.
pub fn super_resolve_rgb<T: Scalar>(
    model: &FreqSr<T>,
    img: &image::RgbImage,
    r: f64,
) -> Result<image::RgbImage> {
    crate::check_scale(r)?;
    let ycc = YCbCr::from_rgb(img);
    let y = super_resolve_luma(model, &ycc.y, r)?;
    let (h, w) = (y.shape()[0], y.shape()[1]);
    Ok(YCbCr {
        y,
        cb: resize_bicubic(&ycc.cb, h, w)?,
        cr: resize_bicubic(&ycc.cr, h, w)?,
    }
    .to_rgb())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image: String,
    pub scale: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_bicubic: f64,
    pub ssim_bicubic: f64,
}

/// Means over the rows of one scale.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleSummary {
    pub scale: f64,
    pub images: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_bicubic: f64,
    pub ssim_bicubic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn summary(&self) -> Vec<ScaleSummary> {
        let mut by_scale: BTreeMap<i64, Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            by_scale
                .entry((r.scale * 1000.0).round() as i64)
                .or_default()
                .push(r);
        }
        by_scale
            .into_values()
            .map(|rows| {
                let n = rows.len() as f64;
                let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                ScaleSummary {
                    scale: rows[0].scale,
                    images: rows.len(),
                    psnr: mean(|r| r.psnr),
                    ssim: mean(|r| r.ssim),
                    psnr_bicubic: mean(|r| r.psnr_bicubic),
                    ssim_bicubic: mean(|r| r.ssim_bicubic),
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for r in &self.rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EvalRow>> {
        let err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        r.deserialize().map(|row| row.map_err(err)).collect()
    }

    /// Plain-text table of the per-scale means.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "dataset {} | model {}\n{:>6} {:>6} {:>9} {:>8} {:>9} {:>8}\n",
            self.dataset, self.model, "scale", "images", "psnr", "ssim", "bicubic", "ssim_bic"
        );
        for m in self.summary() {
            s += &format!(
                "{:>6.2} {:>6} {:>9.4} {:>8.4} {:>9.4} {:>8.4}\n",
                m.scale, m.images, m.psnr, m.ssim, m.psnr_bicubic, m.ssim_bicubic
            );
        }
        s
    }
}

/// Named luminance images from a directory (png/bmp, sorted by name).
pub fn load_eval_set(dir: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    let files = data::list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Empty(format!("no images in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let name = p
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            Ok((name, data::load_luminance(p)?))
        })
        .collect()
}

/// For each image and scale: degrade, super-resolve back to the original size,
/// and score the model and the bicubic baseline against the original.
pub fn run_eval<T: Scalar>(
    model: &FreqSr<T>,
    images: &[(String, Tensor<f64>)],
    scales: &[f64],
    dataset: &str,
    model_id: &str,
) -> Result<EvalReport> {
    if images.is_empty() || scales.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(images.len() * scales.len());
    for &r in scales {
        crate::check_scale(r)?;
        for (name, hr) in images {
            let (h, w) = (hr.shape()[0], hr.shape()[1]);
            let lr = degrade(hr, r)?;
            let base = bicubic_to(&lr, h, w)?;
            let (sr, _) = refine(model, &base, r)?;
            rows.push(EvalRow {
                image: name.clone(),
                scale: r,
                psnr: psnr(&sr, hr)?,
                ssim: ssim(&sr, hr)?,
                psnr_bicubic: psnr(&base, hr)?,
                ssim_bicubic: ssim(&base, hr)?,
            });
        }
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        model: model_id.to_string(),
        rows,
    })
}
