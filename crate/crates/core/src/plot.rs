//! Static PNG charts: VFP histograms and training curves. No text rendering;
//! panels, bars and polylines only.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::analysis::VfpHistogram;
use crate::error::{Error, Result};
use crate::train::StepReport;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];
const MARGIN: u32 = 12;

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

fn frame(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32) {
    for k in 1..4 {
        let y = y0 + (y1 - y0) * k / 4;
        fill(img, x0, y, x1, y + 1, GRID);
    }
    fill(img, x0, y0, x0 + 1, y1, AXIS);
    fill(img, x0, y1 - 1, x1, y1, AXIS);
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// One panel per histogram, stacked vertically; bar `v` has height equal to
/// the fraction of blocks with VFP `v` (1..=64), scaled to the panel maximum.
pub fn vfp_histogram_chart(
    hists: &[VfpHistogram],
    width: u32,
    panel_height: u32,
) -> Result<RgbImage> {
    if hists.is_empty() {
        return Err(Error::Empty("no histograms to plot".into()));
    }
    let mut img = RgbImage::from_pixel(width, panel_height * hists.len() as u32, BG);
    let plot_w = width.saturating_sub(2 * MARGIN).max(64);
    let bar = (plot_w / 64).max(1);
    for (p, h) in hists.iter().enumerate() {
        let (x0, y0) = (MARGIN, p as u32 * panel_height + MARGIN);
        let y1 = (p as u32 + 1) * panel_height - MARGIN;
        frame(&mut img, x0, y0, x0 + bar * 64 + 1, y1);
        let peak = (1..=64).map(|v| h.fraction_in(v, v)).fold(0.0, f64::max);
        if peak == 0.0 {
            continue;
        }
        let color = PALETTE[p % PALETTE.len()];
        for v in 1..=64usize {
            let f = h.fraction_in(v, v) / peak;
            let top = y1 - ((y1 - y0) as f64 * f).round() as u32;
            let bx = x0 + 1 + (v as u32 - 1) * bar;
            fill(
                &mut img,
                bx,
                top,
                bx + bar.saturating_sub(1).max(1),
                y1 - 1,
                color,
            );
        }
    }
    Ok(img)
}

/// Polylines of `(x, y)` series on shared axes; `log_y` plots `log10(y)` and
/// drops non-positive values.
pub fn line_chart(
    series: &[Vec<(f64, f64)>],
    width: u32,
    height: u32,
    log_y: bool,
) -> Result<RgbImage> {
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, tf(y)))
                .collect()
        })
        .collect();
    let all: Vec<&(f64, f64)> = pts.iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::Empty("no points to plot".into()));
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &&(x, y) in &all {
        (xmin, xmax, ymin, ymax) = (xmin.min(x), xmax.max(x), ymin.min(y), ymax.max(y));
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        (ymin, ymax) = (ymin - 0.5, ymax + 0.5);
    }
    let mut img = RgbImage::from_pixel(width, height, BG);
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, width - MARGIN, height - MARGIN);
    frame(&mut img, x0, y0, x1, y1);
    let px = |(x, y): (f64, f64)| {
        (
            x0 as f64 + (x - xmin) / (xmax - xmin) * (x1 - x0 - 1) as f64,
            (y1 - 1) as f64 - (y - ymin) / (ymax - ymin) * (y1 - y0 - 1) as f64,
        )
    };
    for (i, s) in pts.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for w in s.windows(2) {
            line(&mut img, px(w[0]), px(w[1]), c);
        }
        if let [only] = s.as_slice() {
            let (x, y) = px(*only);
            line(&mut img, (x, y), (x, y), c);
        }
    }
    Ok(img)
}

/// `l_sfr`, `l_dct`, `l_sfd` and `l_total` against step, log scale.
pub fn loss_chart(log: &[StepReport], width: u32, height: u32) -> Result<RgbImage> {
    let get = |f: fn(&StepReport) -> f64| {
        log.iter()
            .map(|r| (r.step as f64, f(r)))
            .collect::<Vec<_>>()
    };
    line_chart(
        &[
            get(|r| r.l_sfr),
            get(|r| r.l_dct),
            get(|r| r.l_sfd),
            get(|r| r.l_total),
        ],
        width,
        height,
        true,
    )
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
