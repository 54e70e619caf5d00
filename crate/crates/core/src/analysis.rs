//! Spectral degradation statistics of HR/LR pairs.
//!
//! For each 8x8 block the normalized degradation of zigzag coefficient `i` is
//! `|f_hr[i] - f_lr[i]| / max(|f_hr[i]|, eps)`. The valid frequency point (VFP)
//! of a block is the length of the leading run of coefficients whose
//! degradation stays below a threshold.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::BLOCK_AREA;
use crate::data::{crop_to_multiple, degrade};
use crate::dct::{forward_cdct, make_dct_basis, BasisSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEGRADATION_EPS: f64 = 1e-8;

/// Normalized per-coefficient degradation.
pub fn spectral_degradation(f_hr: &[f64], f_lr: &[f64], eps: f64) -> Vec<f64> {
    f_hr.iter()
        .zip(f_lr)
        .map(|(&h, &l)| (h - l).abs() / h.abs().max(eps))
        .collect()
}

/// Length of the leading run of entries strictly below `t`.
pub fn find_vfp(f_d: &[f64], t: f64) -> usize {
    f_d.iter().take_while(|&&v| v < t).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationProfile {
    pub f_d: Vec<f64>,
    pub scale: f64,
    /// Block row and column.
    pub block_position: (usize, usize),
}

/// Degradation profile of every block of an 8-divisible pair.
pub fn block_profiles(
    hr: &Tensor<f64>,
    lr: &Tensor<f64>,
    scale: f64,
    basis: &BasisSet<f64>,
) -> Result<Vec<DegradationProfile>> {
    if hr.shape() != lr.shape() {
        return Err(Error::Shape(format!(
            "HR {:?} and LR {:?} differ",
            hr.shape(),
            lr.shape()
        )));
    }
    let sh = forward_cdct(hr, basis)?;
    let sl = forward_cdct(lr, basis)?;
    let (hb, wb) = sh.grid();
    let mut out = Vec::with_capacity(hb * wb);
    for i in 0..hb {
        for j in 0..wb {
            out.push(DegradationProfile {
                f_d: spectral_degradation(&sh.block(i, j), &sl.block(i, j), DEGRADATION_EPS),
                scale,
                block_position: (i, j),
            });
        }
    }
    Ok(out)
}

/// Mean degradation over all coefficients of all blocks.
pub fn mean_degradation(hr: &Tensor<f64>, lr: &Tensor<f64>) -> Result<f64> {
    let profiles = block_profiles(hr, lr, 0.0, &make_dct_basis())?;
    let n = profiles.len() * BLOCK_AREA;
    Ok(profiles.iter().flat_map(|p| p.f_d.iter()).sum::<f64>() / n as f64)
}

fn scale_key(r: f64) -> i64 {
    (r * 1000.0).round() as i64
}

/// Degradation threshold per scale factor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Thresholds(BTreeMap<i64, f64>);

impl Thresholds {
    pub fn new(pairs: &[(f64, f64)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for &(r, t) in pairs {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!(
                    "threshold {t} for x{r} must be positive"
                )));
            }
            map.insert(scale_key(r), t);
        }
        Ok(Thresholds(map))
    }

    /// 0.09, 0.2 and 0.5 at x2, x3 and x4.
    pub fn standard() -> Self {
        Self::new(&[(2.0, 0.09), (3.0, 0.2), (4.0, 0.5)]).expect("positive thresholds")
    }

    /// The same threshold at every listed scale.
    pub fn uniform(scales: &[f64], t: f64) -> Result<Self> {
        Self::new(&scales.iter().map(|&r| (r, t)).collect::<Vec<_>>())
    }

    /// Parses `"2=0.09,3=0.2"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (r, t) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("threshold entry {item:?} is not scale=value"))
            })?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{item:?}: {e}")))
            };
            pairs.push((parse(r)?, parse(t)?));
        }
        Self::new(&pairs)
    }

    pub fn get(&self, r: f64) -> Result<f64> {
        self.0
            .get(&scale_key(r))
            .copied()
            .ok_or_else(|| Error::Config(format!("no threshold configured for scale x{r}")))
    }

    pub fn scales(&self) -> Vec<f64> {
        self.0.keys().map(|&k| k as f64 / 1000.0).collect()
    }
}

/// Distribution of VFPs over blocks at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VfpHistogram {
    pub scale: f64,
    pub threshold: f64,
    pub counts: BTreeMap<usize, u64>,
    pub total_blocks: u64,
}

impl VfpHistogram {
    pub fn new(scale: f64, threshold: f64) -> Self {
        VfpHistogram {
            scale,
            threshold,
            counts: BTreeMap::new(),
            total_blocks: 0,
        }
    }

    pub fn add(&mut self, vfp: usize) {
        *self.counts.entry(vfp).or_default() += 1;
        self.total_blocks += 1;
    }

    pub fn merge(&mut self, other: &VfpHistogram) {
        for (&k, &c) in &other.counts {
            *self.counts.entry(k).or_default() += c;
        }
        self.total_blocks += other.total_blocks;
    }

    /// Share of blocks with VFP in `[lo, hi]`.
    pub fn fraction_in(&self, lo: usize, hi: usize) -> f64 {
        if self.total_blocks == 0 {
            return 0.0;
        }
        let n: u64 = self.counts.range(lo..=hi).map(|(_, c)| c).sum();
        n as f64 / self.total_blocks as f64
    }

    pub fn min(&self) -> Option<usize> {
        self.counts.keys().next().copied()
    }

    pub fn max(&self) -> Option<usize> {
        self.counts.keys().next_back().copied()
    }

    pub fn mean(&self) -> f64 {
        if self.total_blocks == 0 {
            return 0.0;
        }
        let s: u64 = self.counts.iter().map(|(&k, &c)| k as u64 * c).sum();
        s as f64 / self.total_blocks as f64
    }
}

/// Accumulates one histogram per scale over every block of every pair.
/// Pairs must be 8-divisible; results are sorted by scale.
pub fn profile_corpus(
    pairs: &[(Tensor<f64>, Tensor<f64>, f64)],
    thresholds: &Thresholds,
) -> Result<Vec<VfpHistogram>> {
    let basis = make_dct_basis::<f64>();
    let mut hists: BTreeMap<i64, VfpHistogram> = BTreeMap::new();
    for (hr, lr, r) in pairs {
        let t = thresholds.get(*r)?;
        let hist = hists
            .entry(scale_key(*r))
            .or_insert_with(|| VfpHistogram::new(*r, t));
        for p in block_profiles(hr, lr, *r, &basis)? {
            hist.add(find_vfp(&p.f_d, t));
        }
    }
    Ok(hists.into_values().collect())
}

/// HR/LR pairs from full images: each image is cropped to 8-divisible size and
/// degraded at every scale.
pub fn degraded_pairs(
    images: &[Tensor<f64>],
    scales: &[f64],
) -> Result<Vec<(Tensor<f64>, Tensor<f64>, f64)>> {
    let mut out = Vec::with_capacity(images.len() * scales.len());
    for img in images {
        let hr = crop_to_multiple(img, 8)?;
        for &r in scales {
            out.push((hr.clone(), degrade(&hr, r)?, r));
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct HistogramRow {
    scale: f64,
    threshold: f64,
    vfp: usize,
    count: u64,
    fraction: f64,
}

const HISTOGRAM_HEADER: [&str; 5] = ["scale", "threshold", "vfp", "count", "fraction"];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Serde(format!("{}: {e}", path.display()))
}

/// Writes the histograms as CSV (one row group per scale) and a JSON mirror
/// next to it. Returns the JSON path.
pub fn export_histogram(hists: &[VfpHistogram], path: &Path) -> Result<PathBuf> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(HISTOGRAM_HEADER)
        .map_err(|e| csv_error(path, e))?;
    for h in hists {
        for (&vfp, &count) in &h.counts {
            w.serialize(HistogramRow {
                scale: h.scale,
                threshold: h.threshold,
                vfp,
                count,
                fraction: count as f64 / h.total_blocks as f64,
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let json = path.with_extension("json");
    let text = serde_json::to_string_pretty(hists).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(json)
}

/// Reads histograms back from the CSV written by [`export_histogram`].
pub fn read_histogram_csv(path: &Path) -> Result<Vec<VfpHistogram>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut hists: BTreeMap<i64, VfpHistogram> = BTreeMap::new();
    for row in r.deserialize() {
        let row: HistogramRow = row.map_err(|e| csv_error(path, e))?;
        let h = hists
            .entry(scale_key(row.scale))
            .or_insert_with(|| VfpHistogram::new(row.scale, row.threshold));
        *h.counts.entry(row.vfp).or_default() += row.count;
        h.total_blocks += row.count;
    }
    Ok(hists.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degradation_examples() {
        let same = vec![0.3, -1.0, 2.0];
        assert!(spectral_degradation(&same, &same, 1e-8)
            .iter()
            .all(|&v| v == 0.0));
        let d = spectral_degradation(&[2.0, 1.0], &[1.0, 1.0], 1e-8);
        assert_eq!(d, vec![0.5, 0.0]);
        let guarded = spectral_degradation(&[0.0], &[1.0], 1e-8);
        assert_eq!(guarded[0], 1e8);
        assert!(guarded[0].is_finite());
    }

    #[test]
    fn vfp_examples() {
        assert_eq!(find_vfp(&[0.1, 0.2, 0.5, 0.1], 0.3), 2);
        assert_eq!(find_vfp(&[0.0; 64], 0.01), 64);
        assert_eq!(find_vfp(&[0.4, 0.0, 0.0], 0.3), 0);
    }

    #[test]
    fn identical_pairs_put_all_mass_at_64() {
        let img = Tensor::rand_uniform(&[32, 24], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let pairs = vec![(img.clone(), img.clone(), 2.0), (img.clone(), img, 3.0)];
        let hists = profile_corpus(&pairs, &Thresholds::standard()).unwrap();
        assert_eq!(hists.len(), 2);
        for h in &hists {
            assert_eq!(h.total_blocks, 12);
            assert_eq!(h.counts.get(&64), Some(&12));
            assert_eq!(h.fraction_in(64, 64), 1.0);
        }
    }

    #[test]
    fn missing_threshold_is_a_config_error() {
        let img = Tensor::zeros(&[8, 8]);
        let pairs = vec![(img.clone(), img, 2.5)];
        assert!(matches!(
            profile_corpus(&pairs, &Thresholds::standard()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn totals_match_processed_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<_> = (0..3)
            .map(|i| Tensor::rand_uniform(&[40 + 8 * i, 48], 0.0, 1.0, &mut rng))
            .collect();
        let pairs = degraded_pairs(&imgs, &[2.0, 4.0]).unwrap();
        let hists =
            profile_corpus(&pairs, &Thresholds::uniform(&[2.0, 4.0], 0.3).unwrap()).unwrap();
        let blocks: u64 = imgs.iter().map(|m| (m.shape()[0] / 8 * 6) as u64).sum();
        for h in &hists {
            assert_eq!(h.total_blocks, blocks);
            assert_eq!(h.counts.values().sum::<u64>(), blocks);
        }
    }

    #[test]
    fn threshold_parsing() {
        let t = Thresholds::parse("2=0.09, 3=0.2,4=0.5").unwrap();
        assert_eq!(t, Thresholds::standard());
        assert_eq!(t.get(3.0).unwrap(), 0.2);
        assert!(Thresholds::parse("2:0.1").is_err());
        assert!(Thresholds::parse("2=-1").is_err());
        assert_eq!(t.scales(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_export_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut h = VfpHistogram::new(2.0, 0.09);
        for _ in 0..10 {
            h.add(2);
        }
        let path = dir.path().join("one.csv");
        let json = export_histogram(std::slice::from_ref(&h), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "scale,threshold,vfp,count,fraction\n2.0,0.09,2,10,1.0\n"
        );
        assert!(json.exists());
        assert_eq!(read_histogram_csv(&path).unwrap(), vec![h.clone()]);

        let empty = dir.path().join("empty.csv");
        export_histogram(&[VfpHistogram::new(2.0, 0.09)], &empty).unwrap();
        assert_eq!(
            std::fs::read_to_string(&empty).unwrap(),
            "scale,threshold,vfp,count,fraction\n"
        );

        let mut h3 = VfpHistogram::new(3.0, 0.2);
        h3.add(1);
        h3.add(4);
        let two = dir.path().join("two.csv");
        export_histogram(&[h.clone(), h3.clone()], &two).unwrap();
        let back = read_histogram_csv(&two).unwrap();
        assert_eq!(back, vec![h, h3]);
    }

    proptest! {
        #[test]
        fn vfp_is_monotone_in_threshold(
            f_d in proptest::collection::vec(0.0f64..2.0, 64),
            t1 in 0.001f64..2.0,
            dt in 0.0f64..1.0,
        ) {
            prop_assert!(find_vfp(&f_d, t1) <= find_vfp(&f_d, t1 + dt));
        }

        #[test]
        fn degradation_is_nonnegative_and_finite(
            hr in proptest::collection::vec(-10.0f64..10.0, 64),
            lr in proptest::collection::vec(-10.0f64..10.0, 64),
        ) {
            let d = spectral_degradation(&hr, &lr, DEGRADATION_EPS);
            prop_assert!(d.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
}
