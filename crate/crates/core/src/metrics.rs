//! Image quality and local-frequency metrics.

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

/// PSNR displayed for identical images.
pub const PSNR_CAP: f64 = 99.99;
pub const HISTOGRAM_BINS: usize = 32;
pub const HISTOGRAM_MAX_STD: f64 = 0.3;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::SizeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over all channels, restricted to `mask` when
/// given. Identical inputs give `+∞`.
pub fn psnr(a: &Image, b: &Image, peak: f64, mask: Option<&Mask>) -> Result<f64> {
    check_same(a, b)?;
    if let Some(m) = mask {
        if m.width != a.width() || m.height != a.height() {
            return Err(Error::SizeMismatch("mask does not match image".into()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (pa, pb)) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m.data[i]) {
            continue;
        }
        for k in 0..3 {
            let d = pa[k] - pb[k];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::SizeMismatch("empty mask".into()));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// PSNR with `+∞` shown as [`PSNR_CAP`].
pub fn display_psnr(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of the luminance channels, 11×11 Gaussian window (σ = 1.5),
/// valid positions only.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    const WIN: usize = 11;
    let (w, h) = (a.width(), a.height());
    if w < WIN || h < WIN {
        return Err(Error::SizeMismatch(format!("SSIM needs at least {WIN}x{WIN}, got {w}x{h}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = gaussian_window(WIN, 1.5);
    let (la, lb) = (a.luminance(), b.luminance());
    let mut total = 0.0;
    let mut n = 0usize;
    for y in 0..=h - WIN {
        for x in 0..=w - WIN {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..WIN {
                for i in 0..WIN {
                    let wt = g[j] * g[i];
                    let idx = (y + j) * w + x + i;
                    let (va, vb) = (la[idx], lb[idx]);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Per-pixel population STD of the 5×5 luminance neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Borders are handled by clamping coordinates into the image.
pub fn frequency_map(img: &Image) -> FrequencyMap {
    let (w, h) = (img.width(), img.height());
    let lum = img.luminance();
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut patch = [0.0; 25];
            let mut k = 0;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    patch[k] = lum[yy * w + xx];
                    k += 1;
                }
            }
            // shifted by the first entry so constant patches give exactly 0
            let p0 = patch[0];
            patch.iter_mut().for_each(|v| *v -= p0);
            let mean = patch.iter().sum::<f64>() / 25.0;
            let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
            values.push(var.sqrt());
        }
    }
    FrequencyMap {
        width: w,
        height: h,
        values,
    }
}

impl FrequencyMap {
    /// Mean over pixels selected by `mask`, or all pixels.
    pub fn mean(&self, mask: Option<&Mask>) -> f64 {
        let sel: Vec<f64> = self
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m.data[*i]))
            .map(|(_, &v)| v)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

/// Normalized histogram of patch STDs over `[0, max_std]`; larger values
/// land in the last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyHistogram {
    pub max_std: f64,
    pub mass: Vec<f64>,
}

impl FrequencyHistogram {
    pub fn from_map(map: &FrequencyMap, bins: usize, max_std: f64) -> Self {
        let mut mass = vec![0.0; bins];
        for &v in &map.values {
            let b = ((v / max_std) * bins as f64).floor().max(0.0) as usize;
            mass[b.min(bins - 1)] += 1.0;
        }
        let n = map.values.len().max(1) as f64;
        mass.iter_mut().for_each(|m| *m /= n);
        Self { max_std, mass }
    }

    /// 32 bins over `[0, 0.3]`.
    pub fn standard(map: &FrequencyMap) -> Self {
        Self::from_map(map, HISTOGRAM_BINS, HISTOGRAM_MAX_STD)
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let b = self.mass.len();
        (0..=b).map(|i| self.max_std * i as f64 / b as f64).collect()
    }
}

/// L1 distance between histograms with identical binning.
pub fn f_dist(h1: &FrequencyHistogram, h2: &FrequencyHistogram) -> Result<f64> {
    if h1.mass.len() != h2.mass.len() || h1.max_std != h2.max_std {
        return Err(Error::SizeMismatch("histograms use different binning".into()));
    }
    Ok(h1.mass.iter().zip(&h2.mass).map(|(a, b)| (a - b).abs()).sum())
}

/// F-Dist between the standard frequency histograms of two images.
pub fn image_f_dist(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    f_dist(
        &FrequencyHistogram::standard(&frequency_map(a)),
        &FrequencyHistogram::standard(&frequency_map(b)),
    )
}

/// Signed luminance error `pred − reference` as blue (negative) through
/// white to red (positive), saturating at `±range`.
pub fn error_map(pred: &Image, reference: &Image, range: f64) -> Result<Image> {
    check_same(pred, reference)?;
    let (lp, lr) = (pred.luminance(), reference.luminance());
    let data = lp
        .iter()
        .zip(&lr)
        .flat_map(|(p, r)| {
            let t = ((p - r) / range).clamp(-1.0, 1.0);
            if t < 0.0 {
                [1.0 + t, 1.0 + t, 1.0]
            } else {
                [1.0, 1.0 - t, 1.0 - t]
            }
        })
        .collect();
    Image::new(pred.width(), pred.height(), data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
    pub f_dist: f64,
}

pub fn score(pred: &Image, reference: &Image) -> Result<ImageScores> {
    Ok(ImageScores {
        psnr: psnr(pred, reference, 1.0, None)?,
        ssim: ssim(pred, reference)?,
        f_dist: image_f_dist(pred, reference)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .flat_map(|(x, y)| [f(x, y); 3])
            .collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn psnr_anchors() {
        let a = gray(8, 8, |x, y| 0.05 * ((x + y) % 5) as f64);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0, None).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &b, 1.0, None).unwrap(), psnr(&b, &a, 1.0, None).unwrap());
        assert_eq!(psnr(&a, &a, 1.0, None).unwrap(), f64::INFINITY);
        assert_eq!(display_psnr(f64::INFINITY), PSNR_CAP);
        let full = Mask {
            width: 8,
            height: 8,
            data: vec![true; 64],
        };
        assert_eq!(psnr(&a, &b, 1.0, Some(&full)).unwrap(), psnr(&a, &b, 1.0, None).unwrap());
        assert!(psnr(&a, &gray(4, 4, |_, _| 0.0), 1.0, None).is_err());
    }

    #[test]
    fn ssim_anchors() {
        let a = gray(24, 20, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let checker = gray(22, 22, |x, y| ((x + y) % 2) as f64);
        let inv = checker.map(|v| 1.0 - v);
        assert!(ssim(&checker, &inv).unwrap() < -0.99);
        let b = gray(24, 20, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0 + if (x + y) % 2 == 0 { 0.05 } else { -0.05 });
        let shift = 0.1;
        let d = ssim(&a, &b).unwrap() - ssim(&a.map(|v| v + shift), &b.map(|v| v + shift)).unwrap();
        assert!(d.abs() < 1e-3, "{d}");
        assert!(ssim(&gray(10, 10, |_, _| 0.0), &gray(10, 10, |_, _| 0.0)).is_err());
    }

    #[test]
    fn frequency_map_anchors() {
        let c = frequency_map(&gray(9, 9, |_, _| 0.4));
        assert!(c.values.iter().all(|&v| v == 0.0));
        let dot = frequency_map(&gray(9, 9, |x, y| if (x, y) == (4, 4) { 1.0 } else { 0.0 }));
        assert!((dot.values[4 * 9 + 4] - 24f64.sqrt() / 25.0).abs() < 1e-12);
        let edge = |s: usize| frequency_map(&gray(16, 8, move |x, _| if x >= s { 1.0 } else { 0.0 }));
        let (a, b) = (edge(6), edge(9));
        for y in 0..8 {
            for x in 2..11 {
                assert_eq!(a.values[y * 16 + x], b.values[y * 16 + x + 3]);
            }
        }
    }

    #[test]
    fn histogram_anchors() {
        let m = frequency_map(&gray(12, 12, |x, y| ((x * y) % 3) as f64 * 0.2));
        let h = FrequencyHistogram::standard(&m);
        assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(f_dist(&h, &h).unwrap(), 0.0);
        let mut a = FrequencyHistogram {
            max_std: 0.3,
            mass: vec![0.0; 32],
        };
        let mut b = a.clone();
        a.mass[0] = 1.0;
        b.mass[5] = 1.0;
        assert_eq!(f_dist(&a, &b).unwrap(), 2.0);
        let c = FrequencyHistogram {
            max_std: 0.3,
            mass: vec![1.0],
        };
        assert!(f_dist(&a, &c).is_err());
    }

    #[test]
    fn error_map_colors() {
        let a = gray(2, 1, |x, _| x as f64 * 0.5);
        let z = gray(2, 1, |_, _| 0.25);
        let e = error_map(&a, &z, 0.25).unwrap();
        let close = |p: [f64; 3], q: [f64; 3]| p.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-12);
        assert!(close(e.pixel(0, 0), [0.0, 0.0, 1.0]));
        assert!(close(e.pixel(1, 0), [1.0, 0.0, 0.0]));
    }

    fn hist_strategy() -> impl Strategy<Value = FrequencyHistogram> {
        prop::collection::vec(0.0f64..1.0, 8).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            FrequencyHistogram {
                max_std: 0.3,
                mass: v.iter().map(|x| x / s).collect(),
            }
        })
    }

    proptest! {
        #[test]
        fn f_dist_triangle(a in hist_strategy(), b in hist_strategy(), c in hist_strategy()) {
            let ab = f_dist(&a, &b).unwrap();
            let bc = f_dist(&b, &c).unwrap();
            let ac = f_dist(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn frequency_map_is_homogeneous(seed in 0u64..1000, alpha in 0.1f64..3.0) {
            let img = gray(7, 6, |x, y| (((x * 31 + y * 17) as u64 ^ seed) % 13) as f64 / 13.0);
            let a = frequency_map(&img.map(|v| alpha * v));
            let b = frequency_map(&img);
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - alpha * y).abs() < 1e-12);
            }
        }
    }
}
