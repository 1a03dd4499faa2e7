//! Image fidelity and retrieval metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;

/// `10·log10(peak²/MSE)`, capped at 99 dB for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Single-scale SSIM over 8×8 windows at stride 1 with population
/// statistics, averaged over windows and leading channels. Images are
/// `[…, H, W]` with `H, W ≥ 8`.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let s = a.shape();
    if s.len() < 2 || s[s.len() - 2] < SSIM_WINDOW || s[s.len() - 1] < SSIM_WINDOW {
        return Err(Error::shape("ssim", s, &[SSIM_WINDOW, SSIM_WINDOW]));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = a.numel() / (h * w);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let pa = &a.data()[p * h * w..(p + 1) * h * w];
        let pb = &b.data()[p * h * w..(p + 1) * h * w];
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (u, v) = (pa[y * w + x], pb[y * w + x]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Fraction of rows `i` whose partner `zb_i` ranks among the `k` highest
/// dot products with `za_i`. Ties rank the lower index first.
pub fn retrieval_topk(za: &Tensor, zb: &Tensor, k: usize) -> Result<f64> {
    let (sa, sb) = (za.shape(), zb.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("retrieval_topk", sa, sb));
    }
    let n = sa[0];
    if k == 0 || k > n {
        return Err(Error::Param(format!("k = {k} must lie in 1..={n}")));
    }
    let dot = |i: usize, j: usize| za.row(i).iter().zip(zb.row(j)).map(|(x, y)| x * y).sum::<f64>();
    let mut hits = 0;
    for i in 0..n {
        let own = dot(i, i);
        let ahead = (0..n)
            .filter(|&j| j != i)
            .filter(|&j| {
                let s = dot(i, j);
                s > own || (s == own && j < i)
            })
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
