//! Image comparison measures: final-embedding cosine, windowed SSIM on luma
//! and Pearson correlation over all pixel values.

use serde::{Deserialize, Serialize};

use crate::encoder::ContrastiveEncoder;
use crate::error::{Error, Result};
use crate::image::{self, SIZE};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_L: f64 = 1.0;
pub const SSIM_C1: f64 = (0.01 * SSIM_L) * (0.01 * SSIM_L);
pub const SSIM_C2: f64 = (0.03 * SSIM_L) * (0.03 * SSIM_L);
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Pearson r; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

fn same_image_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    image::check_image(a)?;
    image::check_image(b)
}

/// Pearson r of the flattened RGB values.
pub fn pixel_correlation(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_image_shape(a, b)?;
    Ok(pearson(&a.to_f64_vec(), &b.to_f64_vec()))
}

/// Mean over channels of the per-channel Pearson r.
pub fn pixel_correlation_per_channel(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_image_shape(a, b)?;
    let chan = |t: &Tensor, c: usize| t.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect::<Vec<_>>();
    Ok((0..3).map(|c| pearson(&chan(a, c), &chan(b, c))).sum::<f64>() / 3.0)
}

pub fn luma(t: &Tensor) -> Vec<f64> {
    t.data()
        .chunks(3)
        .map(|p| LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64)
        .collect()
}

/// Mean SSIM over `8 x 8` uniform windows at stride 4 on luma.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_image_shape(a, b)?;
    let (ya, yb) = (luma(a), luma(b));
    let positions: Vec<usize> = (0..=SIZE - SSIM_WINDOW).step_by(SSIM_STRIDE).collect();
    let m = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for &oy in &positions {
        for &ox in &positions {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in oy..oy + SSIM_WINDOW {
                for x in ox..ox + SSIM_WINDOW {
                    sa += ya[y * SIZE + x];
                    sb += yb[y * SIZE + x];
                }
            }
            let (ma, mb) = (sa / m, sb / m);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for y in oy..oy + SSIM_WINDOW {
                for x in ox..ox + SSIM_WINDOW {
                    let (da, db) = (ya[y * SIZE + x] - ma, yb[y * SIZE + x] - mb);
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            let (vaa, vbb, vab) = (vaa / m, vbb / m, vab / m);
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (vaa + vbb + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (positions.len() * positions.len()) as f64)
}

/// Cosine of the final image embeddings.
pub fn semantic_similarity(a: &Tensor, b: &Tensor, enc: &ContrastiveEncoder) -> Result<f64> {
    same_image_shape(a, b)?;
    let ea = enc.image_features(a)?.embedding;
    let eb = enc.image_features(b)?.embedding;
    Ok(embedding_cosine(&ea, &eb))
}

pub fn embedding_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub item: usize,
    pub clip_cosine: f64,
    pub ssim: f64,
    pub pcc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Report cosine clipped to `[0, 1]`.
    pub clip_cosine: bool,
    /// Average per-channel correlations instead of pooling RGB.
    pub per_channel_pcc: bool,
}

pub fn evaluate_pair(item: usize, recon: &Tensor, truth: &Tensor, enc: &ContrastiveEncoder, opts: &MetricsOptions) -> Result<MetricsRecord> {
    let mut cos = semantic_similarity(recon, truth, enc)?;
    if opts.clip_cosine {
        cos = cos.clamp(0.0, 1.0);
    }
    let pcc = if opts.per_channel_pcc {
        pixel_correlation_per_channel(recon, truth)?
    } else {
        pixel_correlation(recon, truth)?
    };
    let rec = MetricsRecord {
        item,
        clip_cosine: cos,
        ssim: ssim(recon, truth)?,
        pcc,
    };
    if !(rec.clip_cosine.is_finite() && rec.ssim.is_finite() && rec.pcc.is_finite()) {
        return Err(Error::NonFinite("metrics"));
    }
    Ok(rec)
}

/// Mean and standard error of each column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub clip_cosine: f64,
    pub ssim: f64,
    pub pcc: f64,
    pub clip_cosine_se: f64,
    pub ssim_se: f64,
    pub pcc_se: f64,
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

pub fn aggregate(records: &[MetricsRecord]) -> Aggregate {
    let col = |f: fn(&MetricsRecord) -> f64| mean_se(&records.iter().map(f).collect::<Vec<_>>());
    let (c, cse) = col(|r| r.clip_cosine);
    let (s, sse) = col(|r| r.ssim);
    let (p, pse) = col(|r| r.pcc);
    Aggregate {
        count: records.len(),
        clip_cosine: c,
        ssim: s,
        pcc: p,
        clip_cosine_se: cse,
        ssim_se: sse,
        pcc_se: pse,
    }
}

/// Constants used for every report, written next to the numbers.
pub fn settings_json() -> serde_json::Value {
    serde_json::json!({
        "ssim": {
            "window": SSIM_WINDOW,
            "stride": SSIM_STRIDE,
            "c1": SSIM_C1,
            "c2": SSIM_C2,
            "dynamic_range": SSIM_L,
            "luma_weights": LUMA,
        },
        "pcc": "pearson over flattened rgb",
        "clip": "cosine of final image embeddings",
    })
}

#[cfg(test)]
mod tests;
