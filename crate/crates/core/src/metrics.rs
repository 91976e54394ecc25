//! Evaluation metrics and the held-out sequence evaluation.

use std::fmt;
use std::time::Instant;

use crate::deformer;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::Model;
use crate::objective;
use crate::scene::Camera;

/// Reported instead of +∞ for exact matches.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64)
}

/// 10·log10(1/MSE) for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    objective::ssim(a, b)
}

/// Frame difference `cur − prev` mapped to [0, 1] by (d + 1)/2.
pub fn shifted_difference(prev: &Image, cur: &Image) -> Result<Image> {
    prev.check_same_shape(cur)?;
    Ok(Image { width: cur.width, height: cur.height, data: cur.data.iter().zip(&prev.data).map(|(c, p)| (c - p + 1.0) * 0.5).collect() })
}

/// Mean PSNR between rendered and ground-truth consecutive-frame differences.
pub fn tpsnr(rendered: &[Image], gt: &[Image]) -> Result<f64> {
    if rendered.len() != gt.len() {
        return Err(Error::Contract(format!("{} rendered frames vs {} ground-truth frames", rendered.len(), gt.len())));
    }
    if rendered.len() < 2 {
        return Err(Error::Contract("tPSNR needs at least two frames".into()));
    }
    let mut sum = 0.0;
    for t in 1..rendered.len() {
        let dr = shifted_difference(&rendered[t - 1], &rendered[t])?;
        let dg = shifted_difference(&gt[t - 1], &gt[t])?;
        sum += psnr(&dr, &dg)?;
    }
    Ok(sum / (rendered.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub view: String,
    /// Means over frames.
    pub psnr: f64,
    pub ssim: f64,
    pub tpsnr: f64,
    pub frames: Vec<FrameMetrics>,
    pub network_forwards: u64,
    /// Frames per second of the inference path, measured over the whole sequence.
    pub render_fps: f64,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "view={} frames={} psnr={:.4} ssim={:.5} tpsnr={:.4} network_forwards={} render_fps={:.1}",
            self.view,
            self.frames.len(),
            self.psnr,
            self.ssim,
            self.tpsnr,
            self.network_forwards,
            self.render_fps
        )?;
        for m in &self.frames {
            writeln!(f, "  frame={} psnr={:.4} ssim={:.5}", m.frame, m.psnr, m.ssim)?;
        }
        Ok(())
    }
}

/// Renders `times` through the windowed inference path and scores against `gt`.
pub fn eval_sequence(model: &Model, cam: &Camera, times: &[f64], gt: &[Image], window: usize) -> Result<MetricsReport> {
    if times.len() != gt.len() {
        return Err(Error::Contract(format!("{} timestamps but {} ground-truth frames", times.len(), gt.len())));
    }
    if times.is_empty() {
        return Err(Error::Contract("no frames to evaluate".into()));
    }
    let calls_before = deformer::forward_calls();
    let start = Instant::now();
    let rendered = model.render_sequence(cam, times, window)?;
    let seconds = start.elapsed().as_secs_f64();
    let network_forwards = deformer::forward_calls() - calls_before;
    let mut frames = Vec::with_capacity(gt.len());
    for (i, (r, g)) in rendered.iter().zip(gt).enumerate() {
        frames.push(FrameMetrics { frame: i, psnr: psnr(r, g)?, ssim: ssim(r, g)? });
    }
    let n = frames.len() as f64;
    let tpsnr = if rendered.len() >= 2 { tpsnr(&rendered, gt)? } else { PSNR_CAP };
    Ok(MetricsReport {
        view: cam.id.clone(),
        psnr: frames.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: frames.iter().map(|m| m.ssim).sum::<f64>() / n,
        tpsnr,
        frames,
        network_forwards,
        render_fps: if seconds > 0.0 { rendered.len() as f64 / seconds } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(v: f64) -> Image {
        Image::filled(4, 4, v)
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&filled(0.3), &filled(0.3)).unwrap(), PSNR_CAP);
        // MSE = 0.01
        assert!((psnr(&filled(0.5), &filled(0.6)).unwrap() - 20.0).abs() < 1e-9);
        // MSE = 1
        assert_eq!(psnr(&filled(0.0), &filled(1.0)).unwrap(), 0.0);
        assert!(psnr(&filled(0.0), &Image::filled(3, 4, 0.0)).is_err());
    }

    #[test]
    fn tpsnr_of_identical_sequences_is_capped() {
        let seq = vec![filled(0.1), filled(0.4), filled(0.2)];
        assert_eq!(tpsnr(&seq, &seq).unwrap(), PSNR_CAP);
    }

    #[test]
    fn tpsnr_ignores_constant_offsets() {
        // a constant bias cancels in frame differences
        let gt = vec![filled(0.1), filled(0.4), filled(0.2)];
        let biased: Vec<Image> = gt.iter().map(|i| Image { data: i.data.iter().map(|v| v + 0.05).collect(), ..i.clone() }).collect();
        assert_eq!(tpsnr(&biased, &gt).unwrap(), PSNR_CAP);
        assert!(psnr(&biased[0], &gt[0]).unwrap() < 30.0);
    }

    #[test]
    fn shifted_difference_maps_to_unit_range() {
        let d = shifted_difference(&filled(1.0), &filled(0.0)).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
        let d = shifted_difference(&filled(0.0), &filled(1.0)).unwrap();
        assert!(d.data.iter().all(|&v| v == 1.0));
    }
}
