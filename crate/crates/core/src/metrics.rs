//! Evaluation primitives: mIoU, gIoU/cIoU, edit fidelity, PSNR/SSIM,
//! codebook perplexity.
//!
//! Degenerate-denominator conventions are explicit:
//! - IoU with empty union: 1 if prediction and ground truth are both empty,
//!   else 0.
//! - `edit_fidelity`: empty mask marks inside-agreement undefined, full mask
//!   marks outside-PSNR undefined.
//! - PSNR is capped at 60 dB; zero MSE reports the cap.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::grid::Mask;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty usage counts")]
    EmptyCounts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Undefined,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            MetricValue::Undefined => None,
        }
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v:.6}"),
            MetricValue::Undefined => write!(f, "undefined"),
        }
    }
}

pub const PSNR_CAP_DB: f64 = 60.0;

fn threshold_mask(pred: &Array2<f32>, thr: f64) -> Mask {
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    Mask::from_fn(w, h, |x, y| pred[(y, x)] as f64 >= thr)
}

fn intersection_union(pred: &Mask, gt: &Mask) -> (usize, usize) {
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..gt.h {
        for x in 0..gt.w {
            let p = pred.get(x, y);
            let g = gt.get(x, y);
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    (inter, union)
}

fn iou_one(pred: &Mask, gt: &Mask) -> f64 {
    let (inter, union) = intersection_union(pred, gt);
    if union == 0 {
        // both empty
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean per-sample IoU of thresholded predictions.
pub fn miou(pred: &[Array2<f32>], gt: &[Mask], thr: f64) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Shape(format!(
            "{} predictions vs {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if p.shape() != [g.h, g.w] {
            return Err(MetricError::Shape(format!(
                "pred {:?} vs gt {}x{}",
                p.shape(),
                g.h,
                g.w
            )));
        }
        acc += iou_one(&threshold_mask(p, thr), g);
    }
    Ok(acc / pred.len().max(1) as f64)
}

/// (gIoU, cIoU): mean of per-sample IoUs, and ratio of summed intersections
/// to summed unions.
pub fn giou_ciou(pred: &[Array2<f32>], gt: &[Mask], thr: f64) -> Result<(f64, f64), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Shape("count mismatch".into()));
    }
    let mut gsum = 0.0;
    let mut isum = 0usize;
    let mut usum = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let pm = threshold_mask(p, thr);
        gsum += iou_one(&pm, g);
        let (i, u) = intersection_union(&pm, g);
        isum += i;
        usum += u;
    }
    let giou = gsum / pred.len().max(1) as f64;
    let ciou = if usum == 0 {
        1.0
    } else {
        isum as f64 / usum as f64
    };
    Ok((giou, ciou))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR in dB over a pixel subset (all channels), images in [0,1].
fn psnr_region(a: &Array3<f32>, b: &Array3<f32>, members: impl Fn(usize, usize) -> bool) -> MetricValue {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut se = 0.0f64;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !members(x, y) {
                continue;
            }
            for ch in 0..c {
                let d = a[(ch, y, x)] as f64 - b[(ch, y, x)] as f64;
                se += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        MetricValue::Undefined
    } else {
        MetricValue::Value(psnr_from_mse(se / n as f64))
    }
}

pub struct EditFidelity {
    pub outside_psnr: MetricValue,
    pub inside_agreement: MetricValue,
}

/// Color tolerance for inside-agreement, in [0,1] units.
pub const INSIDE_TOL: f64 = 16.0 / 255.0;

/// Localization fidelity of an edit: PSNR(edited, source) outside the mask,
/// and the fraction of mask pixels whose edited color is within
/// [`INSIDE_TOL`] of the target on every channel.
pub fn edit_fidelity(
    source: &Array3<f32>,
    edited: &Array3<f32>,
    target: &Array3<f32>,
    gt_mask: &Mask,
) -> Result<EditFidelity, MetricError> {
    for (name, img) in [("edited", edited), ("target", target)] {
        if img.shape() != source.shape() {
            return Err(MetricError::Shape(format!("{name} shape differs from source")));
        }
    }
    if source.shape()[1] != gt_mask.h || source.shape()[2] != gt_mask.w {
        return Err(MetricError::Shape("mask/image shape mismatch".into()));
    }
    let outside_psnr = if gt_mask.is_full() {
        MetricValue::Undefined
    } else {
        psnr_region(edited, source, |x, y| !gt_mask.get(x, y))
    };
    let inside_agreement = if gt_mask.is_empty() {
        MetricValue::Undefined
    } else {
        let mut ok = 0usize;
        let mut n = 0usize;
        for (x, y) in gt_mask.fg_pixels() {
            n += 1;
            let close = (0..3).all(|ch| {
                (edited[(ch, y, x)] as f64 - target[(ch, y, x)] as f64).abs() <= INSIDE_TOL
            });
            if close {
                ok += 1;
            }
        }
        MetricValue::Value(ok as f64 / n as f64)
    };
    Ok(EditFidelity {
        outside_psnr,
        inside_agreement,
    })
}

/// Full-image PSNR (dB, capped) and SSIM.
///
/// SSIM uses uniform 8x8 sliding windows (stride 1) on the channel-mean
/// luminance with the standard constants C1=(0.01)^2, C2=(0.03)^2 at L=1.
pub fn psnr_ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<(f64, f64), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape("image shapes differ".into()));
    }
    let mut se = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x as f64 - *y as f64;
        se += d * d;
    }
    let psnr = psnr_from_mse(se / a.len() as f64);
    Ok((psnr, ssim_gray(&luminance(a), &luminance(b))))
}

fn luminance(x: &Array3<f32>) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for xc in 0..w {
            let mut acc = 0.0f64;
            for ch in 0..c {
                acc += x[(ch, y, xc)] as f64;
            }
            out[(y, xc)] = acc / c as f64;
        }
    }
    out
}

const SSIM_WIN: usize = 8;

fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let win = SSIM_WIN.min(h).min(w);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let n = (win * win) as f64;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(h - win) {
        for x0 in 0..=(w - win) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    ma += a[(y0 + dy, x0 + dx)];
                    mb += b[(y0 + dy, x0 + dx)];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let da = a[(y0 + dy, x0 + dx)] - ma;
                    let db = b[(y0 + dy, x0 + dx)] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= n;
            vb /= n;
            cov /= n;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += s;
            count += 1;
        }
    }
    acc / count as f64
}

/// exp(entropy) of normalized usage counts.
pub fn codebook_perplexity(counts: &[u64]) -> Result<f64, MetricError> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(MetricError::EmptyCounts);
    }
    let mut h = 0.0f64;
    for &c in counts {
        if c == 0 {
            continue;
        }
        let p = c as f64 / total as f64;
        h -= p * p.ln();
    }
    Ok(h.exp())
}

/// A named collection of metric values with optional per-sample breakdown.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, MetricValue>,
    pub per_sample: Vec<(String, BTreeMap<String, MetricValue>)>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn set(&mut self, name: &str, v: MetricValue) {
        self.metrics.insert(name.to_string(), v);
    }

    /// Fixed-order text table (sorted metric names).
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("config_digest {}\n", self.config_digest));
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k:<24} {v}\n"));
        }
        out
    }

    /// Full record including the per-sample breakdown.
    pub fn render_full(&self) -> String {
        let mut out = self.render();
        for (id, metrics) in &self.per_sample {
            out.push_str(&format!("sample id={id}"));
            for (k, v) in metrics {
                out.push_str(&format!(" {k}={v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    fn prob_from(m: &Mask) -> Array2<f32> {
        let mut p = Array2::<f32>::zeros((m.h, m.w));
        for (x, y) in m.fg_pixels() {
            p[(y, x)] = 1.0;
        }
        p
    }

    #[test]
    fn miou_identity_and_complement() {
        let g = mask_from(&["##..", "##..", "....", "...."]);
        assert_eq!(miou(&[prob_from(&g)], &[g.clone()], 0.5).unwrap(), 1.0);
        let comp = g.complement();
        assert_eq!(miou(&[prob_from(&comp)], &[g], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn giou_ciou_two_sample_identity() {
        let g1 = mask_from(&["##", ".."]);
        let g2 = mask_from(&["..", "##"]);
        // IoUs {1, 0} with equal union sizes -> both aggregates 0.5
        let preds = vec![prob_from(&g1), prob_from(&g1)];
        let gts = vec![g1, g2];
        let (g, c) = giou_ciou(&preds, &gts, 0.5).unwrap();
        assert!((g - 0.5).abs() < 1e-12);
        // unions: 2 and 4 -> cIoU = 2/6
        assert!((c - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_giou_equals_ciou() {
        let g = mask_from(&["#.", ".."]);
        let mut p = Array2::<f32>::zeros((2, 2));
        p[(0, 0)] = 1.0;
        p[(1, 1)] = 1.0;
        let (gi, ci) = giou_ciou(&[p], &[g], 0.5).unwrap();
        assert_eq!(gi, ci);
    }

    #[test]
    fn psnr_of_uniform_offset_is_20db() {
        let a = Array3::<f32>::from_elem((3, 8, 8), 0.3);
        let b = a.mapv(|v| v + 0.1);
        let (p, _) = psnr_ssim(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-6, "psnr {p}");
    }

    #[test]
    fn psnr_identical_hits_cap_and_ssim_one() {
        let a = Array3::<f32>::from_shape_fn((3, 9, 9), |(c, y, x)| {
            ((c + y * x) % 7) as f32 / 7.0
        });
        let (p, s) = psnr_ssim(&a, &a).unwrap();
        assert_eq!(p, PSNR_CAP_DB);
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn edit_fidelity_identities() {
        let src = Array3::<f32>::from_elem((3, 4, 4), 0.5);
        let mut tgt = src.clone();
        let m = mask_from(&["##..", "##..", "....", "...."]);
        for (x, y) in m.fg_pixels() {
            for c in 0..3 {
                tgt[(c, y, x)] = 0.9;
            }
        }
        // edited == source: outside PSNR capped
        let f = edit_fidelity(&src, &src, &tgt, &m).unwrap();
        assert_eq!(f.outside_psnr, MetricValue::Value(PSNR_CAP_DB));
        assert_eq!(f.inside_agreement, MetricValue::Value(0.0));
        // edited == target: inside agreement 1.0
        let f = edit_fidelity(&src, &tgt, &tgt, &m).unwrap();
        assert_eq!(f.inside_agreement, MetricValue::Value(1.0));
    }

    #[test]
    fn edit_fidelity_degenerate_masks() {
        let src = Array3::<f32>::zeros((3, 4, 4));
        let empty = Mask::new(4, 4);
        let full = empty.complement();
        let f = edit_fidelity(&src, &src, &src, &empty).unwrap();
        assert_eq!(f.inside_agreement, MetricValue::Undefined);
        let f = edit_fidelity(&src, &src, &src, &full).unwrap();
        assert_eq!(f.outside_psnr, MetricValue::Undefined);
    }

    #[test]
    fn perplexity_uniform_and_onehot() {
        let k = 16usize;
        let uniform = vec![5u64; k];
        assert!((codebook_perplexity(&uniform).unwrap() - k as f64).abs() < 1e-9);
        let mut onehot = vec![0u64; k];
        onehot[3] = 42;
        assert!((codebook_perplexity(&onehot).unwrap() - 1.0).abs() < 1e-12);
        assert!(codebook_perplexity(&[0, 0]).is_err());
    }
}
