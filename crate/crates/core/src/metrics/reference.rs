//! Slow, direct implementations used to cross-check the metric code.
//!
//! Nothing here shares code with the sweep in the parent module: every
//! threshold is evaluated by scanning all cells.

use crate::annotation::Mask;
use crate::scalar::Real;

use super::Heatmap;

fn counts_at<T: Real>(heatmap: &Heatmap<T>, mask: &Mask, tau: T) -> (usize, usize) {
    let mut selected = 0;
    let mut hits = 0;
    for i in 0..heatmap.values().len() {
        if heatmap.values()[i] >= tau {
            selected += 1;
            if mask.cells[i] {
                hits += 1;
            }
        }
    }
    (selected, hits)
}

fn sweep<T: Real>(heatmap: &Heatmap<T>, mask: &Mask, thresholds: &[T]) -> f64 {
    let positives = mask.cells.iter().filter(|&&g| g).count();
    assert!(positives > 0, "mask must have a foreground cell");
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for &tau in thresholds {
        let (selected, hits) = counts_at(heatmap, mask, tau);
        if selected == 0 {
            continue;
        }
        let recall = hits as f64 / positives as f64;
        auc += hits as f64 / selected as f64 * (recall - prev_recall);
        prev_recall = recall;
    }
    auc
}

/// Precision-recall area over `n` evenly spaced thresholds from the maximum
/// down to the minimum heatmap value.
pub fn riemann_auc<T: Real>(heatmap: &Heatmap<T>, mask: &Mask, n: usize) -> f64 {
    assert!(n >= 2);
    let (lo, hi) = (heatmap.min().as_f64(), heatmap.max().as_f64());
    let thresholds: Vec<f64> = (0..n)
        .map(|k| lo + (hi - lo) * ((n - 1 - k) as f64) / ((n - 1) as f64))
        .collect();
    sweep(&heatmap.cast::<f64>(), mask, &thresholds)
}

/// Evaluates the sum at every distinct heatmap value, one full scan each.
pub fn brute_force_auc<T: Real>(heatmap: &Heatmap<T>, mask: &Mask) -> f64 {
    let mut distinct: Vec<T> = Vec::new();
    for &v in heatmap.values() {
        if !distinct.contains(&v) {
            distinct.push(v);
        }
    }
    distinct.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sweep(heatmap, mask, &distinct)
}

/// Checks every cell against the maximum found by a separate scan.
pub fn brute_force_peak_in_box<T: Real>(heatmap: &Heatmap<T>, mask: &Mask) -> bool {
    let mut best = heatmap.values()[0];
    for &v in heatmap.values() {
        if v > best {
            best = v;
        }
    }
    (0..heatmap.values().len()).any(|i| heatmap.values()[i] == best && mask.cells[i])
}

/// Ratio of mean non-event peak to mean in-box event peak. `frames` holds
/// `(heatmap, mask, is_ave)`.
pub fn brute_force_pnsr<T: Real>(frames: &[(&Heatmap<T>, &Mask, bool)]) -> f64 {
    let mut noise = 0.0;
    let mut n_noise = 0usize;
    let mut signal = 0.0;
    let mut n_signal = 0usize;
    for (h, m, ave) in frames {
        if *ave {
            let mut best = f64::NEG_INFINITY;
            for i in 0..h.values().len() {
                if m.cells[i] && h.values()[i].as_f64() > best {
                    best = h.values()[i].as_f64();
                }
            }
            signal += best;
            n_signal += 1;
        } else {
            let mut best = f64::NEG_INFINITY;
            for &v in h.values() {
                if v.as_f64() > best {
                    best = v.as_f64();
                }
            }
            noise += best;
            n_noise += 1;
        }
    }
    (noise / n_noise as f64) / (signal / n_signal as f64)
}
