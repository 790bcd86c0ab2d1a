//! Independent reference implementations used as test oracles.

use fpdeblur_core::dataops::GrayImage;
use fpdeblur_core::evaluation::MatchScore;

/// Direct 2-D convolution with the outer-product kernel and mirror borders,
/// written independently of the library's separable path.
pub fn dense_blur(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let k = {
        let n = (6.0 * sigma - 1.0).round() as i64;
        if n % 2 == 0 {
            n + 1
        } else {
            n
        }
    };
    let r = k / 2;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mirror = |i: i64, n: i64| {
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        if m < n {
            m
        } else {
            period - m
        }
    };
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = img.get(mirror(x + dx, w) as usize, mirror(y + dy, h) as usize);
                    acc += g[(dy + r) as usize] * g[(dx + r) as usize] / (total * total) * v;
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Direct counting over every distinct threshold, EER by intersecting the
/// polyline from (0, 0) with the line FAR = 1 − TAR, AUC by pair ranking.
pub struct RocOracle {
    pub thresholds: Vec<f64>,
    pub tar: Vec<f64>,
    pub far: Vec<f64>,
    pub eer: f64,
    pub auc: f64,
}

pub fn roc_oracle(scores: &[MatchScore]) -> RocOracle {
    let gen: Vec<f64> = scores.iter().filter(|s| s.genuine).map(|s| s.score).collect();
    let imp: Vec<f64> = scores.iter().filter(|s| !s.genuine).map(|s| s.score).collect();
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let frac = |v: &[f64], t: f64| v.iter().filter(|&&x| x >= t).count() as f64 / v.len() as f64;
    let tar: Vec<f64> = thresholds.iter().map(|&t| frac(&gen, t)).collect();
    let far: Vec<f64> = thresholds.iter().map(|&t| frac(&imp, t)).collect();

    let mut pts = vec![(0.0, 0.0)];
    pts.extend(far.iter().copied().zip(tar.iter().copied()));
    let mut eer = f64::NAN;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x1 + y1 >= 1.0 {
            // Solve x0 + a(x1 − x0) = 1 − (y0 + a(y1 − y0)) for a.
            let denom = (x1 - x0) + (y1 - y0);
            let a = if denom == 0.0 { 1.0 } else { (1.0 - x0 - y0) / denom };
            eer = x0 + a * (x1 - x0);
            break;
        }
    }

    let mut wins = 0.0;
    for &g in &gen {
        for &i in &imp {
            wins += if g > i {
                1.0
            } else if g == i {
                0.5
            } else {
                0.0
            };
        }
    }
    RocOracle {
        thresholds,
        tar,
        far,
        eer,
        auc: wins / (gen.len() * imp.len()) as f64,
    }
}

