//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's calibration, matching or loss
//! code: boxes are plain `[f64; 4]`, matchings are recomputed from scratch
//! for every selection, and the infima are found by grid search.

#![allow(dead_code)]

use seqcrc::{
    Aggregation, CalibrationConfig, ClassificationSet, ConfidenceLoss, ImageSample,
    LocalizationLoss, LocalizationSet, MatchDistance,
};

pub const GRID_STEP: f64 = 1e-3;
pub const GRID_POINTS: usize = 1000;

#[derive(Clone, Debug)]
pub struct Obj {
    pub b: [f64; 4],
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct Pred {
    pub b: [f64; 4],
    pub probs: Vec<f64>,
    pub conf: f64,
}

#[derive(Clone, Debug)]
pub struct Img {
    pub gts: Vec<Obj>,
    pub preds: Vec<Pred>,
}

pub fn from_sample(s: &ImageSample<f64>) -> Img {
    Img {
        gts: s
            .ground_truths
            .iter()
            .map(|g| Obj {
                b: [g.bbox.left, g.bbox.top, g.bbox.right, g.bbox.bottom],
                class: g.class,
            })
            .collect(),
        preds: s
            .detections
            .iter()
            .map(|d| Pred {
                b: [d.bbox.left, d.bbox.top, d.bbox.right, d.bbox.bottom],
                probs: d.probs.clone(),
                conf: d.confidence,
            })
            .collect(),
    }
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn inter_area(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn inside(inner: &[f64; 4], outer: &[f64; 4]) -> bool {
    outer[0] <= inner[0] && outer[1] <= inner[1] && inner[2] <= outer[2] && inner[3] <= outer[3]
}

/// Smallest uniform margin `m` with `pred ± m` containing `gt`.
pub fn margin_needed(gt: &[f64; 4], pred: &[f64; 4]) -> f64 {
    [
        pred[0] - gt[0],
        pred[1] - gt[1],
        gt[2] - pred[2],
        gt[3] - pred[3],
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max)
}

fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    if area(a) <= 0.0 || area(b) <= 0.0 {
        return f64::INFINITY;
    }
    let i = inter_area(a, b);
    let u = area(a) + area(b) - i;
    let hull = [
        a[0].min(b[0]),
        a[1].min(b[1]),
        a[2].max(b[2]),
        a[3].max(b[3]),
    ];
    let c = area(&hull);
    1.0 - i / u + (c - u) / c
}

fn dist(kind: &MatchDistance<f64>, g: &Obj, p: &Pred) -> f64 {
    match *kind {
        MatchDistance::Hausdorff => margin_needed(&g.b, &p.b),
        MatchDistance::Lac => 1.0 - p.probs[g.class],
        MatchDistance::Giou => giou(&g.b, &p.b),
        MatchDistance::Mix { tau } => {
            tau * (1.0 - p.probs[g.class]) + (1.0 - tau) * margin_needed(&g.b, &p.b)
        }
    }
}

/// Brute-force nearest prediction among the first `k`, first index on ties.
pub fn matching(img: &Img, k: usize, kind: &MatchDistance<f64>) -> Vec<Option<usize>> {
    img.gts
        .iter()
        .map(|g| {
            let mut best: Option<(usize, f64)> = None;
            for (i, p) in img.preds[..k].iter().enumerate() {
                let d = dist(kind, g, p);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect()
}

/// Number of predictions with `conf >= 1 - lambda`, found by scanning.
/// The tiny tolerance absorbs rounding in `1 - lambda` when `lambda` was
/// itself computed as `1 - conf`; test confidences sit on a 0.01 lattice,
/// far coarser than the tolerance.
pub fn kept(img: &Img, lambda: f64) -> usize {
    img.preds
        .iter()
        .filter(|p| p.conf >= 1.0 - lambda - 1e-12)
        .count()
}

pub fn margined(set: LocalizationSet, b: &[f64; 4], lambda: f64) -> [f64; 4] {
    let (dx, dy) = match set {
        LocalizationSet::Additive => (lambda, lambda),
        LocalizationSet::Multiplicative => (lambda * (b[2] - b[0]), lambda * (b[3] - b[1])),
    };
    [b[0] - dx, b[1] - dy, b[2] + dx, b[3] + dy]
}

pub fn label_set(set: ClassificationSet, probs: &[f64], lambda: f64) -> Vec<usize> {
    match set {
        ClassificationSet::Lac => (0..probs.len())
            .filter(|&c| probs[c] >= 1.0 - lambda)
            .collect(),
        ClassificationSet::Aps => {
            if lambda >= 1.0 {
                return (0..probs.len()).collect();
            }
            let mut order: Vec<usize> = (0..probs.len()).collect();
            // stable sort keeps lower indices first among equal probabilities
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
            let mut out = Vec::new();
            let mut mass = 0.0;
            for c in order {
                out.push(c);
                mass += probs[c];
                if mass > lambda {
                    break;
                }
            }
            out
        }
    }
}

pub fn conf_loss(img: &Img, k: usize, kind: ConfidenceLoss) -> f64 {
    let n = img.gts.len();
    if n == 0 {
        return 0.0;
    }
    let miss = n.saturating_sub(k);
    match kind {
        ConfidenceLoss::BoxCountThreshold => (miss > 0) as u8 as f64,
        ConfidenceLoss::BoxCountRecall => miss as f64 / n as f64,
    }
}

pub fn loc_loss(img: &Img, k: usize, cfg: &CalibrationConfig<f64>, lambda: f64) -> f64 {
    let n = img.gts.len();
    if n == 0 {
        return 0.0;
    }
    if k == 0 {
        return 1.0;
    }
    let m = matching(img, k, &cfg.matching);
    let set = cfg.predset.localization;
    let boxes: Vec<Option<[f64; 4]>> = m
        .iter()
        .map(|a| a.map(|i| margined(set, &img.preds[i].b, lambda)))
        .collect();
    match cfg.loss.localization {
        LocalizationLoss::Pixelwise => {
            let mut tot = 0.0;
            for (g, b) in img.gts.iter().zip(&boxes) {
                let Some(b) = b else { continue };
                let a = area(&g.b);
                tot += if a > 0.0 {
                    (inter_area(&g.b, b) / a).min(1.0)
                } else {
                    inside(&g.b, b) as u8 as f64
                };
            }
            (1.0 - tot / n as f64).max(0.0)
        }
        kind => {
            let covered = img
                .gts
                .iter()
                .zip(&boxes)
                .filter(|(g, b)| b.is_some_and(|b| inside(&g.b, &b)))
                .count() as f64
                / n as f64;
            match kind {
                LocalizationLoss::Thresholded { tau } => (covered < tau) as u8 as f64,
                _ => 1.0 - covered,
            }
        }
    }
}

pub fn cls_loss(img: &Img, k: usize, cfg: &CalibrationConfig<f64>, lambda: f64) -> f64 {
    let n = img.gts.len();
    if n == 0 {
        return 0.0;
    }
    if k == 0 {
        return 1.0;
    }
    let m = matching(img, k, &cfg.matching);
    let miss: Vec<f64> = img
        .gts
        .iter()
        .zip(&m)
        .map(|(g, a)| {
            let hit = a.is_some_and(|i| {
                label_set(cfg.predset.classification, &img.preds[i].probs, lambda)
                    .contains(&g.class)
            });
            (!hit) as u8 as f64
        })
        .collect();
    let mean = miss.iter().sum::<f64>() / n as f64;
    match cfg.loss.classification {
        Aggregation::Average => mean,
        Aggregation::Max => miss.iter().cloned().fold(0.0, f64::max),
        Aggregation::Thresholded { tau } => (mean > tau) as u8 as f64,
    }
}

pub fn grid(i: usize) -> f64 {
    i as f64 * GRID_STEP
}

/// Grid version of the first step: `(lambda_plus, lambda_minus)`.
pub fn oracle_step1(imgs: &[Img], cfg: &CalibrationConfig<f64>) -> (f64, f64) {
    let n = imgs.len() as f64;
    let loc_top = cfg.lambda_loc_bounds.upper;
    let cls_top = cfg.lambda_cls_bounds.upper;
    // losses at the upper bounds, per image and per kept count
    let top: Vec<Vec<(f64, f64)>> = imgs
        .iter()
        .map(|img| {
            (0..=img.preds.len())
                .map(|k| {
                    (
                        loc_loss(img, k, cfg, loc_top),
                        cls_loss(img, k, cfg, cls_top),
                    )
                })
                .collect()
        })
        .collect();
    let mut run_loc = vec![0.0f64; imgs.len()];
    let mut run_cls = vec![0.0f64; imgs.len()];
    let mut plus = None;
    let mut minus = None;
    for i in (0..=GRID_POINTS).rev() {
        let lam = grid(i);
        let (mut c, mut l, mut s) = (0.0, 0.0, 0.0);
        for (j, img) in imgs.iter().enumerate() {
            let k = kept(img, lam);
            c += conf_loss(img, k, cfg.loss.confidence);
            run_loc[j] = run_loc[j].max(top[j][k].0);
            run_cls[j] = run_cls[j].max(top[j][k].1);
            l += run_loc[j];
            s += run_cls[j];
        }
        let r = (c / n).max(l / n).max(s / n);
        let prev = if i == GRID_POINTS { 1.0 } else { grid(i + 1) };
        if plus.is_none() && n / (n + 1.0) * r + 1.0 / (n + 1.0) > cfg.alpha_cnf {
            plus = Some(prev);
        }
        if minus.is_none() && n / (n + 1.0) * r > cfg.alpha_cnf {
            minus = Some(prev);
        }
        if plus.is_some() && minus.is_some() {
            break;
        }
    }
    (plus.unwrap_or(0.0), minus.unwrap_or(0.0))
}

/// Selection counts an image passes through for confidence parameters at
/// or above `lambda_minus`, probed on the grid and at `lambda_minus`.
fn counts_above(img: &Img, lambda_minus: f64) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..=GRID_POINTS)
        .map(grid)
        .filter(|&l| l >= lambda_minus)
        .chain(std::iter::once(lambda_minus))
        .map(|l| kept(img, l))
        .collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task2 {
    Loc,
    Cls,
}

/// Monotonized second-step risk at `lambda` with the confidence parameter
/// held at `lambda_minus`.
pub fn oracle_risk2(
    imgs: &[Img],
    cfg: &CalibrationConfig<f64>,
    lambda_minus: f64,
    task: Task2,
    lambda: f64,
) -> f64 {
    let total: f64 = imgs
        .iter()
        .map(|img| {
            counts_above(img, lambda_minus)
                .into_iter()
                .map(|k| match task {
                    Task2::Loc => loc_loss(img, k, cfg, lambda),
                    Task2::Cls => cls_loss(img, k, cfg, lambda),
                })
                .fold(0.0, f64::max)
        })
        .sum();
    total / imgs.len() as f64
}

/// Smallest grid point of the task's search range satisfying the corrected
/// constraint, or `None`.
pub fn oracle_step2(
    imgs: &[Img],
    cfg: &CalibrationConfig<f64>,
    lambda_minus: f64,
    task: Task2,
) -> Option<f64> {
    let (bounds, alpha) = match task {
        Task2::Loc => (cfg.lambda_loc_bounds, cfg.alpha_loc),
        Task2::Cls => (cfg.lambda_cls_bounds, cfg.alpha_cls),
    };
    let n = imgs.len() as f64;
    let step = (bounds.upper - bounds.lower) * GRID_STEP;
    // per-image counts do not depend on the task parameter
    let counts: Vec<Vec<usize>> = imgs.iter().map(|i| counts_above(i, lambda_minus)).collect();
    let ok = |lam: f64| {
        let total: f64 = imgs
            .iter()
            .zip(&counts)
            .map(|(img, ks)| {
                ks.iter()
                    .map(|&k| match task {
                        Task2::Loc => loc_loss(img, k, cfg, lam),
                        Task2::Cls => cls_loss(img, k, cfg, lam),
                    })
                    .fold(0.0, f64::max)
            })
            .sum();
        n / (n + 1.0) * (total / n) + 1.0 / (n + 1.0) <= alpha
    };
    // the feasible set is an up-set, so bisect over grid indices
    let at = |i: usize| bounds.lower + i as f64 * step;
    if !ok(bounds.upper) {
        return None;
    }
    let (mut lo, mut hi) = (0usize, GRID_POINTS);
    if ok(at(0)) {
        return Some(at(0));
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(at(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(at(hi))
}

/// Split-conformal order statistic: the `ceil((n+1)(1-alpha))`-th smallest
/// score, or `None` when that rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Option<f64> {
    let n = scores.len();
    let rank = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    if rank == 0 || rank > n {
        return None;
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(s[rank - 1])
}

pub mod instances {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use seqcrc::{
        generate, Aggregation, Bounds, CalibrationConfig, ClassificationSet, ConfidenceLoss,
        Detection, ImageSample, LocalizationLoss, LocalizationSet, MatchDistance, SynthSpec,
    };

    pub const MAX_BOXES: usize = 10;

    /// Random small calibration problem: at most 50 images, at most 10
    /// detections each, confidences on a 0.01 lattice, and a random
    /// configuration that satisfies the alpha precondition.
    pub fn random_problem(
        seed: u64,
        max_images: usize,
    ) -> (Vec<ImageSample<f64>>, CalibrationConfig<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=max_images);
        let spec = SynthSpec {
            seed: rng.random(),
            n_images: n,
            num_classes: rng.random_range(2..=5),
            image_width: 200.0,
            image_height: 150.0,
            objects_min: 0,
            objects_max: rng.random_range(1..=5),
            box_size_min: 10.0,
            box_size_max: 60.0,
            box_noise_std: rng.random_range(0.0..8.0),
            fp_rate: rng.random_range(0.0..2.0),
            label_flip_prob: rng.random_range(0.0..0.3),
            class_margin: rng.random_range(0.0..2.0),
            ..SynthSpec::default()
        };
        let samples = generate(&spec)
            .unwrap()
            .into_iter()
            .map(|s| {
                let dets: Vec<Detection<f64>> = s
                    .detections
                    .iter()
                    .take(MAX_BOXES)
                    .map(|d| {
                        let c = ((d.confidence * 100.0).round() / 100.0).clamp(0.01, 0.99);
                        Detection::new(d.bbox, d.probs.clone(), c)
                    })
                    .collect();
                ImageSample::new(s.image_id, s.ground_truths, dets)
                    .with_image_size(spec.image_width, spec.image_height)
            })
            .collect();

        let predset_loc = if rng.random_bool(0.5) {
            LocalizationSet::Additive
        } else {
            LocalizationSet::Multiplicative
        };
        let upper = match predset_loc {
            LocalizationSet::Additive => 200.0,
            LocalizationSet::Multiplicative => 3.0,
        };
        let alpha_cnf = rng.random_range(0.05..0.4);
        let correction = 1.0 / (n as f64 + 1.0);
        let alpha_loc = (alpha_cnf + correction + rng.random_range(0.02..0.4)).min(0.99);
        let alpha_cls = (alpha_cnf + correction + rng.random_range(0.02..0.4)).min(0.99);
        let mut cfg =
            CalibrationConfig::new(alpha_cnf, alpha_loc, alpha_cls, Bounds::new(0.0, upper));
        cfg.predset.localization = predset_loc;
        cfg.predset.classification = if rng.random_bool(0.5) {
            ClassificationSet::Lac
        } else {
            ClassificationSet::Aps
        };
        cfg.loss.confidence = if rng.random_bool(0.5) {
            ConfidenceLoss::BoxCountThreshold
        } else {
            ConfidenceLoss::BoxCountRecall
        };
        cfg.loss.localization = match rng.random_range(0..3) {
            0 => LocalizationLoss::Thresholded {
                tau: rng.random_range(0.5..=1.0),
            },
            1 => LocalizationLoss::Boxwise,
            _ => LocalizationLoss::Pixelwise,
        };
        cfg.loss.classification = match rng.random_range(0..3) {
            0 => Aggregation::Average,
            1 => Aggregation::Max,
            _ => Aggregation::Thresholded {
                tau: rng.random_range(0.0..0.5),
            },
        };
        cfg.matching = match rng.random_range(0..4) {
            0 => MatchDistance::Hausdorff,
            1 => MatchDistance::Lac,
            2 => MatchDistance::Giou,
            _ => MatchDistance::Mix {
                tau: rng.random_range(0.0..=1.0),
            },
        };
        (samples, cfg)
    }
}
