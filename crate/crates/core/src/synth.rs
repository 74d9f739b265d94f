//! Seeded synthetic detection problems and a Monte Carlo check of the
//! risk-control guarantee.
//!
//! Each ground-truth object gets one noisy twin detection. The twin's
//! confidence falls as its corner noise grows, so the confidence threshold
//! carries information about localization quality. False positives are
//! scattered uniformly with low confidence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationConfig};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::inference::evaluate;
use crate::sample::{Detection, GroundTruth, ImageSample};
use crate::scalar::{order_invariant_mean, Scalar};

/// Logistic confidence model for twin detections:
/// `conf = sigmoid(base - noise_coupling * mean_abs_corner_noise + jitter * z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceModel {
    pub base: f64,
    pub noise_coupling: f64,
    pub jitter: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self {
            base: 4.0,
            noise_coupling: 0.5,
            jitter: 1.0,
        }
    }
}

pub const MIN_CONFIDENCE: f64 = 0.005;
pub const MAX_CONFIDENCE: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_images: usize,
    pub num_classes: usize,
    pub image_width: f64,
    pub image_height: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Ground-truth side lengths are uniform in `[box_size_min, box_size_max]`.
    pub box_size_min: f64,
    pub box_size_max: f64,
    pub box_noise_std: f64,
    pub confidence: ConfidenceModel,
    /// Mean number of false positives per image (Poisson).
    pub fp_rate: f64,
    /// False-positive confidences are uniform in `[MIN_CONFIDENCE, fp_confidence_max]`.
    pub fp_confidence_max: f64,
    pub label_flip_prob: f64,
    /// Logit gap between the predicted class and the best other class.
    pub class_margin: f64,
    pub temperature: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 100,
            num_classes: 5,
            image_width: 640.0,
            image_height: 480.0,
            objects_min: 1,
            objects_max: 4,
            box_size_min: 30.0,
            box_size_max: 150.0,
            box_noise_std: 5.0,
            confidence: ConfidenceModel::default(),
            fp_rate: 0.5,
            fp_confidence_max: 0.4,
            label_flip_prob: 0.1,
            class_margin: 1.0,
            temperature: 1.0,
        }
    }
}

impl SynthSpec {
    /// A spec whose detections reproduce the ground truth exactly, with
    /// all probability mass on the true class and one shared confidence.
    /// Images hold a single object: with several, a larger box that contains
    /// a smaller object can win its match under the signed distances and
    /// carry the wrong label.
    pub fn noiseless(seed: u64, n_images: usize) -> Self {
        Self {
            seed,
            n_images,
            objects_min: 1,
            objects_max: 1,
            box_noise_std: 0.0,
            temperature: 0.01,
            confidence: ConfidenceModel {
                jitter: 0.0,
                ..ConfidenceModel::default()
            },
            fp_rate: 0.0,
            label_flip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return bad("image size must be positive");
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max");
        }
        if !(self.box_size_min > 0.0 && self.box_size_min <= self.box_size_max) {
            return bad("box sizes must satisfy 0 < min <= max");
        }
        if self.box_size_max > self.image_width.min(self.image_height) {
            return bad("box_size_max exceeds the image");
        }
        if !(self.box_noise_std >= 0.0 && self.box_noise_std.is_finite()) {
            return bad("box_noise_std must be finite and non-negative");
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return bad("fp_rate must be finite and non-negative");
        }
        if !(MIN_CONFIDENCE..=MAX_CONFIDENCE).contains(&self.fp_confidence_max) {
            return bad("fp_confidence_max out of range");
        }
        if !(0.0..=1.0).contains(&self.label_flip_prob) {
            return bad("label_flip_prob must lie in [0, 1]");
        }
        if self.num_classes == 1 && self.label_flip_prob > 0.0 {
            return bad("label flips need at least two classes");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.class_margin >= 0.0) {
            return bad("class_margin must be non-negative");
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|l| ((l - top) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
    std_normal: Normal<f64>,
}

impl Generator<'_> {
    fn uniform_box(&mut self) -> [f64; 4] {
        let s = self.spec;
        let w = self.rng.random_range(s.box_size_min..=s.box_size_max);
        let h = self.rng.random_range(s.box_size_min..=s.box_size_max);
        let x = self.rng.random_range(0.0..=s.image_width - w);
        let y = self.rng.random_range(0.0..=s.image_height - h);
        [x, y, x + w, y + h]
    }

    /// Probability vector whose argmax is `class`.
    fn probs(&mut self, class: usize) -> Vec<f64> {
        let k = self.spec.num_classes;
        let mut logits: Vec<f64> = (0..k)
            .map(|_| self.std_normal.sample(&mut self.rng))
            .collect();
        let others = (0..k)
            .filter(|&j| j != class)
            .map(|j| logits[j])
            .fold(f64::NEG_INFINITY, f64::max);
        // a single class has no competitor
        logits[class] = if others.is_finite() {
            others + self.spec.class_margin
        } else {
            0.0
        };
        softmax(&logits, self.spec.temperature)
    }

    fn other_class(&mut self, class: usize) -> usize {
        let j = self.rng.random_range(0..self.spec.num_classes - 1);
        if j >= class {
            j + 1
        } else {
            j
        }
    }

    fn twin(&mut self, gt: [f64; 4], class: usize) -> Detection<f64> {
        let s = self.spec;
        let mut corners = gt;
        let mut abs_noise = 0.0;
        if s.box_noise_std > 0.0 {
            for c in &mut corners {
                let e = s.box_noise_std * self.std_normal.sample(&mut self.rng);
                *c += e;
                abs_noise += e.abs();
            }
        }
        let [mut l, mut t, mut r, mut b] = corners;
        if l > r {
            std::mem::swap(&mut l, &mut r);
        }
        if t > b {
            std::mem::swap(&mut t, &mut b);
        }
        let bbox = BoundingBox::new(
            l.clamp(0.0, s.image_width),
            t.clamp(0.0, s.image_height),
            r.clamp(0.0, s.image_width),
            b.clamp(0.0, s.image_height),
        );
        let logit = s.confidence.base - s.confidence.noise_coupling * abs_noise / 4.0
            + s.confidence.jitter * self.std_normal.sample(&mut self.rng);
        let confidence = sigmoid(logit).clamp(MIN_CONFIDENCE, MAX_CONFIDENCE);
        let predicted = if s.label_flip_prob > 0.0 && self.rng.random_bool(s.label_flip_prob) {
            self.other_class(class)
        } else {
            class
        };
        Detection::new(bbox, self.probs(predicted), confidence)
    }

    fn false_positive(&mut self) -> Detection<f64> {
        let [l, t, r, b] = self.uniform_box();
        let class = self.rng.random_range(0..self.spec.num_classes);
        let confidence = self
            .rng
            .random_range(MIN_CONFIDENCE..=self.spec.fp_confidence_max);
        Detection::new(BoundingBox::new(l, t, r, b), self.probs(class), confidence)
    }

    fn image(&mut self, index: usize) -> ImageSample<f64> {
        let s = self.spec;
        let count = self.rng.random_range(s.objects_min..=s.objects_max);
        let mut gts = Vec::with_capacity(count);
        let mut dets = Vec::with_capacity(count + 1);
        for _ in 0..count {
            let gt = self.uniform_box();
            let class = self.rng.random_range(0..s.num_classes);
            dets.push(self.twin(gt, class));
            gts.push(GroundTruth::new(
                BoundingBox::new(gt[0], gt[1], gt[2], gt[3]),
                class,
            ));
        }
        let fps = if s.fp_rate > 0.0 {
            Poisson::new(s.fp_rate)
                .expect("positive rate")
                .sample(&mut self.rng) as usize
        } else {
            0
        };
        for _ in 0..fps {
            dets.push(self.false_positive());
        }
        if dets.is_empty() {
            dets.push(self.false_positive());
        }
        assert!(
            dets.len() >= count.max(1),
            "prediction-count floor violated"
        );
        ImageSample::new(format!("synth-{index}"), gts, dets)
            .with_image_size(s.image_width, s.image_height)
    }
}

/// Draws `spec.n_images` images. Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<ImageSample<f64>>> {
    spec.validate()?;
    let mut gen = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        std_normal: Normal::new(0.0, 1.0).expect("unit normal"),
    };
    Ok((0..spec.n_images).map(|i| gen.image(i)).collect())
}

/// [`generate`] converted to another scalar type.
pub fn generate_as<T: Scalar>(spec: &SynthSpec) -> Result<Vec<ImageSample<T>>> {
    Ok(generate(spec)?
        .into_iter()
        .map(|s| convert_sample(&s))
        .collect())
}

fn convert_sample<T: Scalar>(s: &ImageSample<f64>) -> ImageSample<T> {
    let b = |b: &BoundingBox<f64>| {
        BoundingBox::new(
            T::lit(b.left),
            T::lit(b.top),
            T::lit(b.right),
            T::lit(b.bottom),
        )
    };
    let mut out = ImageSample::new(
        s.image_id.clone(),
        s.ground_truths
            .iter()
            .map(|g| GroundTruth::new(b(&g.bbox), g.class))
            .collect(),
        s.detections
            .iter()
            .map(|d| {
                Detection::new(
                    b(&d.bbox),
                    d.probs.iter().map(|&p| T::lit(p)).collect(),
                    T::lit(d.confidence),
                )
            })
            .collect(),
    );
    out.image_size = s.image_size.map(|(w, h)| (T::lit(w), T::lit(h)));
    out
}

/// Seed of trial `trial`, derived from the master seed (splitmix64 finalizer).
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    let mut z = master ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub lambda_cnf_plus: f64,
    pub lambda_loc_plus: f64,
    pub lambda_cls_plus: f64,
    pub cnf_risk: f64,
    pub loc_risk: f64,
    pub cls_risk: f64,
    pub global_risk: f64,
}

/// Across-trial summary of one test risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub alpha: f64,
    pub mean: f64,
    pub std_error: f64,
    /// Fraction of trials whose test risk exceeds `alpha`. Diagnostic only.
    pub fraction_above_alpha: f64,
}

impl RiskSummary {
    fn from_values(values: &[f64], alpha: f64) -> Self {
        let n = values.len();
        let mean = order_invariant_mean(values).unwrap_or(0.0);
        let std_error = if n > 1 {
            let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
            let var = order_invariant_mean(&sq).unwrap_or(0.0) * n as f64 / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        let above = values.iter().filter(|&&v| v > alpha).count();
        Self {
            alpha,
            mean,
            std_error,
            fraction_above_alpha: above as f64 / n.max(1) as f64,
        }
    }

    pub fn within(&self, slack: f64) -> bool {
        self.mean <= self.alpha + slack
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub spec: SynthSpec,
    pub config: CalibrationConfig<f64>,
    pub trials: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub cnf: RiskSummary,
    pub loc: RiskSummary,
    pub cls: RiskSummary,
    /// Per-image max of localization and classification losses, against
    /// `alpha_loc + alpha_cls`.
    pub global: RiskSummary,
    pub outcomes: Vec<TrialOutcome>,
}

impl ValidationReport {
    /// `(name, summary)` rows in display order.
    pub fn rows(&self) -> [(&'static str, &RiskSummary); 4] {
        [
            ("cnf", &self.cnf),
            ("loc", &self.loc),
            ("cls", &self.cls),
            ("global", &self.global),
        ]
    }

    /// Names of the risks whose across-trial mean exceeds its alpha by more
    /// than `slack`.
    pub fn violations(&self, slack: f64) -> Vec<&'static str> {
        self.rows()
            .into_iter()
            .filter(|(_, s)| !s.within(slack))
            .map(|(name, _)| name)
            .collect()
    }
}

fn run_trial(
    spec: &SynthSpec,
    config: &CalibrationConfig<f64>,
    trial: usize,
    n_cal: usize,
    n_test: usize,
) -> Result<TrialOutcome> {
    let seed = trial_seed(spec.seed, trial);
    let draw = SynthSpec {
        seed,
        n_images: n_cal + n_test,
        ..spec.clone()
    };
    let images = generate(&draw)?;
    let (cal, test) = images.split_at(n_cal);
    let result = calibrate(cal, config)?;
    let report = evaluate(test, &result)?;
    Ok(TrialOutcome {
        trial,
        seed,
        lambda_cnf_plus: result.lambda_cnf_plus,
        lambda_loc_plus: result.lambda_loc_plus,
        lambda_cls_plus: result.lambda_cls_plus,
        cnf_risk: report.cnf_risk,
        loc_risk: report.loc_risk,
        cls_risk: report.cls_risk,
        global_risk: report.global_risk,
    })
}

/// Repeats calibrate-then-test `trials` times on fresh draws and summarizes
/// the test risks. Trials run in parallel; the report does not depend on
/// scheduling.
pub fn monte_carlo_validate(
    spec: &SynthSpec,
    config: &CalibrationConfig<f64>,
    trials: usize,
    n_cal: usize,
    n_test: usize,
) -> Result<ValidationReport> {
    spec.validate()?;
    config.validate()?;
    if trials == 0 {
        return Err(Error::InvalidConfig(
            "at least one trial is required".into(),
        ));
    }
    if n_cal == 0 {
        return Err(Error::EmptyCalibrationSet);
    }
    if n_test == 0 {
        return Err(Error::EmptyTestSet);
    }
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|t| {
            run_trial(spec, config, t, n_cal, n_test).map_err(|e| Error::Trial {
                trial: t,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let column = |f: fn(&TrialOutcome) -> f64| outcomes.iter().map(f).collect::<Vec<_>>();
    Ok(ValidationReport {
        spec: spec.clone(),
        config: config.clone(),
        trials,
        n_calibration: n_cal,
        n_test,
        cnf: RiskSummary::from_values(&column(|o| o.cnf_risk), config.alpha_cnf),
        loc: RiskSummary::from_values(&column(|o| o.loc_risk), config.alpha_loc),
        cls: RiskSummary::from_values(&column(|o| o.cls_risk), config.alpha_cls),
        global: RiskSummary::from_values(
            &column(|o| o.global_risk),
            config.alpha_loc + config.alpha_cls,
        ),
        outcomes,
    })
}
