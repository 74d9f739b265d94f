//! Sequential conformal risk control.
//!
//! Calibration runs in two steps. Step 1 sweeps the confidence parameter
//! downward over the breakpoints where some image's selection changes and
//! returns the pair `(lambda_cnf_plus, lambda_cnf_minus)`. Step 2 binary
//! searches the localization and classification parameters with the
//! confidence parameter held at `lambda_cnf_minus`.
//!
//! Localization and classification losses are not monotone in the
//! confidence parameter because the matching changes as boxes are added.
//! Both steps therefore use the monotonized loss
//! `sup_{l' >= l} L_i(l', lambda)`, computed as a running maximum over the
//! selection states an image goes through as the sweep descends.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    classification_loss_with, confidence_loss_for, localization_loss_with, LossSpec,
};
use crate::matching::{IncrementalMatcher, MatchDistance, MatchingAssignment};
use crate::predsets::PredSetSpec;
use crate::sample::ImageSample;
use crate::scalar::Scalar;

/// Closed parameter interval `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Bounds<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> Bounds<T> {
    pub fn new(lower: T, upper: T) -> Self {
        Self { lower, upper }
    }

    pub fn unit() -> Self {
        Self::new(T::zero(), T::one())
    }

    pub fn width(&self) -> T {
        self.upper - self.lower
    }
}

/// Second-step task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Localization,
    Classification,
}

impl Task {
    pub fn short_name(self) -> &'static str {
        match self {
            Task::Localization => "loc",
            Task::Classification => "cls",
        }
    }
}

fn default_steps() -> usize {
    32
}

fn default_prefilter<T: Scalar>() -> T {
    T::lit(1e-3)
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CalibrationConfig<T> {
    pub alpha_cnf: T,
    pub alpha_loc: T,
    pub alpha_cls: T,
    #[serde(default)]
    pub loss: LossSpec<T>,
    #[serde(default)]
    pub predset: PredSetSpec,
    #[serde(default)]
    pub matching: MatchDistance<T>,
    pub lambda_loc_bounds: Bounds<T>,
    #[serde(default = "Bounds::unit")]
    pub lambda_cls_bounds: Bounds<T>,
    #[serde(default = "default_steps")]
    pub binary_search_steps: usize,
    #[serde(default = "default_prefilter")]
    pub prefilter_threshold: T,
    /// Negative-control switch: drops the `B/(n+1)` finite-sample terms,
    /// which voids the guarantee. Only for exercising the validator.
    #[serde(default, skip_serializing_if = "is_false")]
    pub disable_finite_sample_correction: bool,
}

impl<T: Scalar> CalibrationConfig<T> {
    /// Configuration with default losses, sets and matching.
    pub fn new(alpha_cnf: T, alpha_loc: T, alpha_cls: T, lambda_loc_bounds: Bounds<T>) -> Self {
        Self {
            alpha_cnf,
            alpha_loc,
            alpha_cls,
            loss: LossSpec::default(),
            predset: PredSetSpec::default(),
            matching: MatchDistance::default(),
            lambda_loc_bounds,
            lambda_cls_bounds: Bounds::unit(),
            binary_search_steps: default_steps(),
            prefilter_threshold: default_prefilter(),
            disable_finite_sample_correction: false,
        }
    }

    /// Checks everything that does not depend on the calibration set size.
    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: T| v > T::zero() && v < T::one();
        for (name, a) in [
            ("alpha_cnf", self.alpha_cnf),
            ("alpha_loc", self.alpha_loc),
            ("alpha_cls", self.alpha_cls),
        ] {
            if !unit_open(a) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in (0, 1), got {a}"
                )));
            }
        }
        for (name, b) in [
            ("lambda_loc_bounds", self.lambda_loc_bounds),
            ("lambda_cls_bounds", self.lambda_cls_bounds),
        ] {
            if !(b.lower < b.upper) || !b.lower.is_finite() || !b.upper.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must satisfy lower < upper, got [{}, {}]",
                    b.lower, b.upper
                )));
            }
            if b.lower < T::zero() {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        if self.lambda_cls_bounds.upper > T::one() {
            return Err(Error::InvalidConfig(
                "lambda_cls_bounds must lie in [0, 1]".into(),
            ));
        }
        if self.binary_search_steps == 0 {
            return Err(Error::InvalidConfig(
                "binary_search_steps must be at least 1".into(),
            ));
        }
        if !(self.prefilter_threshold >= T::zero() && self.prefilter_threshold <= T::one()) {
            return Err(Error::InvalidConfig(
                "prefilter_threshold must lie in [0, 1]".into(),
            ));
        }
        if let crate::losses::LocalizationLoss::Thresholded { tau } = self.loss.localization {
            if !(tau >= T::zero() && tau <= T::one()) {
                return Err(Error::InvalidConfig(
                    "localization tau must lie in [0, 1]".into(),
                ));
            }
        }
        self.matching.validate()
    }

    /// `alpha_task >= alpha_cnf + B/(n+1)` for both second-step tasks.
    pub fn check_precondition(&self, n: usize) -> Result<()> {
        let correction = T::one() / T::from_count(n + 1);
        for (task, alpha) in [("loc", self.alpha_loc), ("cls", self.alpha_cls)] {
            if alpha < self.alpha_cnf + correction {
                return Err(Error::Precondition {
                    task,
                    alpha_task: alpha.to_f64_lossy(),
                    alpha_cnf: self.alpha_cnf.to_f64_lossy(),
                    correction: correction.to_f64_lossy(),
                    n,
                });
            }
        }
        Ok(())
    }

    pub fn alpha(&self, task: Task) -> T {
        match task {
            Task::Localization => self.alpha_loc,
            Task::Classification => self.alpha_cls,
        }
    }

    pub fn bounds(&self, task: Task) -> Bounds<T> {
        match task {
            Task::Localization => self.lambda_loc_bounds,
            Task::Classification => self.lambda_cls_bounds,
        }
    }

    /// Loss bound added in the `B/(n+1)` correction terms.
    fn correction_bound(&self) -> T {
        if self.disable_finite_sample_correction {
            T::zero()
        } else {
            T::one()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CalibrationDiagnostics<T> {
    /// Mean confidence loss at `lambda_cnf_plus`.
    pub cnf_risk: T,
    /// Monotonized risk at `(lambda_cnf_minus, lambda_loc_plus)`.
    pub loc_risk: T,
    /// Monotonized risk at `(lambda_cnf_minus, lambda_cls_plus)`.
    pub cls_risk: T,
    /// Number of confidence parameters visited by the step-1 sweep.
    pub sweep_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CalibrationResult<T> {
    pub lambda_cnf_plus: T,
    pub lambda_cnf_minus: T,
    pub lambda_loc_plus: T,
    pub lambda_cls_plus: T,
    pub config: CalibrationConfig<T>,
    pub n_calibration: usize,
    pub diagnostics: CalibrationDiagnostics<T>,
}

impl<T: Scalar> CalibrationResult<T> {
    pub fn lambda_plus(&self, task: Task) -> T {
        match task {
            Task::Localization => self.lambda_loc_plus,
            Task::Classification => self.lambda_cls_plus,
        }
    }
}

/// `n/(n+1) * risk + bound/(n+1) <= alpha`.
pub(crate) fn corrected_risk_ok<T: Scalar>(risk: T, n: usize, bound: T, alpha: T) -> bool {
    let n = T::from_count(n);
    let n1 = n + T::one();
    n / n1 * risk + bound / n1 <= alpha
}

// ---------------------------------------------------------------------------
// Plain conformal risk control
// ---------------------------------------------------------------------------

/// Non-increasing right-continuous step function of a scalar parameter:
/// `initial` below the first breakpoint, `value` from each `at` onward.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss<T> {
    pub initial: T,
    pub steps: Vec<Step<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step<T> {
    pub at: T,
    pub value: T,
}

impl<T: Scalar> StepLoss<T> {
    /// Steps are sorted by position on construction.
    pub fn new(initial: T, mut steps: Vec<Step<T>>) -> Self {
        steps.sort_by(|a, b| a.at.partial_cmp(&b.at).unwrap_or(std::cmp::Ordering::Equal));
        Self { initial, steps }
    }

    /// `1{lambda < score}`.
    pub fn indicator_below(score: T) -> Self {
        Self::new(
            T::one(),
            vec![Step {
                at: score,
                value: T::zero(),
            }],
        )
    }

    pub fn constant(value: T) -> Self {
        Self::new(value, Vec::new())
    }

    pub fn eval(&self, lambda: T) -> T {
        let k = self.steps.partition_point(|s| s.at <= lambda);
        if k == 0 {
            self.initial
        } else {
            self.steps[k - 1].value
        }
    }
}

/// Smallest `lambda` in `domain` with
/// `(sum_i L_i(lambda) + bound) / (n+1) <= alpha`.
///
/// The left-hand side only changes at breakpoints, so the infimum is the
/// domain minimum or a breakpoint. Returns `domain.upper` when nothing
/// qualifies.
pub fn crc_calibrate<T: Scalar>(
    curves: &[StepLoss<T>],
    alpha: T,
    bound: T,
    domain: Bounds<T>,
) -> Result<T> {
    let n = curves.len();
    let min_alpha = bound / T::from_count(n + 1);
    if alpha < min_alpha {
        return Err(Error::InfeasibleAlpha {
            alpha: alpha.to_f64_lossy(),
            bound: min_alpha.to_f64_lossy(),
        });
    }
    let mut candidates: Vec<T> = curves
        .iter()
        .flat_map(|c| c.steps.iter().map(|s| s.at))
        .filter(|&at| at > domain.lower && at <= domain.upper)
        .collect();
    candidates.push(domain.lower);
    candidates.push(domain.upper);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    candidates.dedup();

    let feasible = |lambda: T| {
        let total = curves.iter().fold(T::zero(), |acc, c| acc + c.eval(lambda));
        corrected_risk_ok(total / T::from_count(n.max(1)), n, bound, alpha)
    };
    // Risk is non-increasing in lambda: the feasible candidates form a suffix.
    let first = candidates.partition_point(|&l| !feasible(l));
    Ok(candidates.get(first).copied().unwrap_or(domain.upper))
}

// ---------------------------------------------------------------------------
// Per-image selection states
// ---------------------------------------------------------------------------

/// The distinct selections an image goes through as the confidence
/// parameter varies, with the matching of each.
///
/// State `s` keeps the detections whose selection key is at most
/// `keys[s - 1]`; state 0 keeps none. Sweeping the parameter downward
/// visits the states in decreasing order.
#[derive(Debug, Clone)]
struct SelectionStates<T> {
    keys: Vec<T>,
    counts: Vec<usize>,
    matchings: Vec<MatchingAssignment>,
}

impl<T: Scalar> SelectionStates<T> {
    fn build(sample: &ImageSample<T>, spec: &MatchDistance<T>) -> Self {
        let gts = &sample.ground_truths;
        let mut keys = Vec::new();
        let mut counts = vec![0];
        let mut matchings = vec![MatchingAssignment::unmatched(gts.len())];
        let mut matcher = IncrementalMatcher::new(gts.len());
        let dets = &sample.detections;
        for (k, det) in dets.iter().enumerate() {
            matcher.push(gts, det, spec);
            let key = det.selection_key();
            let closes_group = dets
                .get(k + 1)
                .is_none_or(|next| next.selection_key() != key);
            if closes_group {
                keys.push(key);
                counts.push(k + 1);
                matchings.push(matcher.assignment.clone());
            }
        }
        Self {
            keys,
            counts,
            matchings,
        }
    }

    fn top(&self) -> usize {
        self.keys.len()
    }

    /// State at confidence parameter `lambda`.
    fn state_at(&self, lambda: T) -> usize {
        self.keys.partition_point(|&k| k <= lambda)
    }
}

/// Calibration set with the per-image selection states precomputed.
pub(crate) struct Prepared<'a, T> {
    samples: &'a [ImageSample<T>],
    states: Vec<SelectionStates<T>>,
    config: &'a CalibrationConfig<T>,
}

impl<'a, T: Scalar> Prepared<'a, T> {
    pub(crate) fn new(
        samples: &'a [ImageSample<T>],
        config: &'a CalibrationConfig<T>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyCalibrationSet);
        }
        if let Some(s) = samples.iter().find(|s| !s.is_sorted_by_confidence()) {
            return Err(Error::Schema {
                image_id: s.image_id.clone(),
                record: "detections".into(),
                message: "detections must be sorted by descending confidence".into(),
            });
        }
        let states = samples
            .par_iter()
            .map(|s| SelectionStates::build(s, &config.matching))
            .collect();
        Ok(Self {
            samples,
            states,
            config,
        })
    }

    fn n(&self) -> usize {
        self.samples.len()
    }

    /// Task loss of image `i` in selection state `state` at parameter `lambda`.
    fn task_loss(&self, i: usize, state: usize, task: Task, lambda: T) -> T {
        let sample = &self.samples[i];
        let st = &self.states[i];
        let matching = &st.matchings[state];
        let no_selection = st.counts[state] == 0;
        let dets = &sample.detections;
        match task {
            Task::Localization => {
                let kind = self.config.predset.localization;
                localization_loss_with(
                    &sample.ground_truths,
                    matching,
                    no_selection,
                    |k| Some(kind.apply(&dets[k].bbox, lambda)),
                    self.config.loss.localization,
                )
            }
            Task::Classification => {
                let kind = self.config.predset.classification;
                classification_loss_with(
                    &sample.ground_truths,
                    matching,
                    no_selection,
                    |k, class| kind.contains(&dets[k].probs, lambda, class),
                    self.config.loss.classification,
                )
            }
        }
    }

    fn confidence_loss(&self, i: usize, state: usize) -> T {
        confidence_loss_for(
            self.samples[i].num_objects(),
            self.states[i].counts[state],
            self.config.loss.confidence,
        )
    }

    /// `sup_{l' >= lambda_cnf} L_i(l', lambda)` for every image.
    fn monotonized_losses(&self, lambda_cnf: T, task: Task, lambda: T) -> Vec<T> {
        (0..self.n())
            .into_par_iter()
            .map(|i| {
                let st = &self.states[i];
                (st.state_at(lambda_cnf)..=st.top())
                    .rev()
                    .map(|s| self.task_loss(i, s, task, lambda))
                    .fold(T::zero(), T::max)
            })
            .collect()
    }

    fn monotonized_risk(&self, lambda_cnf: T, task: Task, lambda: T) -> T {
        mean(&self.monotonized_losses(lambda_cnf, task, lambda))
    }

    fn confidence_risk(&self, lambda_cnf: T) -> T {
        let losses: Vec<T> = (0..self.n())
            .map(|i| self.confidence_loss(i, self.states[i].state_at(lambda_cnf)))
            .collect();
        mean(&losses)
    }
}

fn mean<T: Scalar>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |a, &v| a + v) / T::from_count(values.len().max(1))
}

// ---------------------------------------------------------------------------
// Step 1
// ---------------------------------------------------------------------------

/// One visited confidence parameter of the step-1 sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SweepPoint<T> {
    pub lambda_cnf: T,
    pub cnf_risk: T,
    /// Monotonized localization risk at the largest margin.
    pub loc_risk: T,
    /// Monotonized classification risk at the largest class parameter.
    pub cls_risk: T,
}

impl<T: Scalar> SweepPoint<T> {
    pub fn max_risk(&self) -> T {
        self.cnf_risk.max(self.loc_risk).max(self.cls_risk)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSweep<T> {
    pub lambda_cnf_plus: T,
    pub lambda_cnf_minus: T,
    /// Visited points in decreasing `lambda_cnf` order.
    pub points: Vec<SweepPoint<T>>,
}

/// Decreasing confidence parameters at which some selection changes:
/// 1, every distinct selection key in `(0, 1)`, then 0.
fn sweep_candidates<T: Scalar>(states: &[SelectionStates<T>]) -> Vec<T> {
    let mut keys: Vec<T> = states
        .iter()
        .flat_map(|s| s.keys.iter().copied())
        .filter(|&k| k > T::zero() && k < T::one())
        .collect();
    keys.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    keys.dedup();
    let mut out = Vec::with_capacity(keys.len() + 2);
    out.push(T::one());
    out.extend(keys);
    out.push(T::zero());
    out
}

fn run_sweep<T: Scalar>(prep: &Prepared<'_, T>, record: bool) -> ConfidenceSweep<T> {
    let cfg = prep.config;
    let n = prep.n();
    let loc_top = cfg.lambda_loc_bounds.upper;
    let cls_top = cfg.lambda_cls_bounds.upper;
    let bound = cfg.correction_bound();
    let candidates = sweep_candidates(&prep.states);

    let mut state: Vec<usize> = prep.states.iter().map(SelectionStates::top).collect();
    let mut l_cnf: Vec<T> = (0..n).map(|i| prep.confidence_loss(i, state[i])).collect();
    let mut l_loc: Vec<T> = (0..n)
        .map(|i| prep.task_loss(i, state[i], Task::Localization, loc_top))
        .collect();
    let mut l_cls: Vec<T> = (0..n)
        .map(|i| prep.task_loss(i, state[i], Task::Classification, cls_top))
        .collect();

    // (key, image) pairs in decreasing key order; consumed as the sweep passes them.
    let mut events: Vec<(T, usize)> = prep
        .states
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.keys.iter().map(move |&k| (k, i)))
        .collect();
    events.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let mut next_event = 0;

    let mut plus: Option<T> = None;
    let mut minus: Option<T> = None;
    let mut previous: Option<T> = None;
    let mut points = Vec::new();
    let mut last_max = T::neg_infinity();

    for &lambda in &candidates {
        while next_event < events.len() && events[next_event].0 > lambda {
            let i = events[next_event].1;
            next_event += 1;
            state[i] -= 1;
            l_cnf[i] = prep.confidence_loss(i, state[i]);
            l_loc[i] = l_loc[i].max(prep.task_loss(i, state[i], Task::Localization, loc_top));
            l_cls[i] = l_cls[i].max(prep.task_loss(i, state[i], Task::Classification, cls_top));
        }
        let point = SweepPoint {
            lambda_cnf: lambda,
            cnf_risk: mean(&l_cnf),
            loc_risk: mean(&l_loc),
            cls_risk: mean(&l_cls),
        };
        let risk = point.max_risk();
        debug_assert!(
            risk >= last_max,
            "monotonized risk must not decrease as lambda_cnf decreases"
        );
        last_max = risk;
        if record {
            points.push(point);
        }
        if plus.is_none() && !corrected_risk_ok(risk, n, bound, cfg.alpha_cnf) {
            plus = Some(previous.unwrap_or(T::one()));
        }
        if minus.is_none() && !corrected_risk_ok(risk, n, T::zero(), cfg.alpha_cnf) {
            minus = Some(previous.unwrap_or(T::one()));
        }
        if plus.is_some() && minus.is_some() && !record {
            break;
        }
        previous = Some(lambda);
    }

    ConfidenceSweep {
        lambda_cnf_plus: plus.unwrap_or(T::zero()),
        lambda_cnf_minus: minus.unwrap_or(T::zero()),
        points,
    }
}

/// Step 1: `(lambda_cnf_plus, lambda_cnf_minus)`.
pub fn seqcrc_step1<T: Scalar>(
    samples: &[ImageSample<T>],
    config: &CalibrationConfig<T>,
) -> Result<(T, T)> {
    let prep = Prepared::new(samples, config)?;
    let sweep = run_sweep(&prep, false);
    Ok((sweep.lambda_cnf_plus, sweep.lambda_cnf_minus))
}

/// Step 1 with every visited point recorded.
pub fn confidence_sweep<T: Scalar>(
    samples: &[ImageSample<T>],
    config: &CalibrationConfig<T>,
) -> Result<ConfidenceSweep<T>> {
    let prep = Prepared::new(samples, config)?;
    Ok(run_sweep(&prep, true))
}

// ---------------------------------------------------------------------------
// Step 2
// ---------------------------------------------------------------------------

fn step2_prepared<T: Scalar>(prep: &Prepared<'_, T>, lambda_cnf_minus: T, task: Task) -> Result<T> {
    let cfg = prep.config;
    let n = prep.n();
    let alpha = cfg.alpha(task);
    let bound = cfg.correction_bound();
    let Bounds {
        mut lower,
        mut upper,
    } = cfg.bounds(task);
    let feasible = |lambda: T| {
        corrected_risk_ok(
            prep.monotonized_risk(lambda_cnf_minus, task, lambda),
            n,
            bound,
            alpha,
        )
    };

    let mut found = None;
    for _ in 0..cfg.binary_search_steps {
        let mid = (lower + upper) / T::lit(2.0);
        if feasible(mid) {
            found = Some(mid);
            upper = mid;
        } else {
            lower = mid;
        }
    }
    let top = cfg.bounds(task).upper;
    match found {
        Some(lambda) => Ok(lambda),
        None if feasible(top) => Ok(top),
        None => Err(Error::Step2Infeasible {
            task: task.short_name(),
            alpha: alpha.to_f64_lossy(),
            lower: cfg.bounds(task).lower.to_f64_lossy(),
            upper: top.to_f64_lossy(),
        }),
    }
}

/// Step 2: the localization or classification parameter, searched with the
/// confidence parameter fixed at `lambda_cnf_minus`.
pub fn seqcrc_step2<T: Scalar>(
    samples: &[ImageSample<T>],
    lambda_cnf_minus: T,
    task: Task,
    config: &CalibrationConfig<T>,
) -> Result<T> {
    let prep = Prepared::new(samples, config)?;
    step2_prepared(&prep, lambda_cnf_minus, task)
}

/// Monotonized empirical risk `R_n(lambda_cnf, lambda)` of a second-step task.
pub fn monotonized_risk<T: Scalar>(
    samples: &[ImageSample<T>],
    config: &CalibrationConfig<T>,
    lambda_cnf: T,
    task: Task,
    lambda: T,
) -> Result<T> {
    Ok(Prepared::new(samples, config)?.monotonized_risk(lambda_cnf, task, lambda))
}

/// Per-image monotonized losses `sup_{l' >= lambda_cnf} L_i(l', lambda)`.
pub fn monotonized_losses<T: Scalar>(
    samples: &[ImageSample<T>],
    config: &CalibrationConfig<T>,
    lambda_cnf: T,
    task: Task,
    lambda: T,
) -> Result<Vec<T>> {
    Ok(Prepared::new(samples, config)?.monotonized_losses(lambda_cnf, task, lambda))
}

/// Full calibration: step 1, then step 2 for both tasks.
pub fn calibrate<T: Scalar>(
    samples: &[ImageSample<T>],
    config: &CalibrationConfig<T>,
) -> Result<CalibrationResult<T>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let n = samples.len();
    config.check_precondition(n)?;
    let prep = Prepared::new(samples, config)?;

    let sweep = run_sweep(&prep, false);
    let (plus, minus) = if config.disable_finite_sample_correction {
        (sweep.lambda_cnf_minus, sweep.lambda_cnf_minus)
    } else {
        (sweep.lambda_cnf_plus, sweep.lambda_cnf_minus)
    };
    let lambda_loc_plus = step2_prepared(&prep, minus, Task::Localization)?;
    let lambda_cls_plus = step2_prepared(&prep, minus, Task::Classification)?;
    log::debug!(
        "calibrated on {n} images: cnf+ = {plus}, cnf- = {minus}, loc+ = {lambda_loc_plus}, cls+ = {lambda_cls_plus}"
    );

    let diagnostics = CalibrationDiagnostics {
        cnf_risk: prep.confidence_risk(plus),
        loc_risk: prep.monotonized_risk(minus, Task::Localization, lambda_loc_plus),
        cls_risk: prep.monotonized_risk(minus, Task::Classification, lambda_cls_plus),
        sweep_points: sweep_candidates(&prep.states).len(),
    };
    Ok(CalibrationResult {
        lambda_cnf_plus: plus,
        lambda_cnf_minus: minus,
        lambda_loc_plus,
        lambda_cls_plus,
        config: config.clone(),
        n_calibration: n,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::losses::{ConfidenceLoss, LocalizationLoss};
    use crate::matching::match_objects;
    use crate::sample::{Detection, GroundTruth};

    fn scores_curves(scores: &[f64]) -> Vec<StepLoss<f64>> {
        scores
            .iter()
            .map(|&s| StepLoss::indicator_below(s))
            .collect()
    }

    #[test]
    fn crc_binary_example() {
        let l = crc_calibrate(&scores_curves(&[0.2, 0.5, 0.8]), 0.5, 1.0, Bounds::unit()).unwrap();
        assert_eq!(l, 0.5);
    }

    #[test]
    fn crc_zero_losses_give_domain_minimum() {
        let curves = vec![StepLoss::constant(0.0); 5];
        assert_eq!(
            crc_calibrate(&curves, 0.2, 1.0, Bounds::new(0.25, 3.0)).unwrap(),
            0.25
        );
    }

    #[test]
    fn crc_rejects_too_small_alpha() {
        let err =
            crc_calibrate(&scores_curves(&[0.2, 0.5, 0.8]), 0.2, 1.0, Bounds::unit()).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAlpha { .. }));
    }

    #[test]
    fn crc_returns_upper_when_nothing_qualifies() {
        let curves = vec![StepLoss::constant(1.0); 3];
        assert_eq!(
            crc_calibrate(&curves, 0.5, 1.0, Bounds::unit()).unwrap(),
            1.0
        );
    }

    #[test]
    fn step_loss_is_right_continuous() {
        let s = StepLoss::indicator_below(0.4);
        assert_eq!(s.eval(0.39), 1.0);
        assert_eq!(s.eval(0.4), 0.0);
    }

    fn gt(l: f64, t: f64, r: f64, b: f64, c: usize) -> GroundTruth<f64> {
        GroundTruth::new(BoundingBox::new(l, t, r, b), c)
    }

    fn det(b: [f64; 4], probs: Vec<f64>, conf: f64) -> Detection<f64> {
        Detection::new(b.into(), probs, conf)
    }

    fn config(alpha_cnf: f64, alpha_loc: f64, alpha_cls: f64) -> CalibrationConfig<f64> {
        let mut c =
            CalibrationConfig::new(alpha_cnf, alpha_loc, alpha_cls, Bounds::new(0.0, 100.0));
        c.matching = MatchDistance::Hausdorff;
        c.loss.localization = LocalizationLoss::Boxwise;
        c
    }

    #[test]
    fn selection_states_follow_prefix_matching() {
        let s = ImageSample::new(
            "a",
            vec![gt(0., 0., 10., 10., 0), gt(30., 30., 40., 40., 1)],
            vec![
                det([29., 29., 41., 41.], vec![0.5, 0.5], 0.9),
                det([0., 0., 10., 10.], vec![0.5, 0.5], 0.6),
                det([1., 1., 9., 9.], vec![0.5, 0.5], 0.6),
                det([100., 100., 110., 110.], vec![0.5, 0.5], 0.2),
            ],
        );
        let st = SelectionStates::build(&s, &MatchDistance::Hausdorff);
        assert_eq!(st.counts, vec![0, 1, 3, 4]);
        for (state, &count) in st.counts.iter().enumerate() {
            let expected = match_objects(
                &s.ground_truths,
                &s.detections[..count],
                &MatchDistance::Hausdorff,
            );
            assert_eq!(st.matchings[state], expected);
        }
        assert_eq!(st.state_at(1.0), 3);
        assert_eq!(st.state_at(0.4), 2);
        assert_eq!(st.state_at(0.39), 1);
        assert_eq!(st.state_at(0.0), 0);
    }

    #[test]
    fn step1_runs_to_exhaustion_when_risk_vanishes() {
        let samples: Vec<_> = (0..4)
            .map(|i| {
                ImageSample::new(
                    format!("{i}"),
                    vec![gt(0., 0., 10., 10., 0)],
                    vec![det([0., 0., 10., 10.], vec![1.0, 0.0], 1.0)],
                )
            })
            .collect();
        let cfg = config(0.25, 0.5, 0.5);
        assert_eq!(seqcrc_step1(&samples, &cfg).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn step1_single_image_example() {
        let samples = vec![ImageSample::new(
            "a",
            vec![gt(0., 0., 10., 10., 0)],
            vec![
                det([0., 0., 10., 10.], vec![1.0, 0.0], 0.9),
                det([50., 50., 60., 60.], vec![0.0, 1.0], 0.3),
            ],
        )];
        let mut cfg = config(0.6, 0.9, 0.9);
        cfg.loss.confidence = ConfidenceLoss::BoxCountThreshold;
        let (plus, minus) = seqcrc_step1(&samples, &cfg).unwrap();
        assert!((plus - 0.1).abs() < 1e-12);
        // without the correction term even the empty selection passes
        assert_eq!(minus, 0.0);
    }

    #[test]
    fn step1_returns_one_when_nothing_is_feasible() {
        let samples = vec![ImageSample::new(
            "a",
            vec![gt(0., 0., 10., 10., 0), gt(20., 0., 30., 10., 0)],
            vec![det([0., 0., 10., 10.], vec![1.0], 0.9)],
        )];
        let mut cfg = config(0.1, 0.9, 0.9);
        cfg.loss.confidence = ConfidenceLoss::BoxCountThreshold;
        assert_eq!(seqcrc_step1(&samples, &cfg).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn step2_zero_losses_converge_to_lower_bound() {
        let samples: Vec<_> = (0..9)
            .map(|i| {
                ImageSample::new(
                    format!("{i}"),
                    vec![gt(0., 0., 10., 10., 0)],
                    vec![det([-1., -1., 11., 11.], vec![1.0, 0.0], 0.8)],
                )
            })
            .collect();
        let cfg = config(0.05, 0.2, 0.2);
        // at 0.2 every detection is kept
        let l = seqcrc_step2(&samples, 0.2, Task::Localization, &cfg).unwrap();
        assert!(l >= 0.0 && l <= 100.0 * 2f64.powi(-32));
    }

    #[test]
    fn step2_hand_built_requirements() {
        // Hausdorff requirements 4, 7, 12 px; boxwise loss; n = 3.
        // (sum + 1)/4 <= alpha with alpha = 0.5 allows one failure.
        let req = [4.0, 7.0, 12.0];
        let samples: Vec<_> = req
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                ImageSample::new(
                    format!("{i}"),
                    vec![gt(0., 0., 100., 100., 0)],
                    vec![det([r, 0., 100., 100.], vec![1.0], 0.9)],
                )
            })
            .collect();
        let cfg = config(0.2, 0.5, 0.5);
        let l = seqcrc_step2(&samples, 0.1, Task::Localization, &cfg).unwrap();
        assert!(
            l >= 7.0 && l - 7.0 <= 100.0 * 2f64.powi(-32) * 2.0,
            "l = {l}"
        );
    }

    #[test]
    fn step2_infeasible_when_margin_range_too_small() {
        let samples = vec![ImageSample::new(
            "a",
            vec![gt(0., 0., 100., 100., 0)],
            vec![det([50., 0., 100., 100.], vec![1.0], 0.9)],
        )];
        let mut cfg = config(0.2, 0.9, 0.9);
        cfg.lambda_loc_bounds = Bounds::new(0.0, 10.0);
        let err = seqcrc_step2(&samples, 0.0, Task::Localization, &cfg).unwrap_err();
        assert!(matches!(err, Error::Step2Infeasible { task: "loc", .. }));
    }

    #[test]
    fn calibrate_checks_precondition() {
        let samples = vec![ImageSample::new(
            "a",
            vec![],
            vec![det([0., 0., 1., 1.], vec![1.0], 0.9)],
        )];
        let cfg = config(0.1, 0.5, 0.5);
        let err = calibrate(&samples, &cfg).unwrap_err();
        assert!(matches!(
            err,
            Error::Precondition {
                task: "loc",
                n: 1,
                ..
            }
        ));
    }

    #[test]
    fn calibrate_degenerate_dataset_hits_domain_minima() {
        let samples: Vec<_> = (0..39)
            .map(|i| {
                ImageSample::new(
                    format!("{i}"),
                    vec![gt(0., 0., 10., 10., 0)],
                    vec![det([0., 0., 10., 10.], vec![1.0, 0.0], 1.0)],
                )
            })
            .collect();
        let r = calibrate(&samples, &config(0.05, 0.1, 0.1)).unwrap();
        assert_eq!(r.lambda_cnf_plus, 0.0);
        assert_eq!(r.lambda_cnf_minus, 0.0);
        assert!(r.lambda_loc_plus <= 100.0 * 2f64.powi(-32));
        assert!(r.lambda_cls_plus <= 2f64.powi(-32));
        assert_eq!(r.diagnostics.loc_risk, 0.0);
    }

    #[test]
    fn calibrate_rejects_unsorted_detections() {
        let mut s = ImageSample::new(
            "a",
            vec![],
            vec![
                det([0., 0., 1., 1.], vec![1.0], 0.9),
                det([0., 0., 1., 1.], vec![1.0], 0.2),
            ],
        );
        s.detections.reverse();
        let err = calibrate(&vec![s; 30], &config(0.01, 0.1, 0.1)).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }

    #[test]
    fn validate_rejects_bad_configs() {
        assert!(config(0.0, 0.1, 0.1).validate().is_err());
        let mut c = config(0.01, 0.1, 0.1);
        c.lambda_loc_bounds = Bounds::new(5.0, 5.0);
        assert!(c.validate().is_err());
        let mut c = config(0.01, 0.1, 0.1);
        c.binary_search_steps = 0;
        assert!(c.validate().is_err());
        assert!(config(0.01, 0.1, 0.1).validate().is_ok());
    }
}
