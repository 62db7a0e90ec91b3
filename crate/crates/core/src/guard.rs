//! Latency budgeting and the fail-closed safety interlock.
//!
//! [`guard_step`] is a pure state machine over predicted arm masks. A mask
//! that keeps spilling outside the permitted region for enough consecutive
//! frames latches OVERRIDE, which only [`reset_override`] clears.
//! [`guard_run`] drives it frame by frame under a latency budget.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{read_netpbm, ImageBuffer, PairedSample, BINARY_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::{binarize, Predictor};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationPolicy {
    /// Over-budget frames are counted but still evaluated.
    Record,
    /// Over-budget frames are HALTed without consulting the mask.
    AbortFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyBudget {
    pub budget_ms: f64,
    pub policy: ViolationPolicy,
}

impl Default for LatencyBudget {
    fn default() -> Self {
        LatencyBudget {
            budget_ms: 300.0,
            policy: ViolationPolicy::Record,
        }
    }
}

impl LatencyBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_ms > 0.0 && self.budget_ms.is_finite()) {
            return Err(Error::invalid(
                "guard",
                "latency_budget",
                format!("budget_ms {} must be positive", self.budget_ms),
            ));
        }
        Ok(())
    }
}

/// Nearest-rank percentile of ascending `sorted`, `p` in (0, 100].
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub frame_ms: Vec<f64>,
    pub min_ms: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub budget_ms: f64,
    pub violations: usize,
    pub hardware: String,
}

impl LatencyReport {
    pub fn from_times(frame_ms: Vec<f64>, budget_ms: f64, hardware: String) -> Result<Self> {
        if frame_ms.is_empty() {
            return Err(Error::invalid("guard", "latency_report", "no timed frames"));
        }
        let mut sorted = frame_ms.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(LatencyReport {
            min_ms: sorted[0],
            max_ms: sorted[sorted.len() - 1],
            mean_ms: frame_ms.iter().sum::<f64>() / frame_ms.len() as f64,
            p50_ms: nearest_rank(&sorted, 50.0),
            p95_ms: nearest_rank(&sorted, 95.0),
            violations: frame_ms.iter().filter(|&&t| t > budget_ms).count(),
            frame_ms,
            budget_ms,
            hardware,
        })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("frame,ms,violation\n");
        for (i, &t) in self.frame_ms.iter().enumerate() {
            s.push_str(&format!("{i},{t:.3},{}\n", (t > self.budget_ms) as u8));
        }
        s
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            frames: usize,
            min_ms: f64,
            mean_ms: f64,
            p50_ms: f64,
            p95_ms: f64,
            max_ms: f64,
            budget_ms: f64,
            violations: usize,
            hardware: &'a str,
        }
        let mut s = serde_json::to_string_pretty(&Summary {
            frames: self.frame_ms.len(),
            min_ms: self.min_ms,
            mean_ms: self.mean_ms,
            p50_ms: self.p50_ms,
            p95_ms: self.p95_ms,
            max_ms: self.max_ms,
            budget_ms: self.budget_ms,
            violations: self.violations,
            hardware: &self.hardware,
        })
        .expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io("guard", "write_latency", out_dir, e))?;
        for (name, text) in [("latency.csv", self.csv()), ("latency.json", self.summary_json())] {
            let p = out_dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io("guard", "write_latency", &p, e))?;
        }
        Ok(())
    }
}

pub fn hardware_note() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{} {}, {cpus} logical CPUs, debug assertions {}, rayon {}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        if cfg!(debug_assertions) { "on" } else { "off" },
        if par::is_parallel() { "on" } else { "off" }
    )
}

/// Adds a fixed sleep before every prediction.
pub struct Delayed<P> {
    pub inner: P,
    pub delay: Duration,
}

impl<P: Predictor> Predictor for Delayed<P> {
    fn predict(&self, sample: &PairedSample) -> Result<ImageBuffer> {
        std::thread::sleep(self.delay);
        self.inner.predict(sample)
    }
}

/// Time `repetitions` passes over `samples` after one excluded warm-up.
pub fn time_inference(
    pred: &dyn Predictor,
    samples: &[PairedSample],
    budget: &LatencyBudget,
    repetitions: usize,
) -> Result<LatencyReport> {
    budget.validate()?;
    if repetitions == 0 || samples.is_empty() {
        return Err(Error::invalid(
            "guard",
            "time_inference",
            format!("need at least one repetition and one frame, got {repetitions} and {}", samples.len()),
        ));
    }
    pred.predict(&samples[0])?;
    let mut times = Vec::with_capacity(repetitions * samples.len());
    for _ in 0..repetitions {
        for s in samples {
            let t = Instant::now();
            pred.predict(s)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    LatencyReport::from_times(times, budget.budget_ms, hardware_note())
}

/// Permitted zone plus the trigger rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeRegion {
    /// 255 marks permitted pixels.
    pub mask: ImageBuffer,
    pub breach_fraction_threshold: f64,
    pub consecutive_frames_to_override: usize,
    /// Treat a frame with no detected arm as a breach.
    pub halt_on_empty_mask: bool,
}

impl SafeRegion {
    pub fn new(mask: ImageBuffer, breach_fraction_threshold: f64, consecutive_frames_to_override: usize) -> Result<Self> {
        let r = SafeRegion {
            mask,
            breach_fraction_threshold,
            consecutive_frames_to_override,
            halt_on_empty_mask: false,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("guard", "safe_region", d));
        if !(0.0..=1.0).contains(&self.breach_fraction_threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.breach_fraction_threshold));
        }
        if self.consecutive_frames_to_override == 0 {
            return bad("consecutive_frames_to_override must be at least 1".into());
        }
        if self.mask.channels() != 1 || self.mask.samples().iter().any(|&v| v != 0 && v != 255) {
            return bad("region mask must be single-channel with values 0 and 255".into());
        }
        Ok(())
    }

    /// Axis-aligned permitted rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect(width: usize, height: usize, rect: [usize; 4]) -> Result<ImageBuffer> {
        let [x0, y0, x1, y1] = rect;
        if x0 >= x1 || y0 >= y1 || x1 > width || y1 > height {
            return Err(Error::invalid(
                "guard",
                "safe_region",
                format!("rectangle {rect:?} does not fit a {width}x{height} frame"),
            ));
        }
        let mut m = ImageBuffer::filled(width, height, 1, 0);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, 0, 255);
            }
        }
        Ok(m)
    }
}

/// Serializable region settings; the mask comes from a file or a rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub mask: Option<PathBuf>,
    /// `[x0, y0, x1, y1]`; when neither is set, the frame minus a 1/8 margin.
    pub rect: Option<[usize; 4]>,
    pub breach_fraction_threshold: f64,
    pub consecutive_frames_to_override: usize,
    pub halt_on_empty_mask: bool,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            mask: None,
            rect: None,
            breach_fraction_threshold: 0.01,
            consecutive_frames_to_override: 2,
            halt_on_empty_mask: false,
        }
    }
}

impl RegionConfig {
    pub fn build(&self, width: usize, height: usize) -> Result<SafeRegion> {
        let mask = match (&self.mask, self.rect) {
            (Some(p), _) => binarize(&read_netpbm(p)?, BINARY_THRESHOLD),
            (None, Some(r)) => SafeRegion::rect(width, height, r)?,
            (None, None) => SafeRegion::rect(width, height, [width / 8, height / 8, width - width / 8, height - height / 8])?,
        };
        let mut r = SafeRegion::new(mask, self.breach_fraction_threshold, self.consecutive_frames_to_override)?;
        r.halt_on_empty_mask = self.halt_on_empty_mask;
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GuardMode {
    Nominal,
    Breach,
    Override,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Proceed,
    Halt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardState {
    pub mode: GuardMode,
    pub consecutive_breach_count: usize,
    pub last_breach_fraction: f64,
    pub frames_processed: usize,
    pub empty_mask_frames: usize,
}

impl Default for GuardState {
    fn default() -> Self {
        GuardState {
            mode: GuardMode::Nominal,
            consecutive_breach_count: 0,
            last_breach_fraction: 0.0,
            frames_processed: 0,
            empty_mask_frames: 0,
        }
    }
}

/// Share of set mask pixels outside the permitted zone; 0 for an empty mask.
pub fn breach_fraction(mask: &ImageBuffer, region: &SafeRegion) -> Result<(f64, usize)> {
    if !mask.same_dims(&region.mask) {
        return Err(Error::shape(
            "guard",
            "guard_step",
            format!(
                "mask is {}x{}x{}, region is {}x{}x{}",
                mask.width(),
                mask.height(),
                mask.channels(),
                region.mask.width(),
                region.mask.height(),
                region.mask.channels()
            ),
        ));
    }
    let (mut total, mut outside) = (0usize, 0usize);
    for (&m, &r) in mask.samples().iter().zip(region.mask.samples()) {
        match m {
            0 => {}
            255 => {
                total += 1;
                outside += (r == 0) as usize;
            }
            v => {
                return Err(Error::invalid("guard", "guard_step", format!("mask is not binary (value {v})")));
            }
        }
    }
    Ok((if total == 0 { 0.0 } else { outside as f64 / total as f64 }, total))
}

/// Advance the interlock by one frame.
pub fn guard_step(state: &GuardState, mask: &ImageBuffer, region: &SafeRegion) -> Result<(GuardState, Decision)> {
    let (fraction, total) = breach_fraction(mask, region)?;
    let mut next = state.clone();
    next.frames_processed += 1;
    next.last_breach_fraction = fraction;
    if total == 0 {
        next.empty_mask_frames += 1;
    }
    if state.mode == GuardMode::Override {
        return Ok((next, Decision::Halt));
    }
    let breach = fraction > region.breach_fraction_threshold || (total == 0 && region.halt_on_empty_mask);
    if !breach {
        next.consecutive_breach_count = 0;
        next.mode = GuardMode::Nominal;
        return Ok((next, Decision::Proceed));
    }
    next.consecutive_breach_count += 1;
    if next.consecutive_breach_count >= region.consecutive_frames_to_override {
        next.mode = GuardMode::Override;
        Ok((next, Decision::Halt))
    } else {
        next.mode = GuardMode::Breach;
        Ok((next, Decision::Proceed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResetEvent {
    pub frame: usize,
    pub reset_by: String,
    pub mode: GuardMode,
}

/// Operator release of a latched OVERRIDE.
pub fn reset_override(state: &GuardState, operator_token: &str) -> Result<(GuardState, ResetEvent)> {
    if state.mode != GuardMode::Override {
        return Err(Error::State {
            op: "reset_override",
            detail: format!("guard is {:?}, reset is only valid in OVERRIDE", state.mode),
        });
    }
    if operator_token.trim().is_empty() {
        return Err(Error::invalid("guard", "reset_override", "operator token must not be empty"));
    }
    let next = GuardState {
        frames_processed: state.frames_processed,
        empty_mask_frames: state.empty_mask_frames,
        ..GuardState::default()
    };
    let event = ResetEvent {
        frame: state.frames_processed,
        reset_by: operator_token.to_string(),
        mode: next.mode,
    };
    log::warn!("override reset by '{operator_token}' after {} frames", state.frames_processed);
    Ok((next, event))
}

/// One line of the guard event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardEvent {
    pub frame: usize,
    pub ms: f64,
    pub breach_fraction: f64,
    pub mode: GuardMode,
    pub decision: Decision,
    pub reason: String,
}

fn reason_for(prev: &GuardState, next: &GuardState, region: &SafeRegion, fraction: f64) -> &'static str {
    if next.mode == GuardMode::Override {
        return "override";
    }
    if next.empty_mask_frames > prev.empty_mask_frames {
        return "empty-mask";
    }
    if fraction > region.breach_fraction_threshold {
        "breach"
    } else {
        "inside"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardRun {
    pub events: Vec<GuardEvent>,
    pub state: GuardState,
}

impl GuardRun {
    pub fn halts(&self) -> usize {
        self.events.iter().filter(|e| e.decision == Decision::Halt).count()
    }

    pub fn first_override(&self) -> Option<usize> {
        self.events.iter().find(|e| e.mode == GuardMode::Override).map(|e| e.frame)
    }
}

struct EventLog {
    file: Option<(File, PathBuf)>,
}

impl EventLog {
    fn append(&mut self, event: &GuardEvent) -> Result<()> {
        if let Some((f, path)) = &mut self.file {
            let line = serde_json::to_string(event).expect("event serializes");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io("guard", "guard_run", path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Segment, binarize and guard each frame in order, appending one JSON line
/// per frame to `log_path` if given.
pub fn guard_run(
    pred: &dyn Predictor,
    frames: &[PairedSample],
    region: &SafeRegion,
    budget: &LatencyBudget,
    log_path: Option<&Path>,
) -> Result<GuardRun> {
    budget.validate()?;
    region.validate()?;
    let file = match log_path {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io("guard", "guard_run", p, e))?;
            Some((f, p.to_path_buf()))
        }
        None => None,
    };
    let mut log = EventLog { file };
    let mut state = GuardState::default();
    let mut events = Vec::with_capacity(frames.len());
    for (i, sample) in frames.iter().enumerate() {
        let started = Instant::now();
        let predicted = pred.predict(sample).map(|m| binarize(&m, BINARY_THRESHOLD));
        let infer_ms = started.elapsed().as_secs_f64() * 1e3;
        let halt = |ms: f64, reason: &str, state: &GuardState| GuardEvent {
            frame: i,
            ms,
            breach_fraction: state.last_breach_fraction,
            mode: state.mode,
            decision: Decision::Halt,
            reason: reason.to_string(),
        };
        let mask = match predicted {
            Ok(m) => m,
            Err(e) => {
                log::error!("frame {i}: inference failed: {e}");
                let ev = halt(infer_ms, "inference-error", &state);
                log.append(&ev)?;
                events.push(ev);
                continue;
            }
        };
        if !mask.same_dims(&region.mask) {
            let ev = halt(infer_ms, "frame-size", &state);
            log.append(&ev)?;
            return Err(Error::shape(
                "guard",
                "guard_run",
                format!(
                    "frame {i} ({}) is {}x{}, region is {}x{}",
                    sample.source_id,
                    mask.width(),
                    mask.height(),
                    region.mask.width(),
                    region.mask.height()
                ),
            ));
        }
        if budget.policy == ViolationPolicy::AbortFrame && infer_ms > budget.budget_ms {
            let ev = halt(infer_ms, "latency", &state);
            log.append(&ev)?;
            events.push(ev);
            continue;
        }
        let (next, decision) = guard_step(&state, &mask, region)?;
        let reason = reason_for(&state, &next, region, next.last_breach_fraction);
        let ms = started.elapsed().as_secs_f64() * 1e3;
        let ev = GuardEvent {
            frame: i,
            ms,
            breach_fraction: next.last_breach_fraction,
            mode: next.mode,
            decision,
            reason: reason.to_string(),
        };
        state = next;
        log.append(&ev)?;
        events.push(ev);
    }
    Ok(GuardRun { events, state })
}
