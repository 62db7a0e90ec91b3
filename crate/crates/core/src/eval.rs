//! Image-subtraction evaluation: diff images, non-zero counts, per-pixel
//! error histograms, mask overlap, and checkpoint-versus-checkpoint reports.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::data::{generate_scene, write_netpbm, DatasetManifest, ImageBuffer, PairedSample, SceneConfig, BINARY_THRESHOLD};
use crate::error::{Error, Result};
use crate::nets::{generate, images_to_tensor, tensor_to_images, Mode, NetworkParams, UNetConfig};
use crate::par;
use crate::train::load_generator;

pub const REPORT_HEADER: &str = "frame,nonzero_a,nonzero_b,mae_a,mae_b,iou_b,dice_b";

/// Absolute per-pixel difference of two single-channel images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffImage {
    pub image: ImageBuffer,
    pub source_a: String,
    pub source_b: String,
}

fn gray(img: &ImageBuffer) -> ImageBuffer {
    if img.channels() == 1 {
        img.clone()
    } else {
        img.to_gray()
    }
}

pub fn subtract(a: &ImageBuffer, b: &ImageBuffer) -> Result<DiffImage> {
    subtract_named(a, b, "a", "b")
}

pub fn subtract_named(a: &ImageBuffer, b: &ImageBuffer, source_a: &str, source_b: &str) -> Result<DiffImage> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            "eval",
            "subtract",
            format!(
                "{source_a} is {}x{}x{}, {source_b} is {}x{}x{}",
                a.width(),
                a.height(),
                a.channels(),
                b.width(),
                b.height(),
                b.channels()
            ),
        ));
    }
    let (ga, gb) = (gray(a), gray(b));
    let samples = ga.samples().iter().zip(gb.samples()).map(|(&x, &y)| x.abs_diff(y)).collect();
    Ok(DiffImage {
        image: ImageBuffer::new(a.width(), a.height(), 1, samples)?,
        source_a: source_a.to_string(),
        source_b: source_b.to_string(),
    })
}

pub fn nonzero_count(d: &DiffImage) -> usize {
    d.image.samples().iter().filter(|&&v| v > 0).count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorHistogram {
    pub bins: [u64; 256],
    pub total: u64,
}

impl Default for ErrorHistogram {
    fn default() -> Self {
        ErrorHistogram {
            bins: [0; 256],
            total: 0,
        }
    }
}

impl ErrorHistogram {
    pub fn merge(&mut self, other: &ErrorHistogram) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn is_conserved(&self) -> bool {
        self.bins.iter().sum::<u64>() == self.total
    }

    pub fn nonzero(&self) -> u64 {
        self.total - self.bins[0]
    }
}

pub fn histogram(d: &DiffImage) -> ErrorHistogram {
    let mut h = ErrorHistogram::default();
    for &v in d.image.samples() {
        h.bins[v as usize] += 1;
    }
    h.total = d.image.samples().len() as u64;
    h
}

/// Pixels `>= threshold` become 255, the rest 0. Multi-channel input is
/// converted to gray first.
pub fn binarize(img: &ImageBuffer, threshold: u8) -> ImageBuffer {
    let mut g = gray(img);
    for v in g.samples_mut() {
        *v = if *v >= threshold { 255 } else { 0 };
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overlap {
    pub iou: f64,
    pub dice: f64,
}

pub fn overlap_metrics(pred: &ImageBuffer, truth: &ImageBuffer) -> Result<Overlap> {
    const OP: &str = "overlap_metrics";
    if !pred.same_dims(truth) || pred.channels() != 1 {
        return Err(Error::shape(
            "eval",
            OP,
            format!(
                "masks must be single-channel and equal size, got {}x{}x{} and {}x{}x{}",
                pred.width(),
                pred.height(),
                pred.channels(),
                truth.width(),
                truth.height(),
                truth.channels()
            ),
        ));
    }
    for (name, m) in [("prediction", pred), ("truth", truth)] {
        if let Some(v) = m.samples().iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::invalid("eval", OP, format!("{name} mask is not binary (value {v})")));
        }
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.samples().iter().zip(truth.samples()) {
        let (p, t) = (p == 255, t == 255);
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    let union = a + b - inter;
    if union == 0 {
        return Ok(Overlap { iou: 1.0, dice: 1.0 });
    }
    Ok(Overlap {
        iou: inter as f64 / union as f64,
        dice: 2.0 * inter as f64 / (a + b) as f64,
    })
}

/// Anything that turns a condition frame into an 8-bit label image.
pub trait Predictor: Sync {
    fn predict(&self, sample: &PairedSample) -> Result<ImageBuffer>;
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn predict(&self, sample: &PairedSample) -> Result<ImageBuffer> {
        (**self).predict(sample)
    }
}

/// Generator in inference mode.
pub struct GeneratorPredictor {
    pub config: UNetConfig,
    pub params: NetworkParams<f32>,
}

impl GeneratorPredictor {
    pub fn load(path: &Path, config: &UNetConfig) -> Result<Self> {
        Ok(GeneratorPredictor {
            config: config.clone(),
            params: load_generator(path, config)?,
        })
    }
}

impl Predictor for GeneratorPredictor {
    fn predict(&self, sample: &PairedSample) -> Result<ImageBuffer> {
        let x = images_to_tensor(&[&sample.condition])?;
        let y = generate(&self.config, &self.params, &x, Mode::Infer, 0)?;
        Ok(tensor_to_images(&y)?.remove(0))
    }
}

/// Returns the ground-truth label: a perfect model.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, sample: &PairedSample) -> Result<ImageBuffer> {
        Ok(sample.label.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub threshold: u8,
    /// Frames whose diff images are kept for writing.
    pub keep_diffs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: BINARY_THRESHOLD,
            keep_diffs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEval {
    pub frame: usize,
    pub source_id: String,
    pub nonzero: usize,
    /// Mean absolute error of the raw (unbinarized) output, in [0, 1].
    pub mae: f64,
    pub overlap: Overlap,
    pub histogram: ErrorHistogram,
}

/// One predictor scored against the truth labels of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub frames: Vec<FrameEval>,
    pub total_nonzero: u64,
    pub mean_nonzero: f64,
    pub mean_mae: f64,
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub histogram: ErrorHistogram,
    pub diffs: Vec<DiffImage>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub total_nonzero: u64,
    pub mean_nonzero: f64,
    pub mean_mae: f64,
    pub mean_iou: f64,
    pub mean_dice: f64,
}

impl Evaluation {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            frames: self.frames.len(),
            total_nonzero: self.total_nonzero,
            mean_nonzero: self.mean_nonzero,
            mean_mae: self.mean_mae,
            mean_iou: self.mean_iou,
            mean_dice: self.mean_dice,
        }
    }
}

fn evaluate_frame(pred: &dyn Predictor, sample: &PairedSample, frame: usize, threshold: u8) -> Result<(FrameEval, DiffImage)> {
    let raw = pred.predict(sample)?;
    let truth = binarize(&sample.label, BINARY_THRESHOLD);
    if !raw.same_dims(&truth) {
        return Err(Error::shape(
            "eval",
            "evaluate",
            format!("prediction for {} has the wrong size", sample.source_id),
        ));
    }
    let mae = raw
        .samples()
        .iter()
        .zip(sample.label.samples())
        .map(|(&p, &t)| p.abs_diff(t) as u64)
        .sum::<u64>() as f64
        / (255.0 * raw.pixel_count() as f64);
    let mask = binarize(&raw, threshold);
    let diff = subtract_named(&mask, &truth, "prediction", &sample.source_id)?;
    let histogram = histogram(&diff);
    let row = FrameEval {
        frame,
        source_id: sample.source_id.clone(),
        nonzero: nonzero_count(&diff),
        mae,
        overlap: overlap_metrics(&mask, &truth)?,
        histogram,
    };
    Ok((row, diff))
}

/// Score `pred` on every sample. Frames run in parallel; aggregation is in
/// frame order with integer counters.
pub fn evaluate(pred: &dyn Predictor, samples: &[PairedSample], opts: &EvalOptions) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::data("eval", "evaluate", "no samples to evaluate"));
    }
    let results = par::map_indices(samples.len(), |i| evaluate_frame(pred, &samples[i], i, opts.threshold));
    let mut frames = Vec::with_capacity(samples.len());
    let mut diffs = Vec::new();
    let mut hist = ErrorHistogram::default();
    for r in results {
        let (row, diff) = r?;
        if !row.histogram.is_conserved() || row.histogram.nonzero() != row.nonzero as u64 {
            return Err(Error::data("eval", "evaluate", format!("histogram of frame {} not conserved", row.frame)));
        }
        hist.merge(&row.histogram);
        if diffs.len() < opts.keep_diffs {
            diffs.push(diff);
        }
        frames.push(row);
    }
    let n = frames.len() as f64;
    let total_nonzero: u64 = frames.iter().map(|f| f.nonzero as u64).sum();
    Ok(Evaluation {
        total_nonzero,
        mean_nonzero: total_nonzero as f64 / n,
        mean_mae: frames.iter().map(|f| f.mae).sum::<f64>() / n,
        mean_iou: frames.iter().map(|f| f.overlap.iou).sum::<f64>() / n,
        mean_dice: frames.iter().map(|f| f.overlap.dice).sum::<f64>() / n,
        histogram: hist,
        frames,
        diffs,
    })
}

/// Improvement ratio with an explicit infinite case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Finite(f64),
    Infinite,
}

impl Ratio {
    /// `a / b` from integer totals; both zero counts as no change.
    pub fn of(a: u64, b: u64) -> Ratio {
        match (a, b) {
            (0, 0) => Ratio::Finite(1.0),
            (_, 0) => Ratio::Infinite,
            (a, b) => Ratio::Finite(a as f64 / b as f64),
        }
    }

    pub fn at_least(self, threshold: f64) -> bool {
        match self {
            Ratio::Infinite => true,
            Ratio::Finite(r) => r >= threshold,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Infinite => write!(f, "inf"),
            Ratio::Finite(r) => write!(f, "{r}"),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ratio::Infinite => s.serialize_str("inf"),
            Ratio::Finite(r) => s.serialize_f64(*r),
        }
    }
}

/// Baseline `a` against candidate `b` on the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparativeReport {
    pub a: Evaluation,
    pub b: Evaluation,
    /// Mean non-zero count of `a` over that of `b`.
    pub ratio: Ratio,
}

pub fn compare(a: &dyn Predictor, b: &dyn Predictor, samples: &[PairedSample], opts: &EvalOptions) -> Result<ComparativeReport> {
    let a = evaluate(a, samples, opts)?;
    let b = evaluate(b, samples, opts)?;
    Ok(ComparativeReport {
        ratio: Ratio::of(a.total_nonzero, b.total_nonzero),
        a,
        b,
    })
}

/// Load two generator checkpoints and compare them on a manifest.
pub fn compare_checkpoints(
    ckpt_a: &Path,
    ckpt_b: &Path,
    manifest: &Path,
    cfg: &UNetConfig,
    opts: &EvalOptions,
) -> Result<ComparativeReport> {
    let a = GeneratorPredictor::load(ckpt_a, cfg)?;
    let b = GeneratorPredictor::load(ckpt_b, cfg)?;
    let samples = DatasetManifest::load(manifest)?.load_samples()?;
    compare(&a, &b, &samples, opts)
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    a: EvalSummary,
    b: EvalSummary,
    ratio: Ratio,
    label_a: &'a str,
    label_b: &'a str,
}

fn io_err<'a>(path: &'a Path, op: &'static str) -> impl Fn(std::io::Error) -> Error + 'a {
    move |e| Error::io("eval", op, path, e)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path, "write_report"))
}

impl ComparativeReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for (fa, fb) in self.a.frames.iter().zip(&self.b.frames) {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                fa.frame, fa.nonzero, fb.nonzero, fa.mae, fb.mae, fb.overlap.iou, fb.overlap.dice
            ));
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("value,count_a,count_b\n");
        for v in 0..256 {
            s.push_str(&format!("{v},{},{}\n", self.a.histogram.bins[v], self.b.histogram.bins[v]));
        }
        s
    }

    pub fn summary_json(&self, label_a: &str, label_b: &str) -> String {
        let summary = ReportSummary {
            a: self.a.summary(),
            b: self.b.summary(),
            ratio: self.ratio,
            label_a,
            label_b,
        };
        let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Write `report.csv`, `summary.json`, `histogram.csv` and diff PGMs.
    pub fn write(&self, out_dir: &Path, label_a: &str, label_b: &str) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(io_err(out_dir, "write_report"))?;
        write_text(&out_dir.join("report.csv"), &self.csv())?;
        write_text(&out_dir.join("histogram.csv"), &self.histogram_csv())?;
        write_text(&out_dir.join("summary.json"), &self.summary_json(label_a, label_b))?;
        for (tag, eval) in [("a", &self.a), ("b", &self.b)] {
            for (d, f) in eval.diffs.iter().zip(&eval.frames) {
                write_netpbm(&d.image, &out_dir.join(format!("diff_{tag}_{:05}.pgm", f.frame)))?;
            }
        }
        Ok(())
    }
}

/// A two-arm-trained predictor on single-arm scenes, next to the same
/// predictor on two-arm scenes from the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub single_arm: Evaluation,
    pub two_arm: Evaluation,
}

pub fn single_arm_probe(pred: &dyn Predictor, scene: &SceneConfig, count: usize, opts: &EvalOptions) -> Result<ProbeReport> {
    if count == 0 {
        return Err(Error::invalid("eval", "single_arm_probe", "count must be at least 1"));
    }
    let render = |arms: usize| -> Result<Vec<PairedSample>> {
        let cfg = SceneConfig {
            arm_count: arms,
            ..scene.clone()
        };
        (0..count).map(|i| Ok(generate_scene(&cfg, i)?.sample)).collect()
    };
    Ok(ProbeReport {
        single_arm: evaluate(pred, &render(1)?, opts)?,
        two_arm: evaluate(pred, &render(2)?, opts)?,
    })
}

#[derive(Serialize)]
struct ProbeSummary {
    single_arm: EvalSummary,
    two_arm: EvalSummary,
}

impl ProbeReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("frame,nonzero_single,nonzero_two,iou_single,iou_two,dice_single,dice_two\n");
        for (a, b) in self.single_arm.frames.iter().zip(&self.two_arm.frames) {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                a.frame, a.nonzero, b.nonzero, a.overlap.iou, b.overlap.iou, a.overlap.dice, b.overlap.dice
            ));
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&ProbeSummary {
            single_arm: self.single_arm.summary(),
            two_arm: self.two_arm.summary(),
        })
        .expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(io_err(out_dir, "write_probe"))?;
        write_text(&out_dir.join("probe.csv"), &self.csv())?;
        write_text(&out_dir.join("probe_summary.json"), &self.summary_json())
    }
}

/// Write one PGM per prediction, named after the sample index.
pub fn write_predictions(pred: &dyn Predictor, samples: &[PairedSample], out_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir, "infer"))?;
    let outputs = par::map_indices(samples.len(), |i| pred.predict(&samples[i]));
    let mut index = String::from("frame,source,file\n");
    for (i, out) in outputs.into_iter().enumerate() {
        let name = format!("pred_{i:05}.pgm");
        write_netpbm(&out?, &out_dir.join(&name))?;
        index.push_str(&format!("{i},{},{name}\n", samples[i].source_id));
    }
    let path = out_dir.join("predictions.csv");
    let mut f = std::fs::File::create(&path).map_err(io_err(&path, "infer"))?;
    f.write_all(index.as_bytes()).map_err(io_err(&path, "infer"))?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray_img(w: usize, h: usize, s: Vec<u8>) -> ImageBuffer {
        ImageBuffer::new(w, h, 1, s).unwrap()
    }

    #[test]
    fn subtract_examples() {
        let a = gray_img(2, 1, vec![10, 200]);
        let b = gray_img(2, 1, vec![60, 100]);
        assert_eq!(subtract(&a, &b).unwrap().image.samples(), &[50, 100]);
        assert_eq!(subtract(&b, &a).unwrap().image, subtract(&a, &b).unwrap().image);
        assert_eq!(nonzero_count(&subtract(&a, &a).unwrap()), 0);
        let white = ImageBuffer::filled(64, 64, 1, 255);
        let black = ImageBuffer::filled(64, 64, 1, 0);
        let d = subtract(&white, &black).unwrap();
        assert!(d.image.samples().iter().all(|&v| v == 255));
        assert_eq!(nonzero_count(&d), 4096);
        assert!(subtract(&a, &gray_img(1, 2, vec![0, 0])).is_err());
    }

    #[test]
    fn rgb_inputs_use_rounded_mean() {
        let a = ImageBuffer::new(1, 1, 3, vec![10, 11, 11]).unwrap();
        let b = ImageBuffer::new(1, 1, 3, vec![0, 0, 0]).unwrap();
        // (32 + 1) / 3 = 11
        assert_eq!(subtract(&a, &b).unwrap().image.samples(), &[11]);
    }

    #[test]
    fn count_and_histogram_examples() {
        let d = DiffImage {
            image: gray_img(4, 1, vec![0, 3, 0, 250]),
            source_a: "a".into(),
            source_b: "b".into(),
        };
        assert_eq!(nonzero_count(&d), 2);
        let h = histogram(&d);
        assert_eq!((h.bins[0], h.bins[3], h.bins[250]), (2, 1, 1));
        assert_eq!(h.bins.iter().sum::<u64>(), 4);
        let z = DiffImage {
            image: ImageBuffer::filled(5, 5, 1, 0),
            ..d
        };
        assert_eq!(histogram(&z).bins[0], 25);
        assert_eq!(histogram(&z).nonzero(), 0);
    }

    #[test]
    fn binarize_examples() {
        let a = gray_img(2, 1, vec![127, 128]);
        assert_eq!(binarize(&a, 128).samples(), &[0, 255]);
        assert_eq!(binarize(&binarize(&a, 128), 128), binarize(&a, 128));
        assert!(binarize(&a, 0).samples().iter().all(|&v| v == 255));
    }

    #[test]
    fn overlap_examples() {
        let mut a = vec![0u8; 400];
        let mut b = vec![0u8; 400];
        a[..100].fill(255);
        b[50..150].fill(255);
        let o = overlap_metrics(&gray_img(20, 20, a.clone()), &gray_img(20, 20, b)).unwrap();
        assert!((o.iou - 1.0 / 3.0).abs() < 1e-12);
        assert!((o.dice - 0.5).abs() < 1e-12);
        let same = overlap_metrics(&gray_img(20, 20, a.clone()), &gray_img(20, 20, a.clone())).unwrap();
        assert_eq!((same.iou, same.dice), (1.0, 1.0));
        let mut c = vec![0u8; 400];
        c[200..250].fill(255);
        let disjoint = overlap_metrics(&gray_img(20, 20, a), &gray_img(20, 20, c)).unwrap();
        assert_eq!((disjoint.iou, disjoint.dice), (0.0, 0.0));
        let empty = ImageBuffer::filled(3, 3, 1, 0);
        assert_eq!(overlap_metrics(&empty, &empty).unwrap().iou, 1.0);
        assert!(overlap_metrics(&gray_img(1, 1, vec![7]), &gray_img(1, 1, vec![0])).is_err());
    }

    fn binary_mask(cells: Vec<bool>) -> ImageBuffer {
        gray_img(8, 8, cells.into_iter().map(|c| if c { 255 } else { 0 }).collect())
    }

    proptest! {
        #[test]
        fn dice_dominates_iou(a in proptest::collection::vec(any::<bool>(), 64), b in proptest::collection::vec(any::<bool>(), 64)) {
            let (ma, mb) = (binary_mask(a), binary_mask(b));
            let o = overlap_metrics(&ma, &mb).unwrap();
            prop_assert!(o.dice >= o.iou);
            prop_assert!((0.0..=1.0).contains(&o.iou) && (0.0..=1.0).contains(&o.dice));
            prop_assert_eq!(o.iou == 1.0, ma == mb);
        }

        #[test]
        fn histogram_conserves(s in proptest::collection::vec(any::<u8>(), 64)) {
            let d = DiffImage { image: gray_img(8, 8, s), source_a: String::new(), source_b: String::new() };
            let h = histogram(&d);
            prop_assert!(h.is_conserved());
            prop_assert_eq!(h.bins[0] as usize + nonzero_count(&d), 64);
        }
    }

    #[test]
    fn ratio_contract() {
        assert_eq!(Ratio::of(10, 2), Ratio::Finite(5.0));
        assert_eq!(Ratio::of(10, 0), Ratio::Infinite);
        assert_eq!(Ratio::of(0, 0), Ratio::Finite(1.0));
        assert_eq!(Ratio::Infinite.to_string(), "inf");
        assert_eq!(serde_json::to_string(&Ratio::Infinite).unwrap(), "\"inf\"");
        assert!(Ratio::Infinite.at_least(5.0));
        assert!(!Ratio::Finite(4.99).at_least(5.0));
    }

    struct Blank;
    impl Predictor for Blank {
        fn predict(&self, s: &PairedSample) -> Result<ImageBuffer> {
            Ok(ImageBuffer::filled(s.label.width(), s.label.height(), 1, 0))
        }
    }

    fn scenes(n: usize) -> Vec<PairedSample> {
        let cfg = SceneConfig {
            width: 32,
            height: 32,
            seed: 2,
            ..SceneConfig::default()
        };
        (0..n).map(|i| generate_scene(&cfg, i).unwrap().sample).collect()
    }

    #[test]
    fn oracle_and_self_comparison() {
        let s = scenes(5);
        let opts = EvalOptions::default();
        let r = compare(&Blank, &OraclePredictor, &s, &opts).unwrap();
        assert_eq!(r.b.total_nonzero, 0);
        assert_eq!(r.ratio, Ratio::Infinite);
        assert!(r.a.total_nonzero > 0);
        let expected: u64 = s.iter().map(|x| x.label.count_set() as u64).sum();
        assert_eq!(r.a.total_nonzero, expected);
        assert!(r.summary_json("blank", "oracle").contains("\"ratio\": \"inf\""));

        let same = compare(&Blank, &Blank, &s, &opts).unwrap();
        assert_eq!(same.ratio, Ratio::Finite(1.0));
        assert_eq!(same.a.frames, same.b.frames);
        assert!(same.a.histogram.is_conserved());
        assert_eq!(same.a.histogram.total, 5 * 32 * 32);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = compare(&Blank, &OraclePredictor, &scenes(6), &EvalOptions::default()).unwrap();
        r.write(dir.path(), "a", "b").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), REPORT_HEADER);
        assert_eq!(csv.lines().count(), 7);
        let hist = std::fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
        assert_eq!(hist.lines().count(), 257);
        assert!(dir.path().join("diff_a_00003.pgm").exists());
        assert!(!dir.path().join("diff_a_00004.pgm").exists());
        assert!(compare(&Blank, &Blank, &[], &EvalOptions::default()).is_err());
    }

    #[test]
    fn probe_is_structural_and_deterministic() {
        let cfg = SceneConfig {
            width: 32,
            height: 32,
            seed: 4,
            ..SceneConfig::default()
        };
        let a = single_arm_probe(&OraclePredictor, &cfg, 3, &EvalOptions::default()).unwrap();
        let b = single_arm_probe(&OraclePredictor, &cfg, 3, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.single_arm.frames.len(), 3);
        assert_eq!(a.single_arm.mean_iou, 1.0);
        assert_eq!(a.probe_csv_lines(), 4);
        let blank = single_arm_probe(&Blank, &cfg, 3, &EvalOptions::default()).unwrap();
        assert!(blank.single_arm.total_nonzero < blank.two_arm.total_nonzero);
    }

    impl ProbeReport {
        fn probe_csv_lines(&self) -> usize {
            self.csv().lines().count()
        }
    }
}
