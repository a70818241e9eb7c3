//! Gating analyses: how recognition degrades as frames are removed from
//! a spoken word, and how the embedding converges as a word unfolds.
//!
//! Truncation curves measure P@k of a word with n frames sliced off one
//! side. Activation trajectories measure cosine similarity between each
//! prefix's embedding and the full word's, then smooth the curve and
//! count rises in its first difference as recognition events.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::s;
use rayon::prelude::*;

use crate::dataset::{synthesize_word_with, word_seed, GroundedCorpus, PhonemeSpan, Split};
use crate::dsp::MfccSequence;
use crate::model::{encode_speech, Embedding, ModelParams};
use crate::retrieval::{embed_split_images, precision_at_k, rank_images};
use crate::svg::{panel_column, HLine, LinePlot, Series, VLine};
use crate::{Result, VgsError};

/// Which side frames are removed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Remove from the word onset.
    LeftToRight,
    /// Remove from the word end.
    RightToLeft,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::LeftToRight => "left_to_right",
            Direction::RightToLeft => "right_to_left",
        }
    }
}

/// Drops exactly `n` frames from the chosen side, bit-preserving the
/// rest. Callers keep `n ≤ T − conv_len` so the result stays encodable.
pub fn truncate(mfcc: &MfccSequence, n: usize, direction: Direction) -> Result<MfccSequence> {
    let t = mfcc.len();
    if n > t {
        return Err(VgsError::Invalid(format!(
            "cannot remove {n} of {t} frames"
        )));
    }
    let frames = match direction {
        Direction::LeftToRight => mfcc.frames().slice(s![n.., ..]).to_owned(),
        Direction::RightToLeft => mfcc.frames().slice(s![..t - n, ..]).to_owned(),
    };
    MfccSequence::from_frames(frames, mfcc.frame_hop_ms)
}

/// One truncation step's retrieval quality.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingStep {
    pub frames_removed: usize,
    /// Fraction of the sequence removed, in [0, 1).
    pub fraction_removed: f64,
    pub precision: f64,
}

/// P@k as a function of frames removed from one side of a word.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingCurve {
    pub word: String,
    pub direction: Direction,
    pub steps: Vec<GatingStep>,
    /// Phoneme boundaries of the untruncated synthesis.
    pub boundaries: Vec<PhonemeSpan>,
    /// Length of the untruncated sequence.
    pub total_frames: usize,
}

/// Shared evaluation state for per-word gating runs: the split's image
/// embeddings and relevance sets, computed once.
pub struct GatingSetup {
    pub images: Vec<(u64, Embedding)>,
    pub relevant_by_word: BTreeMap<String, BTreeSet<u64>>,
    pub seed: u64,
    pub k: usize,
}

impl GatingSetup {
    pub fn new(
        params: &ModelParams,
        corpus: &GroundedCorpus,
        split: Split,
        seed: u64,
        k: usize,
    ) -> Result<Self> {
        Ok(GatingSetup {
            images: embed_split_images(params, corpus, split)?,
            relevant_by_word: corpus.images_with_label(split),
            seed,
            k,
        })
    }
}

/// Truncates a synthesized word one frame at a time from the chosen side
/// and measures P@k at every step, down to the conv layer's floor.
pub fn gating_curve(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    setup: &GatingSetup,
    word: &str,
    direction: Direction,
) -> Result<GatingCurve> {
    let synth = synthesize_word_with(
        &corpus.lexicon,
        word,
        word_seed(setup.seed, word),
        &corpus.mfcc_config,
    )?;
    let total = synth.mfcc.len();
    let conv_len = params.dims.conv_len;
    if total < conv_len {
        return Err(VgsError::TooShort {
            got: total,
            need: conv_len,
            unit: "frames",
        });
    }
    let relevant = setup
        .relevant_by_word
        .get(word)
        .cloned()
        .unwrap_or_default();
    let mut steps = Vec::with_capacity(total - conv_len + 1);
    for n in 0..=(total - conv_len) {
        let prefix = truncate(&synth.mfcc, n, direction)?;
        let query = encode_speech(params, &prefix)?;
        let ranking = rank_images(&query, &setup.images)?;
        steps.push(GatingStep {
            frames_removed: n,
            fraction_removed: n as f64 / total as f64,
            precision: precision_at_k(&ranking, &relevant, setup.k)?,
        });
    }
    Ok(GatingCurve {
        word: word.to_string(),
        direction,
        steps,
        boundaries: synth.phoneme_spans,
        total_frames: total,
    })
}

/// Gating curves for many words, in input order.
pub fn gating_curves_for_words(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    setup: &GatingSetup,
    words: &[String],
    direction: Direction,
) -> Result<Vec<GatingCurve>> {
    words
        .par_iter()
        .map(|w| gating_curve(params, corpus, setup, w, direction))
        .collect()
}

/// Number of 2% bins in an aggregated gating curve.
pub const MEAN_CURVE_BINS: usize = 51;

/// Averages curves of one direction onto fraction-removed bins (0% to
/// 100% in 2% steps). Each curve is linearly interpolated between its
/// steps and holds its last value beyond its maximum fraction.
pub fn mean_gating_curve(curves: &[GatingCurve], direction: Direction) -> Result<Vec<(f64, f64)>> {
    let selected: Vec<&GatingCurve> = curves.iter().filter(|c| c.direction == direction).collect();
    if selected.is_empty() {
        return Err(VgsError::Invalid(format!(
            "no {} curves to average",
            direction.as_str()
        )));
    }
    let mut bins = vec![0.0f64; MEAN_CURVE_BINS];
    for curve in &selected {
        if curve.steps.is_empty() {
            return Err(VgsError::Invalid(format!(
                "empty gating curve for {}",
                curve.word
            )));
        }
        for (b, acc) in bins.iter_mut().enumerate() {
            let f = b as f64 * 0.02;
            *acc += sample_curve(&curve.steps, f);
        }
    }
    Ok(bins
        .iter()
        .enumerate()
        .map(|(b, acc)| (b as f64 * 0.02, acc / selected.len() as f64))
        .collect())
}

/// Piecewise-linear lookup over (fraction_removed, precision) steps.
fn sample_curve(steps: &[GatingStep], fraction: f64) -> f64 {
    let first = steps.first().expect("nonempty");
    if fraction <= first.fraction_removed {
        return first.precision;
    }
    for pair in steps.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if fraction <= b.fraction_removed {
            let span = b.fraction_removed - a.fraction_removed;
            if span == 0.0 {
                return b.precision;
            }
            let w = (fraction - a.fraction_removed) / span;
            return a.precision + w * (b.precision - a.precision);
        }
    }
    steps.last().expect("nonempty").precision
}

/// Trapezoidal area under a binned mean curve, over the fraction axis.
pub fn curve_area(mean: &[(f64, f64)]) -> f64 {
    mean.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Cosine similarity of every prefix embedding to the full-word
/// embedding. Entry k covers the prefix of `conv_len + k` frames; the
/// last entry compares the word with itself.
pub fn cosine_trajectory(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    word: &str,
    seed: u64,
) -> Result<Vec<f64>> {
    let synth = synthesize_word_with(
        &corpus.lexicon,
        word,
        word_seed(seed, word),
        &corpus.mfcc_config,
    )?;
    let total = synth.mfcc.len();
    let conv_len = params.dims.conv_len;
    if total < conv_len {
        return Err(VgsError::TooShort {
            got: total,
            need: conv_len,
            unit: "frames",
        });
    }
    let full = encode_speech(params, &synth.mfcc)?;
    (0..=(total - conv_len))
        .map(|k| {
            let prefix = truncate(&synth.mfcc, total - conv_len - k, Direction::RightToLeft)?;
            Ok(encode_speech(params, &prefix)?.dot(&full))
        })
        .collect()
}

/// Gaussian smoothing with a kernel truncated at four standard
/// deviations and renormalized; boundaries reflect (edge repeated).
pub fn smooth_gaussian(curve: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if curve.is_empty() {
        return Err(VgsError::Invalid("cannot smooth an empty curve".into()));
    }
    if !(sigma > 0.0) {
        return Err(VgsError::Invalid("sigma must be positive".into()));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }
    let n = curve.len() as i64;
    let reflect = |mut i: i64| -> usize {
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    Ok((0..n)
        .map(|center| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * curve[reflect(center + j as i64 - radius)])
                .sum()
        })
        .collect())
}

/// Indices k where the first difference c[k+1] − c[k] exceeds the
/// threshold and is a strict local maximum; a flat run of equal maxima
/// counts once at its leftmost index. Endpoints of the difference array
/// are never peaks.
pub fn detect_peaks(curve: &[f64], threshold: f64) -> Vec<usize> {
    if curve.len() < 3 {
        return Vec::new();
    }
    let diffs: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
    let m = diffs.len();
    let mut peaks = Vec::new();
    let mut k = 1;
    while k < m {
        if diffs[k] > threshold && diffs[k] > diffs[k - 1] {
            let mut j = k;
            while j + 1 < m && diffs[j + 1] == diffs[k] {
                j += 1;
            }
            if j + 1 < m && diffs[j + 1] < diffs[k] {
                peaks.push(k);
            }
            k = j + 1;
        } else {
            k += 1;
        }
    }
    peaks
}

/// A word's activation analysis: raw and smoothed prefix-similarity
/// curves, the first difference, and detected peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrajectory {
    pub word: String,
    pub cosines: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub differences: Vec<f64>,
    /// Indices into `differences`.
    pub peaks: Vec<usize>,
}

/// Runs the full activation pipeline for one word.
pub fn analyze_activation(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    word: &str,
    seed: u64,
    sigma: f64,
    threshold: f64,
) -> Result<ActivationTrajectory> {
    let cosines = cosine_trajectory(params, corpus, word, seed)?;
    let smoothed = smooth_gaussian(&cosines, sigma)?;
    let differences: Vec<f64> = smoothed.windows(2).map(|w| w[1] - w[0]).collect();
    let peaks = detect_peaks(&smoothed, threshold);
    Ok(ActivationTrajectory {
        word: word.to_string(),
        cosines,
        smoothed,
        differences,
        peaks,
    })
}

/// Peak counts for one word under two models.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakRow {
    pub word: String,
    pub trained: ActivationTrajectory,
    pub untrained: ActivationTrajectory,
}

/// Activation peak comparison between a trained and an untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakReport {
    pub rows: Vec<PeakRow>,
    pub mean_trained_peaks: f64,
    pub mean_untrained_peaks: f64,
}

/// Analyzes every word under both models. The models must share an
/// architecture; words are processed in input order.
pub fn peak_report(
    trained: &ModelParams,
    untrained: &ModelParams,
    corpus: &GroundedCorpus,
    words: &[String],
    seed: u64,
    sigma: f64,
    threshold: f64,
) -> Result<PeakReport> {
    if trained.dims != untrained.dims {
        return Err(VgsError::Shape(
            "trained and untrained models differ in architecture".into(),
        ));
    }
    if words.is_empty() {
        return Err(VgsError::Invalid("no words to analyze".into()));
    }
    let rows: Vec<PeakRow> = words
        .par_iter()
        .map(|word| {
            Ok(PeakRow {
                word: word.clone(),
                trained: analyze_activation(trained, corpus, word, seed, sigma, threshold)?,
                untrained: analyze_activation(untrained, corpus, word, seed, sigma, threshold)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean_trained_peaks = rows.iter().map(|r| r.trained.peaks.len() as f64).sum::<f64>() / n;
    let mean_untrained_peaks =
        rows.iter().map(|r| r.untrained.peaks.len() as f64).sum::<f64>() / n;
    Ok(PeakReport {
        rows,
        mean_trained_peaks,
        mean_untrained_peaks,
    })
}

/// Writes gating curves as CSV:
/// `word,direction,step,frames_removed,fraction_removed,p_at_10`.
pub fn write_gating_csv(curves: &[GatingCurve], path: &Path) -> Result<()> {
    let mut out = String::from("word,direction,step,frames_removed,fraction_removed,p_at_10\n");
    for curve in curves {
        for (step, s) in curve.steps.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                curve.word,
                curve.direction.as_str(),
                step,
                s.frames_removed,
                s.fraction_removed,
                s.precision
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes activation trajectories as CSV: `word,prefix_len,cosine`.
pub fn write_trajectory_csv(
    rows: &[(String, Vec<f64>)],
    conv_len: usize,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("word,prefix_len,cosine\n");
    for (word, cosines) in rows {
        for (k, c) in cosines.iter().enumerate() {
            out.push_str(&format!("{},{},{:.4}\n", word, conv_len + k, c));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes peak counts as CSV with a trailing mean row.
pub fn write_peak_csv(report: &PeakReport, path: &Path) -> Result<()> {
    let mut out = String::from("word,trained_peaks,untrained_peaks\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.word,
            row.trained.peaks.len(),
            row.untrained.peaks.len()
        ));
    }
    out.push_str(&format!(
        "MEAN,{:.4},{:.4}\n",
        report.mean_trained_peaks, report.mean_untrained_peaks
    ));
    fs::write(path, out)?;
    Ok(())
}

/// Renders one word's two gating curves with phoneme-boundary markers.
pub fn gating_plot(l2r: &GatingCurve, r2l: &GatingCurve, comment: &str) -> Result<String> {
    let to_points = |c: &GatingCurve| {
        c.steps
            .iter()
            .map(|s| (s.fraction_removed, s.precision))
            .collect()
    };
    LinePlot {
        title: format!("Gating curves for \"{}\"", l2r.word),
        x_label: "fraction of frames removed".into(),
        y_label: "P@10".into(),
        series: vec![
            Series {
                label: "left to right".into(),
                points: to_points(l2r),
            },
            Series {
                label: "right to left".into(),
                points: to_points(r2l),
            },
        ],
        v_lines: l2r
            .boundaries
            .iter()
            .map(|b| VLine {
                x: b.start_frame as f64 / l2r.total_frames as f64,
                label: b.symbol.clone(),
            })
            .collect(),
        comment: Some(comment.to_string()),
        x_range: Some((0.0, 1.0)),
        y_range: Some((0.0, 1.0)),
        ..LinePlot::default()
    }
    .render()
}

/// Renders the two direction-averaged curves on the percent-removed axis.
pub fn mean_gating_plot(
    l2r: &[(f64, f64)],
    r2l: &[(f64, f64)],
    comment: &str,
) -> Result<String> {
    LinePlot {
        title: "Mean gating curves".into(),
        x_label: "fraction of frames removed".into(),
        y_label: "mean P@10".into(),
        series: vec![
            Series {
                label: "left to right".into(),
                points: l2r.to_vec(),
            },
            Series {
                label: "right to left".into(),
                points: r2l.to_vec(),
            },
        ],
        comment: Some(comment.to_string()),
        x_range: Some((0.0, 1.0)),
        y_range: Some((0.0, 1.0)),
        ..LinePlot::default()
    }
    .render()
}

/// Renders a word's activation comparison as three stacked panels:
/// untrained trajectory, trained first difference with peaks, trained
/// trajectory.
pub fn activation_panels(row: &PeakRow, threshold: f64, comment: &str) -> Result<String> {
    let curve_points = |c: &[f64]| -> Vec<(f64, f64)> {
        c.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect()
    };
    let untrained = LinePlot {
        title: format!("\"{}\": untrained trajectory", row.word),
        x_label: "prefix step".into(),
        y_label: "cosine".into(),
        series: vec![
            Series {
                label: "raw".into(),
                points: curve_points(&row.untrained.cosines),
            },
            Series {
                label: "smoothed".into(),
                points: curve_points(&row.untrained.smoothed),
            },
        ],
        comment: Some(comment.to_string()),
        ..LinePlot::default()
    }
    .render()?;
    let diffs = LinePlot {
        title: format!("\"{}\": trained first difference", row.word),
        x_label: "prefix step".into(),
        y_label: "difference".into(),
        series: vec![Series {
            label: "first difference".into(),
            points: curve_points(&row.trained.differences),
        }],
        h_lines: vec![HLine {
            y: threshold,
            label: "threshold".into(),
        }],
        v_lines: row
            .trained
            .peaks
            .iter()
            .map(|&k| VLine {
                x: k as f64,
                label: String::new(),
            })
            .collect(),
        ..LinePlot::default()
    }
    .render()?;
    let trained = LinePlot {
        title: format!("\"{}\": trained trajectory", row.word),
        x_label: "prefix step".into(),
        y_label: "cosine".into(),
        series: vec![
            Series {
                label: "raw".into(),
                points: curve_points(&row.trained.cosines),
            },
            Series {
                label: "smoothed".into(),
                points: curve_points(&row.trained.smoothed),
            },
        ],
        ..LinePlot::default()
    }
    .render()?;
    panel_column(&[untrained, diffs, trained])
}
