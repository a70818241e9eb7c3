//! Correlates per-word retrieval precision with speech and image
//! factors: training-caption frequency, syllable count, and the typical
//! crowding, size, and multiplicity of the word's objects.
//!
//! Rank correlations use Spearman's rho with average ranks on ties and
//! a two-sided p-value from the t approximation; an exact permutation
//! p-value is available for small samples.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{GroundedCorpus, ImageRecord, Split};
use crate::retrieval::WordPrecision;
use crate::{Result, VgsError};

/// One word's precision and candidate explanatory factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorRow {
    pub word: String,
    pub p_at_10: f64,
    /// Token count over training captions.
    pub word_freq: f64,
    pub n_syllables: f64,
    /// Mean other-instance count over images containing the word.
    pub avg_neighbor: f64,
    /// Mean area fraction of the word's instances.
    pub avg_size: f64,
    /// Mean instance count per containing image.
    pub avg_freq: f64,
}

/// Factor rows covering exactly the corpus category list.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTable {
    pub rows: Vec<FactorRow>,
}

/// Names and extractors for the five factors, in report order.
pub const FACTOR_NAMES: [&str; 5] = [
    "word_freq",
    "n_syllables",
    "avg_neighbor",
    "avg_size",
    "avg_freq",
];

impl FactorTable {
    pub fn precision_column(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.p_at_10).collect()
    }

    pub fn factor_column(&self, name: &str) -> Result<Vec<f64>> {
        let pick: fn(&FactorRow) -> f64 = match name {
            "word_freq" => |r| r.word_freq,
            "n_syllables" => |r| r.n_syllables,
            "avg_neighbor" => |r| r.avg_neighbor,
            "avg_size" => |r| r.avg_size,
            "avg_freq" => |r| r.avg_freq,
            other => {
                return Err(VgsError::Invalid(format!("unknown factor {other}")));
            }
        };
        Ok(self.rows.iter().map(pick).collect())
    }
}

/// Mean crowding, size, and multiplicity of a word's objects over the
/// images that contain it. None if no image does.
fn image_stats(images: &[&ImageRecord], word: &str) -> Option<(f64, f64, f64)> {
    let mut n_containing = 0usize;
    let mut neighbor_sum = 0.0;
    let mut freq_sum = 0.0;
    let mut area_sum = 0.0;
    let mut area_count = 0usize;
    for img in images {
        let own: Vec<_> = img
            .objects
            .iter()
            .filter(|o| o.category == word)
            .collect();
        if own.is_empty() {
            continue;
        }
        n_containing += 1;
        neighbor_sum += (img.objects.len() - 1) as f64;
        freq_sum += own.len() as f64;
        for o in &own {
            area_sum += o.area_fraction;
            area_count += 1;
        }
    }
    if n_containing == 0 {
        return None;
    }
    Some((
        neighbor_sum / n_containing as f64,
        area_sum / area_count as f64,
        freq_sum / n_containing as f64,
    ))
}

/// Builds the factor table from training-split statistics and the
/// per-word sweep. Every category word must appear in the sweep and in
/// at least one training image's annotations.
pub fn compute_factors(corpus: &GroundedCorpus, sweep: &[WordPrecision]) -> Result<FactorTable> {
    let precision: BTreeMap<&str, f64> = sweep
        .iter()
        .map(|r| (r.word.as_str(), r.precision))
        .collect();
    let freq = corpus.word_frequency(Split::Train);
    let train_images: Vec<&ImageRecord> = corpus
        .split_image_ids(Split::Train)
        .iter()
        .map(|id| corpus.image(*id).expect("validated split"))
        .collect();
    let rows = corpus
        .categories
        .iter()
        .map(|word| {
            let p_at_10 = *precision
                .get(word.as_str())
                .ok_or_else(|| VgsError::UnknownWord(word.clone()))?;
            let lex = corpus
                .lexicon
                .word(word)
                .ok_or_else(|| VgsError::UnknownWord(word.clone()))?;
            let (avg_neighbor, avg_size, avg_freq) = image_stats(&train_images, word)
                .ok_or_else(|| VgsError::UnknownWord(word.clone()))?;
            Ok(FactorRow {
                word: word.clone(),
                p_at_10,
                word_freq: *freq.get(word).unwrap_or(&0) as f64,
                n_syllables: lex.syllables as f64,
                avg_neighbor,
                avg_size,
                avg_freq,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FactorTable { rows })
}

/// Fractional ranks with ties sharing their average rank.
fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(VgsError::Invalid(
            "correlation undefined for a constant vector".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn check_paired(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(VgsError::Shape(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(VgsError::Invalid(format!(
            "need at least 3 pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(VgsError::Invalid("non-finite sample value".into()));
    }
    Ok(())
}

/// Spearman's rho with a two-sided p-value from the t approximation
/// with n − 2 degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_paired(x, y)?;
    let rho = pearson(&fractional_ranks(x), &fractional_ranks(y))?;
    let n = x.len() as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, n - 2.0)
            .map_err(|e| VgsError::Invalid(format!("t distribution: {e}")))?;
        2.0 * dist.cdf(-t.abs())
    };
    Ok((rho, p))
}

/// Spearman's rho with an exact two-sided permutation p-value: the
/// fraction of all |x|! orderings of y whose |rho| reaches the observed
/// one. Limited to 10 pairs.
pub fn spearman_exact(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_paired(x, y)?;
    let n = x.len();
    if n > 10 {
        return Err(VgsError::Invalid(format!(
            "exact permutation test limited to 10 pairs, got {n}"
        )));
    }
    let rx = fractional_ranks(x);
    let ry = fractional_ranks(y);
    let observed = pearson(&rx, &ry)?;

    // Heap's algorithm over y's ranks; every swap yields a permutation.
    let mut perm = ry.clone();
    let mut counters = vec![0usize; n];
    let mut hits = 0u64;
    let mut total = 0u64;
    let tol = 1e-12;
    let mut tally = |p: &[f64]| {
        total += 1;
        if pearson(&rx, p).map(|r| r.abs() >= observed.abs() - tol).unwrap_or(false) {
            hits += 1;
        }
    };
    tally(&perm);
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            tally(&perm);
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok((observed, hits as f64 / total as f64))
}

/// Effect-size band for a rank correlation.
pub fn effect_label(rho: f64) -> &'static str {
    let a = rho.abs();
    if a >= 0.5 {
        "Moderate"
    } else if a >= 0.3 {
        "Weak"
    } else {
        "None"
    }
}

/// Conventional significance stars for a p-value.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// One factor's correlation with precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorCorrelation {
    pub factor: String,
    pub rho: f64,
    pub p_value: f64,
    pub stars: &'static str,
    pub effect: &'static str,
}

/// Correlates every factor column with P@10, in report order.
pub fn factor_report(table: &FactorTable) -> Result<Vec<FactorCorrelation>> {
    let precision = table.precision_column();
    FACTOR_NAMES
        .iter()
        .map(|name| {
            let column = table.factor_column(name)?;
            let (rho, p_value) = spearman(&precision, &column)?;
            Ok(FactorCorrelation {
                factor: name.to_string(),
                rho,
                p_value,
                stars: significance_stars(p_value),
                effect: effect_label(rho),
            })
        })
        .collect()
}

/// Writes correlations as CSV: `factor,rho,p_value,stars,effect`.
pub fn write_factor_csv(report: &[FactorCorrelation], path: &Path) -> Result<()> {
    let mut out = String::from("factor,rho,p_value,stars,effect\n");
    for row in report {
        out.push_str(&format!(
            "{},{:.4},{:.4e},{},{}\n",
            row.factor, row.rho, row.p_value, row.stars, row.effect
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the underlying per-word table as CSV.
pub fn write_factor_table_csv(table: &FactorTable, path: &Path) -> Result<()> {
    let mut out = String::from(
        "word,p_at_10,word_freq,n_syllables,avg_neighbor,avg_size,avg_freq\n",
    );
    for r in &table.rows {
        out.push_str(&format!(
            "{},{:.4},{},{},{:.4},{:.4},{:.4}\n",
            r.word, r.p_at_10, r.word_freq, r.n_syllables, r.avg_neighbor, r.avg_size, r.avg_freq
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
