//! Lexical competition traces: as a target word unfolds frame by frame,
//! how often do the top-ranked images mention the target versus a
//! similar-sounding competitor?
//!
//! Pairs are category words sharing their first phoneme; the longer
//! phoneme string is the target. Counts are over the top `TOP_N` images
//! by embedding distance, an image counting once if any of its captions
//! contains the word as an exact lowercase token.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{synthesize_word_with, word_seed, GroundedCorpus, PhonemeSpan, Split};
use crate::gating::{truncate, Direction};
use crate::model::{encode_speech, ModelParams};
use crate::retrieval::{embed_split_images, rank_images};
use crate::svg::{HLine, LinePlot, Series, VLine};
use crate::{Result, VgsError};

/// Images inspected at each prefix length.
pub const TOP_N: usize = 50;

/// Two same-onset words competing for recognition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPair {
    /// The word with more phonemes (surface-form tiebreak).
    pub target: String,
    pub competitor: String,
    /// Leading phonemes the two words share, at least one.
    pub shared_prefix: usize,
}

impl WordPair {
    pub fn label(&self) -> String {
        format!("{}|{}", self.target, self.competitor)
    }
}

/// Minimum training-caption token count for a word to enter a pair.
/// The reference count of 400 assumed 113,287 images with 5 captions
/// each; it scales linearly down to the toy corpus with a floor of 10.
pub fn frequency_threshold(n_train_captions: usize) -> f64 {
    (400.0 / (113_287.0 * 5.0) * n_train_captions as f64).max(10.0)
}

fn shared_prefix_len(a: &[String], b: &[String]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Orders two qualifying words into a pair. The target is the one with
/// more phonemes; equal lengths fall back to the later surface form.
fn order_pair(a: &str, b: &str, corpus: &GroundedCorpus) -> WordPair {
    let pa = &corpus.lexicon.word(a).expect("validated").phonemes;
    let pb = &corpus.lexicon.word(b).expect("validated").phonemes;
    let shared = shared_prefix_len(pa, pb);
    let a_is_target = match pa.len().cmp(&pb.len()) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a > b,
    };
    let (target, competitor) = if a_is_target { (a, b) } else { (b, a) };
    WordPair {
        target: target.to_string(),
        competitor: competitor.to_string(),
        shared_prefix: shared,
    }
}

/// All category-word pairs that share a first phoneme, clear the scaled
/// frequency threshold on training captions, and are not listed as
/// synonyms. Pairs come out sorted by (target, competitor).
pub fn select_pairs(
    corpus: &GroundedCorpus,
    synonyms: &[(String, String)],
) -> Result<Vec<WordPair>> {
    if corpus.categories.is_empty() {
        return Err(VgsError::Invalid("corpus has no category words".into()));
    }
    let freq = corpus.word_frequency(Split::Train);
    let threshold = frequency_threshold(corpus.split_captions(Split::Train).len());
    let frequent: Vec<&String> = corpus
        .categories
        .iter()
        .filter(|w| freq.get(*w).map(|&c| c as f64 >= threshold).unwrap_or(false))
        .collect();
    let excluded = |a: &str, b: &str| {
        synonyms
            .iter()
            .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    };
    let mut pairs = Vec::new();
    for (i, a) in frequent.iter().enumerate() {
        for b in &frequent[i + 1..] {
            let pa = &corpus.lexicon.word(a).expect("validated").phonemes;
            let pb = &corpus.lexicon.word(b).expect("validated").phonemes;
            if pa[0] == pb[0] && !excluded(a, b) {
                pairs.push(order_pair(a, b, corpus));
            }
        }
    }
    pairs.sort_by(|x, y| (&x.target, &x.competitor).cmp(&(&y.target, &y.competitor)));
    Ok(pairs)
}

/// Counts at one prefix length.
#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionPoint {
    /// Frames of the target word seen so far.
    pub prefix_len: usize,
    pub target_count: usize,
    pub competitor_count: usize,
}

/// Top-N mention counts across every prefix of the target word.
#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionTrace {
    pub pair: WordPair,
    pub points: Vec<CompetitionPoint>,
    /// Expected top-N count for the target under random ranking.
    pub target_chance: f64,
    pub competitor_chance: f64,
    /// Phoneme boundaries of the target synthesis.
    pub boundaries: Vec<PhonemeSpan>,
    pub total_frames: usize,
    /// Images inspected per prefix.
    pub top_n: usize,
}

/// Synthesizes the pair's target, encodes every prefix from the conv
/// floor up to the full word, and counts top-N images mentioning each
/// word in at least one caption. Chance level for a word is
/// N × (images mentioning it) / (images in the split).
pub fn competition_trace(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    pair: &WordPair,
    split: Split,
    seed: u64,
    top_n: usize,
) -> Result<CompetitionTrace> {
    let images = embed_split_images(params, corpus, split)?;
    competition_trace_with_images(params, corpus, pair, split, seed, &images, top_n)
}

/// As `competition_trace`, reusing image embeddings across pairs.
pub fn competition_trace_with_images(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    pair: &WordPair,
    split: Split,
    seed: u64,
    images: &[(u64, crate::model::Embedding)],
    top_n: usize,
) -> Result<CompetitionTrace> {
    if top_n == 0 {
        return Err(VgsError::Invalid("top_n must be positive".into()));
    }
    if images.len() < top_n {
        return Err(VgsError::Invalid(format!(
            "split has {} images, need at least {top_n}",
            images.len()
        )));
    }
    let target = pair.target.to_lowercase();
    let competitor = pair.competitor.to_lowercase();
    let words_by_image = corpus.caption_words_by_image(split);
    let mentions = |word: &str| -> BTreeSet<u64> {
        words_by_image
            .iter()
            .filter(|(_, words)| words.contains(word))
            .map(|(&id, _)| id)
            .collect()
    };
    let target_images = mentions(&target);
    let competitor_images = mentions(&competitor);
    let n_images = images.len() as f64;
    let chance = |m: &BTreeSet<u64>| top_n as f64 * m.len() as f64 / n_images;

    let synth = synthesize_word_with(
        &corpus.lexicon,
        &pair.target,
        word_seed(seed, &pair.target),
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
    let points = (conv_len..=total)
        .map(|prefix_len| {
            let prefix = truncate(&synth.mfcc, total - prefix_len, Direction::RightToLeft)?;
            let query = encode_speech(params, &prefix)?;
            let ranking = rank_images(&query, images)?;
            let top = &ranking.entries[..top_n];
            Ok(CompetitionPoint {
                prefix_len,
                target_count: top.iter().filter(|(id, _)| target_images.contains(id)).count(),
                competitor_count: top
                    .iter()
                    .filter(|(id, _)| competitor_images.contains(id))
                    .count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompetitionTrace {
        pair: pair.clone(),
        points,
        target_chance: chance(&target_images),
        competitor_chance: chance(&competitor_images),
        boundaries: synth.phoneme_spans,
        total_frames: total,
        top_n,
    })
}

/// Traces every pair against one split, reusing the image embeddings.
pub fn competition_traces(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    pairs: &[WordPair],
    split: Split,
    seed: u64,
    top_n: usize,
) -> Result<Vec<CompetitionTrace>> {
    let images = embed_split_images(params, corpus, split)?;
    pairs
        .par_iter()
        .map(|p| competition_trace_with_images(params, corpus, p, split, seed, &images, top_n))
        .collect()
}

/// Renders one trace: both counts over prefix frames, chance levels as
/// dashed horizontals, phoneme boundaries as vertical markers.
pub fn competition_plot(trace: &CompetitionTrace, comment: &str) -> Result<String> {
    if trace.points.is_empty() {
        return Err(VgsError::Invalid("empty competition trace".into()));
    }
    let series_of = |pick: fn(&CompetitionPoint) -> usize, label: &str| Series {
        label: label.to_string(),
        points: trace
            .points
            .iter()
            .map(|p| (p.prefix_len as f64, pick(p) as f64))
            .collect(),
    };
    LinePlot {
        title: format!(
            "Competition: {} vs {}",
            trace.pair.target, trace.pair.competitor
        ),
        x_label: "prefix length (frames)".into(),
        y_label: format!("top-{} mention count", trace.top_n),
        series: vec![
            series_of(|p| p.target_count, &trace.pair.target),
            series_of(|p| p.competitor_count, &trace.pair.competitor),
        ],
        h_lines: vec![
            HLine {
                y: trace.target_chance,
                label: format!("{} chance", trace.pair.target),
            },
            HLine {
                y: trace.competitor_chance,
                label: format!("{} chance", trace.pair.competitor),
            },
        ],
        v_lines: trace
            .boundaries
            .iter()
            .map(|b| VLine {
                x: b.start_frame as f64,
                label: b.symbol.clone(),
            })
            .collect(),
        comment: Some(comment.to_string()),
        y_range: Some((0.0, trace.top_n as f64)),
        ..LinePlot::default()
    }
    .render()
}

/// Writes traces as CSV:
/// `pair,prefix_len,target_count,competitor_count,target_chance,competitor_chance`.
pub fn write_competition_csv(traces: &[CompetitionTrace], path: &Path) -> Result<()> {
    let mut out = String::from(
        "pair,prefix_len,target_count,competitor_count,target_chance,competitor_chance\n",
    );
    for trace in traces {
        for p in &trace.points {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                trace.pair.label(),
                p.prefix_len,
                p.target_count,
                p.competitor_count,
                trace.target_chance,
                trace.competitor_chance
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_corpus, CorpusSpec};
    use crate::model::{ModelDims, ModelParams};

    fn corpus(categories: usize, ipc: usize) -> GroundedCorpus {
        let spec = CorpusSpec {
            categories,
            images_per_category: ipc,
            captions_per_image: 3,
            feature_dim: 8,
            ..CorpusSpec::default()
        };
        generate_toy_corpus(&spec, 44).unwrap()
    }

    #[test]
    fn threshold_scales_with_a_floor() {
        assert_eq!(frequency_threshold(1_500), 10.0);
        assert_eq!(frequency_threshold(0), 10.0);
        let full = frequency_threshold(113_287 * 5);
        assert!((full - 400.0).abs() < 1e-9);
    }

    #[test]
    fn pair_selection_matches_a_quadratic_oracle() {
        let corpus = corpus(20, 10);
        let pairs = select_pairs(&corpus, &[]).unwrap();
        assert!(!pairs.is_empty());

        // Oracle: filter every unordered word pair directly.
        let freq = corpus.word_frequency(Split::Train);
        let threshold = frequency_threshold(corpus.split_captions(Split::Train).len());
        let mut expect = Vec::new();
        for a in &corpus.categories {
            for b in &corpus.categories {
                if a >= b {
                    continue;
                }
                let fa = *freq.get(a).unwrap_or(&0) as f64;
                let fb = *freq.get(b).unwrap_or(&0) as f64;
                let pa = &corpus.lexicon.word(a).unwrap().phonemes;
                let pb = &corpus.lexicon.word(b).unwrap().phonemes;
                if fa >= threshold && fb >= threshold && pa[0] == pb[0] {
                    expect.push(order_pair(a, b, &corpus));
                }
            }
        }
        expect.sort_by(|x, y| (&x.target, &x.competitor).cmp(&(&y.target, &y.competitor)));
        assert_eq!(pairs, expect);

        for p in &pairs {
            assert_ne!(p.target, p.competitor);
            assert!(p.shared_prefix >= 1);
            let pt = &corpus.lexicon.word(&p.target).unwrap().phonemes;
            let pc = &corpus.lexicon.word(&p.competitor).unwrap().phonemes;
            assert_eq!(pt[0], pc[0]);
            assert!(
                pt.len() > pc.len() || (pt.len() == pc.len() && p.target > p.competitor)
            );
        }
    }

    #[test]
    fn planted_pairs_are_selected_and_synonyms_are_not() {
        let corpus = corpus(20, 10);
        let pairs = select_pairs(&corpus, &[]).unwrap();
        let has = |t: &str, c: &str| pairs.iter().any(|p| p.target == t && p.competitor == c);
        assert!(has("beaver", "bee"));
        assert!(has("meter", "meat"));

        let synonyms = vec![("bee".to_string(), "beaver".to_string())];
        let filtered = select_pairs(&corpus, &synonyms).unwrap();
        assert!(!filtered.iter().any(|p| p.target == "beaver" && p.competitor == "bee"));
        assert!(filtered.iter().any(|p| p.target == "meter"));
    }

    #[test]
    fn disjoint_onsets_yield_no_pairs() {
        // dog and kite are the only categories; d and k differ.
        let corpus = corpus(2, 10);
        assert_eq!(select_pairs(&corpus, &[]).unwrap(), Vec::<WordPair>::new());
    }

    fn tiny_model(corpus: &GroundedCorpus) -> ModelParams {
        let dims = ModelDims {
            mfcc_dim: 13,
            conv_filters: 8,
            conv_len: 6,
            conv_stride: 3,
            gru_layers: 2,
            gru_units: 12,
            image_dim: corpus.feature_dim,
            embed_dim: 12,
        };
        ModelParams::init(&dims, 3).unwrap()
    }

    #[test]
    fn trace_counts_stay_in_bounds_and_reproduce() {
        // 20 categories, 13 images each: test split has 20 * 13 / 3
        // rounded per category, comfortably above TOP_N.
        let corpus = corpus(20, 13);
        assert!(corpus.split_image_ids(Split::Test).len() >= TOP_N);
        let params = tiny_model(&corpus);
        let pair = WordPair {
            target: "beaver".into(),
            competitor: "bee".into(),
            shared_prefix: 1,
        };
        let trace = competition_trace(&params, &corpus, &pair, Split::Test, 7, TOP_N).unwrap();
        assert!(!trace.points.is_empty());
        let conv_len = params.dims.conv_len;
        assert_eq!(trace.points[0].prefix_len, conv_len);
        assert_eq!(trace.points.last().unwrap().prefix_len, trace.total_frames);
        for (i, p) in trace.points.iter().enumerate() {
            assert_eq!(p.prefix_len, conv_len + i);
            assert!(p.target_count <= TOP_N);
            assert!(p.competitor_count <= TOP_N);
        }
        let again = competition_trace(&params, &corpus, &pair, Split::Test, 7, TOP_N).unwrap();
        assert_eq!(trace, again);
    }

    #[test]
    fn chance_levels_match_a_direct_frequency_count() {
        let corpus = corpus(20, 13);
        let params = tiny_model(&corpus);
        let pair = WordPair {
            target: "meter".into(),
            competitor: "meat".into(),
            shared_prefix: 2,
        };
        let trace = competition_trace(&params, &corpus, &pair, Split::Test, 7, TOP_N).unwrap();
        let ids = corpus.split_image_ids(Split::Test);
        let count_mentions = |word: &str| {
            ids.iter()
                .filter(|id| {
                    corpus
                        .captions_of(**id)
                        .iter()
                        .any(|c| c.tokens.iter().any(|t| t == word))
                })
                .count()
        };
        let n = ids.len() as f64;
        let expect_t = TOP_N as f64 * count_mentions("meter") as f64 / n;
        let expect_c = TOP_N as f64 * count_mentions("meat") as f64 / n;
        assert!((trace.target_chance - expect_t).abs() < 1e-12);
        assert!((trace.competitor_chance - expect_c).abs() < 1e-12);
        assert!(trace.target_chance > 0.0);
        assert!(trace.competitor_chance > 0.0);
    }

    #[test]
    fn small_splits_are_rejected() {
        let corpus = corpus(3, 8);
        let params = tiny_model(&corpus);
        let pair = WordPair {
            target: "glass".into(),
            competitor: "grass".into(),
            shared_prefix: 1,
        };
        let err = competition_trace(&params, &corpus, &pair, Split::Test, 7, TOP_N);
        assert!(err.is_err());
    }

    #[test]
    fn plot_has_two_series_and_two_chance_lines() {
        let trace = CompetitionTrace {
            pair: WordPair {
                target: "beaver".into(),
                competitor: "bee".into(),
                shared_prefix: 1,
            },
            points: vec![
                CompetitionPoint { prefix_len: 6, target_count: 5, competitor_count: 20 },
                CompetitionPoint { prefix_len: 7, target_count: 25, competitor_count: 10 },
                CompetitionPoint { prefix_len: 8, target_count: 40, competitor_count: 2 },
            ],
            target_chance: 4.0,
            competitor_chance: 6.0,
            boundaries: vec![
                PhonemeSpan { symbol: "b".into(), start_frame: 6, end_frame: 7 },
                PhonemeSpan { symbol: "ii".into(), start_frame: 7, end_frame: 8 },
            ],
            total_frames: 8,
            top_n: 50,
        };
        let svg = competition_plot(&trace, "seed=7").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("class=\"chance-line\"").count(), 2);
        assert_eq!(svg.matches("class=\"marker-line\"").count(), 2);
        assert!(svg.contains("seed=7"));

        let empty = CompetitionTrace { points: vec![], ..trace.clone() };
        assert!(competition_plot(&empty, "").is_err());

        let dir = std::env::temp_dir().join("vgs-competition-csv");
        std::fs::create_dir_all(&dir).unwrap();
        write_competition_csv(std::slice::from_ref(&trace), &dir.join("c.csv")).unwrap();
        let text = std::fs::read_to_string(dir.join("c.csv")).unwrap();
        assert!(text.starts_with(
            "pair,prefix_len,target_count,competitor_count,target_chance,competitor_chance\n"
        ));
        assert!(text.contains("beaver|bee,6,5,20,4.0000,6.0000"));
    }
}
