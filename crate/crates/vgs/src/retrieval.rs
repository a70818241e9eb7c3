//! Caption-to-image retrieval metrics: recall at k, median rank, and
//! per-word precision for isolated spoken words.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{synthesize_word_with, word_seed, GroundedCorpus, Split};
use crate::model::{cosine_distance, encode_image, encode_speech, Embedding, ModelParams};
use crate::svg::{BarPlot, HLine};
use crate::{Result, VgsError};

/// Images ordered best-first for one query.
///
/// Invariants: a permutation of the evaluated set; distances
/// non-decreasing; ties broken by ascending image id.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// (image id, cosine distance), best first.
    pub entries: Vec<(u64, f64)>,
}

impl Ranking {
    /// 1-based rank of an image id.
    pub fn rank_of(&self, id: u64) -> Option<usize> {
        self.entries.iter().position(|&(i, _)| i == id).map(|p| p + 1)
    }
}

/// Ranks an image set against a query embedding by (distance, id).
pub fn rank_images(query: &Embedding, images: &[(u64, Embedding)]) -> Result<Ranking> {
    if images.is_empty() {
        return Err(VgsError::Invalid("empty image set".into()));
    }
    let mut entries: Vec<(u64, f64)> = images
        .iter()
        .map(|(id, e)| (*id, cosine_distance(query, e)))
        .collect();
    // Unit embeddings keep distances finite, so the comparator is total.
    entries.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance").then(a.0.cmp(&b.0)));
    Ok(Ranking { entries })
}

/// Gold rank without building the full ordering: one plus the number of
/// images that beat the gold under the (distance, id) rule.
pub fn gold_rank_direct(
    query: &Embedding,
    images: &[(u64, Embedding)],
    gold: u64,
) -> Result<usize> {
    let gold_embedding = images
        .iter()
        .find(|(id, _)| *id == gold)
        .map(|(_, e)| e)
        .ok_or_else(|| VgsError::Invalid(format!("gold image {gold} not in evaluated set")))?;
    let d_gold = cosine_distance(query, gold_embedding);
    let mut rank = 1;
    for (id, e) in images {
        if *id == gold {
            continue;
        }
        let d = cosine_distance(query, e);
        if d < d_gold || (d == d_gold && *id < gold) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Fraction of queries whose gold rank is at most k.
pub fn recall_at_k(gold_ranks: &[usize], k: usize) -> Result<f64> {
    if gold_ranks.is_empty() {
        return Err(VgsError::Invalid("no queries".into()));
    }
    if k == 0 {
        return Err(VgsError::Invalid("k must be positive".into()));
    }
    let hits = gold_ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / gold_ranks.len() as f64)
}

/// Median gold rank; the mean of the two middle ranks when the count is
/// even.
pub fn median_rank(gold_ranks: &[usize]) -> Result<f64> {
    if gold_ranks.is_empty() {
        return Err(VgsError::Invalid("no queries".into()));
    }
    let mut sorted = gold_ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    })
}

/// Fraction of the top-k images that are in the relevant set.
pub fn precision_at_k(ranking: &Ranking, relevant: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(VgsError::Invalid("k must be positive".into()));
    }
    if k > ranking.entries.len() {
        return Err(VgsError::Invalid(format!(
            "k = {k} exceeds the {} evaluated images",
            ranking.entries.len()
        )));
    }
    let hits = ranking.entries[..k]
        .iter()
        .filter(|(id, _)| relevant.contains(id))
        .count();
    Ok(hits as f64 / k as f64)
}

/// One row of the isolated-word evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WordPrecision {
    pub word: String,
    /// Images in the evaluated split whose labels contain the word.
    pub n_relevant: usize,
    pub precision: f64,
}

/// Encodes every image of a split once, in id order.
pub fn embed_split_images(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    split: Split,
) -> Result<Vec<(u64, Embedding)>> {
    corpus
        .split_image_ids(split)
        .iter()
        .map(|&id| {
            let img = corpus
                .image(id)
                .ok_or_else(|| VgsError::Invalid(format!("missing image {id}")))?;
            Ok((id, encode_image(params, &img.features)?))
        })
        .collect()
}

/// Synthesizes each category word in isolation, encodes it, and measures
/// P@k against the split's images. Word synthesis seeds derive from
/// `seed` per word, so runs are reproducible word by word.
pub fn isolated_word_sweep(
    params: &ModelParams,
    corpus: &GroundedCorpus,
    split: Split,
    seed: u64,
    k: usize,
) -> Result<Vec<WordPrecision>> {
    let images = embed_split_images(params, corpus, split)?;
    let by_label = corpus.images_with_label(split);
    corpus
        .categories
        .par_iter()
        .map(|word| {
            let synth = synthesize_word_with(
                &corpus.lexicon,
                word,
                word_seed(seed, word),
                &corpus.mfcc_config,
            )?;
            let query = encode_speech(params, &synth.mfcc)?;
            let ranking = rank_images(&query, &images)?;
            let relevant = by_label.get(word).cloned().unwrap_or_default();
            Ok(WordPrecision {
                word: word.clone(),
                n_relevant: relevant.len(),
                precision: precision_at_k(&ranking, &relevant, k)?,
            })
        })
        .collect()
}

/// Writes the word sweep as CSV: `word,n_relevant,p_at_k`.
pub fn write_word_precision_csv(rows: &[WordPrecision], k: usize, path: &Path) -> Result<()> {
    let mut out = format!("word,n_relevant,p_at_{k}\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.4}\n", r.word, r.n_relevant, r.precision));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Renders the word sweep as a bar chart with the 0.8 reference level.
pub fn word_precision_svg(rows: &[WordPrecision], k: usize, comment: &str) -> Result<String> {
    BarPlot {
        title: format!("Isolated-word precision at {k}"),
        y_label: format!("P@{k}"),
        bars: rows.iter().map(|r| (r.word.clone(), r.precision)).collect(),
        h_lines: vec![HLine {
            y: 0.8,
            label: "0.8".into(),
        }],
        comment: Some(comment.to_string()),
        y_range: Some((0.0, 1.0)),
    }
    .render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_corpus, CorpusSpec};
    use crate::model::ModelDims;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};

    type TestRng = rand::rngs::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Embedding {
        Embedding::normalize(Array1::from_vec(v)).unwrap()
    }

    fn random_unit(rng: &mut TestRng, dim: usize) -> Embedding {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(e) = Embedding::normalize(Array1::from_vec(v)) {
                return e;
            }
        }
    }

    #[test]
    fn exact_match_ranks_first_with_zero_distance() {
        let q = unit(vec![1.0, 0.0, 0.0]);
        let images = vec![
            (7u64, unit(vec![0.0, 1.0, 0.0])),
            (3u64, unit(vec![1.0, 0.0, 0.0])),
            (9u64, unit(vec![0.0, 0.0, 1.0])),
        ];
        let ranking = rank_images(&q, &images).unwrap();
        assert_eq!(ranking.entries[0].0, 3);
        assert!(ranking.entries[0].1.abs() < 1e-12);
        assert_eq!(ranking.rank_of(3), Some(1));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let q = unit(vec![1.0, 0.0]);
        let e = unit(vec![0.0, 1.0]);
        let images = vec![(5u64, e.clone()), (2u64, e.clone()), (8u64, e)];
        let ranking = rank_images(&q, &images).unwrap();
        let ids: Vec<u64> = ranking.entries.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![2, 5, 8]);
    }

    #[test]
    fn ranking_matches_naive_sort_oracle() {
        let mut rng = TestRng::seed_from_u64(77);
        for _ in 0..20 {
            let images: Vec<(u64, Embedding)> = (0..50)
                .map(|i| (i as u64 * 3 + 1, random_unit(&mut rng, 6)))
                .collect();
            let q = random_unit(&mut rng, 6);
            let ranking = rank_images(&q, &images).unwrap();
            let mut naive: Vec<(u64, f64)> = images
                .iter()
                .map(|(id, e)| (*id, cosine_distance(&q, e)))
                .collect();
            for i in 0..naive.len() {
                for j in i + 1..naive.len() {
                    let a = naive[i];
                    let b = naive[j];
                    if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) {
                        naive[i] = b;
                        naive[j] = a;
                    }
                }
            }
            assert_eq!(ranking.entries, naive);
        }
    }

    #[test]
    fn direct_gold_rank_equals_full_ranking_position() {
        let mut rng = TestRng::seed_from_u64(123);
        for round in 0..30 {
            let n = 20;
            let mut images: Vec<(u64, Embedding)> = (0..n)
                .map(|i| (i as u64, random_unit(&mut rng, 4)))
                .collect();
            // Force distance ties by duplicating some embeddings.
            let dup = images[0].1.clone();
            images[5].1 = dup.clone();
            images[11].1 = dup;
            let q = random_unit(&mut rng, 4);
            let gold = (round % n) as u64;
            let ranking = rank_images(&q, &images).unwrap();
            assert_eq!(
                gold_rank_direct(&q, &images, gold).unwrap(),
                ranking.rank_of(gold).unwrap()
            );
        }
        let q = unit(vec![1.0, 0.0]);
        let images = vec![(0u64, unit(vec![0.0, 1.0]))];
        assert!(gold_rank_direct(&q, &images, 42).is_err());
    }

    #[test]
    fn hand_counted_recall_and_median() {
        let ranks = [1, 3, 7, 20];
        assert_eq!(recall_at_k(&ranks, 5).unwrap(), 0.5);
        assert_eq!(median_rank(&ranks).unwrap(), 5.0);
        assert_eq!(recall_at_k(&ranks, 1).unwrap(), 0.25);
        assert_eq!(median_rank(&[5]).unwrap(), 5.0);
        assert_eq!(median_rank(&[2, 100]).unwrap(), 51.0);
        let all_first = [1, 1, 1];
        assert_eq!(recall_at_k(&all_first, 1).unwrap(), 1.0);
        assert_eq!(median_rank(&all_first).unwrap(), 1.0);
        assert!(recall_at_k(&[], 5).is_err());
        assert!(median_rank(&[]).is_err());
        assert!(recall_at_k(&ranks, 0).is_err());
    }

    #[test]
    fn recall_is_monotone_and_saturates() {
        let ranks = [4, 2, 9, 9, 1, 6];
        let mut prev = 0.0;
        for k in 1..=9 {
            let r = recall_at_k(&ranks, k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(recall_at_k(&ranks, 9).unwrap(), 1.0);
    }

    #[test]
    fn precision_counts_relevant_prefix() {
        let ranking = Ranking {
            entries: (0..12u64).map(|i| (i, i as f64 * 0.01)).collect(),
        };
        let relevant: BTreeSet<u64> = [0, 1, 2, 3, 4, 5, 6, 20, 21].into_iter().collect();
        assert_eq!(precision_at_k(&ranking, &relevant, 10).unwrap(), 0.7);
        let none: BTreeSet<u64> = BTreeSet::new();
        assert_eq!(precision_at_k(&ranking, &none, 10).unwrap(), 0.0);
        assert!(precision_at_k(&ranking, &relevant, 0).is_err());
        assert!(precision_at_k(&ranking, &relevant, 13).is_err());
    }

    proptest! {
        #[test]
        fn ranking_is_invariant_to_input_order(seed in 0u64..1000) {
            let mut rng = TestRng::seed_from_u64(seed);
            let images: Vec<(u64, Embedding)> = (0..12)
                .map(|i| (i as u64, random_unit(&mut rng, 3)))
                .collect();
            let q = random_unit(&mut rng, 3);
            let forward = rank_images(&q, &images).unwrap();
            let mut reversed = images.clone();
            reversed.reverse();
            let backward = rank_images(&q, &reversed).unwrap();
            prop_assert_eq!(forward, backward);
        }
    }

    #[test]
    fn word_sweep_covers_all_categories_on_an_untrained_model() {
        let spec = CorpusSpec {
            categories: 4,
            images_per_category: 6,
            captions_per_image: 1,
            feature_dim: 8,
            ..CorpusSpec::default()
        };
        let corpus = generate_toy_corpus(&spec, 2).unwrap();
        let params = ModelParams::init(&ModelDims::toy(8), 1).unwrap();
        let rows = isolated_word_sweep(&params, &corpus, Split::Train, 5, 10).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.precision));
            assert!(r.n_relevant > 0);
        }
        let dir = std::env::temp_dir().join("vgs-retrieval-artifacts");
        std::fs::create_dir_all(&dir).unwrap();
        write_word_precision_csv(&rows, 10, &dir.join("words.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.join("words.csv")).unwrap();
        assert!(csv.starts_with("word,n_relevant,p_at_10\n"));
        assert_eq!(csv.lines().count(), 5);
        let svg = word_precision_svg(&rows, 10, "seed=5").unwrap();
        assert_eq!(svg.matches("class=\"bar\"").count(), 4);
        assert!(svg.contains("chance-line"));
    }
}
