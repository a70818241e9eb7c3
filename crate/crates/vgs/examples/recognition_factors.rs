//! Which corpus properties predict how well a word is recognized?
//! Rank-correlate per-word P@10 with frequency, length, and object
//! statistics.

use vgs::dataset::{generate_toy_corpus, CorpusSpec, Split};
use vgs::factors::{compute_factors, factor_report, spearman_exact};
use vgs::model::ModelDims;
use vgs::retrieval::isolated_word_sweep;
use vgs::training::{train, TrainConfig};

fn main() -> vgs::Result<()> {
    let spec = CorpusSpec {
        categories: 10,
        images_per_category: 12,
        captions_per_image: 2,
        feature_dim: 32,
        ..CorpusSpec::default()
    };
    let corpus = generate_toy_corpus(&spec, 5)?;
    let dims = ModelDims {
        gru_layers: 3,
        gru_units: 48,
        embed_dim: 48,
        ..ModelDims::toy(corpus.feature_dim)
    };
    let config = TrainConfig {
        epochs: 5,
        batch_size: 16,
        learning_rate: 5e-4,
        seed: 5,
        ..TrainConfig::default()
    };
    let outcome = train(&corpus, &dims, &config)?;
    let sweep = isolated_word_sweep(&outcome.params, &corpus, Split::Test, 5, 10)?;

    let table = compute_factors(&corpus, &sweep)?;
    println!("word         P@10  freq  syll  neighbor   size  inst");
    for r in &table.rows {
        println!(
            "{:<12} {:>4.2} {:>5} {:>5} {:>9.2} {:>6.3} {:>5.2}",
            r.word, r.p_at_10, r.word_freq, r.n_syllables, r.avg_neighbor, r.avg_size, r.avg_freq
        );
    }

    println!("\nfactor        rho      p      effect");
    for row in factor_report(&table)? {
        println!(
            "{:<12} {:>6.3} {:>9.2e} {:>3} {}",
            row.factor, row.rho, row.p_value, row.stars, row.effect
        );
    }

    // With ten words the exact permutation p-value is feasible too.
    let precision = table.precision_column();
    let freq = table.factor_column("word_freq")?;
    let (rho, p_exact) = spearman_exact(&precision, &freq)?;
    println!("\nword_freq exact permutation test: rho {rho:.3}, p {p_exact:.4}");
    Ok(())
}
