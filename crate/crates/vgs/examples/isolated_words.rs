//! Speak each category word in isolation and measure how many of the
//! top-10 retrieved test images actually contain the named object.

use vgs::dataset::{generate_toy_corpus, CorpusSpec, Split};
use vgs::model::ModelDims;
use vgs::retrieval::{isolated_word_sweep, word_precision_svg};
use vgs::training::{train, TrainConfig};

fn main() -> vgs::Result<()> {
    let spec = CorpusSpec {
        categories: 6,
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
        epochs: 6,
        batch_size: 16,
        learning_rate: 5e-4,
        seed: 5,
        ..TrainConfig::default()
    };
    let outcome = train(&corpus, &dims, &config)?;

    let sweep = isolated_word_sweep(&outcome.params, &corpus, Split::Test, 5, 10)?;
    println!("word         relevant  P@10");
    for row in &sweep {
        println!("{:<12} {:>8} {:>5.2}", row.word, row.n_relevant, row.precision);
    }
    let mean = sweep.iter().map(|r| r.precision).sum::<f64>() / sweep.len() as f64;
    println!("mean P@10: {mean:.3}");

    let svg = word_precision_svg(&sweep, 10, "seed=5")?;
    let path = std::env::temp_dir().join("vgs-isolated-words.svg");
    std::fs::write(&path, svg)?;
    println!("bar chart written to {}", path.display());
    Ok(())
}
