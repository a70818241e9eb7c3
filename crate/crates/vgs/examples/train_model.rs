//! Train the speech-image model for a few epochs on a tiny corpus and
//! watch validation retrieval improve.

use vgs::dataset::{generate_toy_corpus, CorpusSpec};
use vgs::model::ModelDims;
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
    println!("epoch    loss    R@1    R@5   R@10  med.rank");
    for m in &outcome.metrics {
        println!(
            "{:>5} {:>7.3} {:>6.3} {:>6.3} {:>6.3} {:>9.1}",
            m.epoch, m.loss, m.r1, m.r5, m.r10, m.median_rank
        );
    }
    println!("best epoch by validation median rank: {}", outcome.best_epoch);

    let path = std::env::temp_dir().join("vgs-train-model.vgsm");
    outcome.params.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
