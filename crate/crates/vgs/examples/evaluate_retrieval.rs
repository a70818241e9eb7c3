//! Compare caption-to-image retrieval of a briefly trained model
//! against an untrained one on the held-out test split.

use vgs::dataset::{generate_toy_corpus, CorpusSpec, Split};
use vgs::model::{ModelDims, ModelParams};
use vgs::training::{evaluate_split, train, TrainConfig};

fn main() -> vgs::Result<()> {
    let spec = CorpusSpec {
        categories: 6,
        images_per_category: 12,
        captions_per_image: 2,
        feature_dim: 32,
        ..CorpusSpec::default()
    };
    let corpus = generate_toy_corpus(&spec, 5)?;
    let n_test = corpus.split_image_ids(Split::Test).len();
    let dims = ModelDims {
        gru_layers: 3,
        gru_units: 48,
        embed_dim: 48,
        ..ModelDims::toy(corpus.feature_dim)
    };

    let untrained = ModelParams::init(&dims, 5)?;
    let (r1, r5, r10, median) = evaluate_split(&untrained, &corpus, Split::Test)?;
    println!("untrained over {n_test} test images:");
    println!("  R@1 {r1:.3}  R@5 {r5:.3}  R@10 {r10:.3}  median rank {median:.1}");
    println!("  (chance median is about {:.1})", (n_test + 1) as f64 / 2.0);

    let config = TrainConfig {
        epochs: 6,
        batch_size: 16,
        learning_rate: 5e-4,
        seed: 5,
        ..TrainConfig::default()
    };
    let outcome = train(&corpus, &dims, &config)?;
    let (r1, r5, r10, median) = evaluate_split(&outcome.params, &corpus, Split::Test)?;
    println!("after {} epochs:", config.epochs);
    println!("  R@1 {r1:.3}  R@5 {r5:.3}  R@10 {r10:.3}  median rank {median:.1}");
    Ok(())
}
