//! Remove frames from a word's onset or end and track retrieval
//! precision: word onsets should matter more than word endings.

use vgs::dataset::{generate_toy_corpus, CorpusSpec, Split};
use vgs::gating::{
    curve_area, gating_curves_for_words, gating_plot, mean_gating_curve, mean_gating_plot,
    Direction, GatingSetup,
};
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

    let setup = GatingSetup::new(&outcome.params, &corpus, Split::Test, 5, 10)?;
    let words = corpus.categories.clone();
    let l2r = gating_curves_for_words(&outcome.params, &corpus, &setup, &words, Direction::LeftToRight)?;
    let r2l = gating_curves_for_words(&outcome.params, &corpus, &setup, &words, Direction::RightToLeft)?;

    let out = std::env::temp_dir().join("vgs-gating-curves");
    std::fs::create_dir_all(&out)?;
    for (a, b) in l2r.iter().zip(&r2l) {
        let svg = gating_plot(a, b, "seed=5")?;
        std::fs::write(out.join(format!("gate_{}.svg", a.word)), svg)?;
    }
    let l2r_mean = mean_gating_curve(&l2r, Direction::LeftToRight)?;
    let r2l_mean = mean_gating_curve(&r2l, Direction::RightToLeft)?;
    std::fs::write(
        out.join("mean_gating.svg"),
        mean_gating_plot(&l2r_mean, &r2l_mean, "seed=5")?,
    )?;

    let a_l2r = curve_area(&l2r_mean);
    let a_r2l = curve_area(&r2l_mean);
    println!("area under mean curve, onset removal:  {a_l2r:.4}");
    println!("area under mean curve, ending removal: {a_r2l:.4}");
    println!("ratio ending/onset: {:.3} (higher means onsets carry more)", a_r2l / a_l2r);
    println!("plots written to {}", out.display());
    Ok(())
}
