//! Track how the embedding of a growing word prefix converges to the
//! full word's embedding, then count recognition events as sharp rises
//! in the smoothed trajectory.

use vgs::dataset::{generate_toy_corpus, CorpusSpec};
use vgs::gating::{activation_panels, peak_report, write_peak_csv};
use vgs::model::{ModelDims, ModelParams};
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
    let untrained = ModelParams::init(&dims, 5)?;

    let (sigma, threshold) = (2.0, 0.025);
    let words = corpus.categories.clone();
    let report = peak_report(&outcome.params, &untrained, &corpus, &words, 5, sigma, threshold)?;
    println!("word         trained  untrained");
    for row in &report.rows {
        println!(
            "{:<12} {:>7} {:>10}",
            row.word,
            row.trained.peaks.len(),
            row.untrained.peaks.len()
        );
    }
    println!(
        "mean peaks per word: trained {:.2}, untrained {:.2}",
        report.mean_trained_peaks, report.mean_untrained_peaks
    );

    let out = std::env::temp_dir().join("vgs-activation-peaks");
    std::fs::create_dir_all(&out)?;
    write_peak_csv(&report, &out.join("peaks.csv"))?;
    for row in &report.rows {
        let svg = activation_panels(row, threshold, "seed=5")?;
        std::fs::write(out.join(format!("activation_{}.svg", row.word)), svg)?;
    }
    println!("CSV and panels written to {}", out.display());
    Ok(())
}
