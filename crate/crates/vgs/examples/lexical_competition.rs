//! Play a target word frame by frame and watch a similar-sounding
//! competitor light up in the top-ranked images until the input
//! disambiguates.

use vgs::competition::{competition_plot, competition_traces, select_pairs, TOP_N};
use vgs::dataset::{generate_toy_corpus, CorpusSpec, Split};
use vgs::model::ModelDims;
use vgs::training::{train, TrainConfig};

fn main() -> vgs::Result<()> {
    // Enough categories to include the planted same-onset pairs, and a
    // test split comfortably larger than the top-N window.
    let spec = CorpusSpec {
        categories: 20,
        images_per_category: 12,
        captions_per_image: 2,
        feature_dim: 32,
        ..CorpusSpec::default()
    };
    let corpus = generate_toy_corpus(&spec, 5)?;
    let pairs = select_pairs(&corpus, &[])?;
    println!("qualifying pairs (target | competitor, shared prefix):");
    for p in &pairs {
        println!("  {:<10} | {:<10} {}", p.target, p.competitor, p.shared_prefix);
    }

    let dims = ModelDims {
        gru_layers: 3,
        gru_units: 48,
        embed_dim: 48,
        ..ModelDims::toy(corpus.feature_dim)
    };
    let config = TrainConfig {
        epochs: 4,
        batch_size: 16,
        learning_rate: 5e-4,
        seed: 5,
        ..TrainConfig::default()
    };
    let outcome = train(&corpus, &dims, &config)?;

    let planted: Vec<_> = pairs
        .iter()
        .filter(|p| p.target == "beaver" || p.target == "meter")
        .cloned()
        .collect();
    let traces = competition_traces(&outcome.params, &corpus, &planted, Split::Test, 5, TOP_N)?;
    let out = std::env::temp_dir().join("vgs-lexical-competition");
    std::fs::create_dir_all(&out)?;
    for trace in &traces {
        println!(
            "\n{} vs {} (chance {:.1} / {:.1}):",
            trace.pair.target, trace.pair.competitor, trace.target_chance, trace.competitor_chance
        );
        println!("  frames  target  competitor");
        for p in &trace.points {
            println!(
                "  {:>6} {:>7} {:>11}",
                p.prefix_len, p.target_count, p.competitor_count
            );
        }
        let svg = competition_plot(trace, "seed=5")?;
        std::fs::write(
            out.join(format!("compete_{}_{}.svg", trace.pair.target, trace.pair.competitor)),
            svg,
        )?;
    }
    println!("\nplots written to {}", out.display());
    Ok(())
}
