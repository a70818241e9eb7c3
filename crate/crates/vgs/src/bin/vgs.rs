//! Pipeline driver: each subcommand wraps one library stage and drops
//! deterministic CSV/SVG artifacts plus a JSON summary into --out.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use vgs::competition::{
    competition_plot, competition_traces, select_pairs, write_competition_csv, TOP_N,
};
use vgs::dataset::{generate_toy_corpus, load_corpus, save_corpus, CorpusSpec, Split};
use vgs::factors::{compute_factors, factor_report, write_factor_csv, write_factor_table_csv};
use vgs::gating::{
    activation_panels, curve_area, gating_curves_for_words, gating_plot, mean_gating_curve,
    mean_gating_plot, peak_report, write_gating_csv, write_peak_csv, write_trajectory_csv,
    Direction, GatingSetup,
};
use vgs::model::{ModelDims, ModelParams};
use vgs::retrieval::{isolated_word_sweep, write_word_precision_csv, word_precision_svg};
use vgs::training::{evaluate_split, train, write_metrics_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "vgs", about = "Grounded-speech retrieval pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus directory (a manifest.jsonl with features/ and mfcc/).
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct CheckpointArg {
    /// Model checkpoint to analyze.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct OutArg {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic grounded-speech corpus.
    Gen {
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of object categories.
        #[arg(long, default_value_t = CorpusSpec::default().categories)]
        categories: usize,
        /// Images per category.
        #[arg(long, default_value_t = CorpusSpec::default().images_per_category)]
        images_per_category: usize,
        /// Captions per image.
        #[arg(long, default_value_t = CorpusSpec::default().captions_per_image)]
        captions_per_image: usize,
    },
    /// Train the speech-image model on a corpus.
    Train {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
        /// GRU width of the trained model.
        #[arg(long, default_value_t = 64)]
        gru_units: usize,
        /// Stacked GRU layers.
        #[arg(long, default_value_t = 5)]
        gru_layers: usize,
    },
    /// Caption-to-image retrieval metrics on the test split.
    Eval {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Isolated-word precision sweep over all category words.
    Words {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ranked images counted as the precision window.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Truncation (gating) curves in both directions.
    Gate {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Activation trajectories and peak counts vs an untrained model.
    Activate {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian smoothing width in trajectory steps.
        #[arg(long, default_value_t = 2.0)]
        sigma: f64,
        /// First-difference rise that counts as a peak.
        #[arg(long, default_value_t = 0.025)]
        peak_threshold: f64,
    },
    /// Lexical competition traces for planted word pairs.
    Compete {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images inspected at each prefix length.
        #[arg(long, default_value_t = TOP_N)]
        top_n: usize,
    },
    /// Rank correlations between word precision and corpus factors.
    Factors {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

fn ensure_out(out: &Path) -> vgs::Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn finish(out: &Path, summary: Value) -> vgs::Result<()> {
    let text = serde_json::to_string_pretty(&summary).expect("serializable summary");
    fs::write(out.join("summary.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> vgs::Result<()> {
    match cli.command {
        Command::Gen {
            out,
            seed,
            categories,
            images_per_category,
            captions_per_image,
        } => {
            let spec = CorpusSpec {
                categories,
                images_per_category,
                captions_per_image,
                ..CorpusSpec::default()
            };
            let corpus = generate_toy_corpus(&spec, seed)?;
            ensure_out(&out.out)?;
            save_corpus(&corpus, &out.out)?;
            finish(
                &out.out,
                json!({
                    "command": "gen",
                    "seed": seed,
                    "categories": corpus.categories.len(),
                    "images": corpus.images.len(),
                    "captions": corpus.captions.len(),
                    "train_images": corpus.split_image_ids(Split::Train).len(),
                    "val_images": corpus.split_image_ids(Split::Val).len(),
                    "test_images": corpus.split_image_ids(Split::Test).len(),
                    "out": out.out,
                }),
            )
        }
        Command::Train {
            corpus,
            out,
            seed,
            epochs,
            batch_size,
            lr,
            margin,
            gru_units,
            gru_layers,
        } => {
            let corpus = load_corpus(&corpus.corpus)?;
            ensure_out(&out.out)?;
            let checkpoint_dir = out.out.join("checkpoints");
            fs::create_dir_all(&checkpoint_dir)?;
            let dims = ModelDims {
                gru_units,
                gru_layers,
                embed_dim: gru_units,
                ..ModelDims::toy(corpus.feature_dim)
            };
            let config = TrainConfig {
                margin,
                learning_rate: lr,
                epochs,
                batch_size,
                seed,
                checkpoint_dir: Some(checkpoint_dir),
                ..TrainConfig::default()
            };
            let outcome = train(&corpus, &dims, &config)?;
            let model_path = out.out.join("model.vgsm");
            outcome.params.save(&model_path)?;
            write_metrics_csv(&outcome.metrics, seed, &out.out.join("metrics.csv"))?;
            let best = outcome
                .best_epoch
                .checked_sub(1)
                .and_then(|i| outcome.metrics.get(i))
                .map(|m| {
                    json!({
                        "epoch": m.epoch,
                        "loss": m.loss,
                        "r_at_1": m.r1,
                        "r_at_5": m.r5,
                        "r_at_10": m.r10,
                        "median_rank": m.median_rank,
                    })
                })
                .unwrap_or(Value::Null);
            finish(
                &out.out,
                json!({
                    "command": "train",
                    "seed": seed,
                    "epochs": epochs,
                    "batch_size": batch_size,
                    "learning_rate": lr,
                    "margin": margin,
                    "gru_units": gru_units,
                    "gru_layers": gru_layers,
                    "best_epoch": outcome.best_epoch,
                    "best_val": best,
                    "model": model_path,
                }),
            )
        }
        Command::Eval {
            corpus,
            checkpoint,
            out,
        } => {
            let corpus = load_corpus(&corpus.corpus)?;
            let params = ModelParams::load(&checkpoint.checkpoint)?;
            ensure_out(&out.out)?;
            let (r1, r5, r10, median) = evaluate_split(&params, &corpus, Split::Test)?;
            finish(
                &out.out,
                json!({
                    "command": "eval",
                    "split": "test",
                    "test_images": corpus.split_image_ids(Split::Test).len(),
                    "test_captions": corpus.split_captions(Split::Test).len(),
                    "r_at_1": r1,
                    "r_at_5": r5,
                    "r_at_10": r10,
                    "median_rank": median,
                }),
            )
        }
        Command::Words {
            corpus,
            checkpoint,
            out,
            seed,
            k,
        } => {
            let corpus = load_corpus(&corpus.corpus)?;
            let params = ModelParams::load(&checkpoint.checkpoint)?;
            ensure_out(&out.out)?;
            let sweep = isolated_word_sweep(&params, &corpus, Split::Test, seed, k)?;
            write_word_precision_csv(&sweep, k, &out.out.join("words.csv"))?;
            let svg = word_precision_svg(&sweep, k, &format!("seed={seed}"))?;
            fs::write(out.out.join("words.svg"), svg)?;
            let mean = sweep.iter().map(|r| r.precision).sum::<f64>() / sweep.len().max(1) as f64;
            let above = sweep.iter().filter(|r| r.precision >= 0.8).count();
            finish(
                &out.out,
                json!({
                    "command": "words",
                    "seed": seed,
                    "k": k,
                    "words": sweep.len(),
                    "mean_precision": mean,
                    "words_at_or_above_0_8": above,
                }),
            )
        }
        Command::Gate {
            corpus,
            checkpoint,
            out,
            seed,
            k,
        } => {
            let corpus = load_corpus(&corpus.corpus)?;
            let params = ModelParams::load(&checkpoint.checkpoint)?;
            ensure_out(&out.out)?;
            let setup = GatingSetup::new(&params, &corpus, Split::Test, seed, k)?;
            let words = corpus.categories.clone();
            let l2r = gating_curves_for_words(&params, &corpus, &setup, &words, Direction::LeftToRight)?;
            let r2l = gating_curves_for_words(&params, &corpus, &setup, &words, Direction::RightToLeft)?;
            let mut all = l2r.clone();
            all.extend(r2l.iter().cloned());
            write_gating_csv(&all, &out.out.join("gating.csv"))?;
            for (a, b) in l2r.iter().zip(&r2l) {
                let svg = gating_plot(a, b, &format!("seed={seed}"))?;
                fs::write(out.out.join(format!("gate_{}.svg", a.word)), svg)?;
            }
            let l2r_mean = mean_gating_curve(&l2r, Direction::LeftToRight)?;
            let r2l_mean = mean_gating_curve(&r2l, Direction::RightToLeft)?;
            let svg = mean_gating_plot(&l2r_mean, &r2l_mean, &format!("seed={seed}"))?;
            fs::write(out.out.join("mean_gating.svg"), svg)?;
            finish(
                &out.out,
                json!({
                    "command": "gate",
                    "seed": seed,
                    "k": k,
                    "words": words.len(),
                    "area_left_to_right": curve_area(&l2r_mean),
                    "area_right_to_left": curve_area(&r2l_mean),
                }),
            )
        }
        Command::Activate {
            corpus,
            checkpoint,
            out,
            seed,
            sigma,
            peak_threshold,
        } => {
            let corpus = load_corpus(&corpus.corpus)?;
            let params = ModelParams::load(&checkpoint.checkpoint)?;
            ensure_out(&out.out)?;
            let untrained = ModelParams::init(&params.dims, seed)?;
            let words = corpus.categories.clone();
            let report = peak_report(
                &params,
                &untrained,
                &corpus,
                &words,
                seed,
                sigma,
                peak_threshold,
            )?;
            write_peak_csv(&report, &out.out.join("peaks.csv"))?;
            let trajectories: Vec<(String, Vec<f64>)> = report
                .rows
                .iter()
                .map(|r| (r.word.clone(), r.trained.cosines.clone()))
                .collect();
            write_trajectory_csv(
                &trajectories,
                params.dims.conv_len,
                &out.out.join("trajectories.csv"),
            )?;
            for row in &report.rows {
                let svg = activation_panels(row, peak_threshold, &format!("seed={seed}"))?;
                fs::write(out.out.join(format!("activation_{}.svg", row.word)), svg)?;
            }
            finish(
                &out.out,
                json!({
                    "command": "activate",
                    "seed": seed,
                    "sigma": sigma,
                    "peak_threshold": peak_threshold,
                    "words": report.rows.len(),
                    "mean_trained_peaks": report.mean_trained_peaks,
                    "mean_untrained_peaks": report.mean_untrained_peaks,
                }),
            )
        }
        Command::Compete {
            corpus,
            checkpoint,
            out,
            seed,
            top_n,
        } => {
            let corpus = load_corpus(&corpus.corpus)?;
            let params = ModelParams::load(&checkpoint.checkpoint)?;
            ensure_out(&out.out)?;
            let pairs = select_pairs(&corpus, &[])?;
            if pairs.is_empty() {
                return Err(vgs::VgsError::Invalid(
                    "no qualifying word pairs in this corpus".into(),
                ));
            }
            let traces = competition_traces(&params, &corpus, &pairs, Split::Test, seed, top_n)?;
            write_competition_csv(&traces, &out.out.join("competition.csv"))?;
            let mut pair_summaries = Vec::new();
            for trace in &traces {
                let svg = competition_plot(trace, &format!("seed={seed}"))?;
                fs::write(
                    out.out
                        .join(format!("compete_{}_{}.svg", trace.pair.target, trace.pair.competitor)),
                    svg,
                )?;
                pair_summaries.push(json!({
                    "target": trace.pair.target,
                    "competitor": trace.pair.competitor,
                    "target_chance": trace.target_chance,
                    "competitor_chance": trace.competitor_chance,
                    "final_target_count": trace.points.last().map(|p| p.target_count),
                    "max_competitor_count": trace.points.iter().map(|p| p.competitor_count).max(),
                }));
            }
            finish(
                &out.out,
                json!({
                    "command": "compete",
                    "seed": seed,
                    "top_n": top_n,
                    "pairs": pair_summaries,
                }),
            )
        }
        Command::Factors {
            corpus,
            checkpoint,
            out,
            seed,
            k,
        } => {
            let corpus = load_corpus(&corpus.corpus)?;
            let params = ModelParams::load(&checkpoint.checkpoint)?;
            ensure_out(&out.out)?;
            let sweep = isolated_word_sweep(&params, &corpus, Split::Test, seed, k)?;
            let table = compute_factors(&corpus, &sweep)?;
            write_factor_table_csv(&table, &out.out.join("factor_table.csv"))?;
            let report = factor_report(&table)?;
            write_factor_csv(&report, &out.out.join("factor_report.csv"))?;
            let rows: BTreeMap<&str, Value> = report
                .iter()
                .map(|r| {
                    (
                        r.factor.as_str(),
                        json!({
                            "rho": r.rho,
                            "p_value": r.p_value,
                            "stars": r.stars,
                            "effect": r.effect,
                        }),
                    )
                })
                .collect();
            finish(
                &out.out,
                json!({
                    "command": "factors",
                    "seed": seed,
                    "k": k,
                    "correlations": rows,
                }),
            )
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("VGS_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
            _ => {
                eprintln!("error: VGS_THREADS must be a positive integer");
                return ExitCode::FAILURE;
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
