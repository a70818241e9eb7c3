//! Synthesize one spoken word, write it as WAV, and extract MFCC
//! features, round-tripping them through the MFC1 container.

use vgs::dataset::{builtin_lexicon, synthesize_word_audio, synthesize_word};
use vgs::dsp::{compute_mfcc, read_wav, write_wav, MfccConfig, MfccSequence};

fn main() -> vgs::Result<()> {
    let out = std::env::temp_dir().join("vgs-extract-features");
    std::fs::create_dir_all(&out)?;

    let lexicon = builtin_lexicon(20)?;
    let word = "toaster";
    let (audio, _sample_spans) = synthesize_word_audio(&lexicon, word, 42)?;
    let wav_path = out.join(format!("{word}.wav"));
    write_wav(&wav_path, &audio)?;
    println!(
        "synthesized \"{word}\": {} samples at {} Hz -> {}",
        audio.samples.len(),
        audio.sample_rate,
        wav_path.display()
    );

    let config = MfccConfig::default();
    let reread = read_wav(&wav_path)?;
    let mfcc = compute_mfcc(&reread, &config)?;
    println!(
        "MFCC: {} frames x {} coefficients ({} ms window, {} ms hop)",
        mfcc.len(),
        mfcc.dim(),
        config.window_ms,
        config.hop_ms
    );

    let mfc1_path = out.join(format!("{word}.mfc1"));
    mfcc.save(&mfc1_path)?;
    let loaded = MfccSequence::load(&mfc1_path, config.hop_ms)?;
    let max_err = mfcc
        .frames()
        .iter()
        .zip(loaded.frames().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        .max(0.0);
    println!("container round trip max error: {max_err:.2e} (f32 storage)");

    // Phoneme spans line up with the feature frames.
    let synth = synthesize_word(&lexicon, word, 42)?;
    for span in &synth.phoneme_spans {
        println!(
            "  /{}/ frames {}..{}",
            span.symbol, span.start_frame, span.end_frame
        );
    }
    Ok(())
}
