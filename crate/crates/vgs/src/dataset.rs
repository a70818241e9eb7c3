//! Synthetic grounded-speech corpus.
//!
//! Words are phoneme strings over a small inventory; each phoneme is a
//! fixed band-energy template rendered as a sum of sinusoids with seeded
//! duration jitter and phase. Captions concatenate word audio with leading
//! and trailing silence but no inter-word gaps, so true word alignments
//! tile the non-silence frame range exactly. Images are noisy sums of
//! per-category prototype feature vectors with object instance
//! annotations (area fractions, neighbor counts) for the factor analysis.
//!
//! The category list seeds lexical-competition pairs: `bee`/`beaver` and
//! `meat`/`meter` make the shorter word an exact acoustic prefix of the
//! longer one. These four words are kept out of the neighbor-object pool
//! so their caption frequency stays at the primary-image floor, which
//! keeps their top-50 chance lines low.
//!
//! On disk a corpus is a JSONL manifest (header, word, image, and caption
//! records) plus one `MFC1` file per caption and one `IMG1` file per
//! image. All float features are quantized to `f32` at generation time,
//! so save/load round-trips are bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{compute_mfcc, AudioSignal, MfccConfig, MfccSequence};
use crate::{Result, VgsError};

type Rng = rand::rngs::ChaCha8Rng;

/// Manifest schema version this build reads and writes.
pub const MANIFEST_VERSION: u32 = 1;

const SAMPLE_RATE: u32 = 16_000;
const SILENCE_MS: f64 = 60.0;
/// Synthesis band center frequencies in Hz, log-spaced.
const BAND_CENTERS_HZ: [f64; 10] = [
    150.0, 222.0, 329.0, 487.0, 721.0, 1067.0, 1580.0, 2339.0, 3464.0, 5128.0,
];
/// Words that never appear as neighbor objects (see module docs).
const COMPETITION_SEED_WORDS: [&str; 4] = ["bee", "beaver", "meat", "meter"];

/// One phoneme's synthesis recipe: which bands carry energy, how long the
/// segment lasts, and how much seeded duration jitter applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeTemplate {
    pub symbol: String,
    /// (band index into the lexicon's band centers, energy share).
    pub bands: Vec<(usize, f64)>,
    pub duration_ms: f64,
    /// Relative duration jitter amplitude; 0 freezes durations.
    pub jitter: f64,
}

/// A word: surface form, phoneme string, syllable count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexWord {
    pub surface: String,
    pub phonemes: Vec<String>,
    pub syllables: usize,
}

/// Vocabulary plus the phoneme inventory used to synthesize it.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub words: Vec<LexWord>,
    pub phonemes: Vec<PhonemeTemplate>,
    pub band_centers_hz: Vec<f64>,
    pub sample_rate: u32,
    pub silence_ms: f64,
}

impl Lexicon {
    pub fn word(&self, surface: &str) -> Option<&LexWord> {
        self.words.iter().find(|w| w.surface == surface)
    }

    pub fn template(&self, symbol: &str) -> Option<&PhonemeTemplate> {
        self.phonemes.iter().find(|p| p.symbol == symbol)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phonemes.is_empty() {
            return Err(VgsError::Invalid("empty phoneme inventory".into()));
        }
        if self.sample_rate == 0 {
            return Err(VgsError::Invalid("lexicon sample rate must be positive".into()));
        }
        let mut symbols = BTreeSet::new();
        for p in &self.phonemes {
            if p.symbol.is_empty() {
                return Err(VgsError::Invalid("empty phoneme symbol".into()));
            }
            if !(p.duration_ms > 0.0) {
                return Err(VgsError::Invalid(format!(
                    "phoneme {} has non-positive duration",
                    p.symbol
                )));
            }
            if p.bands.is_empty() || p.bands.iter().any(|&(b, e)| {
                b >= self.band_centers_hz.len() || !(e > 0.0)
            }) {
                return Err(VgsError::Invalid(format!(
                    "phoneme {} has invalid bands",
                    p.symbol
                )));
            }
            if !symbols.insert(p.symbol.clone()) {
                return Err(VgsError::Invalid(format!(
                    "duplicate phoneme symbol {}",
                    p.symbol
                )));
            }
        }
        let mut surfaces = BTreeSet::new();
        for w in &self.words {
            if w.phonemes.is_empty() {
                return Err(VgsError::Invalid(format!(
                    "word {} has an empty phoneme string",
                    w.surface
                )));
            }
            for ph in &w.phonemes {
                if !symbols.contains(ph.as_str()) {
                    return Err(VgsError::Invalid(format!(
                        "word {} uses unknown phoneme {}",
                        w.surface, ph
                    )));
                }
            }
            if !surfaces.insert(w.surface.clone()) {
                return Err(VgsError::Invalid(format!(
                    "duplicate word {}",
                    w.surface
                )));
            }
        }
        Ok(())
    }
}

fn phoneme_inventory() -> Vec<PhonemeTemplate> {
    let spec: [(&str, &[(usize, f64)], f64); 24] = [
        ("a", &[(1, 0.6), (4, 0.4)], 90.0),
        ("aa", &[(0, 0.6), (3, 0.4)], 90.0),
        ("e", &[(1, 0.5), (5, 0.5)], 90.0),
        ("ei", &[(2, 0.5), (5, 0.3), (6, 0.2)], 90.0),
        ("i", &[(2, 0.6), (6, 0.4)], 90.0),
        ("ii", &[(2, 0.5), (7, 0.5)], 90.0),
        ("o", &[(0, 0.5), (2, 0.5)], 90.0),
        ("oo", &[(0, 0.7), (1, 0.3)], 90.0),
        ("ai", &[(1, 0.4), (3, 0.3), (6, 0.3)], 90.0),
        ("er", &[(1, 0.5), (2, 0.2), (4, 0.3)], 90.0),
        ("b", &[(0, 0.8), (5, 0.2)], 55.0),
        ("d", &[(0, 0.5), (6, 0.5)], 55.0),
        ("g", &[(0, 0.6), (4, 0.4)], 60.0),
        ("k", &[(4, 0.3), (7, 0.7)], 60.0),
        ("t", &[(6, 0.3), (8, 0.7)], 55.0),
        ("m", &[(0, 0.9), (2, 0.1)], 70.0),
        ("n", &[(0, 0.8), (3, 0.2)], 65.0),
        ("l", &[(1, 0.7), (6, 0.3)], 70.0),
        ("r", &[(1, 0.6), (3, 0.4)], 70.0),
        ("s", &[(7, 0.4), (9, 0.6)], 85.0),
        ("z", &[(6, 0.4), (9, 0.6)], 80.0),
        ("v", &[(0, 0.4), (8, 0.6)], 65.0),
        ("w", &[(0, 0.6), (1, 0.4)], 70.0),
        ("f", &[(8, 0.5), (9, 0.5)], 80.0),
    ];
    spec.iter()
        .map(|(symbol, bands, duration_ms)| PhonemeTemplate {
            symbol: symbol.to_string(),
            bands: bands.to_vec(),
            duration_ms: *duration_ms,
            jitter: 0.06,
        })
        .collect()
}

/// Category words in priority order. The order doubles as the neighbor
/// popularity ranking, so the competition seed words sit at the end on top
/// of being excluded from the neighbor pool.
fn category_word_table() -> Vec<(&'static str, &'static [&'static str], usize)> {
    vec![
        ("dog", &["d", "o", "g"], 1),
        ("kite", &["k", "ai", "t"], 1),
        ("glass", &["g", "l", "aa", "s"], 1),
        ("grass", &["g", "r", "aa", "s"], 1),
        ("lemon", &["l", "e", "m", "o", "n"], 2),
        ("sofa", &["s", "oo", "f", "aa"], 2),
        ("salad", &["s", "aa", "l", "a", "d"], 2),
        ("table", &["t", "ei", "b", "l"], 2),
        ("toaster", &["t", "oo", "s", "t", "er"], 2),
        ("vase", &["v", "ei", "z"], 1),
        ("wagon", &["w", "aa", "g", "o", "n"], 2),
        ("zebra", &["z", "ii", "b", "r", "aa"], 2),
        ("kitten", &["k", "i", "t", "e", "n"], 2),
        ("donut", &["d", "oo", "n", "a", "t"], 2),
        ("umbrella", &["a", "m", "b", "r", "e", "l", "aa"], 3),
        ("banana", &["b", "aa", "n", "aa", "n", "aa"], 3),
        ("bee", &["b", "ii"], 1),
        ("beaver", &["b", "ii", "v", "er"], 2),
        ("meat", &["m", "ii", "t"], 1),
        ("meter", &["m", "ii", "t", "er"], 2),
    ]
}

fn filler_word_table() -> Vec<(&'static str, &'static [&'static str], usize)> {
    vec![
        ("the", &["d", "a"], 1),
        ("a", &["a"], 1),
        ("and", &["a", "n", "d"], 1),
        ("near", &["n", "ii", "r"], 1),
        ("with", &["w", "i", "d"], 1),
        ("on", &["o", "n"], 1),
    ]
}

/// Deterministic pseudo-words used when more than 20 categories are
/// requested: consonant/vowel alternations indexed in mixed radix, skipping
/// collisions with existing surfaces.
fn pseudo_words(count: usize, taken: &BTreeSet<String>) -> Vec<LexWord> {
    let cons = [
        "b", "d", "g", "k", "t", "m", "n", "l", "r", "s", "z", "v", "w", "f",
    ];
    let vows = ["a", "aa", "e", "ei", "i", "ii", "o", "oo", "ai", "er"];
    let mut out: Vec<LexWord> = Vec::new();
    let mut k = 0usize;
    while out.len() < count {
        let mut phonemes = vec![
            cons[k % 14].to_string(),
            vows[(k / 14) % 10].to_string(),
            cons[(k / 140) % 14].to_string(),
            vows[(k / 1960) % 10].to_string(),
        ];
        let mut syllables = 2;
        if k % 3 == 0 {
            phonemes.push(cons[(k * 7 + 4) % 14].to_string());
            phonemes.push(vows[(k * 11 + 5) % 10].to_string());
            syllables = 3;
        }
        let surface: String = phonemes.concat();
        k += 1;
        if taken.contains(&surface) || out.iter().any(|w| w.surface == surface) {
            continue;
        }
        out.push(LexWord {
            surface,
            phonemes,
            syllables,
        });
    }
    out
}

/// Maximum supported category count.
pub const MAX_CATEGORIES: usize = 80;

/// Builds the built-in lexicon with `n_categories` category words plus the
/// filler vocabulary used by caption templates.
pub fn builtin_lexicon(n_categories: usize) -> Result<Lexicon> {
    if n_categories == 0 || n_categories > MAX_CATEGORIES {
        return Err(VgsError::Invalid(format!(
            "category count {n_categories} outside 1..={MAX_CATEGORIES}"
        )));
    }
    let table = category_word_table();
    let mut words: Vec<LexWord> = table
        .iter()
        .take(n_categories)
        .map(|(s, ph, syl)| LexWord {
            surface: s.to_string(),
            phonemes: ph.iter().map(|p| p.to_string()).collect(),
            syllables: *syl,
        })
        .collect();
    if n_categories > table.len() {
        let taken: BTreeSet<String> = words
            .iter()
            .map(|w| w.surface.clone())
            .chain(filler_word_table().iter().map(|(s, _, _)| s.to_string()))
            .collect();
        words.extend(pseudo_words(n_categories - table.len(), &taken));
    }
    for (s, ph, syl) in filler_word_table() {
        words.push(LexWord {
            surface: s.to_string(),
            phonemes: ph.iter().map(|p| p.to_string()).collect(),
            syllables: syl,
        });
    }
    let lexicon = Lexicon {
        words,
        phonemes: phoneme_inventory(),
        band_centers_hz: BAND_CENTERS_HZ.to_vec(),
        sample_rate: SAMPLE_RATE,
        silence_ms: SILENCE_MS,
    };
    lexicon.validate()?;
    Ok(lexicon)
}

/// Derives a per-word synthesis seed from a base seed, so independent
/// analyses synthesize identical audio for the same word.
pub fn word_seed(base: u64, word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn silence_samples(lexicon: &Lexicon) -> usize {
    (lexicon.silence_ms * lexicon.sample_rate as f64 / 1000.0).round() as usize
}

/// Renders one phoneme: additive sinusoids at the template's bands with
/// seeded phases, duration jitter, a small noise floor, and short edge
/// ramps against clicks.
fn synth_phoneme(lexicon: &Lexicon, template: &PhonemeTemplate, rng: &mut Rng) -> Vec<f64> {
    let rate = lexicon.sample_rate as f64;
    let factor = 1.0 + template.jitter * rng.random_range(-1.0..1.0);
    let n = ((template.duration_ms * factor * rate / 1000.0).round() as usize).max(1);
    let parts: Vec<(f64, f64, f64)> = template
        .bands
        .iter()
        .map(|&(band, energy)| {
            let freq = lexicon.band_centers_hz[band];
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = energy.sqrt() * (1.0 + 0.3 * template.jitter * rng.random_range(-1.0..1.0));
            (freq, phase, amp)
        })
        .collect();
    let ramp = (rate * 0.008) as usize;
    let ramp = ramp.min(n / 2).max(1);
    let normal = StandardNormal;
    (0..n)
        .map(|t| {
            let mut v = 0.0;
            for &(freq, phase, amp) in &parts {
                v += amp * (std::f64::consts::TAU * freq * t as f64 / rate + phase).sin();
            }
            let noise: f64 = normal.sample(rng);
            v = 0.25 * v + 0.005 * noise;
            let env = if t < ramp {
                (t + 1) as f64 / ramp as f64
            } else if t >= n - ramp {
                (n - t) as f64 / ramp as f64
            } else {
                1.0
            };
            v * env
        })
        .collect()
}

/// Renders a word's phonemes back to back (no silence); spans are sample
/// ranges relative to the word start.
fn synth_word_samples(
    lexicon: &Lexicon,
    word: &LexWord,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<(String, usize, usize)>)> {
    let mut samples = Vec::new();
    let mut spans = Vec::new();
    for symbol in &word.phonemes {
        let template = lexicon
            .template(symbol)
            .ok_or_else(|| VgsError::UnknownWord(format!("{} (phoneme {symbol})", word.surface)))?;
        let start = samples.len();
        samples.extend(synth_phoneme(lexicon, template, rng));
        spans.push((symbol.clone(), start, samples.len()));
    }
    Ok((samples, spans))
}

/// Maps a sample span onto MFCC frames: frame f starts at sample f*hop, and
/// a span owns the frames whose start falls inside it.
fn span_to_frames(start: usize, end: usize, hop: usize, total_frames: usize) -> (usize, usize) {
    let f0 = start.div_ceil(hop).min(total_frames);
    let f1 = end.div_ceil(hop).min(total_frames);
    (f0, f1)
}

/// A phoneme's frame range inside a synthesized word.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeSpan {
    pub symbol: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// An isolated word rendered to features, with phoneme boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedWord {
    pub word: String,
    pub mfcc: MfccSequence,
    pub phoneme_spans: Vec<PhonemeSpan>,
}

/// Renders an isolated word (leading/trailing silence included) and its
/// raw audio with absolute sample spans per phoneme.
pub fn synthesize_word_audio(
    lexicon: &Lexicon,
    word: &str,
    seed: u64,
) -> Result<(AudioSignal, Vec<(String, usize, usize)>)> {
    let entry = lexicon
        .word(word)
        .ok_or_else(|| VgsError::UnknownWord(word.to_string()))?;
    let mut rng = Rng::seed_from_u64(seed);
    let sil = silence_samples(lexicon);
    let (word_samples, word_spans) = synth_word_samples(lexicon, entry, &mut rng)?;
    let mut samples = vec![0.0; sil];
    samples.extend_from_slice(&word_samples);
    samples.extend(std::iter::repeat(0.0).take(sil));
    let spans = word_spans
        .into_iter()
        .map(|(symbol, s, e)| (symbol, s + sil, e + sil))
        .collect();
    Ok((AudioSignal::new(samples, lexicon.sample_rate)?, spans))
}

/// Renders an isolated word to MFCC features with the given frontend.
pub fn synthesize_word_with(
    lexicon: &Lexicon,
    word: &str,
    seed: u64,
    config: &MfccConfig,
) -> Result<SynthesizedWord> {
    let (audio, sample_spans) = synthesize_word_audio(lexicon, word, seed)?;
    let mfcc = compute_mfcc(&audio, config)?.quantized_to_f32();
    let hop = config.hop_samples(audio.sample_rate);
    let total = mfcc.len();
    let phoneme_spans = sample_spans
        .into_iter()
        .map(|(symbol, s, e)| {
            let (start_frame, end_frame) = span_to_frames(s, e, hop, total);
            PhonemeSpan {
                symbol,
                start_frame,
                end_frame,
            }
        })
        .collect();
    Ok(SynthesizedWord {
        word: word.to_string(),
        mfcc,
        phoneme_spans,
    })
}

/// [`synthesize_word_with`] under the default MFCC frontend.
pub fn synthesize_word(lexicon: &Lexicon, word: &str, seed: u64) -> Result<SynthesizedWord> {
    synthesize_word_with(lexicon, word, seed, &MfccConfig::default())
}

/// A word token's frame range inside a caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub token: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// One spoken caption: tokens, exact word alignment, features.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub caption_id: u64,
    pub image_id: u64,
    pub tokens: Vec<String>,
    pub alignment: Vec<TokenSpan>,
    pub mfcc: MfccSequence,
}

/// One object in an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub category: String,
    pub area_fraction: f64,
}

/// One image: feature vector plus object annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub features: Array1<f64>,
    pub objects: Vec<ObjectInstance>,
}

impl ImageRecord {
    /// Distinct category names present in the image.
    pub fn labels(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.category.as_str()).collect()
    }

    pub fn instances_of(&self, category: &str) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    pub fn total_instances(&self) -> usize {
        self.objects.len()
    }
}

/// Which partition an image (and its captions) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A full corpus: lexicon, images, captions, and split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedCorpus {
    pub lexicon: Lexicon,
    pub categories: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub train_images: Vec<u64>,
    pub val_images: Vec<u64>,
    pub test_images: Vec<u64>,
    pub feature_dim: usize,
    pub mfcc_config: MfccConfig,
    image_pos: BTreeMap<u64, usize>,
    captions_by_image: BTreeMap<u64, Vec<usize>>,
}

impl GroundedCorpus {
    /// Assembles and validates a corpus. Treat the result as immutable;
    /// the internal indices are built once here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lexicon: Lexicon,
        categories: Vec<String>,
        images: Vec<ImageRecord>,
        captions: Vec<CaptionRecord>,
        train_images: Vec<u64>,
        val_images: Vec<u64>,
        test_images: Vec<u64>,
        feature_dim: usize,
        mfcc_config: MfccConfig,
    ) -> Result<Self> {
        lexicon.validate()?;
        mfcc_config.validate()?;
        if categories.is_empty() {
            return Err(VgsError::Invalid("corpus has no categories".into()));
        }
        for c in &categories {
            if lexicon.word(c).is_none() {
                return Err(VgsError::UnknownWord(c.clone()));
            }
        }
        let mut image_pos = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if image_pos.insert(img.image_id, i).is_some() {
                return Err(VgsError::Invalid(format!(
                    "duplicate image id {}",
                    img.image_id
                )));
            }
            if img.features.len() != feature_dim {
                return Err(VgsError::Shape(format!(
                    "image {} has {} features, corpus declares {}",
                    img.image_id,
                    img.features.len(),
                    feature_dim
                )));
            }
            if img.features.iter().any(|v| !v.is_finite()) {
                return Err(VgsError::Invalid(format!(
                    "image {} has non-finite features",
                    img.image_id
                )));
            }
            for o in &img.objects {
                if !(o.area_fraction > 0.0 && o.area_fraction <= 1.0) {
                    return Err(VgsError::Invalid(format!(
                        "image {} area fraction {} outside (0, 1]",
                        img.image_id, o.area_fraction
                    )));
                }
                if !categories.contains(&o.category) {
                    return Err(VgsError::UnknownWord(o.category.clone()));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for (name, split) in [
            ("train", &train_images),
            ("val", &val_images),
            ("test", &test_images),
        ] {
            for id in split {
                if !image_pos.contains_key(id) {
                    return Err(VgsError::Invalid(format!(
                        "{name} split references missing image {id}"
                    )));
                }
                if !seen.insert(*id) {
                    return Err(VgsError::Invalid(format!(
                        "image {id} assigned to more than one split"
                    )));
                }
            }
        }
        if seen.len() != images.len() {
            return Err(VgsError::Invalid(
                "some images belong to no split".into(),
            ));
        }
        let mut captions_by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        let mut caption_ids = BTreeSet::new();
        for (i, cap) in captions.iter().enumerate() {
            if !caption_ids.insert(cap.caption_id) {
                return Err(VgsError::Invalid(format!(
                    "duplicate caption id {}",
                    cap.caption_id
                )));
            }
            if !image_pos.contains_key(&cap.image_id) {
                return Err(VgsError::Invalid(format!(
                    "caption {} references missing image {}",
                    cap.caption_id, cap.image_id
                )));
            }
            for t in &cap.tokens {
                if lexicon.word(t).is_none() {
                    return Err(VgsError::UnknownWord(t.clone()));
                }
            }
            if cap.alignment.len() != cap.tokens.len() {
                return Err(VgsError::Invalid(format!(
                    "caption {} alignment does not cover its tokens",
                    cap.caption_id
                )));
            }
            let total = cap.mfcc.len();
            let mut prev_end = 0usize;
            for (span, token) in cap.alignment.iter().zip(&cap.tokens) {
                if &span.token != token {
                    return Err(VgsError::Invalid(format!(
                        "caption {} alignment token mismatch",
                        cap.caption_id
                    )));
                }
                if span.start_frame < prev_end
                    || span.start_frame >= span.end_frame
                    || span.end_frame > total
                {
                    return Err(VgsError::Invalid(format!(
                        "caption {} has a non-monotone alignment",
                        cap.caption_id
                    )));
                }
                prev_end = span.end_frame;
            }
            captions_by_image.entry(cap.image_id).or_default().push(i);
        }
        Ok(GroundedCorpus {
            lexicon,
            categories,
            images,
            captions,
            train_images,
            val_images,
            test_images,
            feature_dim,
            mfcc_config,
            image_pos,
            captions_by_image,
        })
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.image_pos.get(&id).map(|&i| &self.images[i])
    }

    pub fn captions_of(&self, image_id: u64) -> Vec<&CaptionRecord> {
        self.captions_by_image
            .get(&image_id)
            .map(|ix| ix.iter().map(|&i| &self.captions[i]).collect())
            .unwrap_or_default()
    }

    pub fn split_image_ids(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train_images,
            Split::Val => &self.val_images,
            Split::Test => &self.test_images,
        }
    }

    /// Captions whose image belongs to the split, in caption id order.
    pub fn split_captions(&self, split: Split) -> Vec<&CaptionRecord> {
        let ids: BTreeSet<u64> = self.split_image_ids(split).iter().cloned().collect();
        self.captions
            .iter()
            .filter(|c| ids.contains(&c.image_id))
            .collect()
    }

    /// Token counts over the captions of a split.
    pub fn word_frequency(&self, split: Split) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for cap in self.split_captions(split) {
            for t in &cap.tokens {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Image ids in the split whose object labels contain each category.
    pub fn images_with_label(&self, split: Split) -> BTreeMap<String, BTreeSet<u64>> {
        let mut out: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
        for id in self.split_image_ids(split) {
            let img = self.image(*id).expect("split ids validated");
            for label in img.labels() {
                out.entry(label.to_string()).or_default().insert(*id);
            }
        }
        out
    }

    /// For each image in the split, the set of words spoken in any of its
    /// captions.
    pub fn caption_words_by_image(&self, split: Split) -> BTreeMap<u64, BTreeSet<String>> {
        let mut out: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
        for id in self.split_image_ids(split) {
            let words = self
                .captions_of(*id)
                .iter()
                .flat_map(|c| c.tokens.iter().cloned())
                .collect();
            out.insert(*id, words);
        }
        out
    }
}

/// Corpus generation knobs.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub categories: usize,
    pub images_per_category: usize,
    pub captions_per_image: usize,
    pub feature_dim: usize,
    /// Standard deviation of the additive feature noise.
    pub feature_noise: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Maximum neighbor objects per image.
    pub max_neighbors: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            categories: 20,
            images_per_category: 30,
            captions_per_image: 5,
            feature_dim: 64,
            feature_noise: 0.05,
            train_fraction: 0.5,
            val_fraction: 1.0 / 6.0,
            max_neighbors: 2,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.categories > MAX_CATEGORIES {
            return Err(VgsError::Invalid(format!(
                "category count {} outside 1..={MAX_CATEGORIES}",
                self.categories
            )));
        }
        if self.images_per_category == 0 || self.captions_per_image == 0 {
            return Err(VgsError::Invalid(
                "images per category and captions per image must be positive".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(VgsError::Invalid("feature_dim must be positive".into()));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(VgsError::Invalid("feature noise must be >= 0".into()));
        }
        if !(self.train_fraction > 0.0
            && self.val_fraction >= 0.0
            && self.train_fraction + self.val_fraction <= 1.0)
        {
            return Err(VgsError::Invalid(format!(
                "split fractions {}/{} are inconsistent",
                self.train_fraction, self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Tallies kept by the generator at emission time, for recount checks.
#[derive(Debug, Default)]
pub(crate) struct GenStats {
    pub word_tokens: BTreeMap<String, usize>,
    pub instances_per_image: BTreeMap<u64, usize>,
}

fn synthesize_caption(
    lexicon: &Lexicon,
    tokens: &[String],
    config: &MfccConfig,
    rng: &mut Rng,
) -> Result<(MfccSequence, Vec<TokenSpan>)> {
    let sil = silence_samples(lexicon);
    let mut samples = vec![0.0; sil];
    let mut sample_spans = Vec::new();
    for token in tokens {
        let entry = lexicon
            .word(token)
            .ok_or_else(|| VgsError::UnknownWord(token.clone()))?;
        let start = samples.len();
        let (word_samples, _) = synth_word_samples(lexicon, entry, rng)?;
        samples.extend_from_slice(&word_samples);
        sample_spans.push((token.clone(), start, samples.len()));
    }
    samples.extend(std::iter::repeat(0.0).take(sil));
    let audio = AudioSignal::new(samples, lexicon.sample_rate)?;
    let mfcc = compute_mfcc(&audio, config)?.quantized_to_f32();
    let hop = config.hop_samples(audio.sample_rate);
    let total = mfcc.len();
    let alignment = sample_spans
        .into_iter()
        .map(|(token, s, e)| {
            let (start_frame, end_frame) = span_to_frames(s, e, hop, total);
            TokenSpan {
                token,
                start_frame,
                end_frame,
            }
        })
        .collect();
    Ok((mfcc, alignment))
}

pub(crate) fn generate_toy_corpus_with_stats(
    spec: &CorpusSpec,
    seed: u64,
) -> Result<(GroundedCorpus, GenStats)> {
    spec.validate()?;
    let lexicon = builtin_lexicon(spec.categories)?;
    let categories: Vec<String> = lexicon
        .words
        .iter()
        .take(spec.categories)
        .map(|w| w.surface.clone())
        .collect();
    let mfcc_config = MfccConfig::default();
    let mut rng = Rng::seed_from_u64(seed);
    let mut stats = GenStats::default();
    let normal = StandardNormal;

    // Per-category feature prototypes.
    let prototypes: Vec<Array1<f64>> = (0..spec.categories)
        .map(|_| Array1::from_shape_fn(spec.feature_dim, |_| normal.sample(&mut rng)))
        .collect();

    // Neighbor pool: categories that may appear as secondary objects,
    // weighted by list position so word frequency varies across the
    // vocabulary. Competition seed words are excluded (module docs).
    let neighbor_pool: Vec<usize> = (0..spec.categories)
        .filter(|&c| !COMPETITION_SEED_WORDS.contains(&categories[c].as_str()))
        .collect();

    let total_images = spec.categories * spec.images_per_category;
    let mut images = Vec::with_capacity(total_images);
    for idx in 0..total_images {
        let image_id = idx as u64;
        let primary = idx % spec.categories;
        // Neighbor count: 0/1/2 with probabilities 0.3/0.45/0.25.
        let u: f64 = rng.random_range(0.0..1.0);
        let mut n_neighbors = if u < 0.3 {
            0
        } else if u < 0.75 {
            1
        } else {
            2
        };
        n_neighbors = n_neighbors.min(spec.max_neighbors);
        let mut pool: Vec<usize> = neighbor_pool
            .iter()
            .cloned()
            .filter(|&c| c != primary)
            .collect();
        let mut neighbors = Vec::new();
        for _ in 0..n_neighbors {
            if pool.is_empty() {
                break;
            }
            let weights: Vec<f64> = pool.iter().map(|&c| 1.0 / ((1 + c) as f64).sqrt()).collect();
            let total: f64 = weights.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut chosen = pool.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if pick < *w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            neighbors.push(pool.remove(chosen));
        }

        let mut objects = Vec::new();
        let u: f64 = rng.random_range(0.0..1.0);
        let primary_count = if u < 0.5 {
            1
        } else if u < 0.8 {
            2
        } else {
            3
        };
        for _ in 0..primary_count {
            objects.push(primary);
        }
        for &n in &neighbors {
            let count = if rng.random_range(0.0..1.0f64) < 0.7 { 1 } else { 2 };
            for _ in 0..count {
                objects.push(n);
            }
        }
        let mut areas: Vec<f64> = (0..objects.len())
            .map(|_| rng.random_range(0.05..0.35))
            .collect();
        let total_area: f64 = areas.iter().sum();
        if total_area > 0.9 {
            let scale = 0.9 / total_area;
            for a in &mut areas {
                *a *= scale;
            }
        }
        let object_records: Vec<ObjectInstance> = objects
            .iter()
            .zip(&areas)
            .map(|(&c, &a)| ObjectInstance {
                category: categories[c].clone(),
                area_fraction: a,
            })
            .collect();
        stats
            .instances_per_image
            .insert(image_id, object_records.len());

        let labels: BTreeSet<usize> = objects.iter().cloned().collect();
        let mut features = Array1::zeros(spec.feature_dim);
        for &c in &labels {
            features = features + &prototypes[c];
        }
        for v in features.iter_mut() {
            let noise: f64 = normal.sample(&mut rng);
            *v += spec.feature_noise * noise;
            *v = *v as f32 as f64;
        }
        images.push(ImageRecord {
            image_id,
            features,
            objects: object_records,
        });
    }

    // Stratified split: each category's primary images are shuffled and
    // divided by the configured fractions, so every category reaches every
    // split in proportion.
    let mut train_images = Vec::new();
    let mut val_images = Vec::new();
    let mut test_images = Vec::new();
    for c in 0..spec.categories {
        let mut ids: Vec<u64> = (0..spec.images_per_category)
            .map(|j| (j * spec.categories + c) as u64)
            .collect();
        use rand::seq::SliceRandom;
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = ((n as f64 * spec.train_fraction).round() as usize).min(n);
        let n_val = ((n as f64 * spec.val_fraction).round() as usize).min(n - n_train);
        train_images.extend_from_slice(&ids[..n_train]);
        val_images.extend_from_slice(&ids[n_train..n_train + n_val]);
        test_images.extend_from_slice(&ids[n_train + n_val..]);
    }
    train_images.sort_unstable();
    val_images.sort_unstable();
    test_images.sort_unstable();

    // Captions: always name the primary object, usually the neighbors,
    // glued together with filler words.
    let openers = ["the", "a"];
    let connectors = ["and", "near", "with", "on"];
    let mut captions = Vec::with_capacity(total_images * spec.captions_per_image);
    let mut caption_id = 0u64;
    for img in &images {
        let primary = img.objects[0].category.clone();
        let neighbor_labels: Vec<String> = img
            .labels()
            .into_iter()
            .filter(|l| *l != primary)
            .map(|l| l.to_string())
            .collect();
        for _ in 0..spec.captions_per_image {
            let mut mentions = vec![primary.clone()];
            for n in &neighbor_labels {
                if rng.random_range(0.0..1.0f64) < 0.8 {
                    mentions.push(n.clone());
                }
            }
            use rand::seq::SliceRandom;
            mentions.shuffle(&mut rng);
            let mut tokens: Vec<String> = Vec::new();
            if rng.random_range(0.0..1.0f64) < 0.7 {
                tokens.push(openers[rng.random_range(0..openers.len())].to_string());
            }
            for (i, m) in mentions.iter().enumerate() {
                if i > 0 {
                    tokens.push(connectors[rng.random_range(0..connectors.len())].to_string());
                }
                tokens.push(m.clone());
            }
            for t in &tokens {
                *stats.word_tokens.entry(t.clone()).or_insert(0) += 1;
            }
            let (mfcc, alignment) = synthesize_caption(&lexicon, &tokens, &mfcc_config, &mut rng)?;
            captions.push(CaptionRecord {
                caption_id,
                image_id: img.image_id,
                tokens,
                alignment,
                mfcc,
            });
            caption_id += 1;
        }
    }

    let corpus = GroundedCorpus::new(
        lexicon,
        categories,
        images,
        captions,
        train_images,
        val_images,
        test_images,
        spec.feature_dim,
        mfcc_config,
    )?;
    Ok((corpus, stats))
}

/// Generates a corpus deterministically from a seed.
pub fn generate_toy_corpus(spec: &CorpusSpec, seed: u64) -> Result<GroundedCorpus> {
    generate_toy_corpus_with_stats(spec, seed).map(|(c, _)| c)
}

// Manifest records. The header carries everything global (version,
// lexicon machinery, splits, MFCC config); word/image/caption records
// follow in deterministic order.
#[derive(Serialize, Deserialize)]
struct SplitsRecord {
    train: Vec<u64>,
    val: Vec<u64>,
    test: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    format_version: u32,
    sample_rate: u32,
    silence_ms: f64,
    feature_dim: usize,
    categories: Vec<String>,
    band_centers_hz: Vec<f64>,
    phonemes: Vec<PhonemeTemplate>,
    mfcc: MfccConfig,
    splits: SplitsRecord,
}

#[derive(Serialize, Deserialize)]
struct WordRecord {
    surface: String,
    phonemes: Vec<String>,
    syllables: usize,
    category: bool,
}

#[derive(Serialize, Deserialize)]
struct ImageManifestRecord {
    image_id: u64,
    objects: Vec<ObjectInstance>,
    features_file: String,
}

#[derive(Serialize, Deserialize)]
struct CaptionManifestRecord {
    caption_id: u64,
    image_id: u64,
    tokens: Vec<String>,
    alignment: Vec<TokenSpan>,
    mfcc_file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind")]
enum ManifestRecord {
    #[serde(rename = "header")]
    Header(HeaderRecord),
    #[serde(rename = "word")]
    Word(WordRecord),
    #[serde(rename = "image")]
    Image(ImageManifestRecord),
    #[serde(rename = "caption")]
    Caption(CaptionManifestRecord),
}

fn image_file_name(id: u64) -> String {
    format!("features/img_{id:06}.img1")
}

fn caption_file_name(id: u64) -> String {
    format!("mfcc/cap_{id:06}.mfc1")
}

/// Writes a corpus directory: `manifest.jsonl` plus per-record containers.
pub fn save_corpus(corpus: &GroundedCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("mfcc"))?;
    fs::create_dir_all(dir.join("features"))?;
    let mut lines: Vec<String> = Vec::new();
    let push = |lines: &mut Vec<String>, record: &ManifestRecord| -> Result<()> {
        lines.push(
            serde_json::to_string(record)
                .map_err(|e| VgsError::Invalid(format!("manifest encode: {e}")))?,
        );
        Ok(())
    };
    let header = ManifestRecord::Header(HeaderRecord {
        format_version: MANIFEST_VERSION,
        sample_rate: corpus.lexicon.sample_rate,
        silence_ms: corpus.lexicon.silence_ms,
        feature_dim: corpus.feature_dim,
        categories: corpus.categories.clone(),
        band_centers_hz: corpus.lexicon.band_centers_hz.clone(),
        phonemes: corpus.lexicon.phonemes.clone(),
        mfcc: corpus.mfcc_config.clone(),
        splits: SplitsRecord {
            train: corpus.train_images.clone(),
            val: corpus.val_images.clone(),
            test: corpus.test_images.clone(),
        },
    });
    push(&mut lines, &header)?;
    for w in &corpus.lexicon.words {
        push(
            &mut lines,
            &ManifestRecord::Word(WordRecord {
                surface: w.surface.clone(),
                phonemes: w.phonemes.clone(),
                syllables: w.syllables,
                category: corpus.categories.contains(&w.surface),
            }),
        )?;
    }
    for img in &corpus.images {
        push(
            &mut lines,
            &ManifestRecord::Image(ImageManifestRecord {
                image_id: img.image_id,
                objects: img.objects.clone(),
                features_file: image_file_name(img.image_id),
            }),
        )?;
        let data: Vec<f64> = img.features.iter().cloned().collect();
        crate::containers::write_matrix(
            &dir.join(image_file_name(img.image_id)),
            crate::containers::MAGIC_IMAGE,
            1,
            data.len(),
            &data,
        )?;
    }
    for cap in &corpus.captions {
        push(
            &mut lines,
            &ManifestRecord::Caption(CaptionManifestRecord {
                caption_id: cap.caption_id,
                image_id: cap.image_id,
                tokens: cap.tokens.clone(),
                alignment: cap.alignment.clone(),
                mfcc_file: caption_file_name(cap.caption_id),
            }),
        )?;
        cap.mfcc.save(&dir.join(caption_file_name(cap.caption_id)))?;
    }
    let mut file = fs::File::create(dir.join("manifest.jsonl"))?;
    for line in &lines {
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a corpus directory written by [`save_corpus`]. Any structural
/// problem fails with the byte offset of the offending manifest line; no
/// partial corpus is returned.
pub fn load_corpus(dir: &Path) -> Result<GroundedCorpus> {
    let manifest_path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path)?;
    let mut header: Option<HeaderRecord> = None;
    let mut words: Vec<LexWord> = Vec::new();
    let mut image_records: Vec<ImageManifestRecord> = Vec::new();
    let mut caption_records: Vec<CaptionManifestRecord> = Vec::new();

    let mut offset = 0u64;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            // The header must come first; check the version before
            // committing to the full schema.
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| VgsError::Parse {
                    offset: line_offset,
                    message: format!("manifest header: {e}"),
                })?;
            let version = value
                .get("format_version")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| VgsError::Parse {
                    offset: line_offset,
                    message: "first record must be a header with format_version".into(),
                })?;
            if version as u32 != MANIFEST_VERSION {
                return Err(VgsError::Version {
                    what: "corpus manifest",
                    found: version as u32,
                    supported: MANIFEST_VERSION,
                });
            }
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| VgsError::Parse {
            offset: line_offset,
            message: format!("manifest record: {e}"),
        })?;
        match record {
            ManifestRecord::Header(h) => {
                if header.replace(h).is_some() {
                    return Err(VgsError::Parse {
                        offset: line_offset,
                        message: "duplicate header record".into(),
                    });
                }
            }
            ManifestRecord::Word(w) => words.push(LexWord {
                surface: w.surface,
                phonemes: w.phonemes,
                syllables: w.syllables,
            }),
            ManifestRecord::Image(r) => image_records.push(r),
            ManifestRecord::Caption(r) => caption_records.push(r),
        }
    }
    let header = header.ok_or(VgsError::Parse {
        offset: 0,
        message: "manifest has no header record".into(),
    })?;

    let lexicon = Lexicon {
        words,
        phonemes: header.phonemes,
        band_centers_hz: header.band_centers_hz,
        sample_rate: header.sample_rate,
        silence_ms: header.silence_ms,
    };
    let mut images = Vec::with_capacity(image_records.len());
    for r in image_records {
        let (rows, cols, data) =
            crate::containers::read_matrix(&dir.join(&r.features_file), crate::containers::MAGIC_IMAGE)?;
        if rows != 1 {
            return Err(VgsError::Shape(format!(
                "feature file {} has {rows} rows, expected 1",
                r.features_file
            )));
        }
        let _ = cols;
        images.push(ImageRecord {
            image_id: r.image_id,
            features: Array1::from_vec(data),
            objects: r.objects,
        });
    }
    let mut captions = Vec::with_capacity(caption_records.len());
    for r in caption_records {
        let mfcc = MfccSequence::load(&dir.join(&r.mfcc_file), header.mfcc.hop_ms)?;
        captions.push(CaptionRecord {
            caption_id: r.caption_id,
            image_id: r.image_id,
            tokens: r.tokens,
            alignment: r.alignment,
            mfcc,
        });
    }
    GroundedCorpus::new(
        lexicon,
        header.categories,
        images,
        captions,
        header.splits.train,
        header.splits.val,
        header.splits.test,
        header.feature_dim,
        header.mfcc,
    )
}
