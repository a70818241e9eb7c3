//! Generate a small grounded-speech corpus, persist it, and reload it
//! bit-exactly.

use vgs::dataset::{generate_toy_corpus, load_corpus, save_corpus, CorpusSpec, Split};

fn main() -> vgs::Result<()> {
    let spec = CorpusSpec {
        categories: 8,
        images_per_category: 9,
        captions_per_image: 2,
        feature_dim: 32,
        ..CorpusSpec::default()
    };
    let corpus = generate_toy_corpus(&spec, 7)?;
    println!(
        "corpus: {} categories, {} images, {} captions",
        corpus.categories.len(),
        corpus.images.len(),
        corpus.captions.len()
    );
    for split in [Split::Train, Split::Val, Split::Test] {
        println!(
            "  {split:?}: {} images, {} captions",
            corpus.split_image_ids(split).len(),
            corpus.split_captions(split).len()
        );
    }

    let cap = &corpus.captions[0];
    let image = corpus.image(cap.image_id).expect("caption's image");
    let labels: Vec<&str> = image.objects.iter().map(|o| o.category.as_str()).collect();
    println!(
        "sample caption {}: \"{}\" over objects {:?} ({} feature frames)",
        cap.caption_id,
        cap.tokens.join(" "),
        labels,
        cap.mfcc.len()
    );

    let dir = std::env::temp_dir().join("vgs-generate-corpus");
    std::fs::create_dir_all(&dir)?;
    save_corpus(&corpus, &dir)?;
    let reloaded = load_corpus(&dir)?;
    assert_eq!(corpus, reloaded);
    println!("saved to {} and reloaded identically", dir.display());
    Ok(())
}
