//! Sample a block-mask corpus, check its occlusion statistics against the
//! analytic distribution, and round-trip it through the corpus file format.
//!
//! ```text
//! cargo run --release --example mask_corpus
//! ```

use amcl::masking::{
    build_mask_corpus, load_mask_corpus, occlusion_count_distribution, save_mask_corpus,
    MaskSamplerConfig,
};

fn main() -> amcl::Result<()> {
    let cfg = MaskSamplerConfig {
        corpus_size: 20_000,
        seed: 3,
        ..Default::default()
    };
    let corpus = build_mask_corpus(&cfg)?;
    println!("sampled {} masks at patch size {}", corpus.len(), cfg.patch_size);

    // Empirical vs analytic occluded-patch distribution.
    let analytic = occlusion_count_distribution(&cfg);
    let mut counts = vec![0usize; 17];
    for m in &corpus {
        counts[m.occluded_patches()?] += 1;
    }
    println!("occluded  empirical  analytic");
    for (k, p) in &analytic {
        let emp = counts[*k] as f64 / corpus.len() as f64;
        let bar = "#".repeat((emp * 200.0) as usize);
        println!("{k:>8}  {emp:>9.4}  {p:>8.4}  {bar}");
    }

    let path = std::path::Path::new("masks_demo.txt");
    save_mask_corpus(path, &corpus, cfg.patch_size)?;
    let loaded = load_mask_corpus(path)?;
    assert_eq!(corpus, loaded);
    println!("round-tripped bit-exactly through {}", path.display());
    Ok(())
}
