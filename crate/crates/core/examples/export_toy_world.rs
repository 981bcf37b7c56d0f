//! Write the synthetic world to disk in the pipeline's file formats, so the
//! `klite` commands can be tried end to end.
//!
//! cargo run --example export_toy_world -- fixtures/toy 0

use std::fs;
use std::path::PathBuf;

use klite::grounding::{save_regions, RegionRecord};
use klite::query::TextKind;
use klite::synth::{SynthConfig, SynthWorld};
use klite::trainer::{save_dataset, Triplet};

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn main() -> klite::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    fs::create_dir_all(&dir).map_err(|e| klite::Error::io(&dir, e))?;

    let cfg = SynthConfig {
        train_per_class: 12,
        test_per_class: 4,
        ..SynthConfig::default()
    };
    let world = SynthWorld::generate(&cfg, seed)?;
    let names: Vec<String> = world.classes.iter().map(|c| c.name.clone()).collect();

    let train: Vec<Triplet> = world
        .train
        .iter()
        .map(|t| Triplet::new(round(&t.image), t.text.clone(), TextKind::Category))
        .collect();
    save_dataset(dir.join("train.jsonl"), &train)?;

    let eval: Vec<Triplet> = world
        .test
        .iter()
        .map(|(x, k)| Triplet::new(round(x), names[*k].clone(), TextKind::Category))
        .collect();
    save_dataset(dir.join("eval.jsonl"), &eval)?;

    let classes = serde_json::to_string(&names)?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| klite::Error::io(&p, e))
    };
    write("classes.json", format!("{classes}\n"))?;

    let mut dict = String::new();
    for e in world.store.dictionary.as_ref().map(|d| d.entries()).unwrap_or(&[]) {
        dict.push_str(&serde_json::to_string(e)?);
        dict.push('\n');
    }
    write("wiktionary.jsonl", dict)?;

    // Four regions per image, one-hot targets over all classes.
    let records: Vec<RegionRecord> = world
        .test
        .chunks(4)
        .enumerate()
        .map(|(i, chunk)| RegionRecord {
            image_id: format!("img{i:03}"),
            features: chunk.iter().map(|(x, _)| round(x)).collect(),
            targets: Some(
                chunk
                    .iter()
                    .map(|(_, k)| (0..names.len()).map(|j| u8::from(j == *k)).collect())
                    .collect(),
            ),
        })
        .collect();
    save_regions(dir.join("regions.jsonl"), &records)?;

    println!(
        "wrote {} training triplets, {} eval triplets, {} region files to {}",
        train.len(),
        eval.len(),
        records.len(),
        dir.display()
    );
    Ok(())
}
