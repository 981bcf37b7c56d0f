//! Concept and vocabulary statistics for a dataset, and concept overlap
//! between a pretraining pool and a downstream label set.
//!
//! cargo run --example dataset_stats

use klite::evaluation::{concept_overlap, concept_stats, dataset_stats};
use klite::query::{build_frequency_table, Lexicon, Tag, TextKind};
use klite::trainer::Triplet;

fn main() -> klite::Result<()> {
    let lexicon = Lexicon::from_pairs([("a", Tag::Det), ("the", Tag::Det), ("in", Tag::Other), ("red", Tag::Adj)]);
    let captions = ["a red fox in the snow", "a fox in the snow", "the snow", "a red kite", "a red kite in the sky"];
    let freq = build_frequency_table(captions, &lexicon)?;
    let mut data: Vec<Triplet> = captions
        .iter()
        .map(|c| Triplet::new(vec![0.0], *c, TextKind::Caption))
        .collect();
    data.extend(["Fox", "fox", "Owl"].map(|c| Triplet::new(vec![0.0], c, TextKind::Category)));
    println!("{}", serde_json::to_string_pretty(&dataset_stats(&data, &freq, &lexicon, 1)?)?);

    let mut skewed = vec!["a"; 6];
    skewed.extend(["b"; 2]);
    let s = concept_stats(&skewed, 5);
    println!("{{a:6, b:2}}: mean {} std {} kept {}", s.mean_ins_per_concept, s.std_ins_per_concept, s.concepts_minfreq);

    let pretrain = ["fox", "red kite", "snow", "owl"];
    let downstream = ["Fox", "Owl", "zebra", "kite"];
    println!("concept overlap {:.1}%", concept_overlap(&pretrain, &downstream)?);
    Ok(())
}
