//! Turn category names and captions into knowledge queries. Captions are
//! reduced to their rarest noun phrase under a corpus frequency table.
//!
//! cargo run --example query_construction

use std::path::Path;

use klite::query::{build_frequency_table, construct_query, noun_phrases, Lexicon, TextKind};

fn main() -> klite::Result<()> {
    let lexicon = Lexicon::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/lexicon.tsv"))?;
    let corpus = [
        "a young boxer in the ring",
        "the crowd near the ring",
        "a dog on the grass",
        "two dogs in the park",
        "a dog near a fireplug",
    ];
    let table = build_frequency_table(corpus, &lexicon)?;
    for (phrase, count) in table.iter() {
        println!("{count:>3}  {phrase}");
    }

    println!("{}", construct_query("Golden Retriever", TextKind::Category, &table, &lexicon)?);
    for caption in ["a professional boxer in the ring", "a red dog near the fireplug", "is in on"] {
        let phrases: Vec<String> = noun_phrases(caption, &lexicon).into_iter().map(|p| p.normalized).collect();
        let q = construct_query(caption, TextKind::Caption, &table, &lexicon)?;
        println!("{caption:?}\n  phrases {phrases:?}\n  query   {:?} ({:?})", q.text, q.origin);
    }
    Ok(())
}
