//! Look up the three knowledge sources for a few queries against the bundled
//! snapshots, then measure coverage and persist a lookup cache.
//!
//! cargo run --example knowledge_retrieval

use std::path::Path;

use klite::knowledge::{knowledge_coverage, KnowledgeCache, KnowledgeSource, KnowledgeStore};

fn main() -> klite::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let store = KnowledgeStore::load(
        Some(&fixtures.join("wordnet_boxer.jsonl")),
        Some(&fixtures.join("wiktionary_boxer.jsonl")),
    )?;

    for query in ["boxer", "the crowd", "fireplug", "zebra"] {
        println!("{query}");
        for src in KnowledgeSource::ALL {
            match store.retrieve(query, &src)? {
                Some(item) => println!("  {:<8} {}", src.as_str(), item.text),
                None => println!("  {:<8} -", src.as_str()),
            }
        }
    }

    let queries = ["boxer", "crowd", "fireplug", "zebra"];
    for src in KnowledgeSource::ALL {
        println!("coverage {:<8} {:.2}", src.as_str(), knowledge_coverage(&queries, &store, &src)?);
    }

    let mut cache = KnowledgeCache::for_store(&store);
    for q in queries {
        cache.retrieve(&store, q, &KnowledgeSource::WiktionaryDefinition)?;
    }
    let out = std::env::temp_dir().join("klite_knowledge_cache.jsonl");
    cache.save(&out)?;
    println!("cached {} lookups in {}", cache.len(), out.display());
    Ok(())
}
