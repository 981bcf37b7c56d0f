//! Pretrain from scratch on the synthetic world with knowledge-augmented
//! class names, save a checkpoint, then evaluate zero-shot on every class
//! and with a few-shot linear probe.
//!
//! cargo run --release --example train_zero_shot

use klite::encoder::Checkpoint;
use klite::evaluation::{build_class_embeddings, image_embeddings, linear_probe, zero_shot_classify, BranchMode};
use klite::prompt::PromptTemplate;
use klite::query::{FrequencyTable, Lexicon};
use klite::synth::{SynthConfig, SynthWorld};
use klite::trainer::{augment_dataset, train, AugmentConfig};

fn main() -> klite::Result<()> {
    let cfg = SynthConfig::default();
    let world = SynthWorld::generate(&cfg, 0)?;
    let aug = AugmentConfig {
        source: Some(cfg.source.clone()),
        token_budget: cfg.train.max_tokens - 1,
        ..AugmentConfig::default()
    };
    let (data, audit) = augment_dataset(&world.train, &world.store, &FrequencyTable::default(), &Lexicon::default(), &aug)?;
    println!("augmented {} texts ({} with knowledge); e.g. {:?}", audit.output, audit.hits, data[0].text);

    let out = train(&cfg.train, &data, None)?;
    let first = &out.trace[0];
    let last = out.trace.last().unwrap();
    println!("{} steps, loss {:.2} -> {:.2}, scale {:.2}", out.trace.len(), first.l_ic, last.l_ic, last.tau);

    let path = std::env::temp_dir().join("klite_synth_checkpoint.json");
    Checkpoint::new(&out.params, &out.vocab, cfg.train.seed).save(&path)?;
    let restored = Checkpoint::load(&path)?;
    let params = restored.params()?;
    println!("checkpoint round trip exact: {}", params == out.params);

    let names: Vec<&str> = world.classes.iter().map(|c| c.name.as_str()).collect();
    let (images, labels): (Vec<Vec<f64>>, Vec<usize>) = world.test.iter().cloned().unzip();
    for source in [None, Some(&cfg.source)] {
        let emb = build_class_embeddings(
            &params,
            &restored.vocab,
            &names,
            &world.store,
            source,
            &[PromptTemplate::default()],
            BranchMode::OneBranch,
        )?;
        let result = zero_shot_classify(&params, &images, &labels, &emb)?;
        println!("zero-shot over 16 classes, knowledge={}: {:.3}", source.is_some(), result.accuracy);
    }

    let features = image_embeddings(&params, &images)?;
    for shots in [1, 4] {
        println!("{shots}-shot linear probe: {:.3}", linear_probe(&features, &labels, shots, 0)?);
    }
    Ok(())
}
