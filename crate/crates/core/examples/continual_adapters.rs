//! Continue a vanilla model with adapters on knowledge-augmented text. Base
//! tensors stay frozen; only the adapter branch learns.
//!
//! cargo run --release --example continual_adapters

use klite::encoder::ParamGroup;
use klite::evaluation::{build_class_embeddings, zero_shot_classify, BranchMode};
use klite::prompt::PromptTemplate;
use klite::query::{FrequencyTable, Lexicon};
use klite::synth::{SynthConfig, SynthWorld};
use klite::trainer::{augment_dataset, changed_tensors, train, AugmentConfig, Mode, TrainConfig};

fn main() -> klite::Result<()> {
    let cfg = SynthConfig::default();
    let world = SynthWorld::generate(&cfg, 1)?;
    let base = train(&cfg.train, &world.train, None)?;
    println!("base model: {} parameters", base.params.num_parameters());

    let aug = AugmentConfig {
        source: Some(cfg.source.clone()),
        token_budget: cfg.train.max_tokens - 1,
        ..AugmentConfig::default()
    };
    let (data, _) = augment_dataset(&world.train, &world.store, &FrequencyTable::default(), &Lexicon::default(), &aug)?;
    let tc = TrainConfig {
        mode: Mode::ContinualAdapters,
        ..cfg.train.clone()
    };
    let cont = train(&tc, &data, Some((&base.params, &base.vocab)))?;
    println!(
        "continual: {} steps, loss {:.2} -> {:.2}",
        cont.trace.len(),
        cont.trace[0].l_ic,
        cont.trace.last().unwrap().l_ic
    );
    for group in [ParamGroup::TextBase, ParamGroup::Image, ParamGroup::Temperature] {
        println!("{group:?} tensors changed: {}", changed_tensors(&base.params, &cont.params, group).len());
    }

    let names: Vec<&str> = world.classes.iter().map(|c| c.name.as_str()).collect();
    let (images, labels): (Vec<Vec<f64>>, Vec<usize>) = world.test.iter().cloned().unzip();
    for mode in [BranchMode::OneBranch, BranchMode::AdapterBranch, BranchMode::TwoBranchSelective] {
        let emb = build_class_embeddings(
            &cont.params,
            &cont.vocab,
            &names,
            &world.store,
            Some(&cfg.source),
            &[PromptTemplate::default()],
            mode,
        )?;
        let acc = zero_shot_classify(&cont.params, &images, &labels, &emb)?.accuracy;
        println!("{mode:?}: zero-shot {acc:.3}");
    }
    Ok(())
}
