use klite::encoder::{grads, ContrastiveItem, EncoderConfig, LossBatch, LossSpec, ModelParams, ParamGroup};
use klite::knowledge::KnowledgeSource;
use klite::query::{FrequencyTable, Lexicon};
use klite::synth::{run_bench, SynthConfig, SynthWorld};
use klite::trainer::{
    augment_dataset, changed_tensors, finetune, train, AugmentConfig, Mode, Optimizer, OptimizerKind, TrainConfig,
};
use klite::vocab::{Pooling, Vocab};

fn small(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        lr: 3e-3,
        mode,
        embed_dim: 16,
        text_layers: 1,
        heads: 2,
        hidden: 32,
        max_tokens: 16,
        adapter_bottleneck: 4,
        oov_buckets: 8,
        ..TrainConfig::default()
    }
}

fn augmented_world(keep_vanilla: bool) -> (SynthWorld, Vec<klite::trainer::Triplet>) {
    let cfg = SynthConfig {
        train_per_class: 8,
        ..SynthConfig::default()
    };
    let world = SynthWorld::generate(&cfg, 4).unwrap();
    let aug = AugmentConfig {
        source: Some(KnowledgeSource::WiktionaryDefinition),
        keep_vanilla,
        token_budget: 15,
        ..AugmentConfig::default()
    };
    let (data, audit) =
        augment_dataset(&world.train, &world.store, &FrequencyTable::default(), &Lexicon::default(), &aug).unwrap();
    assert_eq!(audit.output, data.len());
    (world, data)
}

#[test]
fn two_branch_routes_each_sample_once() {
    let (_, data) = augmented_world(true);
    assert_eq!(data.len() % 16, 0);
    let epochs = 3;
    let out = train(&small(Mode::Scratch2Branch, epochs), &data, None).unwrap();
    let knowledge = data.iter().filter(|t| t.knowledge).count();
    assert!(knowledge > 0 && knowledge < data.len());
    assert_eq!(out.branches.knowledge, epochs * knowledge);
    assert_eq!(out.branches.vanilla, epochs * (data.len() - knowledge));
    assert_eq!(out.samples_seen, epochs * data.len());
}

#[test]
fn single_branch_never_touches_adapters() {
    let (_, data) = augmented_world(false);
    let out = train(&small(Mode::Scratch1Branch, 2), &data, None).unwrap();
    assert_eq!(out.branches.knowledge, 0);
    assert!(!out.params.has_adapters());
}

#[test]
fn same_inputs_same_checkpoint() {
    let (_, data) = augmented_world(true);
    let a = train(&small(Mode::Scratch2Branch, 2), &data, None).unwrap();
    let b = train(&small(Mode::Scratch2Branch, 2), &data, None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);
    let c = train(&TrainConfig { seed: 1, ..small(Mode::Scratch2Branch, 2) }, &data, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn continual_training_freezes_base() {
    let (world, data) = augmented_world(false);
    let base = train(&small(Mode::Scratch1Branch, 3), &world.train, None).unwrap();
    let cont = train(&small(Mode::ContinualAdapters, 3), &data, Some((&base.params, &base.vocab))).unwrap();
    for group in [ParamGroup::TextBase, ParamGroup::Image, ParamGroup::Temperature] {
        assert!(changed_tensors(&base.params, &cont.params, group).is_empty(), "{group:?}");
    }
    assert_eq!(cont.branches.vanilla, 0);
}

#[test]
fn finetune_updates_every_group() {
    let (world, _) = augmented_world(false);
    let base = train(&small(Mode::Scratch1Branch, 1), &world.train, None).unwrap();
    let tuned = finetune(&small(Mode::Scratch1Branch, 1), &world.train, &base.params, &base.vocab, false).unwrap();
    for group in [ParamGroup::TextBase, ParamGroup::Image, ParamGroup::Temperature] {
        assert!(!changed_tensors(&base.params, &tuned.params, group).is_empty(), "{group:?}");
    }
}

#[test]
fn grouped_loss_descends_on_a_fixed_batch() {
    let vocab = Vocab::build(["red circle", "blue square", "green star"], 2);
    let mut cfg = EncoderConfig::new(vocab.size(), 3);
    cfg.embed_dim = 8;
    cfg.hidden = 16;
    cfg.text_layers = 1;
    cfg.max_tokens = 8;
    let mut params = ModelParams::init(cfg, 2).unwrap();
    let texts = ["red circle", "blue square", "red circle", "green star"];
    let images = [[1.0, 0.0, 0.2], [0.0, 1.0, 0.1], [0.9, 0.1, 0.3], [0.2, 0.1, 1.0]];
    let labels = [0, 1, 0, 2];
    let batch = LossBatch::Contrastive(
        (0..4)
            .map(|i| ContrastiveItem {
                image: images[i].to_vec(),
                tokens: vocab.encode(texts[i], Pooling::Eos, 8).unwrap(),
                label: labels[i],
                use_adapters: false,
            })
            .collect(),
    );
    let spec = LossSpec::all();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-4, &params);
    let mut losses = Vec::new();
    for _ in 0..60 {
        let (report, g) = grads(&params, &batch, &spec).unwrap();
        assert!(report.loss.is_finite());
        losses.push(report.loss);
        opt.step(&mut params, &g, &spec);
    }
    assert!(losses.last().unwrap() < &losses[0], "{:?}", (losses[0], losses.last()));
    let rising = losses.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    assert_eq!(rising, 0, "plain gradient descent with a small step should not rise: {losses:?}");
}

#[test]
fn empty_knowledge_closes_the_gap() {
    let cfg = SynthConfig {
        empty_knowledge: true,
        ..SynthConfig::default()
    };
    let report = run_bench(&cfg, &[0, 1]).unwrap();
    for r in &report.runs {
        assert_eq!(r.heldout_with, r.heldout_without, "seed {}", r.seed);
        assert_eq!(r.heldout_coverage, 0.0);
    }
    assert_eq!(report.summary.mean_gap, 0.0);
}

#[test]
fn bench_report_schema_does_not_depend_on_seed_count() {
    let cfg = SynthConfig {
        train: TrainConfig {
            epochs: 2,
            ..SynthConfig::default().train
        },
        ..SynthConfig::default()
    };
    let keys = |n: u64| {
        let seeds: Vec<u64> = (0..n).collect();
        let v = serde_json::to_value(run_bench(&cfg, &seeds).unwrap()).unwrap();
        let summary: Vec<String> = v["summary"].as_object().unwrap().keys().cloned().collect();
        let run: Vec<String> = v["runs"][0].as_object().unwrap().keys().cloned().collect();
        let top: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        (top, summary, run)
    };
    assert_eq!(keys(1), keys(3));
}
