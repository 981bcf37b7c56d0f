use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use klite::contrastive::{normalize, row_argmax, similarity_matrix, unicl_loss};
use klite::encoder::{EncoderConfig, ModelParams};
use klite::evaluation::{classify_features, concept_overlap, linear_probe};
use klite::grounding::{focal_loss, ground_scores, FocalParams};
use klite::knowledge::{
    knowledge_coverage, Dictionary, DictionaryEntry, KnowledgeCache, KnowledgeSource, KnowledgeStore, SynsetRecord,
    WordNetGraph,
};
use klite::prompt::{compose_caption_texts, compose_class_text, compose_od_text, CaptionScheme, PromptTemplate};
use klite::query::{
    build_frequency_table, construct_query, noun_phrases, Lexicon, QueryOrigin, Tag, TextKind,
};
use klite::vocab::{Pooling, Vocab, EOS, PAD};

const WORDS: &[&str] = &["the", "a", "red", "old", "two", "dog", "cat", "ball", "park", "in", "on", "is", "boxer"];

fn lexicon() -> Lexicon {
    Lexicon::from_pairs([
        ("the", Tag::Det),
        ("a", Tag::Det),
        ("red", Tag::Adj),
        ("old", Tag::Adj),
        ("two", Tag::Num),
        ("in", Tag::Other),
        ("on", Tag::Other),
        ("is", Tag::Other),
    ])
}

fn caption() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..9).prop_map(|w| w.join(" "))
}

fn unit_rows(seed: u64, b: usize, p: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::zeros((b, p));
    for mut row in m.rows_mut() {
        let raw = Array1::from_shape_fn(p, |_| rng.random_range(-1.0..1.0));
        row.assign(&normalize(raw.view()).unwrap());
    }
    m
}

fn small_model(seed: u64) -> (ModelParams, Vocab) {
    let vocab = Vocab::build(WORDS.iter().copied(), 3);
    let mut cfg = EncoderConfig::new(vocab.size(), 4);
    cfg.embed_dim = 8;
    cfg.hidden = 16;
    cfg.text_layers = 2;
    cfg.max_tokens = 12;
    cfg.adapter_bottleneck = 2;
    cfg.adapters = true;
    (ModelParams::init(cfg, seed).unwrap(), vocab)
}

// knowledge

fn dictionary<'a>(terms: impl IntoIterator<Item = &'a String>) -> Dictionary {
    Dictionary::from_entries(
        terms
            .into_iter()
            .map(|t| DictionaryEntry {
                term: t.clone(),
                senses: vec![format!("something called {t}")],
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn hierarchy_terminates_on_arbitrary_graphs(parents in prop::collection::vec(prop::option::of(0usize..40), 1..40)) {
        let n = parents.len();
        let records: Vec<SynsetRecord> = parents
            .iter()
            .enumerate()
            .map(|(i, p)| SynsetRecord {
                id: format!("s{i}"),
                lemmas: vec![format!("w{i}")],
                definition: format!("def {i}"),
                hypernym_ids: p.map(|p| vec![format!("s{}", p % n)]).unwrap_or_default(),
            })
            .collect();
        let graph = WordNetGraph::from_records(records).unwrap();
        for i in 0..n {
            match graph.wn_hierarchy(&format!("w{i}")) {
                Ok(Some(item)) => prop_assert!(item.text.split(", ").count() <= 32),
                Ok(None) => prop_assert!(false, "lemma w{i} not found"),
                Err(_) => {}
            }
            let again = graph.wn_hierarchy(&format!("w{i}")).map(|o| o.map(|k| k.text)).ok();
            let first = graph.wn_hierarchy(&format!("w{i}")).map(|o| o.map(|k| k.text)).ok();
            prop_assert_eq!(again, first);
        }
    }

    #[test]
    fn coverage_never_drops_when_entries_are_added(
        base in prop::collection::btree_set("[a-e]{1,3}", 0..6),
        extra in prop::collection::btree_set("[a-e]{1,3}", 0..6),
        queries in prop::collection::vec("[a-e]{1,3}", 1..8),
    ) {
        let src = KnowledgeSource::WiktionaryDefinition;
        let small = KnowledgeStore::new(None, Some(dictionary(&base)));
        let all: std::collections::BTreeSet<String> = base.union(&extra).cloned().collect();
        let large = KnowledgeStore::new(None, Some(dictionary(&all)));
        prop_assert!(knowledge_coverage(&queries, &large, &src).unwrap() >= knowledge_coverage(&queries, &small, &src).unwrap());
    }

    #[test]
    fn cache_is_transparent(
        terms in prop::collection::btree_set("[a-d]{1,2}", 0..6),
        queries in prop::collection::vec("(the )?[a-d]{1,2}", 1..12),
    ) {
        let store = KnowledgeStore::new(None, Some(dictionary(&terms)));
        let mut cache = KnowledgeCache::for_store(&store);
        for round in 0..2 {
            for q in &queries {
                for src in KnowledgeSource::ALL {
                    let direct = store.retrieve(q, &src).unwrap();
                    let cached = cache.retrieve(&store, q, &src).unwrap();
                    prop_assert_eq!(direct, cached, "round {}", round);
                }
            }
        }
    }
}

// query

proptest! {
    #[test]
    fn category_query_is_lowercased_text(t in "[A-Za-z][A-Za-z ]{0,12}[A-Za-z]") {
        let q = construct_query(&t, TextKind::Category, &Default::default(), &lexicon()).unwrap();
        prop_assert_eq!(q.text, t.to_lowercase());
    }

    #[test]
    fn chosen_phrase_is_the_rarest(corpus in prop::collection::vec(caption(), 1..12), text in caption()) {
        let lex = lexicon();
        let table = build_frequency_table(&corpus, &lex).unwrap();
        let q = construct_query(&text, TextKind::Caption, &table, &lex).unwrap();
        let phrases = noun_phrases(&text.to_lowercase(), &lex);
        if phrases.is_empty() {
            prop_assert_eq!(q.origin, QueryOrigin::CaptionFallback);
        } else {
            let c = table.count(&q.text);
            for p in &phrases {
                prop_assert!(c <= table.count(&p.normalized));
            }
        }
    }

    #[test]
    fn chunks_end_in_a_noun_without_other_tags(text in caption()) {
        for np in noun_phrases(&text, &lexicon()) {
            prop_assert_eq!(np.tokens.last().unwrap().tag, Tag::Noun);
            prop_assert!(np.tokens.iter().all(|t| t.tag != Tag::Other));
        }
    }

    #[test]
    fn query_ignores_corpus_order(corpus in prop::collection::vec(caption(), 1..10), text in caption(), seed in any::<u64>()) {
        let lex = lexicon();
        let mut shuffled = corpus.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = construct_query(&text, TextKind::Caption, &build_frequency_table(&corpus, &lex).unwrap(), &lex).unwrap();
        let b = construct_query(&text, TextKind::Caption, &build_frequency_table(&shuffled, &lex).unwrap(), &lex).unwrap();
        prop_assert_eq!(a.text, b.text);
    }
}

// prompt

proptest! {
    #[test]
    fn knowledge_texts_reparse_losslessly(q in "[a-z]{1,8}( [a-z]{1,8})?", s in "[a-z(),; ]{1,30}[a-z]", cap in "[a-z]{1,6}( [a-z]{1,6}){0,4}") {
        let t = PromptTemplate::default();
        let class = compose_class_text(&t, &q, Some(&s)).unwrap();
        prop_assert_eq!(class.reparse().unwrap(), class.parts.clone());
        let od = compose_od_text(&q, Some(&s)).unwrap();
        prop_assert_eq!(od.reparse().unwrap(), od.parts.clone());
        for scheme in [CaptionScheme::Concat, CaptionScheme::Combine] {
            for text in compose_caption_texts(&cap, &q, Some(&s), scheme).unwrap() {
                prop_assert_eq!(text.reparse().unwrap(), text.parts.clone());
            }
        }
    }

    #[test]
    fn without_knowledge_every_scheme_is_the_plain_input(q in "[a-z]{1,8}", cap in "[a-z]{1,6}( [a-z]{1,6}){0,4}") {
        let t = PromptTemplate::default();
        prop_assert_eq!(compose_class_text(&t, &q, None).unwrap().text, t.apply(&q));
        prop_assert_eq!(compose_od_text(&q, None).unwrap().text, q.clone());
        for scheme in [CaptionScheme::Concat, CaptionScheme::Combine] {
            let out = compose_caption_texts(&cap, &q, None, scheme).unwrap();
            prop_assert_eq!(out.len(), 1);
            prop_assert_eq!(&out[0].text, &cap);
        }
    }

    #[test]
    fn combine_doubles_only_with_knowledge(q in "[a-z]{1,8}", s in prop::option::of("[a-z ]{1,20}[a-z]")) {
        let out = compose_caption_texts("a dog in a park", &q, s.as_deref(), CaptionScheme::Combine).unwrap();
        prop_assert_eq!(out.len(), if s.is_some() { 2 } else { 1 });
    }
}

// encoder

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_adapters_match_base_branch(seed in 0u64..1000, text in caption(), cls in any::<bool>()) {
        let (p, vocab) = small_model(seed);
        let pooling = if cls { Pooling::Cls } else { Pooling::Eos };
        let ids = vocab.encode(&text, pooling, 12).unwrap();
        let a = p.encode_text(&ids, pooling, false).unwrap();
        let b = p.encode_text(&ids, pooling, true).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(a.len(), 8);
    }

    #[test]
    fn tokens_past_eos_do_not_matter(seed in 0u64..1000, text in "[a-z]{1,5}( [a-z]{1,5}){0,3}", junk in prop::collection::vec(0usize..16, 1..4)) {
        let (p, vocab) = small_model(seed);
        let ids = vocab.encode(&text, Pooling::Eos, 8).unwrap();
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        let mut padded = ids.clone();
        padded.extend(junk.iter().map(|&j| j % vocab.size()));
        let mut zero_padded = ids.clone();
        zero_padded.extend(std::iter::repeat_n(PAD, junk.len()));
        let a = p.encode_text(&ids, Pooling::Eos, false).unwrap();
        prop_assert_eq!(&a, &p.encode_text(&padded, Pooling::Eos, false).unwrap());
        prop_assert_eq!(&a, &p.encode_text(&zero_padded, Pooling::Eos, false).unwrap());
    }

    #[test]
    fn image_features_have_embed_width(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let (p, _) = small_model(seed);
        prop_assert_eq!(p.encode_image(&x).unwrap().len(), 8);
    }
}

// contrastive

fn batch_case() -> impl Strategy<Value = (u64, usize, usize, Vec<usize>, f64)> {
    (1usize..8, 2usize..12).prop_flat_map(|(b, p)| {
        (any::<u64>(), Just(b), Just(p), prop::collection::vec(0usize..4, b), 0.5f64..100.0)
    })
}

proptest! {
    #[test]
    fn loss_is_permutation_equivariant((seed, b, p, labels, tau) in batch_case(), perm_seed in any::<u64>()) {
        let sim = similarity_matrix(&unit_rows(seed, b, p), &unit_rows(seed ^ 1, b, p)).unwrap();
        let mut perm: Vec<usize> = (0..b).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..b).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = Array2::from_shape_fn((b, b), |(i, j)| sim[[perm[i], perm[j]]]);
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = unicl_loss(&sim, &labels, tau).unwrap();
        let c = unicl_loss(&permuted, &plabels, tau).unwrap();
        for (x, y) in [(a.i2t, c.i2t), (a.t2i, c.t2i), (a.total, c.total)] {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn transposing_swaps_directions((seed, b, p, labels, tau) in batch_case()) {
        let sim = similarity_matrix(&unit_rows(seed, b, p), &unit_rows(seed ^ 1, b, p)).unwrap();
        let a = unicl_loss(&sim, &labels, tau).unwrap();
        let t = unicl_loss(&sim.t().to_owned(), &labels, tau).unwrap();
        prop_assert_eq!(a.i2t, t.t2i);
        prop_assert_eq!(a.t2i, t.i2t);
    }

    #[test]
    fn temperature_keeps_row_argmax((seed, b, p, labels, tau) in batch_case(), k in 0.1f64..10.0) {
        let sim = similarity_matrix(&unit_rows(seed, b, p), &unit_rows(seed ^ 1, b, p)).unwrap();
        prop_assert_eq!(row_argmax(&(&sim * tau)), row_argmax(&(&sim * (tau * k))));
        let a = unicl_loss(&sim, &labels, tau).unwrap();
        prop_assert!(a.total.is_finite());
    }
}

// grounding

proptest! {
    #[test]
    fn focal_is_non_negative(cells in prop::collection::vec((-30.0f64..30.0, any::<bool>()), 1..20), alpha in 0.01f64..0.99, gamma in 0.0f64..5.0) {
        let n = cells.len();
        let s = Array2::from_shape_fn((1, n), |(_, j)| cells[j].0);
        let t = Array2::from_shape_fn((1, n), |(_, j)| f64::from(cells[j].1 as u8));
        let fp = FocalParams::new(alpha, gamma).unwrap();
        prop_assert!(focal_loss(&s, &t, &fp).unwrap() >= 0.0);
    }

    #[test]
    fn raising_a_positive_score_never_hurts(s in -20.0f64..20.0, d in 0.0f64..5.0, alpha in 0.01f64..0.99, gamma in 0.0f64..5.0) {
        let fp = FocalParams::new(alpha, gamma).unwrap();
        let t = ndarray::array![[1.0]];
        let lo = focal_loss(&ndarray::array![[s]], &t, &fp).unwrap();
        let hi = focal_loss(&ndarray::array![[s + d]], &t, &fp).unwrap();
        prop_assert!(hi <= lo);
    }

    #[test]
    fn score_columns_are_independent(seed in any::<u64>(), m in 1usize..6, k in 2usize..6, col in 0usize..6) {
        let col = col % k;
        let v = unit_rows(seed, m, 5);
        let u = unit_rows(seed ^ 7, k, 5).t().to_owned();
        let mut u2 = u.clone();
        u2.column_mut(col).mapv_inplace(|x| -2.0 * x + 0.5);
        let a = ground_scores(&v, &u).unwrap();
        let b = ground_scores(&v, &u2).unwrap();
        for j in (0..k).filter(|&j| j != col) {
            prop_assert_eq!(a.column(j), b.column(j));
        }
    }
}

// evaluation

proptest! {
    #[test]
    fn overlap_is_bounded_and_monotone(
        pool in prop::collection::vec("[a-f]{1,2}", 0..8),
        more in prop::collection::vec("[a-f]{1,2}", 0..8),
        down in prop::collection::vec("[a-f]{1,2}", 1..8),
    ) {
        let a = concept_overlap(&pool, &down).unwrap();
        let mut bigger = pool.clone();
        bigger.extend(more);
        let b = concept_overlap(&bigger, &down).unwrap();
        prop_assert!((0.0..=100.0).contains(&a));
        prop_assert!(b >= a);
    }
}

#[test]
fn probe_is_deterministic_for_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let x = Array2::from_shape_fn((60, 6), |(i, j)| {
        (if j == labels[i] { 1.0 } else { 0.0 }) + 0.8 * rng.random_range(-1.0..1.0)
    });
    let a = linear_probe(&x, &labels, 4, 11).unwrap();
    let b = linear_probe(&x, &labels, 4, 11).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn random_class_embeddings_score_near_chance() {
    let (n, c, p) = (600usize, 5usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let features = unit_rows(1, n, p);
    let emb = unit_rows(2, c, p).t().to_owned();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let acc = classify_features(&features, &emb, &labels).unwrap().accuracy;
    let chance = 1.0 / c as f64;
    let sigma = (chance * (1.0 - chance) / n as f64).sqrt();
    assert!((acc - chance).abs() <= 3.0 * sigma, "accuracy {acc}, chance {chance}, sigma {sigma}");
}
