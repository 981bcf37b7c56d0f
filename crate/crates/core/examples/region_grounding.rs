//! Train the region head with focal loss on synthetic region files and
//! classify regions against knowledge-augmented category texts.
//!
//! cargo run --release --example region_grounding

use klite::grounding::{
    category_texts, encode_phrases_parallel, encode_regions, ground_scores, mean_correct_score, region_accuracy,
    train_grounding, classify_scores, GroundTrainConfig, RegionRecord,
};
use klite::synth::{SynthConfig, SynthWorld};
use klite::trainer::train;

fn evaluate(
    params: &klite::encoder::ModelParams,
    vocab: &klite::vocab::Vocab,
    records: &[RegionRecord],
    texts: &[String],
) -> klite::Result<(f64, f64)> {
    let bank = encode_phrases_parallel(params, vocab, texts, false)?;
    let (mut preds, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        let s = ground_scores(&encode_regions(params, &r.feature_matrix()?)?, &bank.u)?;
        let l = r.region_labels().unwrap_or_default();
        scores.push(mean_correct_score(&s, &l).unwrap_or(f64::NAN));
        preds.extend(classify_scores(&s));
        labels.extend(l);
    }
    let acc = region_accuracy(&preds, &labels).unwrap_or(0.0);
    Ok((acc, scores.iter().sum::<f64>() / scores.len() as f64))
}

fn main() -> klite::Result<()> {
    let cfg = SynthConfig::default();
    let world = SynthWorld::generate(&cfg, 2)?;
    let k = world.classes.len();
    let records: Vec<RegionRecord> = world
        .test
        .chunks(4)
        .enumerate()
        .map(|(i, chunk)| RegionRecord {
            image_id: format!("img{i}"),
            features: chunk.iter().map(|(x, _)| x.clone()).collect(),
            targets: Some(chunk.iter().map(|(_, c)| (0..k).map(|j| u8::from(j == *c)).collect()).collect()),
        })
        .collect();

    let model = train(&cfg.train, &world.train, None)?;
    let names: Vec<&str> = world.classes.iter().map(|c| c.name.as_str()).collect();
    let mut params = model.params.clone();
    for source in [None, Some(&cfg.source)] {
        let texts: Vec<String> = category_texts(&names, &world.store, source, params.config.max_tokens)?
            .into_iter()
            .map(|(t, _)| t)
            .collect();
        let (acc, score) = evaluate(&params, &model.vocab, &records, &texts)?;
        println!("before training, knowledge={}: accuracy {acc:.3}, mean correct score {score:.3}", source.is_some());
    }

    let texts: Vec<String> = category_texts(&names, &world.store, Some(&cfg.source), params.config.max_tokens)?
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    println!("category text: {:?}", texts[0]);
    let losses = train_grounding(&mut params, &model.vocab, &records, &texts, &GroundTrainConfig::default())?;
    println!("{} steps, focal loss {:.3} -> {:.3}", losses.len(), losses[0], losses.last().unwrap());
    let (acc, score) = evaluate(&params, &model.vocab, &records, &texts)?;
    println!("after training: accuracy {acc:.3}, mean correct score {score:.3}");
    Ok(())
}
