//! Build knowledge-augmented texts for class names, captions and detection
//! categories, and fit them into a token budget.
//!
//! cargo run --example compose_prompts

use klite::prompt::{
    compose_caption_texts, compose_class_text, compose_od_text, truncate_to_budget, CaptionScheme, PromptTemplate,
};

fn main() -> klite::Result<()> {
    let template = PromptTemplate::default();
    let knowledge = "a participant (fighter) in a boxing match";

    println!("{}", compose_class_text(&template, "boxer", Some(knowledge))?.text);
    println!("{}", compose_class_text(&template, "boxer", None)?.text);

    let caption = "a professional boxer in the ring";
    for scheme in [CaptionScheme::Concat, CaptionScheme::Combine] {
        for t in compose_caption_texts(caption, "professional boxer", Some(knowledge), scheme)? {
            println!("{scheme:?}: {}", t.text);
        }
    }

    let od = compose_od_text("fireplug", Some("an upright hydrant for drawing water to use in fighting fires"))?;
    println!("{}", od.text);
    for budget in [16, 8, 3] {
        println!("budget {budget:>2}: {}", truncate_to_budget(&od, budget).text);
    }
    println!("parts {:?}", od.reparse()?);
    Ok(())
}
