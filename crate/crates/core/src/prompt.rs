//! Knowledge-augmented text composition.
//!
//! Components are joined with `", "`. With knowledge present a class name
//! becomes `"{prompt}, {query}, {knowledge}"`; with knowledge absent every
//! scheme collapses to the plain, knowledge-free input.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::text_tokens;

pub const SEPARATOR: &str = ", ";
pub const DEFAULT_TEMPLATE: &str = "a photo of a {}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        match pattern.matches("{}").count() {
            1 => Ok(PromptTemplate { pattern }),
            n => Err(Error::invalid(format!(
                "template '{pattern}' must contain exactly one '{{}}' placeholder, found {n}"
            ))),
        }
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn apply(&self, query: &str) -> String {
        self.pattern.replacen("{}", query, 1)
    }

    /// One template per non-empty line.
    pub fn load_file(path: impl AsRef<Path>) -> Result<Vec<PromptTemplate>> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let templates = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(PromptTemplate::new)
            .collect::<Result<Vec<_>>>()?;
        if templates.is_empty() {
            return Err(Error::invalid(format!("{}: no templates", path.display())));
        }
        Ok(templates)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            pattern: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ClassEq2,
    CaptionConcat,
    CaptionCombineMember,
    OdPlain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionScheme {
    Concat,
    Combine,
}

impl std::str::FromStr for CaptionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(CaptionScheme::Concat),
            "combine" => Ok(CaptionScheme::Combine),
            other => Err(Error::invalid(format!(
                "unknown caption scheme '{other}' (expected concat or combine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextParts {
    pub prompt: Option<String>,
    pub original_caption: Option<String>,
    pub query: String,
    pub knowledge: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedText {
    pub text: String,
    pub parts: TextParts,
    pub scheme: Scheme,
}

impl AugmentedText {
    fn from_parts(parts: TextParts, scheme: Scheme) -> Self {
        AugmentedText {
            text: join_parts(&parts),
            parts,
            scheme,
        }
    }

    pub fn has_knowledge(&self) -> bool {
        self.parts.knowledge.is_some()
    }

    /// Recover the parts from `self.text` alone, using only the shape of
    /// `self.parts` (which components are present).
    ///
    /// Lossless for knowledge-bearing texts whenever prompt, caption and query
    /// contain no `", "`; the knowledge string may contain anything since it
    /// is always last. Without knowledge the query is not part of the text
    /// (except for detection texts) and comes back empty.
    pub fn reparse(&self) -> Result<TextParts> {
        let shape = &self.parts;
        let mut parts = TextParts::default();
        if shape.knowledge.is_none() {
            if shape.prompt.is_some() {
                parts.prompt = Some(self.text.clone());
            } else if shape.original_caption.is_some() {
                parts.original_caption = Some(self.text.clone());
            } else {
                parts.query = self.text.clone();
            }
            return Ok(parts);
        }
        let lead = usize::from(shape.prompt.is_some()) + usize::from(shape.original_caption.is_some());
        let mut pieces = self.text.splitn(lead + 2, SEPARATOR);
        let mut next = || {
            pieces
                .next()
                .map(str::to_string)
                .ok_or_else(|| Error::invalid(format!("'{}' has too few components", self.text)))
        };
        if shape.prompt.is_some() {
            parts.prompt = Some(next()?);
        }
        if shape.original_caption.is_some() {
            parts.original_caption = Some(next()?);
        }
        parts.query = next()?;
        parts.knowledge = Some(next()?);
        Ok(parts)
    }
}

fn join_parts(parts: &TextParts) -> String {
    let Some(knowledge) = &parts.knowledge else {
        return parts
            .prompt
            .clone()
            .or_else(|| parts.original_caption.clone())
            .unwrap_or_else(|| parts.query.clone());
    };
    let mut out: Vec<&str> = Vec::with_capacity(3);
    if let Some(p) = &parts.prompt {
        out.push(p);
    }
    if let Some(c) = &parts.original_caption {
        out.push(c);
    }
    out.push(&parts.query);
    out.push(knowledge);
    out.join(SEPARATOR)
}

fn check_query(query: &str) -> Result<()> {
    if query.trim().is_empty() {
        Err(Error::invalid("query must be non-empty"))
    } else {
        Ok(())
    }
}

pub fn compose_class_text(
    template: &PromptTemplate,
    query: &str,
    knowledge: Option<&str>,
) -> Result<AugmentedText> {
    check_query(query)?;
    Ok(AugmentedText::from_parts(
        TextParts {
            prompt: Some(template.apply(query)),
            original_caption: None,
            query: query.to_string(),
            knowledge: knowledge.map(str::to_string),
        },
        Scheme::ClassEq2,
    ))
}

pub fn compose_caption_texts(
    caption: &str,
    query: &str,
    knowledge: Option<&str>,
    scheme: CaptionScheme,
) -> Result<Vec<AugmentedText>> {
    if caption.trim().is_empty() {
        return Err(Error::invalid("caption must be non-empty"));
    }
    let Some(knowledge) = knowledge else {
        let scheme = match scheme {
            CaptionScheme::Concat => Scheme::CaptionConcat,
            CaptionScheme::Combine => Scheme::CaptionCombineMember,
        };
        return Ok(vec![AugmentedText::from_parts(
            TextParts {
                original_caption: Some(caption.to_string()),
                query: query.to_string(),
                ..Default::default()
            },
            scheme,
        )]);
    };
    let with_caption = TextParts {
        prompt: None,
        original_caption: Some(caption.to_string()),
        query: query.to_string(),
        knowledge: Some(knowledge.to_string()),
    };
    Ok(match scheme {
        CaptionScheme::Concat => vec![AugmentedText::from_parts(
            with_caption,
            Scheme::CaptionConcat,
        )],
        CaptionScheme::Combine => vec![
            AugmentedText::from_parts(
                TextParts {
                    query: query.to_string(),
                    knowledge: Some(knowledge.to_string()),
                    ..Default::default()
                },
                Scheme::CaptionCombineMember,
            ),
            AugmentedText::from_parts(with_caption, Scheme::CaptionCombineMember),
        ],
    })
}

/// Detection-style text: no prompt, just `"{q}, {s}"`.
pub fn compose_od_text(query: &str, knowledge: Option<&str>) -> Result<AugmentedText> {
    check_query(query)?;
    Ok(AugmentedText::from_parts(
        TextParts {
            query: query.to_string(),
            knowledge: knowledge.map(str::to_string),
            ..Default::default()
        },
        Scheme::OdPlain,
    ))
}

/// Drop trailing knowledge words until the text fits `budget` encoder tokens.
///
/// Prompt, caption and query are never cut. If they alone exceed the budget
/// the knowledge is removed entirely and the result may still be over budget;
/// the encoder reports that as an overlength error.
pub fn truncate_to_budget(aug: &AugmentedText, budget: usize) -> AugmentedText {
    if text_tokens(&aug.text).len() <= budget {
        return aug.clone();
    }
    let Some(knowledge) = &aug.parts.knowledge else {
        return aug.clone();
    };
    let mut words: Vec<&str> = knowledge.split_whitespace().collect();
    while !words.is_empty() {
        words.pop();
        if words.is_empty() {
            break;
        }
        let mut parts = aug.parts.clone();
        parts.knowledge = Some(words.join(" "));
        let candidate = AugmentedText::from_parts(parts, aug.scheme);
        if text_tokens(&candidate.text).len() <= budget {
            return candidate;
        }
    }
    let mut parts = aug.parts.clone();
    parts.knowledge = None;
    AugmentedText::from_parts(parts, aug.scheme)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOXER_WIKI: &str = "a participant (fighter) in a boxing match";

    #[test]
    fn class_text_with_and_without_knowledge() {
        let t = PromptTemplate::default();
        let aug = compose_class_text(&t, "boxer", Some(BOXER_WIKI)).unwrap();
        assert_eq!(
            aug.text,
            "a photo of a boxer, boxer, a participant (fighter) in a boxing match"
        );
        let plain = compose_class_text(&t, "boxer", None).unwrap();
        assert_eq!(plain.text, "a photo of a boxer");
        assert!(compose_class_text(&t, "", None).is_err());
    }

    #[test]
    fn template_needs_one_placeholder() {
        assert!(PromptTemplate::new("a photo").is_err());
        assert!(PromptTemplate::new("{} and {}").is_err());
        assert!(PromptTemplate::new("itap of a {}.").is_ok());
    }

    #[test]
    fn caption_schemes() {
        let caption = "professional boxer is introduced to the crowd";
        let concat =
            compose_caption_texts(caption, "professional boxer", Some(BOXER_WIKI), CaptionScheme::Concat)
                .unwrap();
        assert_eq!(concat.len(), 1);
        assert_eq!(
            concat[0].text,
            format!("{caption}, professional boxer, {BOXER_WIKI}")
        );
        let combine = compose_caption_texts(
            caption,
            "professional boxer",
            Some(BOXER_WIKI),
            CaptionScheme::Combine,
        )
        .unwrap();
        let texts: Vec<&str> = combine.iter().map(|a| a.text.as_str()).collect();
        assert_eq!(
            texts,
            [
                format!("professional boxer, {BOXER_WIKI}"),
                format!("{caption}, professional boxer, {BOXER_WIKI}")
            ]
        );
        for scheme in [CaptionScheme::Concat, CaptionScheme::Combine] {
            let plain = compose_caption_texts(caption, "boxer", None, scheme).unwrap();
            assert_eq!(plain.len(), 1);
            assert_eq!(plain[0].text, caption);
        }
    }

    #[test]
    fn od_text() {
        let aug = compose_od_text("fireplug", Some("an upright hydrant")).unwrap();
        assert_eq!(aug.text, "fireplug, an upright hydrant");
        assert_eq!(compose_od_text("person", None).unwrap().text, "person");
        assert!(compose_od_text(" ", None).is_err());
    }

    #[test]
    fn truncation_cuts_knowledge_first() {
        let t = PromptTemplate::default();
        let aug = compose_class_text(&t, "boxer", Some(BOXER_WIKI)).unwrap();
        let full = text_tokens(&aug.text).len();
        let cut = truncate_to_budget(&aug, full - 2);
        assert!(text_tokens(&cut.text).len() <= full - 2);
        assert!(cut.text.starts_with("a photo of a boxer, boxer, a participant"));
        assert_eq!(truncate_to_budget(&aug, full), aug);
        // budget below prompt + query: knowledge gone, the rest intact
        let tiny = truncate_to_budget(&aug, 3);
        assert_eq!(tiny.text, "a photo of a boxer");
        assert!(tiny.parts.knowledge.is_none());
    }

    #[test]
    fn parse_recovers_parts() {
        let t = PromptTemplate::default();
        let aug = compose_class_text(&t, "boxer", Some("boxer, combatant, person")).unwrap();
        assert_eq!(aug.reparse().unwrap(), aug.parts);
    }
}
