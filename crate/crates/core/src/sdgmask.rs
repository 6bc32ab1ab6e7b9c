//! Mask-selection rules for generating nuanced negative questions from
//! tagged seed questions. Filling the masks is left to an external model.

use serde::{Deserialize, Serialize};

use crate::dataset::{validate_tokens, TaggedToken};
use crate::error::{Error, Result};

pub const MASK: &str = "[MASK]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum MaskRule {
    /// Mask the first token of each compound noun.
    CompoundHead = 1,
    /// Mask each maximal run of nouns and proper nouns.
    NounRun = 2,
    /// Mask each verb.
    Verb = 3,
    /// Keep entities and mask everything else.
    PreserveEntities = 4,
}

impl TryFrom<u8> for MaskRule {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        match id {
            1 => Ok(MaskRule::CompoundHead),
            2 => Ok(MaskRule::NounRun),
            3 => Ok(MaskRule::Verb),
            4 => Ok(MaskRule::PreserveEntities),
            other => Err(Error::InvalidArgument(format!("mask rule {other} not in 1..=4"))),
        }
    }
}

impl From<MaskRule> for u8 {
    fn from(rule: MaskRule) -> u8 {
        rule as u8
    }
}

/// Inclusive token range `[start, end]`.
pub type Span = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskProposal {
    pub rule: MaskRule,
    pub spans: Vec<Span>,
    pub rendered: String,
}

/// Maximal runs of indices satisfying `pred`.
fn runs(tokens: &[TaggedToken], pred: impl Fn(&TaggedToken) -> bool) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, t) in tokens.iter().enumerate() {
        match (pred(t), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, tokens.len() - 1));
    }
    out
}

pub fn select_masks(tokens: &[TaggedToken], rule: MaskRule) -> Result<Vec<MaskProposal>> {
    if tokens.is_empty() {
        return Err(Error::InvalidTokens("empty token sequence".into()));
    }
    validate_tokens(tokens)?;
    let span_sets: Vec<Vec<Span>> = match rule {
        MaskRule::CompoundHead => tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_compound_head)
            .map(|(i, _)| vec![(i, i)])
            .collect(),
        MaskRule::NounRun => runs(tokens, |t| t.pos.is_nominal()).into_iter().map(|s| vec![s]).collect(),
        MaskRule::Verb => tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.pos == crate::dataset::Pos::Verb)
            .map(|(i, _)| vec![(i, i)])
            .collect(),
        MaskRule::PreserveEntities => {
            let spans = runs(tokens, |t| !t.is_entity);
            if spans.is_empty() {
                vec![]
            } else {
                vec![spans]
            }
        }
    };
    span_sets
        .into_iter()
        .map(|spans| {
            let rendered = render_masked(tokens, &spans)?;
            Ok(MaskProposal { rule, spans, rendered })
        })
        .collect()
}

/// Joins tokens with single spaces, replacing each span by one `[MASK]`.
pub fn render_masked(tokens: &[TaggedToken], spans: &[Span]) -> Result<String> {
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    for (i, &(start, end)) in sorted.iter().enumerate() {
        if start > end || end >= tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "span ({start}, {end}) invalid for {} tokens",
                tokens.len()
            )));
        }
        if i > 0 && start <= sorted[i - 1].1 {
            return Err(Error::InvalidArgument(format!(
                "span ({start}, {end}) overlaps ({}, {})",
                sorted[i - 1].0,
                sorted[i - 1].1
            )));
        }
    }
    let mut parts: Vec<&str> = Vec::with_capacity(tokens.len());
    let mut spans = sorted.iter().peekable();
    let mut i = 0;
    while i < tokens.len() {
        match spans.peek() {
            Some(&&(start, end)) if start == i => {
                parts.push(MASK);
                i = end + 1;
                spans.next();
            }
            _ => {
                parts.push(&tokens[i].text);
                i += 1;
            }
        }
    }
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Pos;

    fn plain(words: &[&str]) -> Vec<TaggedToken> {
        words.iter().map(|w| TaggedToken::new(*w, Pos::Other)).collect()
    }

    #[test]
    fn render_examples() {
        let t = plain(&["a", "b", "c"]);
        assert_eq!(render_masked(&t, &[(1, 1)]).unwrap(), "a [MASK] c");
        assert_eq!(render_masked(&t, &[(0, 0), (2, 2)]).unwrap(), "[MASK] b [MASK]");
        assert_eq!(render_masked(&t, &[]).unwrap(), "a b c");
        assert_eq!(render_masked(&t, &[(0, 2)]).unwrap(), "[MASK]");
        assert!(render_masked(&t, &[(0, 1), (1, 2)]).is_err());
        assert!(render_masked(&t, &[(2, 3)]).is_err());
        assert!(render_masked(&t, &[(2, 1)]).is_err());
    }

    #[test]
    fn verb_rule_without_verbs_is_empty() {
        let t = plain(&["good", "pizza", "places"]);
        assert!(select_masks(&t, MaskRule::Verb).unwrap().is_empty());
    }

    #[test]
    fn noun_runs_mask_as_one() {
        let t = vec![
            TaggedToken::new("best", Pos::Other),
            TaggedToken::new("seafood", Pos::Noun).compound_head(),
            TaggedToken::new("restaurant", Pos::Noun),
            TaggedToken::new("in", Pos::Other),
            TaggedToken::new("Seattle", Pos::Propn).entity(),
        ];
        let p = select_masks(&t, MaskRule::NounRun).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].spans, vec![(1, 2)]);
        assert_eq!(p[0].rendered, "best [MASK] in Seattle");
        assert_eq!(p[1].rendered, "best seafood restaurant in [MASK]");

        let p = select_masks(&t, MaskRule::PreserveEntities).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].spans, vec![(0, 3)]);
        assert_eq!(p[0].rendered, "[MASK] Seattle");
    }

    #[test]
    fn entity_only_sentence_has_no_rule4_candidate() {
        let t = vec![TaggedToken::new("Seattle", Pos::Propn).entity()];
        assert!(select_masks(&t, MaskRule::PreserveEntities).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(select_masks(&[], MaskRule::Verb).is_err());
        let t = vec![TaggedToken::new("run", Pos::Verb).compound_head()];
        assert!(select_masks(&t, MaskRule::CompoundHead).is_err());
        assert!(MaskRule::try_from(5).is_err());
    }

    #[test]
    fn proposal_record_format() {
        let t = plain(&["a", "b"]);
        let p = MaskProposal { rule: MaskRule::Verb, spans: vec![(1, 1)], rendered: render_masked(&t, &[(1, 1)]).unwrap() };
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"rule":3,"spans":[[1,1]],"rendered":"a [MASK]"}"#);
    }
}
