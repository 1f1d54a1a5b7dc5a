//! Queries, partitioned contexts, and prompt layouts whose ablations share prefixes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, TokenSeq, BOS};

pub const DEFAULT_SEPARATOR: &str = "\n";

/// Prompt used for short-context question answering.
pub const QA_TEMPLATE: &str =
    "Answer the question based on the provided context\nContext:\n{context}Question: {question}\n";

/// Prompt used when the context is a full document.
pub const DOCUMENT_TEMPLATE: &str =
    "Answer the question based on the following scientific paper:\n{context}Question: {question}\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub text: String,
    /// Tokens of `text` followed by the separator.
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceGroup {
    pub sources: Vec<Source>,
}

/// A context split into ordered groups, each split into ordered sources.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPartition {
    groups: Vec<SourceGroup>,
    separator: String,
}

impl ContextPartition {
    pub fn new(groups: Vec<Vec<String>>) -> Result<Self> {
        Self::with_separator(groups, DEFAULT_SEPARATOR)
    }

    pub fn with_separator(groups: Vec<Vec<String>>, separator: &str) -> Result<Self> {
        let mut index = 0;
        let mut built = Vec::with_capacity(groups.len());
        for group in groups {
            if group.is_empty() {
                return Err(Error::InvalidGrouping("empty source group".into()));
            }
            let mut sources = Vec::with_capacity(group.len());
            for text in group {
                if text.is_empty() {
                    return Err(Error::EmptySource(index));
                }
                let mut tokens = tokenize(&text);
                tokens.extend_from(&tokenize(separator));
                sources.push(Source { text, tokens });
                index += 1;
            }
            built.push(SourceGroup { sources });
        }
        if index == 0 {
            return Err(Error::EmptyContext);
        }
        Ok(Self { groups: built, separator: separator.to_owned() })
    }

    /// One group per source.
    pub fn flat(sources: Vec<String>) -> Result<Self> {
        Self::new(sources.into_iter().map(|s| vec![s]).collect())
    }

    pub fn groups(&self) -> &[SourceGroup] {
        &self.groups
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_sources(&self) -> usize {
        self.groups.iter().map(|g| g.sources.len()).sum()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.sources.len()).collect()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Source> {
        self.groups.iter().flat_map(|g| g.sources.iter())
    }

    /// The context text every source (with its separator) concatenates to.
    pub fn text(&self) -> String {
        self.sources().map(|s| format!("{}{}", s.text, self.separator)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub query: String,
    pub partition: ContextPartition,
    pub response: Option<String>,
}

/// A prompt template with exactly one `{context}` and one `{question}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        for placeholder in ["{context}", "{question}"] {
            match text.matches(placeholder).count() {
                1 => {}
                0 => return Err(Error::Template(format!("missing {placeholder} placeholder"))),
                _ => return Err(Error::Template(format!("{placeholder} appears more than once"))),
            }
        }
        Ok(Self { text })
    }

    pub fn qa() -> Self {
        Self { text: QA_TEMPLATE.to_owned() }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    fn split(&self, query: &str) -> (String, String) {
        let (before, after) = self.text.split_once("{context}").expect("validated template");
        (before.replace("{question}", query), after.replace("{question}", query))
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::qa()
    }
}

/// Token-level view of a prompt: a preamble (starting with BOS), one span per
/// source, and a suffix. Spans tile the region between preamble and suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    tokens: TokenSeq,
    preamble: Range<usize>,
    spans: Vec<Range<usize>>,
    suffix: Range<usize>,
    group_of: Vec<usize>,
    source_texts: Vec<String>,
    /// Index of each source in the layout this one was restricted from (identity for a fresh layout).
    origin: Vec<usize>,
}

/// A prompt with some sources removed, plus how much of it is shared with the
/// full prompt's prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblatedPrompt {
    pub tokens: TokenSeq,
    /// Number of leading tokens identical to the full prompt.
    pub shared_prefix: usize,
    /// Context-source tokens kept in the ablated prompt.
    pub context_tokens: usize,
    /// Context-source tokens located after `shared_prefix`.
    pub context_tokens_after_prefix: usize,
}

pub fn build_prompt(
    template: &PromptTemplate,
    partition: &ContextPartition,
    query: &str,
) -> PromptLayout {
    let (before, after) = template.split(query);
    let mut tokens = TokenSeq::new(vec![BOS]);
    tokens.extend_from(&tokenize(&before));
    let preamble = 0..tokens.len();

    let mut spans = Vec::with_capacity(partition.num_sources());
    let mut group_of = Vec::with_capacity(partition.num_sources());
    let mut source_texts = Vec::with_capacity(partition.num_sources());
    for (g, group) in partition.groups().iter().enumerate() {
        for source in &group.sources {
            let start = tokens.len();
            tokens.extend_from(&source.tokens);
            spans.push(start..tokens.len());
            group_of.push(g);
            source_texts.push(source.text.clone());
        }
    }
    let suffix_start = tokens.len();
    tokens.extend_from(&tokenize(&after));
    let suffix = suffix_start..tokens.len();

    let origin = (0..spans.len()).collect();
    PromptLayout { tokens, preamble, spans, suffix, group_of, source_texts, origin }
}

impl PromptLayout {
    pub fn tokens(&self) -> &TokenSeq {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn preamble(&self) -> Range<usize> {
        self.preamble.clone()
    }

    pub fn suffix(&self) -> Range<usize> {
        self.suffix.clone()
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn span(&self, source: usize) -> Range<usize> {
        self.spans[source].clone()
    }

    pub fn num_sources(&self) -> usize {
        self.spans.len()
    }

    pub fn source_text(&self, source: usize) -> &str {
        &self.source_texts[source]
    }

    /// Group index of each source.
    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    /// Original source index of each source.
    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn num_groups(&self) -> usize {
        self.group_of.last().map_or(0, |g| g + 1)
    }

    /// Source indices belonging to each group, in order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_groups()];
        for (source, &g) in self.group_of.iter().enumerate() {
            groups[g].push(source);
        }
        groups
    }

    pub fn context_token_count(&self) -> usize {
        self.spans.iter().map(|s| s.len()).sum()
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        match indices.iter().find(|&&i| i >= self.num_sources()) {
            Some(&index) => Err(Error::SourceIndex { index, len: self.num_sources() }),
            None => Ok(()),
        }
    }

    /// The full prompt with the spans of `removed` deleted.
    pub fn ablate(&self, removed: &[usize]) -> Result<AblatedPrompt> {
        self.check_indices(removed)?;
        let mut drop = vec![false; self.num_sources()];
        for &i in removed {
            drop[i] = true;
        }
        let first_removed = drop.iter().position(|&d| d);
        let shared_prefix = first_removed.map_or(self.len(), |i| self.spans[i].start);

        let mut tokens = Vec::with_capacity(self.len());
        tokens.extend_from_slice(&self.tokens[self.preamble.clone()]);
        let mut context_tokens = 0;
        let mut context_tokens_after_prefix = 0;
        for (i, span) in self.spans.iter().enumerate() {
            if drop[i] {
                continue;
            }
            context_tokens += span.len();
            if span.start >= shared_prefix {
                context_tokens_after_prefix += span.len();
            }
            tokens.extend_from_slice(&self.tokens[span.clone()]);
        }
        tokens.extend_from_slice(&self.tokens[self.suffix.clone()]);
        Ok(AblatedPrompt { tokens: TokenSeq(tokens), shared_prefix, context_tokens, context_tokens_after_prefix })
    }

    /// A new layout over only the `kept` sources, in their original order.
    /// Groups that lose all their sources disappear; the rest are renumbered.
    pub fn restrict(&self, kept: &[usize]) -> Result<PromptLayout> {
        self.check_indices(kept)?;
        let mut keep = vec![false; self.num_sources()];
        for &i in kept {
            keep[i] = true;
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::EmptyContext);
        }

        let mut tokens = TokenSeq::new(self.tokens[self.preamble.clone()].to_vec());
        let mut spans = Vec::new();
        let mut group_of = Vec::new();
        let mut source_texts = Vec::new();
        let mut origin = Vec::new();
        let mut last_group = None;
        let mut next_group = 0;
        for (i, span) in self.spans.iter().enumerate().filter(|(i, _)| keep[*i]) {
            let start = tokens.len();
            tokens.0.extend_from_slice(&self.tokens[span.clone()]);
            spans.push(start..tokens.len());
            if last_group != Some(self.group_of[i]) {
                if last_group.is_some() {
                    next_group += 1;
                }
                last_group = Some(self.group_of[i]);
            }
            group_of.push(next_group);
            source_texts.push(self.source_texts[i].clone());
            origin.push(self.origin[i]);
        }
        let suffix_start = tokens.len();
        tokens.0.extend_from_slice(&self.tokens[self.suffix.clone()]);
        let suffix = suffix_start..tokens.len();
        Ok(PromptLayout { tokens, preamble: self.preamble.clone(), spans, suffix, group_of, source_texts, origin })
    }
}

/// Deletes the spans of `removed` from the full prompt.
pub fn ablate_prompt(layout: &PromptLayout, removed: &[usize]) -> Result<TokenSeq> {
    Ok(layout.ablate(removed)?.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc() -> PromptLayout {
        let partition = ContextPartition::new(vec![vec!["a".into(), "b".into()], vec!["c".into()]]).unwrap();
        build_prompt(&PromptTemplate::qa(), &partition, "q?")
    }

    #[test]
    fn spans_follow_preamble() {
        let partition = ContextPartition::flat(vec!["a".into(), "b".into()]).unwrap();
        let layout = build_prompt(&PromptTemplate::qa(), &partition, "q");
        let pre = layout.preamble().end;
        assert_eq!(layout.spans(), &[pre..pre + 2, pre + 2..pre + 4]);
        assert_eq!(&layout.tokens()[pre..pre + 4], &[97, 10, 98, 10]);
    }

    #[test]
    fn ablating_nothing_is_identity() {
        let layout = abc();
        assert_eq!(&ablate_prompt(&layout, &[]).unwrap(), layout.tokens());
    }

    #[test]
    fn ablation_shrinks_by_span_and_keeps_prefix() {
        let layout = abc();
        let ablated = layout.ablate(&[1]).unwrap();
        assert_eq!(ablated.tokens.len(), layout.len() - layout.span(1).len());
        let start = layout.span(1).start;
        assert_eq!(&ablated.tokens[..start], &layout.tokens()[..start]);
        assert_eq!(ablated.shared_prefix, start);
        assert_eq!(ablated.context_tokens_after_prefix, layout.span(2).len());
    }

    #[test]
    fn out_of_range_source_is_rejected() {
        assert!(matches!(abc().ablate(&[3]), Err(Error::SourceIndex { index: 3, len: 3 })));
    }

    #[test]
    fn template_requires_both_placeholders() {
        assert!(PromptTemplate::new("no placeholders").is_err());
        assert!(PromptTemplate::new("{context} only").is_err());
        assert!(PromptTemplate::new("{question} {context} {context}").is_err());
        assert!(PromptTemplate::new("Q: {question}\n{context}").is_ok());
    }

    #[test]
    fn question_before_context_lands_in_preamble() {
        let t = PromptTemplate::new("Q: {question}\n{context}end").unwrap();
        let partition = ContextPartition::flat(vec!["x".into()]).unwrap();
        let layout = build_prompt(&t, &partition, "why");
        assert_eq!(crate::tokenizer::detokenize(&layout.tokens()[layout.preamble()]), "Q: why\n");
    }

    #[test]
    fn empty_sources_are_rejected() {
        assert!(matches!(ContextPartition::flat(vec!["a".into(), "".into()]), Err(Error::EmptySource(1))));
        assert!(matches!(ContextPartition::new(vec![]), Err(Error::EmptyContext)));
    }

    #[test]
    fn restrict_matches_ablation_and_renumbers_groups() {
        let layout = abc();
        let restricted = layout.restrict(&[0, 2]).unwrap();
        assert_eq!(restricted.tokens(), &layout.ablate(&[1]).unwrap().tokens);
        assert_eq!(restricted.group_of(), &[0, 1]);
        let only_second = layout.restrict(&[2]).unwrap();
        assert_eq!(only_second.group_of(), &[0]);
        assert_eq!(only_second.source_text(0), "c");
    }

    #[test]
    fn partition_text_reconstructs_context() {
        let p = ContextPartition::new(vec![vec!["one".into(), "two".into()], vec!["three".into()]]).unwrap();
        assert_eq!(p.text(), "one\ntwo\nthree\n");
        assert_eq!(p.group_sizes(), vec![2, 1]);
    }

    fn partitions() -> impl Strategy<Value = Vec<Vec<String>>> {
        prop::collection::vec(prop::collection::vec("[a-z ]{1,6}", 1..4), 1..5)
    }

    proptest! {
        #[test]
        fn spans_tile_the_context_region(groups in partitions(), query in "[a-z]{0,5}") {
            let partition = ContextPartition::new(groups).unwrap();
            let layout = build_prompt(&PromptTemplate::qa(), &partition, &query);
            let mut cursor = layout.preamble().end;
            for (i, span) in layout.spans().iter().enumerate() {
                prop_assert_eq!(span.start, cursor);
                let source = partition.sources().nth(i).unwrap();
                prop_assert_eq!(&layout.tokens()[span.clone()], source.tokens.as_slice());
                cursor = span.end;
            }
            prop_assert_eq!(cursor, layout.suffix().start);
            prop_assert_eq!(layout.suffix().end, layout.len());
        }

        #[test]
        fn ablation_preserves_prefix(groups in partitions(), pick in any::<prop::sample::Index>()) {
            let partition = ContextPartition::new(groups).unwrap();
            let layout = build_prompt(&PromptTemplate::qa(), &partition, "q");
            let i = pick.index(layout.num_sources());
            let ablated = ablate_prompt(&layout, &[i]).unwrap();
            let start = layout.span(i).start;
            prop_assert_eq!(&ablated[..start], &layout.tokens()[..start]);
            prop_assert_eq!(ablated.len(), layout.len() - layout.span(i).len());
        }
    }
}
