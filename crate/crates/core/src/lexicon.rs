//! Causal-logic keyword counting over sample rationales.
//!
//! Text is split into word tokens: maximal runs of alphanumeric characters
//! or `_`, where a hyphen between two word characters keeps the run going
//! (`long-press` is one token). A phrase matches a run of consecutive tokens
//! separated only by whitespace. Matching is case-insensitive and scans left
//! to right, taking the longest phrase at each position and never reusing a
//! token.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::SynthesizedSample;

const DEFAULT_LEXICON: &str = include_str!("../assets/lexicon.txt");
pub const MAX_PHRASE_WORDS: usize = 4;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("reading lexicon {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {phrase:?} is not 1-{MAX_PHRASE_WORDS} whitespace-separated words")]
    BadPhrase { line: usize, phrase: String },
    #[error("line {line}: duplicate phrase {phrase:?}")]
    Duplicate { line: usize, phrase: String },
    #[error("phrase {phrase:?}: its prefix {prefix:?} already holds {count} matches, so appending text could lower counts")]
    NonMonotone {
        phrase: String,
        prefix: String,
        count: usize,
    },
    #[error("lexicon is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    pub text: String,
    pub category: Option<String>,
}

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    /// Only whitespace separates this token from the previous one.
    glued: bool,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    let mut gap_is_space = false;
    let mut prev: Option<char> = None;
    while let Some((start, c)) = chars.next() {
        if !is_word_char(c) {
            if !c.is_whitespace() {
                gap_is_space = false;
            }
            prev = Some(c);
            continue;
        }
        let glued = !tokens.is_empty() && gap_is_space && prev.is_some_and(char::is_whitespace);
        let mut end = start + c.len_utf8();
        while let Some(&(i, next)) = chars.peek() {
            if is_word_char(next) {
                end = i + next.len_utf8();
                chars.next();
            } else if next == '-' {
                let mut ahead = chars.clone();
                ahead.next();
                match ahead.peek() {
                    Some(&(_, after)) if is_word_char(after) => {
                        chars.next();
                    }
                    _ => break,
                }
            } else {
                break;
            }
        }
        tokens.push(Token {
            text: &text[start..end],
            glued,
        });
        gap_is_space = true;
        prev = Some(text[..end].chars().next_back().unwrap_or(c));
    }
    // first token is never glued; later ones need a whitespace-only gap
    tokens
}

#[derive(Debug, Clone)]
pub struct CausalLexicon {
    phrases: Vec<Phrase>,
    /// First word -> candidate phrases as word lists, longest first.
    by_first: HashMap<String, Vec<Vec<String>>>,
}

impl CausalLexicon {
    /// The built-in lexicon of roughly eighty phrases in seven categories.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("built-in lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut phrases = Vec::new();
        let mut seen = HashSet::new();
        let mut category = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(name) = comment.strip_prefix('[').and_then(|c| c.strip_suffix(']')) {
                    category = Some(name.trim().to_string());
                }
                continue;
            }
            let lowered = line.to_lowercase();
            let tokens = tokenize(&lowered);
            let words: Vec<&str> = tokens.iter().map(|t| t.text).collect();
            let normalized = words.join(" ");
            let well_formed = (1..=MAX_PHRASE_WORDS).contains(&words.len())
                && tokens.iter().skip(1).all(|t| t.glued)
                && normalized == lowered.split_whitespace().collect::<Vec<_>>().join(" ");
            if !well_formed {
                return Err(LexiconError::BadPhrase {
                    line: i + 1,
                    phrase: line.to_string(),
                });
            }
            if !seen.insert(normalized.clone()) {
                return Err(LexiconError::Duplicate {
                    line: i + 1,
                    phrase: normalized,
                });
            }
            phrases.push(Phrase {
                text: normalized,
                category: category.clone(),
            });
        }
        Self::from_phrases(phrases)
    }

    pub fn from_phrases(phrases: Vec<Phrase>) -> Result<Self, LexiconError> {
        if phrases.is_empty() {
            return Err(LexiconError::Empty);
        }
        let mut by_first: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for phrase in &phrases {
            let words: Vec<String> = phrase.text.split(' ').map(str::to_string).collect();
            by_first.entry(words[0].clone()).or_default().push(words);
        }
        for candidates in by_first.values_mut() {
            candidates.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        }
        let lexicon = CausalLexicon { phrases, by_first };
        lexicon.check_monotone()?;
        Ok(lexicon)
    }

    /// Greedy matching stays monotone under appended text exactly when no
    /// phrase has a proper prefix that itself matches more than once.
    fn check_monotone(&self) -> Result<(), LexiconError> {
        for phrase in &self.phrases {
            let words: Vec<&str> = phrase.text.split(' ').collect();
            for cut in 1..words.len() {
                let prefix = words[..cut].join(" ");
                let count = self.count_text(&prefix);
                if count > 1 {
                    return Err(LexiconError::NonMonotone {
                        phrase: phrase.text.clone(),
                        prefix,
                        count,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn phrases(&self) -> &[Phrase] {
        &self.phrases
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.iter().any(|p| p.text == phrase)
    }

    pub fn count_text(&self, text: &str) -> usize {
        let lowered = text.to_lowercase();
        let tokens = tokenize(&lowered);
        let mut count = 0;
        let mut i = 0;
        while i < tokens.len() {
            let matched = self.by_first.get(tokens[i].text).and_then(|candidates| {
                candidates.iter().find(|words| {
                    i + words.len() <= tokens.len()
                        && words.iter().enumerate().all(|(j, w)| {
                            let tok = tokens[i + j];
                            tok.text == w && (j == 0 || tok.glued)
                        })
                })
            });
            match matched {
                Some(words) => {
                    count += 1;
                    i += words.len();
                }
                None => i += 1,
            }
        }
        count
    }
}

/// Number of lexicon matches across the five rationale fields. Fields are
/// scanned independently, so no phrase spans two fields.
pub fn count_causal_tokens(sample: &SynthesizedSample, lexicon: &CausalLexicon) -> usize {
    sample
        .rationale
        .fields()
        .iter()
        .map(|f| lexicon.count_text(f))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::sample;
    use proptest::prelude::*;

    fn words(text: &str) -> Vec<(&str, bool)> {
        tokenize(text)
            .into_iter()
            .map(|t| (t.text, t.glued))
            .collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(
            words("tap it, then  go"),
            [("tap", false), ("it", true), ("then", false), ("go", true)]
        );
        assert_eq!(
            words("long-press the x- y"),
            [
                ("long-press", false),
                ("the", true),
                ("x", true),
                ("y", false)
            ]
        );
        assert_eq!(words("  -lead"), [("lead", false)]);
        assert_eq!(words("don't"), [("don", false), ("t", false)]);
    }

    #[test]
    fn builtin_contents() {
        let lex = CausalLexicon::builtin();
        for must in ["if", "unless", "because", "due to"] {
            assert!(lex.contains(must), "{must}");
        }
        assert!(lex.len() >= 75, "{}", lex.len());
        let categories: HashSet<_> = lex
            .phrases()
            .iter()
            .filter_map(|p| p.category.clone())
            .collect();
        assert_eq!(categories.len(), 7);
    }

    #[test]
    fn spot_counts() {
        let lex = CausalLexicon::builtin();
        // "because" and "if"; nothing else in the sentence is a lexicon phrase
        assert_eq!(
            lex.count_text("tap it because the dialog appears if confirmed"),
            2
        );
        assert_eq!(lex.count_text("due to the update, due to caching"), 2);
        assert_eq!(lex.count_text("DUE TO the update"), 1);
        // longest first: "in order to" is one match, not also "to ensure"
        assert_eq!(lex.count_text("in order to ensure"), 2);
        assert_eq!(lex.count_text("due, to"), 0);
        assert_eq!(lex.count_text("if-then"), 0);
        assert_eq!(lex.count_text("sinceit"), 0);
    }

    #[test]
    fn empty_rationale_counts_zero() {
        let mut s = sample("t", 0, "x");
        s.rationale.pre_state.clear();
        s.rationale.post_state.clear();
        s.rationale.trigger.clear();
        s.rationale.mechanism.clear();
        s.rationale.chain_of_thought.clear();
        assert_eq!(count_causal_tokens(&s, &CausalLexicon::builtin()), 0);
    }

    #[test]
    fn counts_sum_over_fields() {
        let lex = CausalLexicon::builtin();
        let mut s = sample("t", 0, "x");
        s.rationale.pre_state = "home, because".into();
        s.rationale.post_state = "due".into();
        s.rationale.trigger = "to the list".into();
        s.rationale.mechanism = "nothing".into();
        s.rationale.chain_of_thought = "if so".into();
        // "due" / "to" sit in different fields and never join
        assert_eq!(count_causal_tokens(&s, &lex), 3);
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(matches!(
            CausalLexicon::parse("# only comments\n"),
            Err(LexiconError::Empty)
        ));
        assert!(matches!(
            CausalLexicon::parse("if\nIF\n"),
            Err(LexiconError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            CausalLexicon::parse("a b c d e\n"),
            Err(LexiconError::BadPhrase { .. })
        ));
        assert!(matches!(
            CausalLexicon::parse("due, to\n"),
            Err(LexiconError::BadPhrase { .. })
        ));
        assert!(matches!(
            CausalLexicon::parse("so\nthen\nso then what\n"),
            Err(LexiconError::NonMonotone { .. })
        ));
        let lex = CausalLexicon::parse("# [c]\n  Due   To \n").unwrap();
        assert_eq!(
            lex.phrases()[0],
            Phrase {
                text: "due to".into(),
                category: Some("c".into())
            }
        );
    }

    fn vocab_text() -> impl Strategy<Value = String> {
        let pieces = prop::sample::select(vec![
            "if",
            "If",
            "unless",
            "because",
            "due",
            "to",
            "due to",
            "in",
            "order",
            "so",
            "that",
            "as",
            "a",
            "result",
            "then",
            "tap",
            "the",
            "button",
            "screen",
            "check",
            "make",
            "sure",
            "rather",
            "than",
            "even",
            "only",
            ",",
            ".",
            "\n",
            "  ",
            "well-known",
            "x-",
            "BECAUSE",
            "Since",
        ]);
        prop::collection::vec(pieces, 0..30).prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn case_invariant(text in vocab_text()) {
            let lex = CausalLexicon::builtin();
            prop_assert_eq!(lex.count_text(&text.to_uppercase()), lex.count_text(&text));
        }

        #[test]
        fn appending_never_decreases(text in vocab_text(), more in vocab_text()) {
            let lex = CausalLexicon::builtin();
            let extended = format!("{text} {more}");
            prop_assert!(lex.count_text(&extended) >= lex.count_text(&text));
        }
    }
}
