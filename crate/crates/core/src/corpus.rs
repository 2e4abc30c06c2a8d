//! Dialogue corpora: JSON-lines ingestion, tokenization, vocabulary and a
//! synthetic generator whose last answer depends on the first turn.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AwiError, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub agent: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

fn validate(d: &Dialogue) -> std::result::Result<(), String> {
    if d.turns.is_empty() {
        return Err(format!("dialogue {:?} has no turns", d.id));
    }
    for (k, t) in d.turns.iter().enumerate() {
        if tokenize(&t.user).is_empty() {
            return Err(format!(
                "dialogue {:?} turn {} has empty user text",
                d.id,
                k + 1
            ));
        }
        if tokenize(&t.agent).is_empty() {
            return Err(format!(
                "dialogue {:?} turn {} has empty agent text",
                d.id,
                k + 1
            ));
        }
    }
    Ok(())
}

/// Parses one dialogue per line. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dialogues<R: BufRead>(reader: R) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(&line).map_err(|e| AwiError::Format {
            line: lineno,
            msg: e.to_string(),
        })?;
        validate(&d).map_err(|msg| AwiError::Format { line: lineno, msg })?;
        out.push(d);
    }
    if out.is_empty() {
        return Err(AwiError::Domain("corpus contains no dialogues".into()));
    }
    Ok(out)
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    parse_dialogues(BufReader::new(File::open(path)?))
}

pub fn write_dialogues<W: Write>(mut w: W, dialogues: &[Dialogue]) -> Result<()> {
    for d in dialogues {
        serde_json::to_writer(&mut w, d).map_err(|e| AwiError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    write_dialogues(BufWriter::new(File::create(path)?), dialogues)
}

/// Shared source/target vocabulary with the four specials at fixed ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(AwiError::Config(
                "vocabulary must start with <pad> <s> </s> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(AwiError::Config(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(AwiError::Config(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// A vocabulary of `size` entries: the specials followed by `w4, w5, ...`.
    pub fn with_size(size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((SPECIALS.len()..size).map(|i| format!("w{i}")));
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Normalizes `text`, maps unknown words to `<unk>` and appends `</s>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Joins tokens with spaces, dropping `<pad>`, `<s>` and `</s>`.
    /// Unknown ids render as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|id| !matches!(**id, PAD | BOS | EOS))
            .map(|id| self.token(*id).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode_dialogue(&self, d: &Dialogue) -> EncodedDialogue {
        EncodedDialogue {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| EncodedTurn {
                    src: self.encode(&t.user),
                    tgt: self.encode(&t.agent),
                })
                .collect(),
        }
    }
}

/// Counts tokens from both sides of every turn; keeps those seen at least
/// `min_count` times, ordered by descending frequency then token.
pub fn build_vocab(dialogues: &[Dialogue], min_count: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in dialogues {
        for t in &d.turns {
            for tok in tokenize(&t.user).into_iter().chain(tokenize(&t.agent)) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens).expect("specials are well formed")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedTurn {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDialogue {
    pub id: String,
    pub turns: Vec<EncodedTurn>,
}

impl EncodedDialogue {
    pub fn target_tokens(&self) -> usize {
        self.turns.iter().map(|t| t.tgt.len()).sum()
    }
}

pub mod synthetic {
    //! Three-turn "which error was it" dialogues. The turn-3 agent answer
    //! names the colour from the turn-1 user utterance, so it can only be
    //! predicted by carrying information across turns.

    use super::*;

    pub const COLORS: [&str; 8] = [
        "red", "blue", "green", "yellow", "purple", "orange", "black", "white",
    ];
    pub const CLARIFY: &str = "did the error appear after an update ?";
    pub const FILLERS: [&str; 4] = ["yes", "yes it did", "i think so", "yes after the update"];
    pub const OFFER: &str = "i can help you fix that now";
    pub const QUESTION: &str = "which error was it";

    pub fn opening(color: &str) -> String {
        format!("my device shows a {color} error")
    }

    pub fn answer(color: &str) -> String {
        format!("it was the {color} error")
    }

    /// `n` dialogues, a pure function of `(seed, n)`.
    pub fn generate(seed: u64, n: usize) -> Vec<Dialogue> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let color = *COLORS.choose(&mut rng).expect("non-empty");
                let filler = *FILLERS.choose(&mut rng).expect("non-empty");
                Dialogue {
                    id: format!("synth-{seed}-{i}"),
                    turns: vec![
                        Turn {
                            user: opening(color),
                            agent: CLARIFY.into(),
                        },
                        Turn {
                            user: filler.into(),
                            agent: OFFER.into(),
                        },
                        Turn {
                            user: QUESTION.into(),
                            agent: answer(color),
                        },
                    ],
                }
            })
            .collect()
    }

    /// The colour a dialogue opens with, if it is one of [`COLORS`].
    pub fn opening_color(d: &Dialogue) -> Option<&'static str> {
        let first = d.turns.first()?;
        tokenize(&first.user)
            .iter()
            .find_map(|t| COLORS.iter().find(|c| *c == t).copied())
    }

    /// First colour word in a reply.
    pub fn first_color(text: &str) -> Option<&'static str> {
        tokenize(text)
            .iter()
            .find_map(|t| COLORS.iter().find(|c| *c == t).copied())
    }
}

pub use synthetic::generate as synthetic_generate;
