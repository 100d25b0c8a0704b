use serde::{Deserialize, Serialize};

use crate::error::{PmgError, Result};

pub const MAX_PROMPT_TOKENS: usize = 32;

/// Word-level vocabulary. Ids are positions in `words`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    /// Lowercases, splits on whitespace and strips trailing punctuation.
    pub fn tokenize(&self, raw: &str) -> Result<TextPrompt> {
        let mut tokens = Vec::new();
        for piece in raw.split_whitespace() {
            let word = piece
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if word.is_empty() {
                continue;
            }
            let id = self
                .id(&word)
                .ok_or_else(|| PmgError::UnknownToken(word.clone()))?;
            tokens.push(id);
        }
        if tokens.len() > MAX_PROMPT_TOKENS {
            return Err(PmgError::PromptTooLong(tokens.len()));
        }
        Ok(TextPrompt {
            raw: raw.to_string(),
            tokens,
        })
    }
}

/// A tokenized prompt. An empty token list is the null condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub raw: String,
    pub tokens: Vec<u32>,
}

impl TextPrompt {
    pub fn empty() -> Self {
        Self {
            raw: String::new(),
            tokens: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.len() > MAX_PROMPT_TOKENS {
            return Err(PmgError::PromptTooLong(self.tokens.len()));
        }
        if let Some(&id) = self.tokens.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(PmgError::TokenOutOfRange {
                id: id as usize,
                size: vocab_size,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_known_words() {
        let v = Vocabulary::new(vec!["a".into(), "person".into(), "walks".into()]);
        let p = v.tokenize("A person walks.").unwrap();
        assert_eq!(p.tokens, vec![0, 1, 2]);
        assert!(matches!(v.tokenize("a dog"), Err(PmgError::UnknownToken(w)) if w == "dog"));
        assert!(v.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let p = TextPrompt {
            raw: String::new(),
            tokens: vec![0, 7],
        };
        assert!(p.validate(7).is_err());
        assert!(p.validate(8).is_ok());
    }
}
