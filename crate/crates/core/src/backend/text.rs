//! Deterministic toy text encoder.
//!
//! Every vocabulary token maps to a fixed pseudo-random unit vector derived
//! from its string and the encoder seed, so the vocabulary is open-ended.
//! Placeholder tokens (`<name>`) resolve to mutable learnable vectors.
//! The encoder is position-wise: output row `j` is the input embedding of
//! token `j` plus a fixed positional vector.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::conditioning::Conditioning;
use crate::prompt;
use crate::util::{labeled_rng, unit_vector};

pub const BOS: &str = "<|startoftext|>";
pub const EOS: &str = "<|endoftext|>";

/// Longest word piece; longer words split into `##`-prefixed continuations.
const MAX_PIECE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub embedding_dim: usize,
    pub context_length: usize,
    pub seed: u64,
    pub position_scale: f64,
    /// Norm of every vocabulary embedding.
    pub token_norm: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            context_length: 77,
            seed: 0x5eed_7e47,
            position_scale: 0.1,
            token_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    config: TextEncoderConfig,
    positions: Array2<f64>,
    placeholders: BTreeMap<String, Array1<f64>>,
}

impl ToyTextEncoder {
    pub fn new(config: TextEncoderConfig) -> Self {
        let mut rng = labeled_rng(config.seed, "positions");
        let mut positions = Array2::zeros((config.context_length, config.embedding_dim));
        for mut row in positions.rows_mut() {
            row.assign(&(unit_vector(&mut rng, config.embedding_dim) * config.position_scale * config.token_norm));
        }
        Self {
            config,
            positions,
            placeholders: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Lowercases, keeps placeholders whole, splits alphanumeric runs into
    /// pieces of at most eight characters and emits other symbols singly.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text)
    }

    /// The fixed input embedding of a vocabulary token.
    pub fn vocab_embedding(&self, token: &str) -> Array1<f64> {
        let mut rng = labeled_rng(self.config.seed, &format!("token:{token}"));
        unit_vector(&mut rng, self.config.embedding_dim) * self.config.token_norm
    }

    /// Input embedding of one token, resolving placeholders.
    pub fn input_embedding(&self, token: &str) -> Result<Array1<f64>, BackendError> {
        if prompt::is_placeholder(token) {
            self.placeholders
                .get(token)
                .cloned()
                .ok_or_else(|| BackendError::UnregisteredPlaceholder(token.to_string()))
        } else {
            Ok(self.vocab_embedding(token))
        }
    }

    pub fn set_placeholder(&mut self, token: &str, value: Array1<f64>) -> Result<(), BackendError> {
        if !prompt::is_placeholder(token) {
            return Err(BackendError::InvalidPlaceholder(token.to_string()));
        }
        if value.len() != self.dim() {
            return Err(BackendError::DimensionMismatch {
                expected: self.dim(),
                got: value.len(),
            });
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite(format!("placeholder {token}")));
        }
        self.placeholders.insert(token.to_string(), value);
        Ok(())
    }

    pub fn placeholder(&self, token: &str) -> Option<&Array1<f64>> {
        self.placeholders.get(token)
    }

    pub fn encode(&self, text: &str) -> Result<Conditioning, BackendError> {
        let mut tokens = vec![BOS.to_string()];
        tokens.extend(self.tokenize(text));
        tokens.push(EOS.to_string());
        if tokens.len() > self.config.context_length {
            return Err(BackendError::PromptTooLong {
                tokens: tokens.len(),
                max: self.config.context_length,
            });
        }
        let mut vectors = Array2::zeros((tokens.len(), self.dim()));
        for (j, tok) in tokens.iter().enumerate() {
            let e = self.input_embedding(tok)?;
            vectors.row_mut(j).assign(&(e + &self.positions.row(j)));
        }
        Ok(Conditioning::new(tokens, vectors))
    }

    /// Mean input embedding of the tokens of `word`.
    pub fn token_embedding(&self, word: &str) -> Result<Array1<f64>, BackendError> {
        let tokens = self.tokenize(word);
        if tokens.is_empty() {
            return Err(BackendError::EmptyWord);
        }
        let mut acc = Array1::zeros(self.dim());
        for tok in &tokens {
            acc += &self.input_embedding(tok)?;
        }
        Ok(acc / tokens.len() as f64)
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    let text = prompt::normalize_brackets(text);
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '<' {
            let mut j = i + 1;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_' || chars[j] == '-') {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && chars[j] == '>' {
                out.push(chars[i..=j].iter().collect());
                i = j + 1;
            } else {
                out.push("<".to_string());
                i += 1;
            }
        } else if c.is_alphanumeric() {
            let mut j = i;
            while j < chars.len() && chars[j].is_alphanumeric() {
                j += 1;
            }
            let word: Vec<char> = chars[i..j].iter().flat_map(|c| c.to_lowercase()).collect();
            for (k, piece) in word.chunks(MAX_PIECE).enumerate() {
                let piece: String = piece.iter().collect();
                out.push(if k == 0 { piece } else { format!("##{piece}") });
            }
            i = j;
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_words_placeholders_and_symbols() {
        assert_eq!(tokenize("A <c> Colored photo, ok"), vec!["a", "<c>", "colored", "photo", ",", "ok"]);
        assert_eq!(tokenize("impressionism"), vec!["impressi", "##onism"]);
        assert_eq!(tokenize("⟨o⟩"), vec!["<o>"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn empty_prompt_is_bos_eos() {
        let enc = ToyTextEncoder::new(TextEncoderConfig::default());
        let c = enc.encode("").unwrap();
        assert_eq!(c.tokens, vec![BOS, EOS]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = ToyTextEncoder::new(TextEncoderConfig::default());
        let b = ToyTextEncoder::new(TextEncoderConfig::default());
        assert_eq!(a.encode("a red cat").unwrap(), b.encode("a red cat").unwrap());
    }

    #[test]
    fn placeholder_update_changes_only_its_rows() {
        let mut enc = ToyTextEncoder::new(TextEncoderConfig::default());
        enc.set_placeholder("<c>", Array1::zeros(64)).unwrap();
        let before = enc.encode("a <c> colored <x> photo").err();
        assert!(matches!(before, Some(BackendError::UnregisteredPlaceholder(ref t)) if t == "<x>"));

        let a = enc.encode("a <c> colored photo").unwrap();
        enc.set_placeholder("<c>", Array1::from_elem(64, 0.25)).unwrap();
        let b = enc.encode("a <c> colored photo").unwrap();
        for j in 0..a.len() {
            let differs = a.vectors.row(j) != b.vectors.row(j);
            assert_eq!(differs, a.tokens[j] == "<c>", "row {j}");
        }
    }

    #[test]
    fn multi_token_word_embedding_is_mean() {
        let enc = ToyTextEncoder::new(TextEncoderConfig::default());
        let mean = (enc.vocab_embedding("impressi") + enc.vocab_embedding("##onism")) / 2.0;
        assert_eq!(enc.token_embedding("impressionism").unwrap(), mean);
        assert_eq!(enc.token_embedding("cat").unwrap(), enc.vocab_embedding("cat"));
        assert!(matches!(enc.token_embedding(" "), Err(BackendError::EmptyWord)));
    }

    #[test]
    fn too_long_prompt_is_rejected() {
        let enc = ToyTextEncoder::new(TextEncoderConfig::default());
        let long = vec!["cat"; 80].join(" ");
        assert!(matches!(enc.encode(&long), Err(BackendError::PromptTooLong { .. })));
    }
}
