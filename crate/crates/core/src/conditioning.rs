use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Per-token conditioning sequence produced by a text encoder.
///
/// Row `j` of `vectors` is the encoder output at sequence position `j`;
/// `tokens[j]` is the token string that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub tokens: Vec<String>,
    pub vectors: Array2<f64>,
}

impl Conditioning {
    pub fn new(tokens: Vec<String>, vectors: Array2<f64>) -> Self {
        assert_eq!(tokens.len(), vectors.nrows(), "one token label per row");
        Self { tokens, vectors }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Positions whose token equals `token`.
    pub fn positions_of<'a>(&'a self, token: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.tokens
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.as_str() == token)
            .map(|(i, _)| i)
    }
}
