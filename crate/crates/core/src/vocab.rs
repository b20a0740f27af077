//! Toy phrase vocabulary standing in for a text encoder.
//!
//! A description is always two tokens, `[color, shape]`; the null description
//! is `[null, null]`. Embeddings are rows of one learned table.

use std::fmt;
use std::str::FromStr;

use migc_tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tokens per description.
pub const L_TEXT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Yellow,
    Green,
    Blue,
    White,
    Black,
    Brown,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::Yellow,
        Color::Green,
        Color::Blue,
        Color::White,
        Color::Black,
        Color::Brown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::White => "white",
            Color::Black => "black",
            Color::Brown => "brown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

impl FromStr for Color {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Color::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::UnknownToken(s.into()))
    }
}

impl FromStr for Shape {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::UnknownToken(s.into()))
    }
}

/// An instance description `<color> <shape>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Description {
    pub color: Color,
    pub shape: Shape,
}

impl Description {
    pub fn new(color: Color, shape: Shape) -> Self {
        Self { color, shape }
    }
}

impl fmt::Display for Description {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

impl FromStr for Description {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(c), Some(sh), None) => Ok(Self::new(c.parse()?, sh.parse()?)),
            _ => Err(CoreError::UnknownToken(s.into())),
        }
    }
}

/// Token ids: colors, then shapes, then null.
pub const VOCAB_SIZE: usize = Color::ALL.len() + Shape::ALL.len() + 1;
pub const NULL_TOKEN: usize = VOCAB_SIZE - 1;

pub fn color_token(c: Color) -> usize {
    c as usize
}

pub fn shape_token(s: Shape) -> usize {
    Color::ALL.len() + s as usize
}

pub fn description_tokens(d: Option<&Description>) -> [usize; L_TEXT] {
    match d {
        Some(d) => [color_token(d.color), shape_token(d.shape)],
        None => [NULL_TOKEN; L_TEXT],
    }
}

/// Token ids of the global prompt: the instance descriptions back to back, or
/// `[null, null]` when there are none.
pub fn prompt_tokens(descs: &[Description]) -> Vec<usize> {
    if descs.is_empty() {
        return vec![NULL_TOKEN; L_TEXT];
    }
    descs.iter().flat_map(|d| description_tokens(Some(d))).collect()
}

/// Token names in id order, as stored in checkpoints.
pub fn token_names() -> Vec<String> {
    Color::ALL
        .iter()
        .map(|c| c.name().to_string())
        .chain(Shape::ALL.iter().map(|s| s.name().to_string()))
        .chain(std::iter::once("<null>".to_string()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ToyVocab {
    pub table: ParamId,
    pub dim: usize,
}

impl ToyVocab {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let table = store.init(format!("{name}.table"), &[VOCAB_SIZE, dim], Init::Uniform(1.0), rng)?;
        Ok(Self { table, dim })
    }

    /// Embedding rows for `ids` as a graph node `[ids.len(), dim]`.
    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let mut onehot = Tensor::zeros(&[ids.len(), VOCAB_SIZE]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= VOCAB_SIZE {
                return Err(CoreError::UnknownToken(format!("id {id}")));
            }
            onehot.data_mut()[r * VOCAB_SIZE + id] = 1.0;
        }
        let oh = g.input(onehot);
        let t = g.param(self.table);
        Ok(g.matmul(oh, t)?)
    }
}

/// `[L_TEXT, dim]` embedding of a description; `None` is the null description.
pub fn encode_phrase(store: &ParamStore, vocab: &ToyVocab, desc: Option<&Description>) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let v = vocab.embed(&mut g, &description_tokens(desc))?;
    Ok(g.value(v).clone())
}
