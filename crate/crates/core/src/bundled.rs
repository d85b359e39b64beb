//! Example graphs shipped with the library.

use crate::einsum::{parse_eingraph, EinGraph};
use crate::error::{Error, Result};

pub const MATMUL: &str = include_str!("../graphs/matmul.eg");
pub const FFNN: &str = include_str!("../graphs/ffnn.eg");
pub const SOFTMAX: &str = include_str!("../graphs/softmax.eg");
pub const ATTENTION: &str = include_str!("../graphs/attention.eg");

pub const ALL: [(&str, &str); 4] = [
    ("matmul", MATMUL),
    ("ffnn", FFNN),
    ("softmax", SOFTMAX),
    ("attention", ATTENTION),
];

pub fn get(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parses a bundled graph by name.
pub fn graph(name: &str) -> Result<EinGraph> {
    let text = get(name).ok_or_else(|| Error::Plan(format!("no bundled graph named `{name}`")))?;
    parse_eingraph(text)
}
