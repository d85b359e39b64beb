use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("label `{label}` repeated within operand `{tensor}`")]
    RepeatedLabel { tensor: String, label: String },

    #[error("bound mismatch on label `{label}`: {left} vs {right}")]
    BoundMismatch {
        label: String,
        left: usize,
        right: usize,
    },

    #[error("cycle detected: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("undeclared tensor `{0}`")]
    UndeclaredInput(String),

    #[error("invalid expression: {0}")]
    InvalidExpr(String),

    #[error("poisoned value (division by zero) while evaluating `{vertex}`")]
    Poisoned { vertex: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("partition entry {part} does not divide bound {bound} in dimension {dim}")]
    Chunking {
        dim: usize,
        bound: usize,
        part: usize,
    },

    #[error("incomplete relation: missing chunk at key {0:?}")]
    IncompleteRelation(Vec<usize>),

    #[error("join schema violation: {0}")]
    JoinSchema(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("consistency error: {0}")]
    Consistency(String),
}
