use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid graph at `{node}`: {msg}")]
    Validation { node: String, msg: String },

    #[error("dangling reference `{reference}` in `{node}`")]
    DanglingRef { node: String, reference: String },

    #[error("cycle through nodes {0:?}")]
    Cycle(Vec<String>),

    #[error("no gradient rule for `{kind}` (node `{node}`)")]
    UnsupportedOp { node: String, kind: String },

    #[error("pass `{pass}` failed: {source}")]
    Pass {
        pass: String,
        #[source]
        source: Box<Error>,
    },

    #[error("rewrite error: {0}")]
    Rewrite(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("deadlock; blocked segments: {0:?}")]
    Deadlock(Vec<String>),

    #[error("graph order error: {0}")]
    GraphOrder(String),

    #[error("predictor training error: {0}")]
    Training(String),

    #[error("planning error: {0}")]
    Planning(String),
}

impl Error {
    pub(crate) fn invalid(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation { node: node.into(), msg: msg.into() }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by user-supplied configuration or input files
    /// rather than by the simulation itself.
    pub fn is_config(&self) -> bool {
        !matches!(self, Error::Deadlock(_) | Error::Planning(_))
    }
}
