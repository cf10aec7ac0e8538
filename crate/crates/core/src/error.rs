use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A variational score violates `1 - 2γa_x ≥ ε` or `1 - 2a_v ≥ ε`.
    #[error("infeasible schedule at node {node}, coordinate {coord}: {reason}")]
    Feasibility {
        node: usize,
        coord: usize,
        reason: String,
    },

    #[error("singular perturbation kernel{}: condition number {cond:.3e}", fmt_node(*.node))]
    SingularKernel { node: Option<usize>, cond: f64 },

    #[error("cholesky decomposition failed: {0}")]
    Decomposition(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("non-finite value in {context}")]
    Numerical { context: String },

    #[error("sampler diverged at step {step} (h = {h:.6e}): |a| = {norm:.3e}")]
    Diverged { step: usize, h: f64, norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn fmt_node(node: Option<usize>) -> String {
    node.map(|n| format!(" at node {n}")).unwrap_or_default()
}

impl Error {
    /// Attaches a grid node to kernel errors raised below the node-aware layer.
    pub fn at_node(self, node: usize) -> Self {
        match self {
            Error::SingularKernel { node: None, cond } => Error::SingularKernel {
                node: Some(node),
                cond,
            },
            other => other,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(context: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
        }
    }
}
