use thiserror::Error;

/// Errors produced by the simulator and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "cannot place routes of length {target_route_length} \
         (seed {seed}, {links} links, {users} users)"
    )]
    RouteGeneration {
        seed: u64,
        links: usize,
        users: usize,
        target_route_length: usize,
    },

    #[error("quadrature produced non-finite moments for belief (log_mean={log_mean}, log_var={log_var})")]
    Quadrature { log_mean: f64, log_var: f64 },

    #[error("moment matching failed: {0}")]
    Projection(String),

    #[error("could not bracket capacity for target congestion probability {target} after {doublings} doublings")]
    Bracket { target: f64, doublings: usize },

    #[error("link {link}: {source}")]
    Link {
        link: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("instance file is inconsistent: {0}")]
    InvalidInstance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_link(self, link: usize) -> Error {
        Error::Link {
            link,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
