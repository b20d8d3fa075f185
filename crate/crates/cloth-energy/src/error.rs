use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("face {face} references out-of-range vertex {vertex} (mesh has {num_vertices})")]
    VertexOutOfRange {
        face: usize,
        vertex: usize,
        num_vertices: usize,
    },

    #[error("face {face} references vertex {vertex} more than once")]
    DegenerateFaceIndices { face: usize, vertex: usize },

    #[error("edge ({0}, {1}) is non-manifold: more than two incident faces")]
    NonManifoldEdge(usize, usize),

    #[error("degenerate triangle: area {area:e} below tolerance")]
    DegenerateTriangle { area: f64 },

    #[error("vertex {0} has no incident faces")]
    IsolatedVertex(usize),

    #[error("vertex {0} has a zero-sum normal")]
    ZeroNormal(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid network architecture: {0}")]
    BadArchitecture(String),

    #[error("bad magic bytes in {path}: expected {expected}")]
    BadMagic { path: String, expected: String },

    #[error("unsupported format version {got} in {path} (expected {expected})")]
    VersionMismatch {
        path: String,
        got: u32,
        expected: u32,
    },

    #[error("truncated or corrupt payload in {path}: {detail}")]
    TruncatedPayload { path: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure in {term}: {detail}")]
    Numerical { term: String, detail: String },

    #[error("solver failed to converge: {0}")]
    NonConverged(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
