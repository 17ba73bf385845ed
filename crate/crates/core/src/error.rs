use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-positive depth {depth:.6} m at joint {joint}{}", person_suffix(*.person))]
    Projection {
        person: Option<u64>,
        joint: usize,
        depth: f64,
    },

    #[error("person {person}: head-top and ankle midpoint coincide")]
    DegeneratePerson { person: u64 },

    #[error("non-finite value in term `{term}`{}", person_suffix(*.person))]
    Eval {
        person: Option<u64>,
        term: &'static str,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

fn person_suffix(person: Option<u64>) -> String {
    match person {
        Some(id) => format!(" (person {id})"),
        None => String::new(),
    }
}

impl Error {
    /// Attaches a person id to errors that carry one.
    pub fn for_person(self, id: u64) -> Self {
        match self {
            Error::Projection { joint, depth, .. } => Error::Projection {
                person: Some(id),
                joint,
                depth,
            },
            Error::Eval { term, .. } => Error::Eval {
                person: Some(id),
                term,
            },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
