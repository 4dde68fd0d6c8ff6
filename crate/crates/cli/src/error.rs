use serde_json::json;

/// A failure reported to the caller as one JSON object on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    /// Dotted field path for schema errors.
    pub path: Option<String>,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
            path: None,
        }
    }

    pub fn usage(message: &str) -> Self {
        CliError::new("usage", message.trim_end())
    }

    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            kind: "schema",
            message: message.into(),
            path: Some(path.into()),
        }
    }

    pub fn missing(what: &str, path: &std::path::Path) -> Self {
        CliError::new("missing_input", format!("{what} not found: {}", path.display()))
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        CliError::new("io", format!("{context}: {e}"))
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            "usage" | "config_parse" | "schema" => 2,
            "missing_input" => 3,
            "io" => 4,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        let mut err = json!({ "kind": self.kind, "message": self.message });
        if let Some(p) = &self.path {
            err["path"] = json!(p);
        }
        json!({ "error": err }).to_string()
    }
}

impl From<trajworld::Error> for CliError {
    fn from(e: trajworld::Error) -> Self {
        use trajworld::Error as E;
        let kind = match &e {
            E::Io(_) => "io",
            E::Json(_) | E::Format { .. } => "bad_input",
            E::InvalidArgument(_) | E::DimMismatch(_) | E::Empty(_) => "invalid_config",
            _ => "runtime",
        };
        CliError::new(kind, e.to_string())
    }
}
