//! The one serialization path shared by the CLI and the service.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{ShellError, ShellResult};

/// Pretty JSON with a trailing newline. Floats use the shortest text that
/// parses back to the same value.
pub fn to_string<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("documents serialize");
    s.push('\n');
    s
}

/// Parse a document; errors carry the path of the offending field.
pub fn from_str<T: DeserializeOwned>(text: &str) -> ShellResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        ShellError::invalid(path, e.into_inner().to_string())
    })
}
