use std::fs;
use std::path::Path;

use docmem::corpus::CorpusConfig;
use docmem::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Settings of the `gen` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Seed of the canary draw; defaults to `seed`.
    pub canary_seed: Option<u64>,
    pub corpus: CorpusConfig,
}

/// Parses a JSON file, reporting syntax and schema errors by line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    parse_json(&text)
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, Error> {
    serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: GenConfig = parse_json(r#"{"seed": 4, "corpus": {"train_docs": 12}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.corpus.train_docs, 12);
        assert_eq!(c.corpus.test_docs, CorpusConfig::default().test_docs);
    }

    #[test]
    fn errors_carry_positions() {
        let err = parse_json::<GenConfig>("{\n  \"seed\": 4,\n  \"corpus\": {\"train_docs\": }\n}").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 3, .. }), "{err}");
        let err = parse_json::<GenConfig>("{\n\"sed\": 1}").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }), "{err}");
    }
}
