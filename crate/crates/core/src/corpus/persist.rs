//! On-disk corpus layout: `header.json` + `manifest.jsonl` + `canaries.json`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CanarySet, CorpusConfig, CorpusManifest, DocumentRecord, SplitMembership};
use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "header.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CANARY_FILE: &str = "canaries.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub splits: SplitMembership,
    /// SHA-256 of `manifest.jsonl`.
    pub manifest_sha256: String,
}

pub fn manifest_jsonl(manifest: &CorpusManifest) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for d in manifest.documents() {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// SHA-256 of the manifest's JSONL serialization; identifies a corpus in
/// checkpoint headers.
pub fn manifest_digest(manifest: &CorpusManifest) -> Result<String> {
    Ok(crate::util::sha256_hex(&manifest_jsonl(manifest)?))
}

pub fn save_corpus(manifest: &CorpusManifest, dir: &Path) -> Result<CorpusHeader> {
    fs::create_dir_all(dir)?;
    let body = manifest_jsonl(manifest)?;
    let header = CorpusHeader {
        schema_version: SCHEMA_VERSION,
        seed: manifest.seed,
        config: manifest.config.clone(),
        splits: manifest.splits.clone(),
        manifest_sha256: crate::util::sha256_hex(&body),
    };
    fs::write(dir.join(MANIFEST_FILE), &body)?;
    let mut f = fs::File::create(dir.join(HEADER_FILE))?;
    serde_json::to_writer_pretty(&mut f, &header)?;
    f.write_all(b"\n")?;
    Ok(header)
}

pub fn load_corpus(dir: &Path) -> Result<CorpusManifest> {
    let header: CorpusHeader = serde_json::from_slice(&fs::read(dir.join(HEADER_FILE))?)?;
    let reader = BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?);
    let mut documents = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| Error::format("manifest", format!("line {}: {e}", n + 1)))?;
        documents.push(doc);
    }
    let manifest = CorpusManifest::from_parts(header.config, header.seed, header.splits, documents)?;
    let digest = crate::util::sha256_hex(&manifest_jsonl(&manifest)?);
    if digest != header.manifest_sha256 {
        return Err(Error::ManifestMismatch("manifest.jsonl does not match its header digest".into()));
    }
    Ok(manifest)
}

pub fn save_canaries(canaries: &CanarySet, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, canaries)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_canaries(path: &Path) -> Result<CanarySet> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, mark_canaries, tests::small_config};

    #[test]
    fn save_load_round_trip_and_byte_stability() {
        let m = gen_corpus(&small_config(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&m, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, m);

        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let first_header = fs::read(dir.path().join(HEADER_FILE)).unwrap();
        save_corpus(&back, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
        assert_eq!(first_header, fs::read(dir.path().join(HEADER_FILE)).unwrap());
    }

    #[test]
    fn tampered_manifest_is_detected() {
        let m = gen_corpus(&small_config(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&m, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut body = fs::read_to_string(&p).unwrap();
        body = body.replacen("\"tr-00000\"", "\"tr-99999\"", 1);
        fs::write(&p, body).unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }

    #[test]
    fn canary_file_round_trip() {
        let m = gen_corpus(&small_config(), 9).unwrap();
        let c = mark_canaries(&m, 43, &m.config.duplication_profile, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(CANARY_FILE);
        save_canaries(&c, &p).unwrap();
        assert_eq!(load_canaries(&p).unwrap(), c);
    }
}
