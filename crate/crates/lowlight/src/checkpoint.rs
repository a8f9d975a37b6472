//! Checkpoint archive: a text manifest plus raw f32 payloads in one file.
//!
//! Layout, in order:
//!
//! ```text
//! LLCKPT1\n
//! [config]\n
//! <key>=<value>\n          (flat config snapshot; includes `iteration`)
//! [tensors]\n
//! <name> f32 <d0> <d1> ...\n   (manifest, one line per tensor)
//! [payload]\n
//! <little-endian f32 values, concatenated in manifest order>
//! ```
//!
//! Everything before `[payload]` is UTF-8 text. Writes go through a
//! temporary file and an atomic rename. `load(save(x))` is a bitwise
//! identity because values are stored exactly as their f32 bits.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "LLCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Flat key=value snapshot of the training configuration.
    pub config: BTreeMap<String, String>,
    /// Named tensors: model parameters plus `opt.m.*` / `opt.v.*` moments.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iteration(&self) -> Result<usize> {
        let raw = self
            .config
            .get("iteration")
            .ok_or_else(|| Error::Integrity("checkpoint lacks an `iteration` key".into()))?;
        raw.parse()
            .map_err(|_| Error::Integrity(format!("bad iteration value `{raw}`")))
    }

    /// Serialize to bytes (manifest text followed by the payload).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = String::new();
        text.push_str(MAGIC);
        text.push('\n');
        text.push_str("[config]\n");
        for (k, v) in &self.config {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str("[tensors]\n");
        for (name, t) in &self.tensors {
            text.push_str(name);
            text.push_str(" f32");
            for d in t.shape() {
                text.push_str(&format!(" {d}"));
            }
            text.push('\n');
        }
        text.push_str("[payload]\n");
        let mut bytes = text.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// Parse an archive. Structural problems are integrity errors.
    pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: String| Error::Integrity(msg);

        let payload_tag = b"[payload]\n";
        let split = find_subsequence(bytes, payload_tag)
            .ok_or_else(|| bad("missing [payload] section".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| bad("manifest is not valid UTF-8".into()))?;
        let payload = &bytes[split + payload_tag.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(format!("bad magic, expected `{MAGIC}`")));
        }
        if lines.next() != Some("[config]") {
            return Err(bad("expected [config] section".into()));
        }

        let mut config = BTreeMap::new();
        let mut in_tensors = false;
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            if line == "[tensors]" {
                if in_tensors {
                    return Err(bad("duplicate [tensors] section".into()));
                }
                in_tensors = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if !in_tensors {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad config line `{line}`")))?;
                if k.is_empty() {
                    return Err(bad("empty config key".into()));
                }
                if config.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(bad(format!("duplicate config key `{k}`")));
                }
            } else {
                let mut parts = line.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| bad("empty tensor line".into()))?
                    .to_string();
                if parts.next() != Some("f32") {
                    return Err(bad(format!("tensor `{name}`: only dtype f32 is supported")));
                }
                let mut shape = Vec::new();
                for dim in parts {
                    let d: usize = dim
                        .parse()
                        .map_err(|_| bad(format!("tensor `{name}`: bad dimension `{dim}`")))?;
                    shape.push(d);
                }
                if manifest.iter().any(|(n, _)| *n == name) {
                    return Err(bad(format!("duplicate tensor name `{name}`")));
                }
                manifest.push((name, shape));
            }
        }
        if !in_tensors {
            return Err(bad("missing [tensors] section".into()));
        }

        // Validate the total size before allocating anything tensor-sized.
        let mut expected_bytes: usize = 0;
        for (name, shape) in &manifest {
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("tensor `{name}`: shape overflows")))?;
            expected_bytes = numel
                .checked_mul(4)
                .and_then(|b| expected_bytes.checked_add(b))
                .ok_or_else(|| bad(format!("tensor `{name}`: payload overflows")))?;
        }
        if payload.len() != expected_bytes {
            return Err(bad(format!(
                "payload is {} bytes, manifest requires {}",
                payload.len(),
                expected_bytes
            )));
        }

        let mut tensors = Vec::with_capacity(manifest.len());
        let mut offset = 0;
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let b = &payload[offset + i * 4..offset + i * 4 + 4];
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            offset += numel * 4;
            tensors.push((name, Tensor::new(shape, data)));
        }

        Ok(Checkpoint { config, tensors })
    }

    /// Atomic write: temporary file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().unwrap_or_default().to_string_lossy()
        ));
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|window| window == needle)
}
