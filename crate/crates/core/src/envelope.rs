//! Shared on-disk envelope: a directory holding a UTF-8 `key=value` manifest
//! and a flat little-endian float blob.
//!
//! ```text
//! <dir>/manifest.txt   version, kind, dtype, floats, then payload keys
//! <dir>/data.bin       `floats` values, IEEE-754, little-endian
//! ```
//!
//! Keys may repeat; repeated keys keep their order (image ids, class names).
//! Every artifact the toolkit writes (embedding caches, similarity dumps,
//! pseudo-label files, latent snapshots) uses this layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Float payload of an envelope.
#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Blob {
    pub fn len(&self) -> usize {
        match self {
            Blob::F32(v) => v.len(),
            Blob::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> Dtype {
        match self {
            Blob::F32(_) => Dtype::F32,
            Blob::F64(_) => Dtype::F64,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Blob::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Blob::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn into_f32(self, path: &Path) -> Result<Vec<f32>> {
        match self {
            Blob::F32(v) => Ok(v),
            Blob::F64(_) => Err(Error::format(path, "expected f32 payload, found f64")),
        }
    }

    pub fn into_f64(self, path: &Path) -> Result<Vec<f64>> {
        match self {
            Blob::F64(v) => Ok(v),
            Blob::F32(_) => Err(Error::format(path, "expected f64 payload, found f32")),
        }
    }
}

/// Ordered `key=value` list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    kind: String,
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(kind: impl Into<String>) -> Self {
        Manifest {
            kind: kind.into(),
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(path, format!("missing manifest key `{key}`")))
    }

    pub fn require_parsed<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.require(key, path)?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("bad value for `{key}`: {raw:?}")))
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in &self.entries {
            if k.is_empty() || k.contains(['=', '\n', '\r']) {
                return Err(Error::Invalid(format!("bad manifest key {k:?}")));
            }
            if v.contains(['\n', '\r']) {
                return Err(Error::Invalid(format!(
                    "manifest value for `{k}` contains a line break"
                )));
            }
        }
        Ok(())
    }

    fn render(&self, dtype: Dtype, floats: usize) -> String {
        let mut out = String::new();
        out.push_str(&format!("version={FORMAT_VERSION}\n"));
        out.push_str(&format!("kind={}\n", self.kind));
        out.push_str(&format!("dtype={}\n", dtype.as_str()));
        out.push_str(&format!("floats={floats}\n"));
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

fn parse_manifest(text: &str, path: &Path) -> Result<(Manifest, Dtype, usize)> {
    let mut lines = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {} has no `=`", n + 1)))?;
        lines.push((k.to_string(), v.to_string()));
    }
    let mut header = lines.iter().take(4);
    let mut expect = |key: &str| -> Result<String> {
        match header.next() {
            Some((k, v)) if k == key => Ok(v.clone()),
            _ => Err(Error::format(path, format!("manifest header missing `{key}`"))),
        }
    };
    let version = expect("version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::format(
            path,
            format!("version mismatch: file has {version}, reader supports {FORMAT_VERSION}"),
        ));
    }
    let kind = expect("kind")?;
    let dtype = match expect("dtype")?.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(Error::format(path, format!("unknown dtype {other:?}"))),
    };
    let floats: usize = expect("floats")?
        .parse()
        .map_err(|_| Error::format(path, "bad float count"))?;
    let manifest = Manifest {
        kind,
        entries: lines.into_iter().skip(4).collect(),
    };
    Ok((manifest, dtype, floats))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest` and `blob` into `dir`, creating it if needed.
pub fn write(dir: &Path, manifest: &Manifest, blob: &Blob) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(DATA_FILE), &blob.to_le_bytes())?;
    write_atomic(
        &dir.join(MANIFEST_FILE),
        manifest.render(blob.dtype(), blob.len()).as_bytes(),
    )
}

/// Reads an envelope, checking version, dtype and payload length.
pub fn read(dir: &Path) -> Result<(Manifest, Blob)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let (manifest, dtype, floats) = parse_manifest(&text, &manifest_path)?;

    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = floats * dtype.width();
    if bytes.len() != expected {
        return Err(Error::format(
            &data_path,
            format!(
                "payload is {} bytes, manifest declares {floats} {} values ({expected} bytes)",
                bytes.len(),
                dtype.as_str()
            ),
        ));
    }
    let blob = match dtype {
        Dtype::F32 => Blob::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => Blob::F64(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok((manifest, blob))
}

/// Reads an envelope and checks its `kind`.
pub fn read_kind(dir: &Path, kind: &str) -> Result<(Manifest, Blob, PathBuf)> {
    let (manifest, blob) = read(dir)?;
    let path = dir.join(MANIFEST_FILE);
    if manifest.kind() != kind {
        return Err(Error::format(
            &path,
            format!("expected a {kind} file, found {}", manifest.kind()),
        ));
    }
    Ok((manifest, blob, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("test");
        m.push("id", "b").push("id", "a").push("tau", 0.01);
        let blob = Blob::F32(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]);
        write(dir.path(), &m, &blob).unwrap();
        let (m2, b2) = read(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.get_all("id"), vec!["b", "a"]);
        let (Blob::F32(a), Blob::F32(b)) = (&blob, &b2) else {
            panic!("dtype changed")
        };
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &Manifest::new("t"), &Blob::F64(vec![1.0, 2.0])).unwrap();
        let data = dir.path().join(DATA_FILE);
        let bytes = fs::read(&data).unwrap();
        fs::write(&data, &bytes[..12]).unwrap();
        assert!(matches!(read(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &Manifest::new("t"), &Blob::F32(vec![])).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("version=1", "version=7");
        fs::write(&path, text).unwrap();
        let err = read(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version mismatch"), "{err}");
    }

    #[test]
    fn newline_in_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("t");
        m.push("id", "a\nb");
        assert!(write(dir.path(), &m, &Blob::F32(vec![])).is_err());
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }
}
