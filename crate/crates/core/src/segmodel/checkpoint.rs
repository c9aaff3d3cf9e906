//! Single-file checkpoints: named little-endian f64 arrays plus string metadata,
//! stored in the safetensors layout (u64 LE header length, JSON header with
//! dtype/shape/offsets per array and a `__metadata__` map, raw payload).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;

use super::nn::{device, DTYPE};
use crate::{Error, Result};

pub const FORMAT_KEY: &str = "format";
pub const FORMAT_VALUE: &str = "sseg-checkpoint-v1";
pub const KIND_KEY: &str = "kind";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FORMAT_KEY.to_string(), FORMAT_VALUE.to_string());
        metadata.insert(KIND_KEY.to_string(), kind.to_string());
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        self.metadata.get(KIND_KEY).map(String::as_str).unwrap_or("")
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.tensors
            .insert(name.into(), t.to_dtype(DTYPE)?.contiguous()?.copy()?);
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(self.tensors.iter(), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        if metadata.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT_VALUE) {
            return Err(Error::Checkpoint(format!(
                "not a {FORMAT_VALUE} file (metadata `{FORMAT_KEY}` missing or different)"
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &device())?
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DTYPE)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { metadata, tensors })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failed write never leaves a truncated checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
