//! Binary parameter store with a plain-text sidecar manifest.
//!
//! Binary layout (little endian): magic `RSNETCK1`, `u32` tensor count, then
//! per tensor: `u32` name length, UTF-8 name, `u32` rank, `u32` dims, `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{ArchConfig, RsNet, Scope};
use crate::error::{Error, Result};
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"RSNETCK1";

/// `<checkpoint>.manifest`
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

fn manifest_text<T: Real>(model: &RsNet<T>) -> String {
    let c = model.config();
    let mut s = String::new();
    s.push_str(&format!("input_size = {}\n", c.input_size));
    s.push_str(&format!("input_channels = {}\n", c.input_channels));
    let depths: Vec<String> = c.block_depths.iter().map(|d| d.to_string()).collect();
    s.push_str(&format!("block_depths = {}\n", depths.join(",")));
    s.push_str(&format!("num_classes = {}\n", c.num_classes));
    s.push_str(&format!("with_aux = {}\n", c.with_aux));
    for scope in Scope::ALL {
        s.push_str(&format!("params.{} = {}\n", scope.name(), model.count_parameters(scope)));
    }
    s
}

fn parse_manifest(path: &Path, text: &str) -> Result<ArchConfig> {
    let bad = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
    let mut config = ArchConfig::default();
    let mut seen = 0;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
        match key {
            "input_size" => config.input_size = num(value)?,
            "input_channels" => config.input_channels = num(value)?,
            "num_classes" => config.num_classes = num(value)?,
            "with_aux" => {
                config.with_aux = value.parse().map_err(|e| bad(format!("{key}: {e}")))?
            }
            "block_depths" => {
                config.block_depths = value
                    .split(',')
                    .map(|v| num(v.trim()))
                    .collect::<Result<_>>()?
            }
            _ => continue,
        }
        seen += 1;
    }
    if seen < 5 {
        return Err(bad("manifest is missing architecture keys".into()));
    }
    Ok(config)
}

/// Writes the parameter store to `path` and the manifest next to it.
pub fn save_checkpoint<T: Real>(model: &RsNet<T>, path: &Path) -> Result<()> {
    let params = model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in &params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.value {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest_text(model)).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated parameter store".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Rebuilds a model from `path` and its manifest.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<RsNet<T>> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let config = parse_manifest(&mpath, &text)?;
    let mut model = RsNet::<T>::new(config)?;

    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: store has {count} tensors, architecture needs {}",
            path.display(),
            params.len()
        )));
    }
    for (_, p) in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?
            .to_string();
        if name != p.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", p.name)));
        }
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if shape != p.shape {
            return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
        }
        for v in p.value.iter_mut() {
            let raw = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            *v = T::from_f64_lossy(raw as f64);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in parameter store".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::trainer::initialize_weights;

    #[test]
    fn roundtrip_preserves_parameters_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut net = RsNet::<f32>::new(tiny_config()).unwrap();
        initialize_weights(&mut net, 7);
        save_checkpoint(&net, &path).unwrap();
        let loaded: RsNet<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), net.config());
        for ((_, a), (_, b)) in net.params().into_iter().zip(loaded.params()) {
            assert_eq!(a.value, b.value);
        }
        let manifest = fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains(&format!(
            "params.inference = {}",
            net.count_parameters(Scope::Inference)
        )));
    }

    #[test]
    fn corrupted_store_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = RsNet::<f32>::new(tiny_config()).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
    }
}
