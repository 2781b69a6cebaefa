//! The `AMCL-CKPT v1` checkpoint container.
//!
//! Layout: a magic line, a little-endian u32 header length, a JSON header
//! describing the payload, then the raw tensor data as little-endian f64 in
//! header order. Loaders validate every tensor shape against the
//! architecture they are restoring into before accepting any data.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{AmclError, Result};

const MAGIC: &[u8] = b"AMCL-CKPT v1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// A checkpoint in memory: a kind tag, free-form metadata and named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| AmclError::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| AmclError::Checkpoint(format!("missing metadata field {key:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorInfo {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| AmclError::Checkpoint(e.to_string()))?;

        let mut buf = Vec::with_capacity(MAGIC.len() + 4 + header_bytes.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for (_, t) in &self.tensors {
            let data = t.as_slice().expect("checkpoint tensors are contiguous");
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| AmclError::io(parent, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| AmclError::io(path, e))?;
        file.write_all(&buf).map_err(|e| AmclError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| AmclError::io(path, e))?;
        let corrupt = |reason: &str| AmclError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic; expected AMCL-CKPT v1"));
        }
        let mut off = MAGIC.len();
        let hlen = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if bytes.len() < off + hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[off..off + hlen])
            .map_err(|e| corrupt(&format!("header json: {e}")))?;
        off += hlen;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let len: usize = info.shape.iter().product();
            let nbytes = len * 8;
            if bytes.len() < off + nbytes {
                return Err(corrupt(&format!("truncated tensor {:?}", info.name)));
            }
            let mut data = Vec::with_capacity(len);
            for chunk in bytes[off..off + nbytes].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            off += nbytes;
            let arr = ArrayD::from_shape_vec(IxDyn(&info.shape), data)
                .map_err(|e| corrupt(&format!("tensor {:?}: {e}", info.name)))?;
            tensors.push((info.name.clone(), arr));
        }
        if off != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }
}

/// Snapshot a network (parameters plus buffers) into a checkpoint.
pub fn checkpoint_net<N: super::Net + ?Sized>(
    kind: &str,
    meta: serde_json::Value,
    net: &mut N,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(kind, meta);
    net.visit_params(&mut |p| ckpt.push(p.name.clone(), p.value.clone()));
    net.visit_buffers(&mut |name, buf| ckpt.push(name, buf.clone()));
    ckpt
}

/// Restore a network from a checkpoint, validating names and shapes.
///
/// Every parameter and buffer of `net` must be present with an identical
/// shape; extra tensors in the checkpoint are rejected.
pub fn restore_net<N: super::Net + ?Sized>(ckpt: &Checkpoint, net: &mut N) -> Result<()> {
    let mut used = vec![false; ckpt.tensors.len()];
    let mut problem: Option<String> = None;
    {
        let mut apply = |name: &str, target: &mut ArrayD<f64>| {
            if problem.is_some() {
                return;
            }
            match ckpt.tensors.iter().position(|(n, _)| n == name) {
                Some(i) => {
                    let src = &ckpt.tensors[i].1;
                    if src.shape() != target.shape() {
                        problem = Some(format!(
                            "tensor {name:?} has shape {:?}, expected {:?}",
                            src.shape(),
                            target.shape()
                        ));
                        return;
                    }
                    target.assign(src);
                    used[i] = true;
                }
                None => problem = Some(format!("missing tensor {name:?}")),
            }
        };
        net.visit_params(&mut |p| {
            let name = p.name.clone();
            apply(&name, &mut p.value);
        });
        net.visit_buffers(&mut |name, buf| {
            let name = name.to_string();
            apply(&name, buf);
        });
    }
    if let Some(msg) = problem {
        return Err(AmclError::Checkpoint(msg));
    }
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(AmclError::Checkpoint(format!(
            "unexpected tensor {:?} for this architecture",
            ckpt.tensors[i].0
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Net, Param, WeightInit};
    use crate::rng::stream;

    struct Tiny {
        a: Param,
        buf: ArrayD<f64>,
    }

    impl Net for Tiny {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.a);
        }
        fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
            f("tiny.buf", &mut self.buf);
        }
    }

    fn tiny(seed: u64) -> Tiny {
        let mut rng = stream(seed, "ckpt-test");
        Tiny {
            a: Param::new("tiny.a", WeightInit::Normal(1.0).sample(&[2, 3], 6, 6, &mut rng)),
            buf: WeightInit::Normal(1.0).sample(&[3], 3, 3, &mut rng),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut net = tiny(1);
        let ckpt = checkpoint_net("tiny", serde_json::json!({"architecture_id": "tiny"}), &mut net);
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let mut other = tiny(2);
        restore_net(&loaded, &mut other).unwrap();
        assert_eq!(net.a.value, other.a.value);
        assert_eq!(net.buf, other.buf);
        assert_eq!(loaded.meta_str("architecture_id").unwrap(), "tiny");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut net = tiny(1);
        let mut ckpt = checkpoint_net("tiny", serde_json::Value::Null, &mut net);
        ckpt.tensors[0].1 = ArrayD::zeros(IxDyn(&[4, 4]));
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let err = restore_net(&loaded, &mut tiny(2)).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
