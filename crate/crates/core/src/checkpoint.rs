//! Single-file checkpoints for auxiliary and task networks.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DAMTLCKP" | u32 format version | u32 header length | header JSON
//! u32 record count | records...
//! record: u32 name length | name | u8 dtype (1 = f64) | u32 ndim | u64 dims... | f64 data...
//! ```
//!
//! The header carries the architecture descriptor plus the model kind, and for
//! task networks the task id and label map.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Architecture, AuxModel, Layer, TaskNetwork};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DAMTLCKP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("bad header: {0}")]
    Header(String),
    #[error("unsupported dtype tag {0}")]
    Dtype(u8),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("expected a {expected} checkpoint, found {found}")]
    Kind { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Header {
    Aux {
        architecture: Architecture,
        num_classes: usize,
    },
    Task {
        architecture: Architecture,
        task_id: usize,
        label_map: Vec<usize>,
    },
}

impl Header {
    fn kind(&self) -> &'static str {
        match self {
            Header::Aux { .. } => "aux",
            Header::Task { .. } => "task",
        }
    }
}

pub fn encode(header: &Header, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Header, BTreeMap<String, Tensor>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let count = c.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::Dtype(dtype));
        }
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape.clone(), data).map_err(|_| CheckpointError::Shape {
            name: name.clone(),
            found: shape,
            expected: vec![],
        })?;
        tensors.insert(name, t);
    }
    Ok((header, tensors))
}

fn take_tensor(
    tensors: &mut BTreeMap<String, Tensor>,
    name: &str,
    expected: &[usize],
) -> Result<Tensor> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| CheckpointError::Missing(name.into()))?;
    if t.shape() != expected {
        return Err(CheckpointError::Shape {
            name: name.into(),
            found: t.shape().to_vec(),
            expected: expected.to_vec(),
        });
    }
    Ok(t)
}

fn layers_from(
    tensors: &mut BTreeMap<String, Tensor>,
    arch: &Architecture,
    head_out: usize,
    with_masks: bool,
) -> Result<(Vec<Layer>, Vec<Tensor>, Vec<Layer>, Layer)> {
    let bad = |e: crate::network::NetworkError| CheckpointError::Header(e.to_string());
    let mut convs = Vec::new();
    let mut masks = Vec::new();
    for (l, s) in arch.kernel_shapes().iter().enumerate() {
        convs.push(Layer {
            weight: take_tensor(tensors, &format!("conv{l}.weight"), s)?,
            bias: take_tensor(tensors, &format!("conv{l}.bias"), &[s[0]])?,
        });
        if with_masks {
            masks.push(take_tensor(tensors, &format!("conv{l}.mask"), s)?);
        }
    }
    let mut fcs = Vec::new();
    for (h, &(i, o)) in arch.fc_shapes().map_err(bad)?.iter().enumerate() {
        fcs.push(Layer {
            weight: take_tensor(tensors, &format!("fc{h}.weight"), &[i, o])?,
            bias: take_tensor(tensors, &format!("fc{h}.bias"), &[o])?,
        });
    }
    let head_in = arch.head_in().map_err(bad)?;
    let head = Layer {
        weight: take_tensor(tensors, "head.weight", &[head_in, head_out])?,
        bias: take_tensor(tensors, "head.bias", &[head_out])?,
    };
    Ok((convs, masks, fcs, head))
}

pub fn encode_aux(aux: &AuxModel) -> Vec<u8> {
    let header = Header::Aux {
        architecture: aux.arch.clone(),
        num_classes: aux.num_classes(),
    };
    encode(&header, &aux.named_tensors())
}

pub fn decode_aux(bytes: &[u8]) -> Result<AuxModel> {
    let (header, mut tensors) = decode(bytes)?;
    let Header::Aux {
        architecture,
        num_classes,
    } = header
    else {
        return Err(CheckpointError::Kind {
            expected: "aux".into(),
            found: header.kind().into(),
        });
    };
    let (convs, _, fcs, head) = layers_from(&mut tensors, &architecture, num_classes, false)?;
    Ok(AuxModel {
        arch: architecture,
        convs,
        fcs,
        head,
    })
}

pub fn encode_task(net: &TaskNetwork) -> Vec<u8> {
    let header = Header::Task {
        architecture: net.arch.clone(),
        task_id: net.task_id,
        label_map: net.label_map.clone(),
    };
    encode(&header, &net.named_tensors())
}

pub fn decode_task(bytes: &[u8]) -> Result<TaskNetwork> {
    let (header, mut tensors) = decode(bytes)?;
    let Header::Task {
        architecture,
        task_id,
        label_map,
    } = header
    else {
        return Err(CheckpointError::Kind {
            expected: "task".into(),
            found: header.kind().into(),
        });
    };
    let (convs, masks, fcs, head) =
        layers_from(&mut tensors, &architecture, label_map.len(), true)?;
    Ok(TaskNetwork {
        task_id,
        arch: architecture,
        label_map,
        convs,
        masks,
        fcs,
        head,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_aux(path: &Path) -> Result<AuxModel> {
    decode_aux(&read(path)?)
}

pub fn load_task(path: &Path) -> Result<TaskNetwork> {
    decode_task(&read(path)?)
}
