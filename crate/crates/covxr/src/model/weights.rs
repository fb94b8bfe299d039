//! Self-describing binary container for parameter tensors, used both for
//! classifier checkpoints and for pretrained-backbone weight archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8  b"COVXRTNS"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen     JSON: kind, spec, backbone structure
//! count   u32      number of tensors
//! per tensor: name_len u32, name, ndim u32, dims (u64 each), data (f64 each)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Classifier, Head, ModelError, ModelSpec};
use crate::nn::backbone::ConvStack;
use crate::nn::layers::{BatchNorm1d, Conv2d, Dense, Dropout};

const MAGIC: &[u8; 8] = b"COVXRTNS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ConvDesc {
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct BackboneDesc {
    pub id: String,
    pub convs: Vec<ConvDesc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ContainerHeader {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    pub backbone: BackboneDesc,
}

#[derive(Debug, Clone)]
pub(crate) struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn ser_err(path: &Path, reason: impl ToString) -> ModelError {
    ModelError::SerializationFailure {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub(crate) fn write_container(
    path: &Path,
    header: &ContainerHeader,
    tensors: &[NamedTensor],
) -> Result<(), ModelError> {
    let file = File::create(path).map_err(|e| ser_err(path, e))?;
    let mut w = BufWriter::new(file);
    let header_json = serde_json::to_vec(header).map_err(|e| ser_err(path, e))?;
    w.write_all(MAGIC).map_err(|e| ser_err(path, e))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(|e| ser_err(path, e))?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| ser_err(path, e))?;
    w.write_all(&header_json).map_err(|e| ser_err(path, e))?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(|e| ser_err(path, e))?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(|e| ser_err(path, e))?;
        w.write_all(name).map_err(|e| ser_err(path, e))?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())
            .map_err(|e| ser_err(path, e))?;
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(ser_err(path, format!("tensor {} dims/data mismatch", t.name)));
        }
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes()).map_err(|e| ser_err(path, e))?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| ser_err(path, e))?;
        }
    }
    w.flush().map_err(|e| ser_err(path, e))
}

pub(crate) fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<NamedTensor>), ModelError> {
    let file = File::open(path).map_err(|e| ser_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| ser_err(path, e))?;
    if &magic != MAGIC {
        return Err(ser_err(path, "bad magic (not a covxr weights file)"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(|e| ser_err(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(ser_err(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut u64buf).map_err(|e| ser_err(path, e))?;
    let hlen = u64::from_le_bytes(u64buf) as usize;
    let mut header_json = vec![0u8; hlen];
    r.read_exact(&mut header_json).map_err(|e| ser_err(path, e))?;
    let header: ContainerHeader =
        serde_json::from_slice(&header_json).map_err(|e| ser_err(path, e))?;

    r.read_exact(&mut u32buf).map_err(|e| ser_err(path, e))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(|e| ser_err(path, e))?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| ser_err(path, e))?;
        let name = String::from_utf8(name).map_err(|e| ser_err(path, e))?;
        r.read_exact(&mut u32buf).map_err(|e| ser_err(path, e))?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u64buf).map_err(|e| ser_err(path, e))?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u64buf).map_err(|e| ser_err(path, e))?;
            data.push(f64::from_le_bytes(u64buf));
        }
        tensors.push(NamedTensor { name, dims, data });
    }
    // trailing garbage means the file is not what we wrote
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(ser_err(path, "trailing bytes after tensor table")),
        Err(e) => return Err(ser_err(path, e)),
    }
    Ok((header, tensors))
}

fn backbone_desc(bb: &ConvStack) -> BackboneDesc {
    BackboneDesc {
        id: bb.id().to_string(),
        convs: bb
            .convs()
            .iter()
            .map(|c| ConvDesc {
                c_out: c.out_channels(),
                c_in: c.in_channels(),
                kernel: c.kernel(),
                stride: c.stride,
                padding: c.padding,
            })
            .collect(),
    }
}

fn backbone_tensors(bb: &ConvStack, prefix: &str) -> Vec<NamedTensor> {
    let mut tensors = Vec::new();
    for (i, conv) in bb.convs().iter().enumerate() {
        let (co, ci, kh, kw) = conv.w.dim();
        tensors.push(NamedTensor {
            name: format!("{prefix}conv{i}.w"),
            dims: vec![co, ci, kh, kw],
            data: conv.w.iter().copied().collect(),
        });
        tensors.push(NamedTensor {
            name: format!("{prefix}conv{i}.b"),
            dims: vec![conv.b.len()],
            data: conv.b.to_vec(),
        });
    }
    tensors
}

fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor, ModelError> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| ModelError::IncompatibleSpec(format!("missing tensor {name:?}")))
}

fn tensor1(t: &NamedTensor, expected: usize) -> Result<Array1<f64>, ModelError> {
    if t.dims != [expected] {
        return Err(ModelError::IncompatibleSpec(format!(
            "tensor {} has dims {:?}, expected [{expected}]",
            t.name, t.dims
        )));
    }
    Ok(Array1::from_vec(t.data.clone()))
}

fn tensor2(t: &NamedTensor, rows: usize, cols: usize) -> Result<Array2<f64>, ModelError> {
    if t.dims != [rows, cols] {
        return Err(ModelError::IncompatibleSpec(format!(
            "tensor {} has dims {:?}, expected [{rows}, {cols}]",
            t.name, t.dims
        )));
    }
    Array2::from_shape_vec((rows, cols), t.data.clone())
        .map_err(|e| ModelError::IncompatibleSpec(e.to_string()))
}

fn rebuild_backbone(
    desc: &BackboneDesc,
    tensors: &[NamedTensor],
    prefix: &str,
) -> Result<ConvStack, ModelError> {
    let mut convs = Vec::with_capacity(desc.convs.len());
    for (i, cd) in desc.convs.iter().enumerate() {
        let wt = find(tensors, &format!("{prefix}conv{i}.w"))?;
        let want = [cd.c_out, cd.c_in, cd.kernel, cd.kernel];
        if wt.dims != want {
            return Err(ModelError::IncompatibleSpec(format!(
                "tensor {} has dims {:?}, expected {:?}",
                wt.name, wt.dims, want
            )));
        }
        let w = Array4::from_shape_vec((cd.c_out, cd.c_in, cd.kernel, cd.kernel), wt.data.clone())
            .map_err(|e| ModelError::IncompatibleSpec(e.to_string()))?;
        let b = tensor1(find(tensors, &format!("{prefix}conv{i}.b"))?, cd.c_out)?;
        convs.push(Conv2d::with_weights(w, b, cd.stride, cd.padding));
    }
    Ok(ConvStack::from_convs(desc.id.clone(), convs))
}

/// Write a standalone backbone weights archive.
pub fn save_backbone_archive(clf_backbone_id: &str, bb: &ConvStack, path: &Path) -> Result<(), ModelError> {
    let mut desc = backbone_desc(bb);
    desc.id = clf_backbone_id.to_string();
    let header = ContainerHeader {
        kind: "backbone".into(),
        spec: None,
        backbone: desc,
    };
    write_container(path, &header, &backbone_tensors(bb, ""))
}

/// Load a backbone weights archive, tagging it with the requested id.
pub(crate) fn load_backbone_archive(path: &Path, backbone_id: &str) -> Result<ConvStack, ModelError> {
    let (header, tensors) = read_container(path).map_err(|e| ModelError::WeightLoadFailure {
        reason: e.to_string(),
    })?;
    if header.kind != "backbone" {
        return Err(ModelError::WeightLoadFailure {
            reason: format!("{} is a {:?} file, not a backbone archive", path.display(), header.kind),
        });
    }
    let mut desc = header.backbone;
    desc.id = backbone_id.to_string();
    rebuild_backbone(&desc, &tensors, "").map_err(|e| ModelError::WeightLoadFailure {
        reason: e.to_string(),
    })
}

pub(crate) fn save_checkpoint(clf: &Classifier, path: &Path) -> Result<(), ModelError> {
    let header = ContainerHeader {
        kind: "checkpoint".into(),
        spec: Some(clf.spec().clone()),
        backbone: backbone_desc(clf.backbone()),
    };
    let mut tensors = backbone_tensors(clf.backbone(), "backbone.");
    let head = clf.head();
    let (f, h) = head.dense1.w.dim();
    tensors.push(NamedTensor {
        name: "head.dense1.w".into(),
        dims: vec![f, h],
        data: head.dense1.w.iter().copied().collect(),
    });
    tensors.push(NamedTensor {
        name: "head.dense1.b".into(),
        dims: vec![h],
        data: head.dense1.b.to_vec(),
    });
    for (name, arr) in [
        ("head.bn.gamma", &head.bn.gamma),
        ("head.bn.beta", &head.bn.beta),
        ("head.bn.running_mean", &head.bn.running_mean),
        ("head.bn.running_var", &head.bn.running_var),
    ] {
        tensors.push(NamedTensor {
            name: name.into(),
            dims: vec![arr.len()],
            data: arr.to_vec(),
        });
    }
    tensors.push(NamedTensor {
        name: "head.dense2.w".into(),
        dims: vec![h, 1],
        data: head.dense2.w.iter().copied().collect(),
    });
    tensors.push(NamedTensor {
        name: "head.dense2.b".into(),
        dims: vec![1],
        data: head.dense2.b.to_vec(),
    });
    write_container(path, &header, &tensors)
}

pub(crate) fn load_checkpoint(path: &Path) -> Result<Classifier, ModelError> {
    let (header, tensors) = read_container(path)?;
    if header.kind != "checkpoint" {
        return Err(ser_err(path, format!("{:?} file is not a checkpoint", header.kind)));
    }
    let spec = header
        .spec
        .ok_or_else(|| ser_err(path, "checkpoint header missing model spec"))?;
    spec.validate()?;
    let backbone = rebuild_backbone(&header.backbone, &tensors, "backbone.")?;
    let feature_width = backbone.feature_channels(3);
    let hw = spec.head_width;

    let dense1 = Dense::with_weights(
        tensor2(find(&tensors, "head.dense1.w")?, feature_width, hw)?,
        tensor1(find(&tensors, "head.dense1.b")?, hw)?,
    );
    let mut bn = BatchNorm1d::new(hw);
    bn.gamma = tensor1(find(&tensors, "head.bn.gamma")?, hw)?;
    bn.beta = tensor1(find(&tensors, "head.bn.beta")?, hw)?;
    bn.running_mean = tensor1(find(&tensors, "head.bn.running_mean")?, hw)?;
    bn.running_var = tensor1(find(&tensors, "head.bn.running_var")?, hw)?;
    let dense2 = Dense::with_weights(
        tensor2(find(&tensors, "head.dense2.w")?, hw, 1)?,
        tensor1(find(&tensors, "head.dense2.b")?, 1)?,
    );
    let head = Head {
        dense1,
        bn,
        dropout: Dropout::new(spec.dropout_rate),
        dense2,
    };
    Ok(Classifier::from_parts(spec, backbone, head))
}

/// Hex SHA-256 of a file's bytes (used to fingerprint checkpoints).
pub fn file_sha256(path: &Path) -> Result<String, std::io::Error> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
