//! GCK1 checkpoint container: a JSON metadata header followed by named,
//! group-tagged f32 parameter tensors. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::model::{GuidedModel, ModelConfig, ParamGroup};
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::{Error, Result};

const GCK1_MAGIC: &[u8; 4] = b"GCK1";
const GCK1_VERSION: u32 = 1;

/// Everything needed to rebuild and evaluate the model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub artifact_version: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: u32,
    pub val_dsc: f64,
}

#[derive(Debug, Clone)]
pub struct CheckpointGroup {
    pub group: ParamGroup,
    pub frozen: bool,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// In-memory checkpoint: metadata plus parameter groups.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: Vec<CheckpointGroup>,
}

impl Checkpoint {
    pub fn from_model(model: &GuidedModel<f32>, meta: CheckpointMeta) -> Self {
        let groups = model
            .all_groups()
            .into_iter()
            .map(|(group, frozen, tensors)| CheckpointGroup { group, frozen, tensors })
            .collect();
        Checkpoint { meta, groups }
    }

    fn group(&self, g: ParamGroup) -> Option<&CheckpointGroup> {
        self.groups.iter().find(|cg| cg.group == g)
    }

    /// Drop the LoRA group (and config), leaving the frozen-encoder model.
    pub fn strip_lora(&self) -> Checkpoint {
        let mut out = self.clone();
        out.groups.retain(|g| g.group != ParamGroup::Lora);
        out.meta.model.lora = None;
        if out.meta.model.mode == crate::model::TrainMode::GuidedLora {
            out.meta.model.mode = crate::model::TrainMode::GuidedFrozen;
        }
        out
    }

    /// Rebuild the model and load every stored tensor, re-verifying shapes
    /// against the configuration.
    pub fn build_model(&self) -> Result<GuidedModel<f32>> {
        let mut model = GuidedModel::<f32>::init(&self.meta.model, self.meta.seed)?;
        let expected: Vec<ParamGroup> =
            model.all_groups().into_iter().map(|(g, _, _)| g).collect();
        for g in &expected {
            if self.group(*g).is_none() {
                return Err(Error::format(0, format!("checkpoint missing group '{}'", g.tag())));
            }
        }

        let load_into = |group: ParamGroup,
                             tensors: Vec<(String, &mut Tensor<f32>)>|
         -> Result<()> {
            let stored = self.group(group).expect("presence checked above");
            for (name, dst) in tensors {
                let src = stored
                    .tensors
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| {
                        Error::format(0, format!("group '{}' lacks tensor '{name}'", group.tag()))
                    })?;
                if src.1.shape() != dst.shape() {
                    return Err(Error::format(
                        0,
                        format!(
                            "tensor '{}/{}' has shape {:?}, config expects {:?}",
                            group.tag(),
                            name,
                            src.1.shape(),
                            dst.shape()
                        ),
                    ));
                }
                dst.data_mut().copy_from_slice(src.1.data());
            }
            Ok(())
        };

        if let Some(enc) = model.encoder.as_mut() {
            load_into(ParamGroup::Encoder, enc.named_tensors_mut())?;
        }
        if let Some(lora) = model.lora.as_mut() {
            load_into(ParamGroup::Lora, lora.named_tensors_mut())?;
        }
        if let Some(book) = model.book.as_mut() {
            load_into(ParamGroup::TokenBook, book.named_tensors_mut())?;
        }
        load_into(ParamGroup::SegNet, model.segnet.named_tensors_mut())?;
        load_into(ParamGroup::Gates, model.gates.named_tensors_mut())?;
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(GCK1_MAGIC)?;
    out.write_all(&GCK1_VERSION.to_le_bytes())?;
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(&meta)?;
    out.write_all(&(ckpt.groups.len() as u32).to_le_bytes())?;
    for group in &ckpt.groups {
        let tag = group.group.tag().as_bytes();
        out.write_all(&(tag.len() as u32).to_le_bytes())?;
        out.write_all(tag)?;
        out.write_all(&[u8::from(group.frozen)])?;
        out.write_all(&(group.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &group.tensors {
            let nb = name.as_bytes();
            out.write_all(&(nb.len() as u32).to_le_bytes())?;
            out.write_all(nb)?;
            out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    load_checkpoint_bytes(&bytes)
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[0..4] != GCK1_MAGIC {
        return Err(Error::format(0, "bad GCK1 magic"));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("version")?;
    if version != GCK1_VERSION {
        return Err(Error::format(4, format!("unsupported GCK1 version {version}")));
    }
    let meta_len = cur.u32("meta length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::format(12, format!("metadata json: {e}")))?;
    let n_groups = cur.u32("group count")? as usize;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let tag_len = cur.u32("group tag length")? as usize;
        let tag_pos = cur.pos;
        let tag = std::str::from_utf8(cur.take(tag_len, "group tag")?)
            .map_err(|_| Error::format(tag_pos as u64, "group tag not utf-8"))?;
        let group = ParamGroup::from_tag(tag)
            .ok_or_else(|| Error::format(tag_pos as u64, format!("unknown group tag '{tag}'")))?;
        let frozen = cur.take(1, "frozen flag")?[0] != 0;
        let n_tensors = cur.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = cur.u32("tensor name length")? as usize;
            let name_pos = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
                .map_err(|_| Error::format(name_pos as u64, "tensor name not utf-8"))?
                .to_string();
            let ndim = cur.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        groups.push(CheckpointGroup { group, frozen, tensors });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after checkpoint payload"));
    }
    Ok(Checkpoint { meta, groups })
}
