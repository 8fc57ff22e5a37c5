//! CXHG checkpoints: named f32 tensors plus a step counter.
//!
//! Layout (little-endian): magic "CXHG", version u32 = 1, step u64, tensor
//! count u32, then per tensor a u16 name length, the UTF-8 name, a u8 rank,
//! u32 dims and f32 data. Parameters use their own names; batch-norm state
//! is stored as `<layer>.running_mean` / `<layer>.running_var`; optimizer
//! moments as `adam.m.<param>` / `adam.v.<param>` with the optimizer step
//! count in `adam.step`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use super::optim::Adam;
use crate::binio::{put_u32, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::hourglass::Model;
use crate::params::ParamGroup;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CXHG";
const VERSION: u32 = 1;
const ADAM_STEP: &str = "adam.step";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Captures a model and optionally its optimizer. Encoding-group
    /// parameters (and their moments) are left out unless
    /// `include_encoding` is set.
    pub fn capture(model: &Model<f32>, adam: Option<&Adam<f32>>, step: u64, include_encoding: bool) -> Self {
        let mut tensors = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| {
            tensors.push(NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.values().to_vec(),
            })
        };
        let keep = |group: ParamGroup| include_encoding || group == ParamGroup::Backbone;
        for (_, p) in model.params.iter().filter(|(_, p)| keep(p.group)) {
            push(p.name.clone(), &p.tensor);
        }
        for n in &model.norms {
            push(format!("{}.running_mean", n.name), &n.running_mean);
            push(format!("{}.running_var", n.name), &n.running_var);
        }
        if let Some(adam) = adam {
            for (id, p) in model.params.iter().filter(|(_, p)| keep(p.group)) {
                push(format!("adam.m.{}", p.name), &adam.m[id.0]);
                push(format!("adam.v.{}", p.name), &adam.v[id.0]);
            }
            push(ADAM_STEP.into(), &Tensor::scalar(adam.step as f32));
        }
        Self { step, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            t.shape.iter().for_each(|&d| put_u32(&mut out, d as u32));
            t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.header(MAGIC, VERSION)?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            detail,
        };
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let data = r.f32s(n.ok_or_else(|| Error::Truncated(path.to_path_buf()))?)?;
            if !seen.insert(name.clone()) {
                return Err(malformed(format!("duplicate tensor `{name}`")));
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        r.finish()?;
        Ok(Self { step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Copies stored tensors into `model` (and `adam`, when given and the
    /// checkpoint carries optimizer state). Missing encoding-group tensors
    /// keep their current values; any other missing tensor, a shape
    /// mismatch, or an unknown name is an error and leaves `model`
    /// untouched.
    pub fn restore(&self, model: &mut Model<f32>, mut adam: Option<&mut Adam<f32>>) -> Result<()> {
        let stored: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut staged = model.clone();
        let mut used = HashSet::new();
        let mut take = |name: &str, target: &mut Tensor<f32>, optional: bool| -> Result<bool> {
            match stored.get(name) {
                Some(t) => {
                    if t.shape != target.shape() {
                        return Err(Error::CheckpointShape {
                            name: name.to_string(),
                            expected: target.shape().to_vec(),
                            found: t.shape.clone(),
                        });
                    }
                    target.values_mut().copy_from_slice(&t.data);
                    used.insert(name.to_string());
                    Ok(true)
                }
                None if optional => Ok(false),
                None => Err(Error::MissingTensor(name.to_string())),
            }
        };
        for (_, p) in staged.params.iter_mut() {
            let optional = p.group == ParamGroup::Encoding;
            take(&p.name, &mut p.tensor, optional)?;
        }
        for n in staged.norms.iter_mut() {
            take(&format!("{}.running_mean", n.name), &mut n.running_mean, false)?;
            take(&format!("{}.running_var", n.name), &mut n.running_var, false)?;
            n.initialized = true;
        }
        let has_adam = stored.contains_key(ADAM_STEP);
        let mut staged_adam = adam.as_deref().cloned();
        if let (Some(a), true) = (staged_adam.as_mut(), has_adam) {
            for (id, p) in staged.params.iter() {
                let optional = p.group == ParamGroup::Encoding;
                let found_m = take(&format!("adam.m.{}", p.name), &mut a.m[id.0], optional)?;
                let found_v = take(&format!("adam.v.{}", p.name), &mut a.v[id.0], optional)?;
                if !found_m {
                    a.m[id.0].values_mut().fill(0.0);
                }
                if !found_v {
                    a.v[id.0].values_mut().fill(0.0);
                }
            }
            let mut step = Tensor::scalar(0f32);
            take(ADAM_STEP, &mut step, false)?;
            a.step = step.item() as u64;
        }
        for t in &self.tensors {
            let optimizer_state = t.name.starts_with("adam.");
            if !used.contains(&t.name) && !(optimizer_state && staged_adam.is_none()) {
                return Err(Error::UnknownTensor(t.name.clone()));
            }
        }
        *model = staged;
        if let (Some(dst), Some(src)) = (adam.as_deref_mut(), staged_adam) {
            *dst = src;
        }
        Ok(())
    }
}
