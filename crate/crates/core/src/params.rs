//! Named parameter collections with gradient and momentum buffers.
//!
//! Entries keep a stable order (insertion order from model construction) so
//! indices recorded on the tape stay valid. Non-trainable entries carry
//! state such as batch-norm running statistics; they ride along through
//! serialization and federated averaging but are ignored by SGD.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

const MAGIC: &[u8; 4] = b"SKWP";
const VERSION: u32 = 1;

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a tensor under `name`; names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::state(format!("duplicate parameter name {name:?}")));
        }
        let shape = value.shape().to_vec();
        let index = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
            trainable,
        });
        self.by_name.insert(name.to_string(), index);
        Ok(index)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let idx = *self.by_name.get(name)?;
        Some(&mut self.entries[idx])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].value
    }

    pub(crate) fn accumulate_grad(&mut self, index: usize, grad: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(index)
            .ok_or_else(|| Error::state(format!("gradient for unknown parameter {index}")))?;
        if entry.grad.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} vs parameter {:?} for {:?}",
                grad.shape(),
                entry.grad.shape(),
                entry.name
            )));
        }
        entry.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// SGD with classical momentum: v <- momentum*v + grad; value -= lr*v.
    /// Non-trainable entries are untouched.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::domain(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::domain(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        for e in &mut self.entries {
            if !e.trainable {
                continue;
            }
            let g = e.grad.data();
            let v = e.velocity.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = momentum * *vi + gi;
            }
            let val = e.value.data_mut();
            for (x, &vi) in val.iter_mut().zip(e.velocity.data()) {
                *x -= lr * vi;
            }
        }
        Ok(())
    }

    /// Total number of scalar values across all entries.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_same_structure(other)?;
        let mut worst = 0.0f64;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            worst = worst.max(a.value.max_abs_diff(&b.value));
        }
        Ok(worst)
    }

    fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape(format!(
                "parameter sets differ: {} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::shape(format!(
                    "parameter mismatch: {:?} {:?} vs {:?} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.trainable as u8])?;
            w.write_all(&(e.value.shape().len() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let mut r = Reader::new(std::io::BufReader::new(std::fs::File::open(path)?));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let n_entries = r.read_u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..n_entries {
            let name_len = r.read_u32()? as usize;
            let name_off = r.offset();
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::format(name_off, "parameter name is not UTF-8".to_string()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let trainable = flag[0] != 0;
            let rank = r.read_u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.read_f64()?);
            }
            set.register(&name, Tensor::from_vec(&shape, data)?, trainable)?;
        }
        Ok(set)
    }
}

/// Element-wise unweighted mean of structurally identical parameter sets.
/// Per-element terms are sorted before summation, so the result does not
/// depend on the order of `sets`. Gradient and momentum buffers of the
/// result are zero.
pub fn average_params(sets: &[&ParamSet]) -> Result<ParamSet> {
    let first = *sets
        .first()
        .ok_or_else(|| Error::domain("cannot average zero parameter sets"))?;
    for other in &sets[1..] {
        first.check_same_structure(other)?;
    }
    let mut out = ParamSet::new();
    let mut terms = vec![0.0f64; sets.len()];
    for (ei, entry) in first.entries.iter().enumerate() {
        let mut data = vec![0.0f64; entry.value.len()];
        for (vi, slot) in data.iter_mut().enumerate() {
            for (si, set) in sets.iter().enumerate() {
                terms[si] = set.entries[ei].value.data()[vi];
            }
            terms.sort_by(|a, b| a.total_cmp(b));
            *slot = terms.iter().sum::<f64>() / sets.len() as f64;
        }
        out.register(
            &entry.name,
            Tensor::from_vec(entry.value.shape(), data)?,
            entry.trainable,
        )?;
    }
    Ok(out)
}
