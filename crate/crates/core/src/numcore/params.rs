//! Named parameter storage and its binary file format.
//!
//! Layout (all little-endian): magic `DMV1`, `u32` parameter count, then per
//! parameter: `u32` name length, UTF-8 name, `u32` rank, `u64` extents,
//! raw `f64` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::graph::{Gradients, Graph};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"DMV1";

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    pub(crate) first_moment: Tensor,
    pub(crate) second_moment: Tensor,
    pub(crate) steps: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            grad: None,
            trainable: true,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Parameters keyed by path, iterated in sorted order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.trainable = false);
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Adds the gradients of every parameter bound into `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for (name, id) in graph.bound_params() {
            let Some(g) = grads.get_id(id) else { continue };
            let p = self.get_mut(&name)?;
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            if let Some(g) = &mut p.grad {
                g.scale_in_place(s);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_block(w, self.params.iter().map(|(k, p)| (k.as_str(), &p.value)))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut store = Self::new();
        for (name, value) in read_block(r)? {
            store.insert(name, value)?;
        }
        Ok(store)
    }

    /// Serializes optimizer moments and per-parameter step counts.
    pub fn write_optimizer_state(&self, w: &mut impl Write) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(self.params.len() * 3);
        for (name, p) in &self.params {
            entries.push((format!("m/{name}"), p.first_moment.clone()));
            entries.push((format!("s/{name}"), Tensor::scalar(p.steps as f64)));
            entries.push((format!("v/{name}"), p.second_moment.clone()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        write_block(w, entries.iter().map(|(k, t)| (k.as_str(), t)))
    }

    pub fn read_optimizer_state(&mut self, r: &mut impl Read) -> Result<()> {
        for (key, value) in read_block(r)? {
            let (kind, name) = key
                .split_once('/')
                .ok_or_else(|| Error::UnknownParam(key.clone()))?;
            let p = self.get_mut(name)?;
            match kind {
                "m" => p.first_moment = value,
                "v" => p.second_moment = value,
                "s" => p.steps = value.item() as u64,
                _ => return Err(Error::UnknownParam(key)),
            }
        }
        Ok(())
    }
}

fn write_block<'a>(
    w: &mut impl Write,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_block(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: &str| Error::format("<parameter block>", msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(bad("bad magic"));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(bad("implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            s.insert("a", Tensor::scalar(2.0)),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 1e-300, -0.0, 7.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        let mut first = Vec::new();
        s.write_to(&mut first).unwrap();
        let loaded = ParamStore::read_from(&mut first.as_slice()).unwrap();
        let mut second = Vec::new();
        loaded.write_to(&mut second).unwrap();
        assert_eq!(first, second);
        assert_eq!(&first[..4], b"DMV1");
    }

    #[test]
    fn truncated_block_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::ones(&[4])).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(ParamStore::read_from(&mut bytes.as_slice()).is_err());
    }
}
