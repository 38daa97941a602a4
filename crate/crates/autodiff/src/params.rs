use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_set_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Globally unique address of a parameter: owning set plus slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub set: u64,
    pub id: ParamId,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Named, ordered collection of leaf tensors.
///
/// Iteration follows insertion order. Every set carries a process-unique id so
/// that gradients produced on a tape are routed back to the set that supplied
/// the leaf; cloning a set yields a new id.
#[derive(Debug)]
pub struct ParamSet {
    uid: u64,
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_set_id(),
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) entries: BTreeMap<ParamKey, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&[f64]> {
        self.entries.get(&key).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.entries.keys().copied()
    }

    /// Elementwise sum of two gradient sets.
    pub fn merge(&mut self, other: Gradients) {
        for (key, g) in other.entries {
            match self.entries.get_mut(&key) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    self.entries.insert(key, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.entries.values_mut() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }
}

const MAGIC: &[u8; 8] = b"HATLMPS\0";
pub const FORMAT_VERSION: u32 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self {
            uid: fresh_set_id(),
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            grad: None,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { set: self.uid, id }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn has_any_grad(&self) -> bool {
        self.entries.iter().any(|e| e.grad.is_some())
    }

    /// Adds the gradients addressed to this set into the grad slots.
    ///
    /// Gradients for other sets are ignored. A gradient addressed to a frozen
    /// entry is an invariant violation.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (key, g) in &grads.entries {
            if key.set != self.uid {
                continue;
            }
            let entry = &mut self.entries[key.id.0];
            if !entry.trainable {
                return Err(TensorError::FrozenGradient(entry.name.clone()));
            }
            match &mut entry.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    entry.grad = Some(Tensor::from_parts(
                        entry.tensor.shape().to_vec(),
                        g.clone(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Flat copy of every value, in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[u8::from(e.trainable)])?;
            w.write_all(&(e.tensor.rank() as u32).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in e.tensor.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn io(e: std::io::Error) -> TensorError {
            TensorError::Format(e.to_string())
        }
        fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(io)?;
            Ok(u32::from_le_bytes(b))
        }
        fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            Ok(u64::from_le_bytes(b))
        }

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad magic header".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(TensorError::Format(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Format("parameter name is not utf-8".into()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(io)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(read_u64(&mut r)?));
            }
            let id = set.insert(&name, Tensor::new(shape, data)?)?;
            set.entries[id.0].trainable = flag[0] != 0;
        }
        Ok(set)
    }
}
