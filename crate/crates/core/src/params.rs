//! Named parameter collections and their flat binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    b"CFPC"
//! version  u32 (= 1)
//! count    u32
//! entries  count × {
//!     name_len u32, name utf-8 bytes,
//!     dtype    u8 (1 = f32, 2 = f64),
//!     ndim     u32, dims ndim × u64,
//!     values   product(dims) × dtype, little-endian
//! }
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::ops::RunningStats;
use crate::tensor::{DType, Scalar, Tensor};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CFPC";
pub const CONTAINER_VERSION: u32 = 1;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered, uniquely named parameters plus non-trainable batch-norm
/// statistics.
#[derive(Debug)]
pub struct ParamStore<T: Scalar = f32> {
    tag: u64,
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// Clones get a fresh tag so graphs never confuse the two.
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
            stats: self.stats.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
            stats: Vec::new(),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) || self.stats.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    /// `N(mean, std)` initialised parameter.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0].1
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0].1
    }

    pub fn stats_entries(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Add the gradients of every node of `graph` that reads a parameter of
    /// this store.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (var, index) in graph.param_nodes(self.tag) {
            if let Some(g) = grads.get(var) {
                let acc = self.params[index].grad.data_mut();
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    /// Same layout, every value cast to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        for (name, s) in &self.stats {
            out.stats.push((
                name.clone(),
                RunningStats {
                    mean: s.mean.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                    var: s.var.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                    momentum: s.momentum,
                },
            ));
        }
        out
    }

    /// Flatten values and running statistics into named tensors.
    pub fn to_named_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.clone());
        }
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.insert(format!("{name}.running_mean"), Tensor::from_parts(vec![c], s.mean.clone()));
            out.insert(format!("{name}.running_var"), Tensor::from_parts(vec![c], s.var.clone()));
        }
        out
    }

    /// Overwrite every value and statistic from `named`. Names and shapes
    /// must match this store's layout exactly.
    pub fn load_named_tensors(&mut self, named: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let expected = self.params.len() + 2 * self.stats.len();
        if named.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} tensors, container holds {}",
                named.len()
            )));
        }
        for p in &mut self.params {
            let t = named
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for (name, s) in &mut self.stats {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{name}.{suffix}");
                let t = named
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("missing tensor `{key}`")))?;
                if t.len() != dst.len() {
                    return Err(Error::Format(format!("tensor `{key}` has wrong length")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_named_tensors())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let named = read_container::<T>(path)?;
        self.load_named_tensors(&named)
    }
}

/// Serialize named tensors into the container format.
pub fn encode_container<T: Scalar>(tensors: &BTreeMap<String, Tensor<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
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

/// Parse a container. Values stored in either dtype are converted to `T`.
pub fn decode_container<T: Scalar>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CONTAINER_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_owned();
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype {code}")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f64::from(f32::read_le(c)))).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        if out.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn write_container<T: Scalar>(path: &Path, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    std::fs::write(path, encode_container(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_container<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn store_round_trip_through_container() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        s.add_normal("enc.w", &[2, 3], 0.0, 1.0, &mut rng).unwrap();
        s.add_normal("enc.b", &[3], 0.0, 1.0, &mut rng).unwrap();
        let st = s.add_stats("enc.bn", 3);
        s.stats_mut(st).mean[1] = 0.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        s.save(&path).unwrap();

        let mut t = ParamStore::<f32>::new();
        t.add("enc.w", Tensor::zeros(&[2, 3])).unwrap();
        t.add("enc.b", Tensor::zeros(&[3])).unwrap();
        let st2 = t.add_stats("enc.bn", 3);
        t.load(&path).unwrap();
        assert_eq!(t.params()[0].value, s.params()[0].value);
        assert_eq!(t.stats(st2).mean[1], 0.5);

        let mut wrong = ParamStore::<f32>::new();
        wrong.add("enc.w", Tensor::zeros(&[3, 2])).unwrap();
        wrong.add("enc.b", Tensor::zeros(&[3])).unwrap();
        wrong.add_stats("enc.bn", 3);
        assert!(wrong.load(&path).unwrap_err().to_string().contains("enc.w"));
    }

    #[test]
    fn corrupt_containers_rejected() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), Tensor::<f64>::ones(&[2, 2]));
        let bytes = encode_container(&m);
        assert!(decode_container::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_container::<f64>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_container::<f64>(&extra).is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..64), split in 1usize..8) {
            let rows = split.min(values.len());
            let cols = values.len() / rows;
            let data = values[..rows * cols].to_vec();
            let mut m = BTreeMap::new();
            m.insert("layer.weight".to_string(), Tensor::new(&[rows, cols], data).unwrap());
            m.insert("b".to_string(), Tensor::<f64>::scalar(values[0]));
            let back = decode_container::<f64>(&encode_container(&m)).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
