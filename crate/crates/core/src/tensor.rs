//! Dense tensors, the parameter store, and the checkpoint file format.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Scalar element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<F>) -> Self {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn scalar(v: F) -> Self {
        Self::new(vec![1, 1], vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape.to_vec(), data.iter().map(|&x| F::lit(x)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns, treating a rank-1 tensor as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [] => (1, 1),
            s => panic!("expected a rank <= 2 tensor, got shape {s:?}"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row_slice(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::lit(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Normal(0, std) initialization.
    pub fn randn(shape: &[usize], std: f64, rng: RngState) -> Self {
        let mut s = rng.rng();
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| F::lit(s.normal() * std)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub requires_grad: bool,
}

/// Named, ordered collection of learnable tensors.
///
/// Declaration order is stable and is the order used by checkpoints and by
/// the optimizer, which keeps both bit-reproducible.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Glorot/Xavier normal over the last two extents.
    Xavier,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: RngState) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, F::one()),
            Init::Normal(std) => Tensor::randn(shape, std, rng.derive(&[name_key(name)])),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [a, b] => (*a, *b),
                    [a] => (*a, *a),
                    _ => (1, 1),
                };
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::randn(shape, std, rng.derive(&[name_key(name)]))
            }
        };
        self.insert(name, tensor)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            requires_grad: true,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<F> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn set_requires_grad_prefix(&mut self, prefix: &str, flag: bool) {
        for e in self
            .entries
            .iter_mut()
            .filter(|e| e.name.starts_with(prefix))
        {
            e.requires_grad = flag;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.requires_grad)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    requires_grad: e.requires_grad,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copy every tensor of `src` whose name starts with `prefix` into the
    /// same-named slot here. Shapes must agree.
    pub fn copy_prefix_from(&mut self, src: &ParamStore<F>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for e in src.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let id = self.id(&e.name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {} not present in target", e.name))
            })?;
            let dst = self.tensor_mut(id);
            if dst.shape != e.tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name, dst.shape, e.tensor.shape
                )));
            }
            dst.data.clone_from(&e.tensor.data);
            n += 1;
        }
        Ok(n)
    }

    /// Sub-store with the entries matching `prefix`, in declaration order.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let id = out.insert(&e.name, e.tensor.clone());
            out.get_mut(id).requires_grad = e.requires_grad;
        }
        out
    }
}

fn name_key(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   GAZENLU-CKPT v1
//   tensors <count>
//   <name> <dim>x<dim>... <byte offset>
//   ...
//   end
//   <little-endian f32 payloads, declaration order>

pub const CHECKPOINT_MAGIC: &str = "GAZENLU-CKPT v1";

impl ParamStore<f32> {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::new();
        header.push_str(CHECKPOINT_MAGIC);
        header.push('\n');
        header.push_str(&format!("tensors {}\n", self.entries.len()));
        let mut offset = 0usize;
        for e in &self.entries {
            if e.name.chars().any(char::is_whitespace) {
                return Err(Error::Checkpoint(format!(
                    "parameter name {:?} contains whitespace",
                    e.name
                )));
            }
            let dims: Vec<String> = e.tensor.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{} {} {}\n", e.name, dims.join("x"), offset));
            offset += e.tensor.numel() * 4;
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(offset);
        for e in &self.entries {
            for x in &e.tensor.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let next_line = |r: &mut R, line: &mut String| -> Result<()> {
            line.clear();
            r.read_line(line)?;
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad header {line:?}")));
        }
        next_line(&mut r, &mut line)?;
        let count: usize = line
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor count line {line:?}")))?;
        let mut metas = Vec::with_capacity(count);
        let mut expected = 0usize;
        for _ in 0..count {
            next_line(&mut r, &mut line)?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 3 {
                return Err(Error::Checkpoint(format!("bad metadata line {line:?}")));
            }
            let shape: Vec<usize> = if parts[1].is_empty() {
                Vec::new()
            } else {
                parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}")))?
            };
            let offset: usize = parts[2]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad offset in {line:?}")))?;
            if offset != expected {
                return Err(Error::Checkpoint(format!(
                    "offset {offset} for {} does not follow declaration order (expected {expected})",
                    parts[0]
                )));
            }
            expected += shape.iter().product::<usize>() * 4;
            metas.push((parts[0].to_string(), shape));
        }
        next_line(&mut r, &mut line)?;
        if line != "end" {
            return Err(Error::Checkpoint(format!(
                "expected end marker, got {line:?}"
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, metadata declares {expected}",
                payload.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut pos = 0;
        for (name, shape) in metas {
            let n: usize = shape.iter().product();
            let data = payload[pos..pos + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += n * 4;
            store.insert(&name, Tensor::new(shape, data));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }

    /// Hex SHA-256 of the checkpoint bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn length_must_match_shape() {
        let _ = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let err = ParamStore::read_checkpoint(&b"NOPE\n"[..]).unwrap_err();
        assert!(err.to_string().contains("bad header"));
    }

    #[test]
    fn checkpoint_rejects_truncated_payload() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let mut bytes = s.to_checkpoint_bytes();
        bytes.pop();
        assert!(ParamStore::read_checkpoint(&bytes[..]).is_err());
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::matrix(2, 3, vec![0.0; 6]));
        s.insert("a.b", Tensor::row(vec![0.0; 3]));
        let bytes = s.to_checkpoint_bytes();
        let text = String::from_utf8_lossy(&bytes[..bytes.len() - 36]);
        assert_eq!(
            text,
            "GAZENLU-CKPT v1\ntensors 2\na.w 2x3 0\na.b 1x3 24\nend\n"
        );
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                (1usize..5, 1usize..5, prop::collection::vec(any::<u32>(), 25)),
                1..6,
            )
        ) {
            let mut s = ParamStore::<f32>::new();
            for (i, (r, c, bits)) in tensors.iter().enumerate() {
                let data = bits[..r * c].iter().map(|b| f32::from_bits(*b)).collect();
                s.insert(&format!("t{i}"), Tensor::matrix(*r, *c, data));
            }
            let bytes = s.to_checkpoint_bytes();
            let back = ParamStore::read_checkpoint(&bytes[..]).unwrap();
            prop_assert_eq!(back.to_checkpoint_bytes(), bytes);
            for (a, b) in s.entries().iter().zip(back.entries()) {
                prop_assert_eq!(&a.name, &b.name);
                let ab: Vec<u32> = a.tensor.data.iter().map(|x| x.to_bits()).collect();
                let bb: Vec<u32> = b.tensor.data.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
