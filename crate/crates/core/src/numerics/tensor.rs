use rand::Rng;
use rand_distr::{Distribution, Normal};
use xxhash_rust::xxh64::Xxh64;

use super::Real;
use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        let values = rows.iter().flatten().map(|&v| T::from_f64(v)).collect();
        Tensor::new(vec![rows.len(), cols], values)
    }

    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let values = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.values.len(), "gradient length");
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (a, &b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

/// Identifies a parameter tensor across stores: `(store tag, slot)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub store: u32,
    pub slot: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

/// Named, ordered collection of parameter tensors. Every tensor a graph reads
/// from a store is addressed by a [`ParamKey`] carrying the store's tag, so
/// gradients can be routed back without ambiguity.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    tag: u32,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(tag: u32) -> Self {
        ParamStore {
            tag,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    /// Same parameters under a different tag (used when a frozen copy and a
    /// trainable copy of one architecture coexist).
    pub fn retagged(&self, tag: u32) -> Self {
        let mut out = self.clone();
        out.tag = tag;
        for t in &mut out.tensors {
            t.grad = None;
        }
        out
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let id = ParamId(self.tensors.len() as u32);
        self.names.push(name.into());
        self.tensors.push(tensor);
        id
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.tag,
            slot: id.0,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| ParamId(i as u32))
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for t in &mut self.tensors {
            t.requires_grad = flag;
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every gradient addressed to this store into the tensors' buffers.
    pub fn accumulate(&mut self, grads: &super::Gradients<T>) {
        for (key, g) in grads.params() {
            if key.store == self.tag {
                let t = &mut self.tensors[key.slot as usize];
                if t.requires_grad {
                    t.accumulate_grad(g);
                }
            }
        }
    }

    /// 64-bit checksum over names, shapes and the exact value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Xxh64::new(0);
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update(&(s as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.values() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.digest()
    }

    /// Replace values in place (checkpoint loading); shapes must agree.
    pub fn load_values(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
        let t = self.get_mut(id);
        if t.shape() != shape {
            return Err(Error::Shape {
                op: "load parameter",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        t.values = values;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::<f64>::zeros(vec![2]).tracked();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn checksum_sees_single_bit() {
        let mut s = ParamStore::<f32>::new(1);
        let id = s.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let before = s.checksum();
        s.get_mut(id).values_mut()[1] = f32::from_bits(2.0f32.to_bits() + 1);
        assert_ne!(before, s.checksum());
    }
}
