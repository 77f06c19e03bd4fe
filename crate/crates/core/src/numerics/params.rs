use std::collections::HashMap;

use super::tape::Gradients;
use super::{NumericsError, Scalar, Tape, Var};

/// One named tensor. Shapes are row-major; 1-D slots are column vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub frozen: bool,
}

impl<T> Slot<T> {
    /// `(rows, cols)` view used when the slot is bound to a tape.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (*n, 1),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }
}

/// Ordered collection of named parameter tensors.
///
/// The flattened parameter vector is the concatenation of slot data in
/// insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<(), NumericsError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NumericsError::SlotSize { name: name.to_string(), expected, got: data.len() });
        }
        let slot = Slot { name: name.to_string(), shape: shape.to_vec(), data, frozen: false };
        match self.index.get(name) {
            Some(&i) => self.slots[i] = slot,
            None => {
                self.index.insert(name.to_string(), self.slots.len());
                self.slots.push(slot);
            }
        }
        Ok(())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![T::zero(); n]).expect("zero slot shape");
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot<T>] {
        &self.slots
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Slot<T>, NumericsError> {
        self.position(name).map(|i| &self.slots[i]).ok_or_else(|| NumericsError::UnknownSlot(name.to_string()))
    }

    pub fn data(&self, name: &str) -> &[T] {
        &self.get(name).unwrap_or_else(|e| panic!("{e}")).data
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Slot<T>, NumericsError> {
        match self.position(name) {
            Some(i) => Ok(&mut self.slots[i]),
            None => Err(NumericsError::UnknownSlot(name.to_string())),
        }
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut Slot<T> {
        &mut self.slots[i]
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), NumericsError> {
        self.get_mut(name)?.frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for s in &mut self.slots {
            s.frozen = true;
        }
    }

    pub fn num_values(&self) -> usize {
        self.slots.iter().map(|s| s.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.slots.iter().flat_map(|s| s.data.iter().copied()).collect()
    }

    /// Flattened view restricted to unfrozen slots.
    pub fn flatten_trainable(&self) -> Vec<T> {
        self.slots.iter().filter(|s| !s.frozen).flat_map(|s| s.data.iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten_trainable`].
    pub fn assign_trainable(&mut self, flat: &[T]) {
        let mut offset = 0;
        for s in self.slots.iter_mut().filter(|s| !s.frozen) {
            let n = s.data.len();
            s.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flattened parameter length mismatch");
    }

    /// Registers every slot as a leaf on `tape`, in slot order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.slots
            .iter()
            .map(|s| {
                let (r, c) = s.matrix_shape();
                tape.matrix_leaf(r, c, s.data.clone())
            })
            .collect()
    }

    /// Reads adjoints for bound slots; frozen slots report no gradient.
    pub fn collect(&self, vars: &[Var], grads: &Gradients<T>) -> ParamGrads<T> {
        let slots = self.slots.iter().zip(vars).map(|(s, &v)| if s.frozen { None } else { Some(grads.get(v)) }).collect();
        ParamGrads { slots }
    }

    /// Stable 64-bit FNV-1a fingerprint of names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for s in &self.slots {
            h.write(s.name.as_bytes());
            for &d in &s.shape {
                h.write(&(d as u64).to_le_bytes());
            }
            for &v in &s.data {
                h.write(&v.real().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| Slot { name: s.name.clone(), shape: s.shape.clone(), data: super::scalar::cast_slice(&s.data), frozen: s.frozen })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.data.iter().all(|v| v.is_finite()))
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Gradient aligned with the slots of a [`ParamStore`]; `None` for frozen slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { slots: store.slots().iter().map(|s| if s.frozen { None } else { Some(vec![T::zero(); s.data.len()]) }).collect() }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, &y) in a.iter_mut().zip(b) {
                    *x = *x + y;
                }
            }
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads<T>, k: T) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, &y) in a.iter_mut().zip(b) {
                    *x = *x + k * y;
                }
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for s in self.slots.iter_mut().flatten() {
            for x in s.iter_mut() {
                *x = *x * k;
            }
        }
    }

    /// Concatenation of the trainable slots, matching [`ParamStore::flatten_trainable`].
    pub fn flatten(&self) -> Vec<T> {
        self.slots.iter().flatten().flat_map(|s| s.iter().copied()).collect()
    }

    /// Inverse of [`ParamGrads::flatten`] using `template` for the layout.
    pub fn from_flat(template: &ParamStore<T>, flat: &[T]) -> Self {
        let mut offset = 0;
        let slots = template
            .slots()
            .iter()
            .map(|s| {
                if s.frozen {
                    None
                } else {
                    let n = s.data.len();
                    offset += n;
                    Some(flat[offset - n..offset].to_vec())
                }
            })
            .collect();
        assert_eq!(offset, flat.len(), "flattened gradient length mismatch");
        Self { slots }
    }

    pub fn get(&self, i: usize) -> Option<&[T]> {
        self.slots[i].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_defines_flattening() {
        let mut p = ParamStore::<f64>::new();
        p.insert("b", &[2], vec![1.0, 2.0]).unwrap();
        p.insert("a", &[1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        p.set_frozen("b", true).unwrap();
        assert_eq!(p.flatten_trainable(), vec![3.0, 4.0]);
        p.assign_trainable(&[9.0, 8.0]);
        assert_eq!(p.data("a"), &[9.0, 8.0]);
        assert_eq!(p.data("b"), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = ParamStore::<f64>::new();
        assert!(p.insert("x", &[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", &[2], vec![1.0, 2.0]).unwrap();
        let f = p.fingerprint();
        p.get_mut("x").unwrap().data[1] = 2.0 + f64::EPSILON * 2.0;
        assert_ne!(f, p.fingerprint());
    }
}
