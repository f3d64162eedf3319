//! FIFO queue of unit-length negative embeddings.

use di3cl_tensor::{Float, Tensor};

use crate::encoder::NORM_EPS;
use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-5;

/// Ring buffer of `capacity` rows of width `dim`. New rows overwrite the
/// oldest ones.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    capacity: usize,
    dim: usize,
    entries: Vec<T>,
    head: usize,
    filled: usize,
    renormalized: u64,
}

impl<T: Float> MemoryBank<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!("memory bank needs capacity and dim >= 1, got {capacity}x{dim}")));
        }
        Ok(Self { capacity, dim, entries: vec![T::zero(); capacity * dim], head: 0, filled: 0, renormalized: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity
    }

    /// Slot the next row will be written to.
    pub fn head(&self) -> usize {
        self.head
    }

    /// Rows that arrived with a norm away from 1 and were normalized.
    pub fn renormalized(&self) -> u64 {
        self.renormalized
    }

    /// Appends the rows of a `[n, dim]` tensor, evicting the oldest.
    pub fn enqueue(&mut self, batch: &Tensor<T>) -> Result<()> {
        let (n, d) = batch.dims2()?;
        if d != self.dim {
            return Err(Error::Geometry(format!("bank dim is {}, batch rows have {d}", self.dim)));
        }
        if n > self.capacity {
            return Err(Error::Capacity { batch: n, capacity: self.capacity });
        }
        for i in 0..n {
            let row = batch.row(i);
            let norm = row.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            let slot = &mut self.entries[self.head * d..(self.head + 1) * d];
            if (norm - 1.0).abs() > UNIT_TOL {
                self.renormalized += 1;
                let inv = T::from_f64_lossy(1.0 / (norm + NORM_EPS));
                slot.iter_mut().zip(row).for_each(|(s, &v)| *s = v * inv);
            } else {
                slot.copy_from_slice(row);
            }
            self.head = (self.head + 1) % self.capacity;
        }
        self.filled = (self.filled + n).min(self.capacity);
        Ok(())
    }

    /// Snapshot of the stored rows, `[filled, dim]`, in slot order.
    pub fn negatives(&self) -> Result<Tensor<T>> {
        if self.filled == 0 {
            return Err(Error::NotReady("memory bank"));
        }
        Ok(Tensor::new(&[self.filled, self.dim], self.entries[..self.filled * self.dim].to_vec())?)
    }

    /// Stored rows from oldest to newest.
    pub fn oldest_first(&self) -> Vec<&[T]> {
        let start = if self.is_full() { self.head } else { 0 };
        (0..self.filled)
            .map(|i| {
                let slot = (start + i) % self.capacity;
                &self.entries[slot * self.dim..(slot + 1) * self.dim]
            })
            .collect()
    }

    /// Raw state for serialization: `(head, filled, entries)`.
    pub fn raw_parts(&self) -> (usize, usize, &[T]) {
        (self.head, self.filled, &self.entries)
    }

    pub fn from_raw_parts(capacity: usize, dim: usize, head: usize, filled: usize, entries: Vec<T>) -> Result<Self> {
        if capacity == 0 || dim == 0 || head >= capacity || filled > capacity || entries.len() != capacity * dim {
            return Err(Error::Checkpoint(format!(
                "inconsistent memory bank state: capacity {capacity}, dim {dim}, head {head}, filled {filled}, {} values",
                entries.len()
            )));
        }
        Ok(Self { capacity, dim, entries, head, filled, renormalized: 0 })
    }
}

/// The two negative queues used during pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct Banks<T> {
    pub deep: MemoryBank<T>,
    pub shallow: MemoryBank<T>,
}

impl<T: Float> Banks<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        Ok(Self { deep: MemoryBank::new(capacity, dim)?, shallow: MemoryBank::new(capacity, dim)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    /// Unit vector along axis `i` of `dim`, scaled to stay distinguishable.
    fn basis(i: usize, dim: usize) -> Vec<f64> {
        (0..dim).map(|j| if j == i % dim { 1.0 } else { 0.0 }).collect()
    }

    fn batch(rows: &[Vec<f64>]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(&[rows.len(), d], rows.concat()).unwrap()
    }

    /// Distinct unit vectors in 2-d.
    fn tagged(i: usize) -> Vec<f64> {
        let a = i as f64 * 0.37;
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn fifo_replaces_oldest_slot() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        let v: Vec<Vec<f64>> = (0..5).map(tagged).collect();
        bank.enqueue(&batch(&v[..4])).unwrap();
        bank.enqueue(&batch(&v[4..])).unwrap();
        let neg = bank.negatives().unwrap();
        assert_eq!(neg.data(), [&v[4][..], &v[1], &v[2], &v[3]].concat());
        let order: Vec<Vec<f64>> = bank.oldest_first().iter().map(|r| r.to_vec()).collect();
        assert_eq!(order, v[1..5].to_vec());
    }

    #[test]
    fn full_batch_replaces_everything() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        let v: Vec<Vec<f64>> = (0..8).map(tagged).collect();
        bank.enqueue(&batch(&v[..4])).unwrap();
        bank.enqueue(&batch(&v[4..])).unwrap();
        assert_eq!(bank.negatives().unwrap().data(), v[4..].concat());
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let mut bank = MemoryBank::new(2, 3).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|i| basis(i, 3)).collect();
        assert!(matches!(bank.enqueue(&batch(&rows)), Err(Error::Capacity { batch: 3, capacity: 2 })));
    }

    #[test]
    fn empty_bank_is_not_ready() {
        let bank = MemoryBank::<f32>::new(4, 2).unwrap();
        assert!(matches!(bank.negatives(), Err(Error::NotReady(_))));
    }

    #[test]
    fn non_unit_rows_are_normalized_and_counted() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        bank.enqueue(&batch(&[vec![3.0, 4.0], vec![0.6, 0.8]])).unwrap();
        assert_eq!(bank.renormalized(), 1);
        for row in bank.oldest_first() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        bank.enqueue(&batch(&(0..4).map(tagged).collect::<Vec<_>>())).unwrap();
        let snap = bank.negatives().unwrap();
        assert_eq!(snap.shape(), &[4, 2]);
        let copy = snap.clone();
        bank.enqueue(&batch(&[tagged(9)])).unwrap();
        assert_eq!(snap, copy);
        assert_ne!(bank.negatives().unwrap(), snap);
    }

    #[test]
    fn banks_are_independent() {
        let mut banks = Banks::new(4, 2).unwrap();
        banks.deep.enqueue(&batch(&[tagged(1)])).unwrap();
        assert_eq!(banks.shallow.filled(), 0);
        banks.shallow.enqueue(&batch(&[tagged(2), tagged(3)])).unwrap();
        assert_eq!(banks.deep.oldest_first(), vec![&tagged(1)[..]]);
    }

    #[test]
    fn raw_parts_round_trip() {
        let mut bank = MemoryBank::new(3, 2).unwrap();
        bank.enqueue(&batch(&(0..4).map(tagged).collect::<Vec<_>>()[..2])).unwrap();
        let (head, filled, entries) = bank.raw_parts();
        let back = MemoryBank::from_raw_parts(3, 2, head, filled, entries.to_vec()).unwrap();
        assert_eq!(back, bank);
        assert!(MemoryBank::<f64>::from_raw_parts(3, 2, 3, 0, vec![0.0; 6]).is_err());
    }

    proptest! {
        #[test]
        fn matches_bounded_list(sizes in proptest::collection::vec(1usize..=8, 1..12)) {
            let mut bank = MemoryBank::new(8, 2).unwrap();
            let mut oracle: VecDeque<Vec<f64>> = VecDeque::new();
            let mut next = 0;
            for n in sizes {
                let rows: Vec<Vec<f64>> = (next..next + n).map(tagged).collect();
                next += n;
                bank.enqueue(&batch(&rows)).unwrap();
                for r in rows {
                    oracle.push_back(r);
                    if oracle.len() > 8 {
                        oracle.pop_front();
                    }
                }
                let got: Vec<Vec<f64>> = bank.oldest_first().iter().map(|r| r.to_vec()).collect();
                prop_assert_eq!(got, oracle.iter().cloned().collect::<Vec<_>>());
                prop_assert_eq!(bank.filled(), oracle.len());
            }
        }
    }
}
