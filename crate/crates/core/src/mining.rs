//! Batch-hard negative mining against the lab table.
//!
//! For every anchor the negative is the real lab, other than its own, whose
//! normalized table row is most similar to the anchor right now. The unseen
//! row (last row of the table) never takes part.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::model::normalized_rows;
use crate::numeric::{Scalar, Tensor, L2_EPS};
use crate::{Error, Result};

/// Anchors with their true labs and the current lab table.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningBatch<T> {
    lab_indices: Vec<usize>,
    anchors: Tensor<T>,
    lab_table: Tensor<T>,
}

impl<T: Scalar> MiningBatch<T> {
    /// `anchors` is `(B, E)` with unit rows; `lab_table` is `(L + 1, E)`.
    pub fn new(lab_indices: Vec<usize>, anchors: Tensor<T>, lab_table: Tensor<T>) -> Result<Self> {
        if anchors.shape().len() != 2 || lab_table.shape().len() != 2 {
            return Err(Error::shape("mining", "anchors and lab table must be 2-D"));
        }
        if anchors.rows() != lab_indices.len() {
            return Err(Error::shape(
                "mining",
                format!("{} anchors for {} lab indices", anchors.rows(), lab_indices.len()),
            ));
        }
        if anchors.cols() != lab_table.cols() {
            return Err(Error::shape(
                "mining",
                format!("anchor width {} vs lab width {}", anchors.cols(), lab_table.cols()),
            ));
        }
        if lab_table.rows() < 3 {
            return Err(Error::invalid("hard negative mining needs at least two real labs"));
        }
        let labs = lab_table.rows() - 1;
        if let Some(&lab) = lab_indices.iter().find(|&&l| l >= labs) {
            return Err(Error::LabOutOfRange { lab, labs });
        }
        for r in 0..anchors.rows() {
            let n: f64 = Float::sqrt(anchors.row(r).iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>());
            if Float::abs(n - 1.0) > 1e-6 {
                return Err(Error::invalid(format!("anchor {r} has norm {n}, expected 1")));
            }
        }
        Ok(MiningBatch {
            lab_indices,
            anchors,
            lab_table,
        })
    }

    pub fn lab_indices(&self) -> &[usize] {
        &self.lab_indices
    }

    pub fn anchors(&self) -> &Tensor<T> {
        &self.anchors
    }

    pub fn lab_table(&self) -> &Tensor<T> {
        &self.lab_table
    }

    /// Number of real labs.
    pub fn lab_count(&self) -> usize {
        self.lab_table.rows() - 1
    }
}

/// Mined negative lab per anchor and its normalized row.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegatives<T> {
    pub labs: Vec<usize>,
    /// `(B, E)`.
    pub embeddings: Tensor<T>,
}

/// Normalize real-lab rows, take all anchor-lab similarities as one matrix
/// product, knock out each anchor's positive and pick the row-wise argmax
/// (first maximum wins).
pub fn hard_negatives<T: Scalar>(batch: &MiningBatch<T>) -> Result<HardNegatives<T>> {
    let e = batch.anchors.cols();
    let l = batch.lab_count();
    let labs = normalized_rows(&batch.lab_table, l, "lab_table")?;
    let b = batch.anchors.rows();
    let mut sims = Vec::with_capacity(b * l);
    for r in 0..b {
        let a = batch.anchors.row(r);
        sims.extend(labs.chunks_exact(e).map(|row| dot(a, row)));
    }
    for (r, &pos) in batch.lab_indices.iter().enumerate() {
        sims[r * l + pos] = T::neg_infinity();
    }
    let mut out = Vec::with_capacity(b);
    let mut emb = Vec::with_capacity(b * e);
    for row in sims.chunks_exact(l) {
        let mut best = 0;
        for (j, &s) in row.iter().enumerate() {
            if s > row[best] {
                best = j;
            }
        }
        out.push(best);
        emb.extend_from_slice(&labs[best * e..(best + 1) * e]);
    }
    Ok(HardNegatives {
        labs: out,
        embeddings: Tensor::matrix(b, e, emb)?,
    })
}

/// Scalar reference: for each anchor walk every lab except its positive and
/// keep the strictly largest cosine similarity.
pub fn brute_force_hardest<T: Scalar>(batch: &MiningBatch<T>) -> Result<HardNegatives<T>> {
    let e = batch.anchors.cols();
    let l = batch.lab_count();
    let mut out = Vec::new();
    let mut emb = Vec::new();
    for (r, &pos) in batch.lab_indices.iter().enumerate() {
        let a = batch.anchors.row(r);
        let mut best: Option<(usize, T)> = None;
        for j in 0..l {
            if j == pos {
                continue;
            }
            let row = batch.lab_table.row(j);
            let mut sq = T::zero();
            for &x in row {
                sq = sq + x * x;
            }
            if sq == T::zero() {
                return Err(Error::ZeroNorm { what: "lab_table", row: j });
            }
            let n = (sq + T::of(L2_EPS)).sqrt();
            let mut s = T::zero();
            for k in 0..e {
                s = s + a[k] * (row[k] / n);
            }
            if best.map_or(true, |(_, m)| s > m) {
                best = Some((j, s));
            }
        }
        let (j, _) = best.expect("at least two labs");
        let row = batch.lab_table.row(j);
        let n = (row.iter().fold(T::zero(), |acc, &x| acc + x * x) + T::of(L2_EPS)).sqrt();
        out.push(j);
        emb.extend(row.iter().map(|&x| x / n));
    }
    Ok(HardNegatives {
        labs: out,
        embeddings: Tensor::matrix(batch.lab_indices.len(), e, emb)?,
    })
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng;

    fn table(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn picks_the_most_similar_wrong_lab() {
        let labs = table(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [1.0, 1.0]]);
        let b = MiningBatch::new(vec![0], Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), labs).unwrap();
        let h = hard_negatives(&b).unwrap();
        assert_eq!(h.labs, vec![2]);
        assert!(h.embeddings.max_abs_diff(&Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap()) < 1e-9);
        assert_eq!(brute_force_hardest(&b).unwrap(), h);
    }

    #[test]
    fn two_labs_force_the_other_and_ties_go_low() {
        let labs = table(&[[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]);
        let b = MiningBatch::new(vec![0, 1], Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), labs).unwrap();
        assert_eq!(hard_negatives(&b).unwrap().labs, vec![1, 0]);

        let labs = table(&[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 2.0], [1.0, 0.0]]);
        let b = MiningBatch::new(vec![0], Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), labs).unwrap();
        assert_eq!(hard_negatives(&b).unwrap().labs, vec![1]);
        assert_eq!(brute_force_hardest(&b).unwrap().labs, vec![1]);
    }

    #[test]
    fn shared_positive_masks_the_same_row() {
        let labs = table(&[[1.0, 0.0], [0.0, 1.0], [0.8, 0.6], [0.0, 1.0]]);
        let anchors = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let b = MiningBatch::new(vec![0, 0], anchors, labs).unwrap();
        assert_eq!(hard_negatives(&b).unwrap().labs, vec![2, 2]);
    }

    #[test]
    fn unseen_row_is_never_mined() {
        // the unseen row is identical to the anchor but must be skipped
        let labs = table(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]]);
        let b = MiningBatch::new(vec![0], Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), labs).unwrap();
        assert_eq!(hard_negatives(&b).unwrap().labs, vec![1]);
    }

    #[test]
    fn invalid_batches() {
        let anchors = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(MiningBatch::new(vec![0], anchors.clone(), table(&[[1.0, 0.0], [0.0, 1.0]])).is_err());
        assert!(matches!(
            MiningBatch::new(vec![2], anchors.clone(), table(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])),
            Err(Error::LabOutOfRange { lab: 2, labs: 2 })
        ));
        let long = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        assert!(MiningBatch::new(vec![0], long, table(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])).is_err());
        let b = MiningBatch::new(vec![0], anchors, table(&[[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])).unwrap();
        assert!(matches!(hard_negatives(&b), Err(Error::ZeroNorm { row: 1, .. })));
        assert!(matches!(brute_force_hardest(&b), Err(Error::ZeroNorm { row: 1, .. })));
    }

    fn random_batch(seed_value: u64, min_dim: usize) -> MiningBatch<f64> {
        let mut rng = seed::rng(seed_value, &[]);
        let b = rng.gen_range(1..=16);
        let l = rng.gen_range(2..=50);
        let e = rng.gen_range(min_dim..=32);
        let mut anchors = Vec::new();
        for _ in 0..b {
            let row: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
            anchors.extend(row.iter().map(|x| x / n));
        }
        // guard degenerate all-tiny rows
        for r in 0..b {
            let row = &mut anchors[r * e..(r + 1) * e];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                row.iter_mut().for_each(|x| *x = 0.0);
                row[0] = 1.0;
            }
        }
        let table: Vec<f64> = (0..(l + 1) * e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = (0..b).map(|_| rng.gen_range(0..l)).collect();
        MiningBatch::new(labels, Tensor::matrix(b, e, anchors).unwrap(), Tensor::matrix(l + 1, e, table).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn matches_brute_force(s in any::<u64>()) {
            let b = random_batch(s, 1);
            let fast = hard_negatives(&b).unwrap();
            let slow = brute_force_hardest(&b).unwrap();
            prop_assert_eq!(&fast.labs, &slow.labs);
            prop_assert!(fast.embeddings.max_abs_diff(&slow.embeddings) < 1e-6);
            for (n, p) in fast.labs.iter().zip(b.lab_indices()) {
                prop_assert!(n != p && *n < b.lab_count());
            }
        }

        #[test]
        fn row_rescaling_is_invisible(s in any::<u64>(), factor in 0.01f64..100.0) {
            // one dimension makes every similarity an exact tie at +-1
            let b = random_batch(s, 2);
            let mut t = b.lab_table().clone();
            let e = t.cols();
            let row = (s as usize) % b.lab_count();
            t.data_mut()[row * e..(row + 1) * e].iter_mut().for_each(|x| *x *= factor);
            let scaled = MiningBatch::new(b.lab_indices().to_vec(), b.anchors().clone(), t).unwrap();
            prop_assert_eq!(hard_negatives(&b).unwrap().labs, hard_negatives(&scaled).unwrap().labs);
        }
    }
}
