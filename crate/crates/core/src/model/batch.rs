use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padded token batch: `batch_size × seq_len` ids with a 1/0 validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub mask: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Right-pads `sequences` with `pad_id` to the longest one.
    pub fn from_sequences(sequences: &[Vec<usize>], labels: &[usize], pad_id: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if labels.len() != sequences.len() {
            return Err(Error::dim(
                "batch",
                format!("{} labels for {} sequences", labels.len(), sequences.len()),
            ));
        }
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if seq_len == 0 || sequences.iter().any(Vec::is_empty) {
            return Err(Error::contract("batch contains an empty sequence"));
        }
        let mut token_ids = Vec::with_capacity(sequences.len() * seq_len);
        let mut mask = Vec::with_capacity(sequences.len() * seq_len);
        for s in sequences {
            token_ids.extend_from_slice(s);
            token_ids.extend(std::iter::repeat_n(pad_id, seq_len - s.len()));
            mask.extend(std::iter::repeat_n(1.0, s.len()));
            mask.extend(std::iter::repeat_n(0.0, seq_len - s.len()));
        }
        Ok(Batch {
            batch_size: sequences.len(),
            seq_len,
            token_ids,
            mask,
            labels: labels.to_vec(),
        })
    }

    pub fn mask_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.batch_size, self.seq_len], self.mask.clone())
    }

    pub fn valid_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_to_longest() {
        let b = Batch::from_sequences(&[vec![2, 5], vec![2, 6, 7]], &[0, 1], 0).unwrap();
        assert_eq!(b.seq_len, 3);
        assert_eq!(b.token_ids, vec![2, 5, 0, 2, 6, 7]);
        assert_eq!(b.mask, vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(b.valid_positions(), 5);
    }
}
