use crate::error::{dim_err, Error, Result};
use crate::tensor::{concat_cols, concat_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShardMode {
    Replicated,
    Row,
    Column,
}

impl ShardMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShardMode::Replicated => "replicated",
            ShardMode::Row => "row",
            ShardMode::Column => "column",
        }
    }
}

/// `A ∈ R^{m×n}` acting as `y = A·x`, split over the `k` devices of a model
/// ring. Row mode: block `i` is `A_{i,:}`, shape `(m/k, n)`. Column mode:
/// block `i` is `A_{:,i}`, shape `(m, n/k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedMatrix {
    full_shape: (usize, usize),
    mode: ShardMode,
    blocks: Vec<Tensor>,
}

impl ShardedMatrix {
    pub fn shard(a: &Tensor, mode: ShardMode, k: usize) -> Result<Self> {
        let (m, n) = a.dims2()?;
        if k == 0 {
            return Err(dim_err!("cannot shard over zero devices"));
        }
        let blocks = match mode {
            ShardMode::Replicated => vec![a.clone(); k],
            ShardMode::Row => {
                if m % k != 0 {
                    return Err(dim_err!("{m} rows not divisible by k = {k}"));
                }
                (0..k).map(|i| a.slice_rows(i * m / k, (i + 1) * m / k)).collect::<Result<_>>()?
            }
            ShardMode::Column => {
                if n % k != 0 {
                    return Err(dim_err!("{n} columns not divisible by k = {k}"));
                }
                (0..k).map(|i| a.slice_cols(i * n / k, (i + 1) * n / k)).collect::<Result<_>>()?
            }
        };
        Ok(ShardedMatrix { full_shape: (m, n), mode, blocks })
    }

    /// Sharded view of a dense-layer kernel `W` (`y = x·W`), i.e. of `Wᵀ`.
    pub fn from_kernel(w: &Tensor, mode: ShardMode, k: usize) -> Result<Self> {
        Self::shard(&crate::tensor::transpose(w)?, mode, k)
    }

    /// Wraps existing per-device blocks, checking they tile `full_shape`.
    pub fn from_blocks(full_shape: (usize, usize), mode: ShardMode, blocks: Vec<Tensor>) -> Result<Self> {
        let k = blocks.len();
        let (m, n) = full_shape;
        if k == 0 {
            return Err(dim_err!("sharded matrix with no blocks"));
        }
        let want = match mode {
            ShardMode::Replicated => [m, n],
            ShardMode::Row if m % k == 0 => [m / k, n],
            ShardMode::Column if n % k == 0 => [m, n / k],
            _ => return Err(dim_err!("{m}×{n} cannot be split {} ways by {}", k, mode.as_str())),
        };
        if let Some(b) = blocks.iter().find(|b| b.shape() != want) {
            return Err(dim_err!("block shape {:?}, expected {:?}", b.shape(), want));
        }
        Ok(ShardedMatrix { full_shape, mode, blocks })
    }

    pub fn full_shape(&self) -> (usize, usize) {
        self.full_shape
    }

    pub fn mode(&self) -> ShardMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &Tensor {
        &self.blocks[i]
    }

    pub fn assemble(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.blocks.iter().collect();
        match self.mode {
            ShardMode::Replicated => Ok(self.blocks[0].clone()),
            ShardMode::Row => concat_rows(&parts),
            ShardMode::Column => concat_cols(&parts),
        }
    }

    pub(crate) fn expect_mode(&self, mode: ShardMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Contract(format!(
                "expected a {}-sharded matrix, got {}",
                mode.as_str(),
                self.mode.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorSpace {
    /// Distributed like the input of a linear (`x_j` on device `j`).
    Input,
    /// Distributed like the output of a linear (`y_j` on device `j`).
    Output,
}

/// A vector (or a batch of them, one per column) split into `k` contiguous
/// blocks; block `i`, of shape `(len/k, B)`, lives on device `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedVector {
    blocks: Vec<Tensor>,
    space: VectorSpace,
}

impl ShardedVector {
    /// Splits `x`, shape `(len, B)` (or `(len,)`, read as `B = 1`).
    pub fn split(x: &Tensor, k: usize, space: VectorSpace) -> Result<Self> {
        let x = if x.shape().len() == 1 { x.clone().reshape(&[x.len(), 1])? } else { x.clone() };
        let (len, _) = x.dims2()?;
        if k == 0 || len % k != 0 {
            return Err(dim_err!("length {len} not divisible by k = {k}"));
        }
        let blocks = (0..k).map(|i| x.slice_rows(i * len / k, (i + 1) * len / k)).collect::<Result<_>>()?;
        Ok(ShardedVector { blocks, space })
    }

    pub fn from_blocks(blocks: Vec<Tensor>, space: VectorSpace) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(dim_err!("sharded vector with no blocks"));
        };
        if first.shape().len() != 2 || blocks.iter().any(|b| b.shape() != first.shape()) {
            return Err(dim_err!("sharded vector blocks must share one 2-d shape"));
        }
        Ok(ShardedVector { blocks, space })
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn space(&self) -> VectorSpace {
        self.space
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &Tensor {
        &self.blocks[i]
    }

    pub fn len(&self) -> usize {
        self.blocks[0].rows() * self.k()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self) -> usize {
        self.blocks[0].cols()
    }

    /// Blocks concatenated in device order, shape `(len, B)`.
    pub fn concat(&self) -> Result<Tensor> {
        concat_rows(&self.blocks.iter().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn shard_assemble_round_trip() {
        let a = Tensor::randn(&[8, 12], 1.0, &mut Rng::new(3));
        for mode in [ShardMode::Replicated, ShardMode::Row, ShardMode::Column] {
            let s = ShardedMatrix::shard(&a, mode, 4).unwrap();
            assert_eq!(s.assemble().unwrap(), a);
        }
        assert_eq!(ShardedMatrix::shard(&a, ShardMode::Row, 4).unwrap().block(1).shape(), &[2, 12]);
        assert_eq!(ShardedMatrix::shard(&a, ShardMode::Column, 4).unwrap().block(1).shape(), &[8, 3]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let a = Tensor::zeros(&[6, 8]);
        assert!(ShardedMatrix::shard(&a, ShardMode::Row, 4).is_err());
        assert!(ShardedMatrix::shard(&a, ShardMode::Column, 4).is_ok());
        assert!(ShardedVector::split(&Tensor::zeros(&[6]), 4, VectorSpace::Input).is_err());
    }
}
