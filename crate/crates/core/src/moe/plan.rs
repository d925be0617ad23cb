use moe_tensor::{Tensor, TensorError};

/// Contiguous run of samples sent to one expert after sorting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub expert: usize,
    pub start: usize,
    pub len: usize,
}

/// How a batch is regrouped so that each expert sees one contiguous block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispatchPlan {
    /// `perm[j]` is the original index of the sample at sorted position `j`.
    pub perm: Vec<usize>,
    pub blocks: Vec<Block>,
}

impl DispatchPlan {
    /// `inverse[perm[j]] = j`.
    pub fn inverse(&self) -> Vec<usize> {
        invert(&self.perm)
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(j, &p)| j == p)
    }
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Stable argsort of `expert_ids` plus the run-length encoding of the
/// sorted ids.
pub fn build_dispatch_plan(expert_ids: &[usize]) -> DispatchPlan {
    let mut perm: Vec<usize> = (0..expert_ids.len()).collect();
    perm.sort_by_key(|&i| expert_ids[i]);
    let mut blocks: Vec<Block> = Vec::new();
    for (j, &i) in perm.iter().enumerate() {
        let e = expert_ids[i];
        match blocks.last_mut() {
            Some(b) if b.expert == e => b.len += 1,
            _ => blocks.push(Block {
                expert: e,
                start: j,
                len: 1,
            }),
        }
    }
    DispatchPlan { perm, blocks }
}

fn check_perm(rows: usize, perm: &[usize]) -> Result<(), TensorError> {
    let mut seen = vec![false; perm.len()];
    let valid = perm.len() == rows
        && perm.iter().all(|&p| p < rows && !std::mem::replace(&mut seen[p], true));
    if valid {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op: "permute rows",
            msg: format!("{perm:?} is not a permutation of {rows} rows"),
        })
    }
}

/// Row `j` of the result is row `perm[j]` of `x` (first axis).
pub fn apply_perm(x: &Tensor, perm: &[usize]) -> Result<Tensor, TensorError> {
    let rows = x.shape().first().copied().unwrap_or(0);
    check_perm(rows, perm)?;
    let width = x.len() / rows.max(1);
    let mut out = Vec::with_capacity(x.len());
    for &p in perm {
        out.extend_from_slice(&x.data()[p * width..(p + 1) * width]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Undoes [`apply_perm`] with the same `perm`.
pub fn invert_perm(x: &Tensor, perm: &[usize]) -> Result<Tensor, TensorError> {
    let rows = x.shape().first().copied().unwrap_or(0);
    check_perm(rows, perm)?;
    apply_perm(x, &invert(perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_example() {
        let p = build_dispatch_plan(&[2, 0, 2, 1, 0]);
        assert_eq!(p.perm, vec![1, 4, 3, 0, 2]);
        let runs: Vec<_> = p.blocks.iter().map(|b| (b.expert, b.start, b.len)).collect();
        assert_eq!(runs, vec![(0, 0, 2), (1, 2, 1), (2, 3, 2)]);
    }

    #[test]
    fn degenerate_plans() {
        let p = build_dispatch_plan(&[3; 6]);
        assert_eq!(p.blocks, vec![Block { expert: 3, start: 0, len: 6 }]);
        assert!(p.is_identity());
        let p = build_dispatch_plan(&[0, 1, 2, 3]);
        assert!(p.is_identity());
        assert_eq!(p.blocks.len(), 4);
        assert!(p.blocks.iter().all(|b| b.len == 1));
    }

    #[test]
    fn perm_swaps_rows_and_rejects_bad_input() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = apply_perm(&x, &[1, 0]).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(apply_perm(&x, &[0, 1]).unwrap(), x);
        assert!(apply_perm(&x, &[0]).is_err());
        assert!(apply_perm(&x, &[1, 1]).is_err());
        assert!(invert_perm(&x, &[0, 2]).is_err());
    }
}
