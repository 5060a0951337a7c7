use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::Dims;

use super::config::MaskSpec;
use super::RobustError;

/// Axis-aligned block `lo..hi` (half-open, voxel coordinates x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub id: usize,
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Block {
    pub fn len(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear voxel indices, x fastest.
    pub fn voxels(&self, dims: Dims) -> impl Iterator<Item = usize> + '_ {
        let [x0, y0, z0] = self.lo;
        let [x1, y1, z1] = self.hi;
        (z0..z1).flat_map(move |z| (y0..y1).flat_map(move |y| (x0..x1).map(move |x| dims.index(x, y, z))))
    }
}

/// Tiles the volume with blocks of edge `edge`; blocks on the far faces are
/// truncated. Block ids run x-fastest over the block grid.
pub fn partition_blocks(dims: Dims, edge: usize) -> Vec<Block> {
    assert!(edge > 0, "block edge must be positive");
    let counts = dims.0.map(|d| d.div_ceil(edge));
    let mut out = Vec::with_capacity(counts.iter().product());
    for bz in 0..counts[2] {
        for by in 0..counts[1] {
            for bx in 0..counts[0] {
                let b = [bx, by, bz];
                let lo = [0, 1, 2].map(|a| b[a] * edge);
                let hi = [0, 1, 2].map(|a| ((b[a] + 1) * edge).min(dims.0[a]));
                out.push(Block { id: out.len(), lo, hi });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskBranch {
    Random,
    Greedy,
}

/// Per-image draw: percentage `p` and branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskDraw {
    pub p: f64,
    pub branch: MaskBranch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSelection {
    /// Selected block ids, ascending.
    pub blocks: Vec<usize>,
    pub p: f64,
    pub branch: MaskBranch,
}

/// `p ~ U[p_min, p_max]`, then one Bernoulli(τ) draw: success picks the random branch.
pub fn draw_mask_params<R: Rng + ?Sized>(spec: &MaskSpec, rng: &mut R) -> MaskDraw {
    let (lo, hi) = spec.p_range;
    let p = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let branch = if rng.random_bool(spec.tau) {
        MaskBranch::Random
    } else {
        MaskBranch::Greedy
    };
    MaskDraw { p, branch }
}

/// `k = max(1, round(p/100 · num_blocks))`, capped at `num_blocks`.
pub fn blocks_to_mask(p: f64, num_blocks: usize) -> usize {
    ((p / 100.0 * num_blocks as f64).round() as usize).clamp(1, num_blocks.max(1))
}

/// Picks blocks for a given draw. The greedy branch ranks blocks by Σ|grad|
/// and breaks ties toward the lower id.
pub fn select_blocks<R: Rng + ?Sized>(
    draw: MaskDraw,
    blocks: &[Block],
    dims: Dims,
    grad: Option<&[f32]>,
    rng: &mut R,
) -> Result<MaskSelection, RobustError> {
    let k = blocks_to_mask(draw.p, blocks.len());
    let mut chosen = match draw.branch {
        MaskBranch::Random => index::sample(rng, blocks.len(), k).into_vec(),
        MaskBranch::Greedy => {
            let grad = grad.ok_or(RobustError::MissingGradient)?;
            if grad.len() != dims.len() {
                return Err(RobustError::GradientShape {
                    expected: dims.len(),
                    actual: grad.len(),
                });
            }
            let mass: Vec<f64> = blocks
                .iter()
                .map(|b| b.voxels(dims).map(|i| grad[i].abs() as f64).sum())
                .collect();
            let mut order: Vec<usize> = (0..blocks.len()).collect();
            order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
            order.truncate(k);
            order
        }
    };
    chosen.sort_unstable();
    Ok(MaskSelection {
        blocks: chosen,
        p: draw.p,
        branch: draw.branch,
    })
}

/// Draw and selection in one call; `grad` is only consulted by the greedy branch.
pub fn select_mask<R: Rng + ?Sized>(
    dims: Dims,
    grad: Option<&[f32]>,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<MaskSelection, RobustError> {
    let blocks = partition_blocks(dims, spec.block_edge);
    let draw = draw_mask_params(spec, rng);
    select_blocks(draw, &blocks, dims, grad, rng)
}

/// Writes `fill` into every voxel of the selected blocks; other voxels are
/// copied unchanged.
pub fn apply_mask(x: &[f32], dims: Dims, blocks: &[Block], selected: &[usize], fill: f32) -> Result<Vec<f32>, RobustError> {
    if x.len() != dims.len() {
        return Err(RobustError::GradientShape {
            expected: dims.len(),
            actual: x.len(),
        });
    }
    let mut out = x.to_vec();
    for &id in selected {
        let block = blocks.get(id).ok_or(RobustError::BlockOutOfRange {
            id,
            num_blocks: blocks.len(),
        })?;
        for i in block.voxels(dims) {
            out[i] = fill;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(x: usize, y: usize, z: usize) -> Dims {
        Dims::new(x, y, z).unwrap()
    }

    #[test]
    fn partition_counts() {
        let b = partition_blocks(dims(12, 12, 12), 6);
        assert_eq!(b.len(), 8);
        assert!(b.iter().all(|b| b.len() == 216));
        let b = partition_blocks(dims(13, 12, 12), 6);
        assert_eq!(b.len(), 12);
        assert_eq!(b.iter().filter(|b| b.len() == 36).count(), 4);
    }

    #[test]
    fn k_from_percentage() {
        assert_eq!(blocks_to_mask(25.0, 64), 16);
        assert_eq!(blocks_to_mask(10.0, 3), 1);
        assert_eq!(blocks_to_mask(100.0, 5), 5);
    }

    #[test]
    fn greedy_needs_gradient() {
        let spec = MaskSpec {
            tau: 0.0,
            ..MaskSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = select_mask(dims(12, 12, 12), None, &spec, &mut rng).unwrap_err();
        assert!(matches!(e, RobustError::MissingGradient));
    }

    #[test]
    fn greedy_ties_prefer_lower_ids() {
        let d = dims(12, 12, 12);
        let blocks = partition_blocks(d, 6);
        let grad = vec![1.0f32; d.len()];
        let draw = MaskDraw {
            p: 25.0,
            branch: MaskBranch::Greedy,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = select_blocks(draw, &blocks, d, Some(&grad), &mut rng).unwrap();
        assert_eq!(s.blocks, vec![0, 1]);
    }

    #[test]
    fn apply_mask_edges() {
        let d = dims(4, 4, 4);
        let blocks = partition_blocks(d, 2);
        let x: Vec<f32> = (0..64).map(|i| i as f32).collect();
        assert_eq!(apply_mask(&x, d, &blocks, &[], 0.0).unwrap(), x);
        let all: Vec<usize> = (0..blocks.len()).collect();
        assert!(apply_mask(&x, d, &blocks, &all, -1.0).unwrap().iter().all(|&v| v == -1.0));
        assert!(matches!(
            apply_mask(&x, d, &blocks, &[8], 0.0),
            Err(RobustError::BlockOutOfRange { id: 8, num_blocks: 8 })
        ));
    }
}
