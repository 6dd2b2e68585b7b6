//! Differentiable iterative 3D skeletonization and its classical binary
//! counterpart.
//!
//! One step maps `Z` to `max(erosion(Z), R(Z))` where the residue
//! `R(Q) = clamp_min(Q - open(Q), 0)` realizes the set difference
//! `Q \ open(Q)` and keeps soft inputs inside `[0, 1]`. Thin structures
//! survive through the residue while thick bodies shrink through the
//! erosion, concentrating mass on the centreline.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Real, Tensor};
use crate::morphology::{
    binary_dilation_all, binary_erosion_all, BinaryVolume, StructuringElementSet,
};

/// Skeleton layer configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonConfig {
    /// Iteration count of the recursion.
    pub n: usize,
    /// Optional hard binarization applied before iterating. The layer is
    /// defined on soft values and the training path leaves this unset; the
    /// threshold path is piecewise constant and blocks gradients.
    pub pre_threshold: Option<f64>,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self { n: 5, pre_threshold: None }
    }
}

type GraphResult = Result<Tensor, AutodiffError>;

/// Residue `R(Q) = clamp_min(Q - open(Q), 0)`.
pub fn residue<R: Real>(g: &mut Graph<R>, q: Tensor, set: &StructuringElementSet) -> GraphResult {
    let opened = crate::morphology::open(g, q, set)?;
    let diff = g.sub(q, opened)?;
    Ok(g.relu(diff))
}

/// One recursion step: `max(erosion(Z), R(Z))`.
pub fn skeleton_step<R: Real>(
    g: &mut Graph<R>,
    z_prev: Tensor,
    set: &StructuringElementSet,
) -> GraphResult {
    let eroded = crate::morphology::erosion(g, z_prev, set)?;
    let res = residue(g, z_prev, set)?;
    g.stack_reduce_max(&[eroded, res])
}

/// `n` applications of [`skeleton_step`] starting from the segmentation.
pub fn skeletonize<R: Real>(
    g: &mut Graph<R>,
    s: Tensor,
    set: &StructuringElementSet,
    cfg: &SkeletonConfig,
) -> GraphResult {
    let mut z = match cfg.pre_threshold {
        Some(t) => g.step_ge(s, t),
        None => s,
    };
    for _ in 0..cfg.n {
        z = skeleton_step(g, z, set)?;
    }
    Ok(z)
}

/// Classical binary recursion with exact set arithmetic, the oracle for the
/// differentiable layer.
pub fn classical_skeleton(
    x: &BinaryVolume,
    set: &StructuringElementSet,
    n: usize,
) -> BinaryVolume {
    let mut z = x.clone();
    for _ in 0..n {
        let eroded = binary_erosion_all(&z, set);
        let opened = binary_dilation_all(&eroded, set);
        // residue = z \ open(z); union with the erosion
        let data = z
            .data
            .iter()
            .zip(&opened.data)
            .zip(&eroded.data)
            .map(|((&zi, &oi), &ei)| ei || (zi && !oi))
            .collect();
        z = BinaryVolume::new(z.dims, data);
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::make_elements;

    fn eval_soft(x: &BinaryVolume, n: usize) -> Vec<f32> {
        let set = make_elements();
        let mut g: Graph<f32> = Graph::new();
        let (zd, yd, xd) = x.dims;
        let t = g.leaf(&[zd, yd, xd], x.to_f32(), false).unwrap();
        let cfg = SkeletonConfig { n, pre_threshold: None };
        let k = skeletonize(&mut g, t, &set, &cfg).unwrap();
        g.values(k).to_vec()
    }

    fn line_volume(dims: (usize, usize, usize), len: usize) -> BinaryVolume {
        let mut data = vec![false; dims.0 * dims.1 * dims.2];
        let (y, x) = (dims.1 / 2, dims.2 / 2);
        for z in 0..len {
            data[(z * dims.1 + y) * dims.2 + x] = true;
        }
        BinaryVolume::new(dims, data)
    }

    #[test]
    fn zero_iterations_is_identity() {
        let x = line_volume((6, 5, 5), 4);
        assert_eq!(eval_soft(&x, 0), x.to_f32());
    }

    #[test]
    fn residue_of_zeros_is_zeros_and_line_is_kept() {
        let set = make_elements();
        let mut g: Graph<f32> = Graph::new();
        let zeros = g.leaf(&[5, 5, 5], vec![0.0; 125], false).unwrap();
        let r = residue(&mut g, zeros, &set).unwrap();
        assert!(g.values(r).iter().all(|&v| v == 0.0));

        // a 1-voxel line is annihilated by opening, so its residue is itself
        let line = line_volume((7, 5, 5), 7);
        let t = g.leaf(&[7, 5, 5], line.to_f32(), false).unwrap();
        let r = residue(&mut g, t, &set).unwrap();
        assert_eq!(g.values(r), &line.to_f32()[..]);
    }

    #[test]
    fn residue_of_thick_slab_is_zero_in_interior() {
        let dims = (9usize, 9, 9);
        let mut data = vec![false; 729];
        for z in 1..8 {
            for y in 1..8 {
                for x in 1..8 {
                    data[(z * 9 + y) * 9 + x] = true;
                }
            }
        }
        let vol = BinaryVolume::new(dims, data);
        let set = make_elements();
        let mut g: Graph<f32> = Graph::new();
        let t = g.leaf(&[9, 9, 9], vol.to_f32(), false).unwrap();
        let r = residue(&mut g, t, &set).unwrap();
        let rv = g.values(r);
        for z in 3..6 {
            for y in 3..6 {
                for x in 3..6 {
                    assert_eq!(rv[(z * 9 + y) * 9 + x], 0.0, "interior voxel has residue");
                }
            }
        }
    }

    #[test]
    fn thin_lines_are_fixed_points_of_the_step() {
        let set = make_elements();
        // straight line
        let line = line_volume((8, 7, 7), 8);
        let mut g: Graph<f32> = Graph::new();
        let t = g.leaf(&[8, 7, 7], line.to_f32(), false).unwrap();
        let stepped = skeleton_step(&mut g, t, &set).unwrap();
        assert_eq!(g.values(stepped), &line.to_f32()[..]);

        // L-shaped thin line
        let dims = (7usize, 7, 7);
        let mut data = vec![false; 343];
        for z in 0..5 {
            data[(z * 7 + 3) * 7 + 3] = true;
        }
        for x in 3..7 {
            data[(4 * 7 + 3) * 7 + x] = true;
        }
        let ell = BinaryVolume::new(dims, data);
        let t = g.leaf(&[7, 7, 7], ell.to_f32(), false).unwrap();
        let stepped = skeleton_step(&mut g, t, &set).unwrap();
        assert_eq!(g.values(stepped), &ell.to_f32()[..]);
    }

    #[test]
    fn matches_classical_recursion_on_random_binaries() {
        let set = make_elements();
        for seed in 0..20u64 {
            let x = crate::morphology::tests::random_binary((8, 8, 8), 300 + seed, 0.5);
            for n in [1usize, 3, 5] {
                let soft = eval_soft(&x, n);
                let hard = classical_skeleton(&x, &set, n).to_f32();
                assert_eq!(soft, hard, "seed {seed} n {n}");
            }
        }
    }

    #[test]
    fn ball_and_tube_match_classical() {
        let set = make_elements();
        // solid ball radius 2
        let dims = (9usize, 9, 9);
        let mut data = vec![false; 729];
        for z in 0..9i32 {
            for y in 0..9i32 {
                for x in 0..9i32 {
                    if (z - 4).pow(2) + (y - 4).pow(2) + (x - 4).pow(2) <= 4 {
                        data[((z * 9 + y) * 9 + x) as usize] = true;
                    }
                }
            }
        }
        let ball = BinaryVolume::new(dims, data);
        assert_eq!(eval_soft(&ball, 1), classical_skeleton(&ball, &set, 1).to_f32());

        // tube of radius 2, length 10, along z
        let dims = (10usize, 9, 9);
        let mut data = vec![false; 810];
        for z in 0..10 {
            for y in 0..9i32 {
                for x in 0..9i32 {
                    if (y - 4).pow(2) + (x - 4).pow(2) <= 4 {
                        data[(z * 81) as usize + (y * 9 + x) as usize] = true;
                    }
                }
            }
        }
        let tube = BinaryVolume::new(dims, data);
        let soft = eval_soft(&tube, 5);
        let hard = classical_skeleton(&tube, &set, 5);
        assert_eq!(soft, hard.to_f32());
        // the centreline must survive skeletonization
        for z in 0..10 {
            assert_eq!(soft[z * 81 + 4 * 9 + 4], 1.0, "centreline voxel lost at z={z}");
        }
    }

    #[test]
    fn output_stays_in_unit_interval_for_soft_input() {
        use rand::prelude::*;
        let set = make_elements();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let vals: Vec<f32> = (0..343).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut g: Graph<f32> = Graph::new();
        let t = g.leaf(&[7, 7, 7], vals, false).unwrap();
        let cfg = SkeletonConfig::default();
        let k = skeletonize(&mut g, t, &set, &cfg).unwrap();
        assert!(g.values(k).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn thin_residue_voxels_persist_across_steps() {
        // once a voxel enters the residue it must survive every later step
        let set = make_elements();
        let mut z = crate::morphology::tests::random_binary((8, 8, 8), 91, 0.45);
        let mut ever_thin = vec![false; z.data.len()];
        for _ in 0..5 {
            let eroded = binary_erosion_all(&z, &set);
            let opened = binary_dilation_all(&eroded, &set);
            for (i, (&zi, &oi)) in z.data.iter().zip(&opened.data).enumerate() {
                ever_thin[i] |= zi && !oi;
            }
            z = classical_skeleton(&z, &set, 1);
            for (i, &thin) in ever_thin.iter().enumerate() {
                if thin {
                    assert!(z.data[i], "thin voxel {i} vanished");
                }
            }
        }
    }

    #[test]
    fn pre_threshold_binarizes_before_iterating() {
        let set = make_elements();
        let mut g: Graph<f32> = Graph::new();
        let vals = vec![0.2f32, 0.6, 0.4, 0.8, 0.5, 0.1, 0.9, 0.3];
        let t = g.leaf(&[2, 2, 2], vals.clone(), false).unwrap();
        let cfg = SkeletonConfig { n: 0, pre_threshold: Some(0.5) };
        let k = skeletonize(&mut g, t, &set, &cfg).unwrap();
        let want: Vec<f32> = vals.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(g.values(k), &want[..]);
    }
}
