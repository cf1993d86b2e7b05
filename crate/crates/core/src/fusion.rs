//! Weighted running-sum fusion of per-frame inferences into the map.

use serde::{Deserialize, Serialize};

use crate::sparse_grid::{GridCoord, Property, SparseGrid, VoxelState, MAX_CHANNELS};

/// Upper bound on a normalized variance, keeping every weight positive.
pub const MAX_NORMALIZED_VARIANCE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Ceiling on the accumulated distance weight V.
    pub weight_cap: f64,
    /// |d| below which a voxel counts as observed surface and receives
    /// property updates (m).
    pub surface_band: f64,
}

/// One normalized observation for a voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub distance: f64,
    /// Distance variance already normalized to `[0, 0.99]`.
    pub variance: f64,
    pub property: Option<Property>,
    /// Property variance already normalized to `[0, 0.99]`.
    pub property_variance: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStats {
    pub voxels_touched: usize,
    pub leaves_activated: usize,
    pub new_leaves: usize,
}

/// `min(v / scale, 0.99)`, with non-finite or negative input treated as 0.
pub fn normalize_variance(v: f64, scale: f64) -> f64 {
    if !v.is_finite() || v <= 0.0 {
        return if v.is_nan() { MAX_NORMALIZED_VARIANCE } else { 0.0 };
    }
    (v / scale).min(MAX_NORMALIZED_VARIANCE)
}

/// Fold one observation into a voxel state.
pub fn fuse_point(state: &VoxelState, obs: &Observation, cfg: &FusionConfig) -> VoxelState {
    let mut s = *state;
    let w = 1.0 - obs.variance.clamp(0.0, MAX_NORMALIZED_VARIANCE);
    let v_prev = s.weight as f64;
    s.distance = ((v_prev * s.distance as f64 + w * obs.distance) / (v_prev + w)) as f32;
    s.weight = (v_prev + w).min(cfg.weight_cap) as f32;
    let near = obs.distance.abs() <= cfg.surface_band;
    if near {
        s.observed = true;
        if let Some(c) = obs.property {
            let wc = 1.0 - obs.property_variance.clamp(0.0, MAX_NORMALIZED_VARIANCE);
            let w_prev = s.property_weight as f64;
            for ch in 0..MAX_CHANNELS {
                s.property[ch] = ((w_prev * s.property[ch] as f64 + wc * c[ch] as f64) / (w_prev + wc)) as f32;
            }
            s.property_weight = (w_prev + wc) as f32;
        }
    }
    s.property_weight = s.property_weight.min(s.weight);
    s
}

/// Fuse a frame's observations in order and mark touched leaves active.
/// Each coordinate is expected at most once.
pub fn fuse_frame(grid: &mut SparseGrid, observations: &[(GridCoord, Observation)], cfg: &FusionConfig) -> FusionStats {
    let leaves_before = grid.leaf_count();
    let active_before = grid.active_origins().len();
    for (c, obs) in observations {
        let slot = grid.get_or_insert(*c);
        *slot = fuse_point(slot, obs, cfg);
        grid.mark_active(c.leaf_origin());
    }
    FusionStats {
        voxels_touched: observations.len(),
        leaves_activated: grid.active_origins().len() - active_before,
        new_leaves: grid.leaf_count() - leaves_before,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CFG: FusionConfig = FusionConfig {
        weight_cap: 1e9,
        surface_band: 0.1,
    };

    fn obs(d: f64, v: f64) -> Observation {
        Observation {
            distance: d,
            variance: v,
            property: None,
            property_variance: 0.0,
        }
    }

    #[test]
    fn first_observation() {
        let s = fuse_point(&VoxelState::default(), &obs(0.3, 0.25), &CFG);
        assert!((s.distance - 0.3).abs() < 1e-7);
        assert!((s.weight - 0.75).abs() < 1e-7);
        assert!(!s.observed);
    }

    #[test]
    fn equal_weights_average() {
        let s = fuse_point(&VoxelState::default(), &obs(0.02, 0.0), &CFG);
        let s = fuse_point(&s, &obs(0.06, 0.0), &CFG);
        assert!((s.distance - 0.04).abs() < 1e-7);
        assert!(s.observed);
    }

    #[test]
    fn running_sum_matches_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let seq: Vec<(f64, f64)> = (0..rng.random_range(1..30))
                .map(|_| (rng.random_range(-0.5..0.5), rng.random_range(0.0..0.99)))
                .collect();
            let mut s = VoxelState::default();
            for (d, v) in &seq {
                s = fuse_point(&s, &obs(*d, *v), &CFG);
            }
            let num: f64 = seq.iter().map(|(d, v)| (1.0 - v) * d).sum();
            let den: f64 = seq.iter().map(|(_, v)| 1.0 - v).sum();
            assert!((s.distance as f64 - num / den).abs() < 1e-6);
            assert!((s.weight as f64 - den).abs() < 1e-4);
        }
    }

    #[test]
    fn weight_cap_and_property_weight_bound() {
        let cfg = FusionConfig {
            weight_cap: 3.0,
            surface_band: 0.1,
        };
        let mut s = VoxelState::default();
        for _ in 0..10 {
            let o = Observation {
                distance: 0.0,
                variance: 0.5,
                property: Some([1.0, 0.5, 0.0]),
                property_variance: 0.0,
            };
            s = fuse_point(&s, &o, &cfg);
            assert!(s.property_weight <= s.weight);
        }
        assert_eq!(s.weight, 3.0);
        assert!((s.property[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn properties_only_near_surface() {
        let o = Observation {
            distance: 0.5,
            variance: 0.0,
            property: Some([1.0, 1.0, 1.0]),
            property_variance: 0.0,
        };
        let s = fuse_point(&VoxelState::default(), &o, &CFG);
        assert_eq!(s.property_weight, 0.0);
        assert_eq!(s.property, [0.0; 3]);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_variance(0.0, 2.0), 0.0);
        assert_eq!(normalize_variance(1.0, 2.0), 0.5);
        assert_eq!(normalize_variance(5.0, 2.0), MAX_NORMALIZED_VARIANCE);
        assert_eq!(normalize_variance(f64::NAN, 2.0), MAX_NORMALIZED_VARIANCE);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seq: Vec<Observation> = (0..50)
            .map(|_| obs(rng.random_range(-0.3..0.3), rng.random_range(0.0..0.9)))
            .collect();
        let fold = |seq: &[Observation]| seq.iter().fold(VoxelState::default(), |s, o| fuse_point(&s, o, &CFG));
        let a = fold(&seq);
        seq.shuffle(&mut rng);
        let b = fold(&seq);
        assert!((a.distance - b.distance).abs() < 1e-6);
    }

    #[test]
    fn frame_stats() {
        let mut grid = SparseGrid::new(0.1);
        assert_eq!(fuse_frame(&mut grid, &[], &CFG), FusionStats::default());
        assert_eq!(grid.active_leaves().count(), 0);
        let ob: Vec<(GridCoord, Observation)> = (0..8).map(|i| (GridCoord::new(i, 1, 2), obs(0.0, 0.0))).collect();
        let st = fuse_frame(&mut grid, &ob, &CFG);
        assert_eq!(st, FusionStats { voxels_touched: 8, leaves_activated: 1, new_leaves: 1 });
        let ob = vec![(GridCoord::new(-1, 0, 0), obs(0.0, 0.0)), (GridCoord::new(3, 3, 3), obs(0.0, 0.0))];
        let st = fuse_frame(&mut grid, &ob, &CFG);
        assert_eq!(st, FusionStats { voxels_touched: 2, leaves_activated: 1, new_leaves: 1 });
    }
}
