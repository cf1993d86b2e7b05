//! Four-level sparse voxel tree.
//!
//! A hash-mapped root holds upper internal nodes (32³ children), which hold
//! lower internal nodes (16³ children), which hold 8³ voxel leaves. An upper
//! node therefore spans 4096³ voxels. Every voxel access is one hash lookup
//! followed by exactly three child dereferences.
//!
//! Coordinates are split with arithmetic shifts and masks, so negative
//! indices address the same way as positive ones (floor semantics).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::Vec3;

pub const LEAF_LOG2: u32 = 3;
pub const LOWER_LOG2: u32 = 4;
pub const UPPER_LOG2: u32 = 5;

pub const LEAF_DIM: i32 = 1 << LEAF_LOG2;
pub const LEAF_VOXELS: usize = 1 << (3 * LEAF_LOG2);
const LOWER_CHILDREN: usize = 1 << (3 * LOWER_LOG2);
const UPPER_CHILDREN: usize = 1 << (3 * UPPER_LOG2);

/// log2 of the voxel span of one lower internal node (16 leaves of 8 voxels).
const LOWER_SPAN_LOG2: u32 = LEAF_LOG2 + LOWER_LOG2;
/// log2 of the voxel span of one upper internal node (4096 voxels).
pub const UPPER_SPAN_LOG2: u32 = LOWER_SPAN_LOG2 + UPPER_LOG2;

pub const MAX_CHANNELS: usize = 3;

/// Per-voxel surface property (RGB, or intensity in channel 0).
pub type Property = [f32; MAX_CHANNELS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct GridCoord {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl GridCoord {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        Self { i, j, k }
    }

    pub fn offset(self, di: i32, dj: i32, dk: i32) -> Self {
        Self::new(self.i + di, self.j + dj, self.k + dk)
    }

    /// Minimum corner of the leaf containing this voxel.
    pub fn leaf_origin(self) -> Self {
        let m = !(LEAF_DIM - 1);
        Self::new(self.i & m, self.j & m, self.k & m)
    }

    /// Key of the upper internal node (root child) containing this voxel.
    pub fn upper_key(self) -> [i32; 3] {
        [
            self.i >> UPPER_SPAN_LOG2,
            self.j >> UPPER_SPAN_LOG2,
            self.k >> UPPER_SPAN_LOG2,
        ]
    }

    fn upper_slot(self) -> usize {
        let m = (1 << UPPER_LOG2) - 1;
        let a = ((self.i >> LOWER_SPAN_LOG2) & m) as usize;
        let b = ((self.j >> LOWER_SPAN_LOG2) & m) as usize;
        let c = ((self.k >> LOWER_SPAN_LOG2) & m) as usize;
        (a << (2 * UPPER_LOG2)) | (b << UPPER_LOG2) | c
    }

    fn lower_slot(self) -> usize {
        let m = (1 << LOWER_LOG2) - 1;
        let a = ((self.i >> LEAF_LOG2) & m) as usize;
        let b = ((self.j >> LEAF_LOG2) & m) as usize;
        let c = ((self.k >> LEAF_LOG2) & m) as usize;
        (a << (2 * LOWER_LOG2)) | (b << LOWER_LOG2) | c
    }

    /// Linear index of the voxel inside its leaf.
    pub fn leaf_offset(self) -> usize {
        let m = LEAF_DIM - 1;
        (((self.i & m) as usize) << (2 * LEAF_LOG2))
            | (((self.j & m) as usize) << LEAF_LOG2)
            | ((self.k & m) as usize)
    }

    pub fn as_vec(self) -> Vec3 {
        Vec3::new(self.i as f64, self.j as f64, self.k as f64)
    }
}

impl From<[i32; 3]> for GridCoord {
    fn from(v: [i32; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Voxel containing `p`: componentwise `floor(p / voxel_size)`.
pub fn world_to_grid(p: &Vec3, voxel_size: f64) -> GridCoord {
    GridCoord::new(
        (p.x / voxel_size).floor() as i32,
        (p.y / voxel_size).floor() as i32,
        (p.z / voxel_size).floor() as i32,
    )
}

/// Center of voxel `c`.
pub fn grid_to_world(c: GridCoord, voxel_size: f64) -> Vec3 {
    Vec3::new(
        (c.i as f64 + 0.5) * voxel_size,
        (c.j as f64 + 0.5) * voxel_size,
        (c.k as f64 + 0.5) * voxel_size,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VoxelState {
    /// Fused signed distance (m).
    pub distance: f32,
    /// Accumulated distance fusion weight.
    pub weight: f32,
    pub property: Property,
    /// Accumulated property fusion weight, never above `weight`.
    pub property_weight: f32,
    /// Set once the voxel has received a near-surface measurement.
    pub observed: bool,
}

#[derive(Debug, Clone)]
pub struct LeafNode {
    origin: GridCoord,
    voxels: Box<[VoxelState; LEAF_VOXELS]>,
    value_mask: [u64; LEAF_VOXELS / 64],
    active_this_frame: bool,
}

impl LeafNode {
    fn new(origin: GridCoord) -> Self {
        Self {
            origin,
            voxels: Box::new([VoxelState::default(); LEAF_VOXELS]),
            value_mask: [0; LEAF_VOXELS / 64],
            active_this_frame: false,
        }
    }

    pub fn origin(&self) -> GridCoord {
        self.origin
    }

    pub fn is_active(&self) -> bool {
        self.active_this_frame
    }

    pub fn is_set(&self, offset: usize) -> bool {
        self.value_mask[offset / 64] >> (offset % 64) & 1 == 1
    }

    pub fn value_mask(&self) -> &[u64; LEAF_VOXELS / 64] {
        &self.value_mask
    }

    pub fn set_count(&self) -> usize {
        self.value_mask.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn voxel(&self, offset: usize) -> Option<&VoxelState> {
        self.is_set(offset).then(|| &self.voxels[offset])
    }

    /// Grid coordinate of a leaf-local offset.
    pub fn coord_of(&self, offset: usize) -> GridCoord {
        let m = LEAF_DIM as usize - 1;
        self.origin.offset(
            (offset >> (2 * LEAF_LOG2)) as i32,
            ((offset >> LEAF_LOG2) & m) as i32,
            (offset & m) as i32,
        )
    }

    /// Set voxels in ascending offset order.
    pub fn iter(&self) -> impl Iterator<Item = (GridCoord, &VoxelState)> + '_ {
        (0..LEAF_VOXELS)
            .filter(|&o| self.is_set(o))
            .map(move |o| (self.coord_of(o), &self.voxels[o]))
    }

    fn set(&mut self, offset: usize, s: VoxelState) {
        self.voxels[offset] = s;
        self.value_mask[offset / 64] |= 1 << (offset % 64);
    }

    fn get_or_insert(&mut self, offset: usize) -> &mut VoxelState {
        self.value_mask[offset / 64] |= 1 << (offset % 64);
        &mut self.voxels[offset]
    }
}

struct LowerNode {
    children: Box<[Option<Box<LeafNode>>]>,
}

impl LowerNode {
    fn new() -> Self {
        Self {
            children: (0..LOWER_CHILDREN).map(|_| None).collect(),
        }
    }
}

struct UpperNode {
    children: Box<[Option<Box<LowerNode>>]>,
}

impl UpperNode {
    fn new() -> Self {
        Self {
            children: (0..UPPER_CHILDREN).map(|_| None).collect(),
        }
    }
}

/// Counts of allocated nodes per tree level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeCounts {
    pub upper: usize,
    pub lower: usize,
    pub leaves: usize,
}

pub struct SparseGrid {
    voxel_size: f64,
    root: HashMap<[i32; 3], Box<UpperNode>>,
    /// Leaf origins in allocation order; drives deterministic iteration.
    leaf_order: Vec<GridCoord>,
    active: Vec<GridCoord>,
    counts: NodeCounts,
}

impl std::fmt::Debug for SparseGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseGrid")
            .field("voxel_size", &self.voxel_size)
            .field("counts", &self.counts)
            .field("active", &self.active.len())
            .finish()
    }
}

impl SparseGrid {
    pub fn new(voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        Self {
            voxel_size,
            root: HashMap::new(),
            leaf_order: Vec::new(),
            active: Vec::new(),
            counts: NodeCounts::default(),
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn world_to_grid(&self, p: &Vec3) -> GridCoord {
        world_to_grid(p, self.voxel_size)
    }

    pub fn grid_to_world(&self, c: GridCoord) -> Vec3 {
        grid_to_world(c, self.voxel_size)
    }

    pub fn node_counts(&self) -> NodeCounts {
        self.counts
    }

    pub fn leaf_count(&self) -> usize {
        self.counts.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.counts.leaves == 0
    }

    pub fn voxel_count(&self) -> usize {
        self.leaves().map(LeafNode::set_count).sum()
    }

    pub fn leaf(&self, origin: GridCoord) -> Option<&LeafNode> {
        let upper = self.root.get(&origin.upper_key())?;
        let lower = upper.children[origin.upper_slot()].as_deref()?;
        lower.children[origin.lower_slot()].as_deref()
    }

    fn leaf_mut(&mut self, origin: GridCoord) -> Option<&mut LeafNode> {
        let upper = self.root.get_mut(&origin.upper_key())?;
        let lower = upper.children[origin.upper_slot()].as_deref_mut()?;
        lower.children[origin.lower_slot()].as_deref_mut()
    }

    fn leaf_or_insert(&mut self, c: GridCoord) -> &mut LeafNode {
        let origin = c.leaf_origin();
        let counts = &mut self.counts;
        let upper = self.root.entry(origin.upper_key()).or_insert_with(|| {
            counts.upper += 1;
            Box::new(UpperNode::new())
        });
        let lower = upper.children[origin.upper_slot()].get_or_insert_with(|| {
            counts.lower += 1;
            Box::new(LowerNode::new())
        });
        let slot = &mut lower.children[origin.lower_slot()];
        if slot.is_none() {
            counts.leaves += 1;
            self.leaf_order.push(origin);
            *slot = Some(Box::new(LeafNode::new(origin)));
        }
        slot.as_deref_mut().expect("leaf allocated above")
    }

    /// State of voxel `c`, if it was ever set. Never allocates.
    pub fn get(&self, c: GridCoord) -> Option<&VoxelState> {
        self.leaf(c.leaf_origin())?.voxel(c.leaf_offset())
    }

    pub fn set(&mut self, c: GridCoord, s: VoxelState) {
        self.leaf_or_insert(c).set(c.leaf_offset(), s);
    }

    /// Mutable state of voxel `c`, allocating nodes and marking the voxel set.
    pub fn get_or_insert(&mut self, c: GridCoord) -> &mut VoxelState {
        self.leaf_or_insert(c).get_or_insert(c.leaf_offset())
    }

    /// Number of child dereferences below the root needed to reach voxel
    /// `c`, or `None` if the path is not allocated.
    pub fn access_depth(&self, c: GridCoord) -> Option<usize> {
        let origin = c.leaf_origin();
        let upper = self.root.get(&origin.upper_key())?;
        let mut depth = 1;
        let lower = upper.children[origin.upper_slot()].as_deref()?;
        depth += 1;
        let leaf = lower.children[origin.lower_slot()].as_deref()?;
        depth += 1;
        leaf.is_set(c.leaf_offset()).then_some(depth)
    }

    /// All allocated leaves in allocation order.
    pub fn leaves(&self) -> impl Iterator<Item = &LeafNode> + '_ {
        self.leaf_order
            .iter()
            .map(move |&o| self.leaf(o).expect("leaf order tracks allocated leaves"))
    }

    pub fn leaf_origins(&self) -> &[GridCoord] {
        &self.leaf_order
    }

    pub fn mark_active(&mut self, origin: GridCoord) {
        let origin = origin.leaf_origin();
        if let Some(leaf) = self.leaf_mut(origin) {
            if !leaf.active_this_frame {
                leaf.active_this_frame = true;
                self.active.push(origin);
            }
        }
    }

    /// Leaves marked active since the last [`clear_active`](Self::clear_active),
    /// each exactly once, in activation order.
    pub fn active_leaves(&self) -> impl Iterator<Item = &LeafNode> + '_ {
        self.active
            .iter()
            .map(move |&o| self.leaf(o).expect("active leaves are allocated"))
    }

    pub fn active_origins(&self) -> &[GridCoord] {
        &self.active
    }

    pub fn clear_active(&mut self) {
        let active = std::mem::take(&mut self.active);
        for origin in active {
            if let Some(leaf) = self.leaf_mut(origin) {
                leaf.active_this_frame = false;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(d: f32) -> VoxelState {
        VoxelState {
            distance: d,
            weight: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn world_grid_mapping() {
        assert_eq!(world_to_grid(&Vec3::zeros(), 0.1), GridCoord::new(0, 0, 0));
        assert_eq!(
            world_to_grid(&Vec3::new(-0.05, 0.05, 0.25), 0.1),
            GridCoord::new(-1, 0, 2)
        );
        let c = GridCoord::new(3, 3, 3);
        let w = grid_to_world(c, 0.1);
        assert!((w - Vec3::new(0.35, 0.35, 0.35)).norm() < 1e-12);
        assert_eq!(world_to_grid(&w, 0.1), c);
    }

    #[test]
    fn negative_addressing_matches_floor_division() {
        for v in -5000..5000 {
            let c = GridCoord::new(v, -v, v / 3);
            let origin = c.leaf_origin();
            assert_eq!(origin.i, v.div_euclid(8) * 8);
            assert_eq!(origin.j, (-v).div_euclid(8) * 8);
            assert_eq!(c.upper_key()[0], v.div_euclid(4096));
            assert_eq!(c.leaf_offset() >> 6, v.rem_euclid(8) as usize);
        }
    }

    #[test]
    fn empty_grid_get_is_absent() {
        let g = SparseGrid::new(0.1);
        assert!(g.get(GridCoord::new(1, -2, 3)).is_none());
        assert_eq!(g.leaf_count(), 0);
        assert_eq!(g.active_leaves().count(), 0);
    }

    #[test]
    fn set_get_round_trip() {
        let mut g = SparseGrid::new(0.1);
        let c = GridCoord::new(-9, 17, 4100);
        g.set(c, state(0.25));
        assert_eq!(g.get(c), Some(&state(0.25)));
        assert!(g.get(c.offset(1, 0, 0)).is_none());
    }

    #[test]
    fn distant_voxels_use_distinct_root_children() {
        let a = GridCoord::new(5, 5, 5);
        let b = a.offset(4096, 0, 0);
        assert_ne!(a.upper_key(), b.upper_key());
        let mut g = SparseGrid::new(0.1);
        g.set(a, state(1.0));
        g.set(b, state(2.0));
        assert_eq!(g.node_counts().upper, 2);
        assert_eq!(g.get(a).unwrap().distance, 1.0);
        assert_eq!(g.get(b).unwrap().distance, 2.0);
    }

    #[test]
    fn full_leaf_allocates_one_leaf() {
        let mut g = SparseGrid::new(0.1);
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    g.set(GridCoord::new(16 + i, -8 + j, k), state(0.0));
                }
            }
        }
        assert_eq!(
            g.node_counts(),
            NodeCounts {
                upper: 1,
                lower: 1,
                leaves: 1
            }
        );
        assert_eq!(g.voxel_count(), 512);
    }

    #[test]
    fn random_ops_match_hash_map_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = SparseGrid::new(0.05);
        let mut oracle = HashMap::new();
        for n in 0..1000 {
            let c = GridCoord::new(
                rng.random_range(-300..300),
                rng.random_range(-300..300),
                rng.random_range(-40..40),
            );
            let s = state(n as f32);
            g.set(c, s);
            oracle.insert(c, s);
            assert_eq!(g.get(c), Some(&s));
        }
        for (c, s) in &oracle {
            assert_eq!(g.get(*c), Some(s));
            assert_eq!(g.access_depth(*c), Some(3));
        }
        assert_eq!(g.voxel_count(), oracle.len());
    }

    #[test]
    fn active_tracking() {
        let mut g = SparseGrid::new(0.1);
        let coords = [
            GridCoord::new(0, 0, 0),
            GridCoord::new(1, 2, 3),
            GridCoord::new(9, 0, 0),
            GridCoord::new(-1, 0, 0),
        ];
        for c in coords {
            *g.get_or_insert(c) = state(0.0);
            g.mark_active(c.leaf_origin());
        }
        let active: Vec<_> = g.active_leaves().map(|l| l.origin()).collect();
        assert_eq!(
            active,
            vec![
                GridCoord::new(0, 0, 0),
                GridCoord::new(8, 0, 0),
                GridCoord::new(-8, 0, 0)
            ]
        );
        g.clear_active();
        assert_eq!(g.active_leaves().count(), 0);
        assert!(g.leaves().all(|l| !l.is_active()));
    }

    #[test]
    fn leaf_iteration_round_trips_coords() {
        let mut g = SparseGrid::new(0.1);
        let c = GridCoord::new(-3, 12, 7);
        g.set(c, state(0.5));
        let leaf = g.leaf(c.leaf_origin()).unwrap();
        let items: Vec<_> = leaf.iter().map(|(cc, s)| (cc, s.distance)).collect();
        assert_eq!(items, vec![(c, 0.5)]);
    }
}
