//! Fixed-width index sets.
//!
//! [`SuperpointSet`] is the unit of all lifting, tracking and merging set
//! algebra; [`PointMask`] is the point-level expansion used for IoU,
//! inclusion and evaluation. Both are bitsets whose width is fixed at
//! construction. Binary operations require equal widths and panic otherwise;
//! callers that accept untrusted widths check with [`SuperpointSet::width`]
//! first.

use fixedbitset::FixedBitSet;

macro_rules! index_set {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, Hash, Default)]
        pub struct $name(FixedBitSet);

        impl $name {
            pub fn empty(width: usize) -> Self {
                Self(FixedBitSet::with_capacity(width))
            }

            pub fn full(width: usize) -> Self {
                let mut bits = FixedBitSet::with_capacity(width);
                bits.insert_range(..);
                Self(bits)
            }

            /// Builds a set from indices; panics if an index is out of range.
            pub fn from_indices<I: IntoIterator<Item = usize>>(width: usize, indices: I) -> Self {
                let mut bits = FixedBitSet::with_capacity(width);
                for i in indices {
                    assert!(i < width, "index {i} out of range for width {width}");
                    bits.insert(i);
                }
                Self(bits)
            }

            pub fn width(&self) -> usize {
                self.0.len()
            }

            pub fn len(&self) -> usize {
                self.0.count_ones(..)
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_clear()
            }

            pub fn contains(&self, i: usize) -> bool {
                self.0.contains(i)
            }

            pub fn insert(&mut self, i: usize) {
                self.0.insert(i);
            }

            pub fn remove(&mut self, i: usize) {
                self.0.set(i, false);
            }

            pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
                self.0.ones()
            }

            pub fn to_vec(&self) -> Vec<usize> {
                self.0.ones().collect()
            }

            fn check(&self, other: &Self) {
                assert_eq!(
                    self.width(),
                    other.width(),
                    concat!(stringify!($name), " width mismatch")
                );
            }

            pub fn intersection(&self, other: &Self) -> Self {
                self.check(other);
                let mut bits = self.0.clone();
                bits.intersect_with(&other.0);
                Self(bits)
            }

            pub fn union(&self, other: &Self) -> Self {
                self.check(other);
                let mut bits = self.0.clone();
                bits.union_with(&other.0);
                Self(bits)
            }

            pub fn difference(&self, other: &Self) -> Self {
                self.check(other);
                let mut bits = self.0.clone();
                bits.difference_with(&other.0);
                Self(bits)
            }

            pub fn union_with(&mut self, other: &Self) {
                self.check(other);
                self.0.union_with(&other.0);
            }

            pub fn intersect_with(&mut self, other: &Self) {
                self.check(other);
                self.0.intersect_with(&other.0);
            }

            pub fn intersection_len(&self, other: &Self) -> usize {
                self.check(other);
                self.0.intersection_count(&other.0)
            }

            pub fn union_len(&self, other: &Self) -> usize {
                self.check(other);
                self.0.union_count(&other.0)
            }

            pub fn is_subset(&self, other: &Self) -> bool {
                self.check(other);
                self.0.is_subset(&other.0)
            }

            pub fn is_disjoint(&self, other: &Self) -> bool {
                self.check(other);
                self.0.is_disjoint(&other.0)
            }

            /// Maximal runs of consecutive members as `(start, length)` pairs.
            pub fn runs(&self) -> Vec<(u32, u32)> {
                let mut runs: Vec<(u32, u32)> = Vec::new();
                for i in self.0.ones() {
                    let i = i as u32;
                    match runs.last_mut() {
                        Some((start, len)) if *start + *len == i => *len += 1,
                        _ => runs.push((i, 1)),
                    }
                }
                runs
            }
        }

        impl std::fmt::Debug for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}[{}]{:?}", stringify!($name), self.width(), self.to_vec())
            }
        }
    };
}

index_set!(
    /// Bitset over superpoint ids `0..S`.
    SuperpointSet
);

index_set!(
    /// Bitset over point indices `0..N`.
    PointMask
);

index_set!(
    /// Bitset over row-major pixel indices `0..W*H` of one image.
    PixelSet
);

impl PointMask {
    /// |a ∩ b| / |a ∪ b|, zero when both are empty.
    pub fn iou(&self, other: &Self) -> f64 {
        let union = self.union_len(other);
        if union == 0 {
            return 0.0;
        }
        self.intersection_len(other) as f64 / union as f64
    }

    /// Fraction of `self` contained in `other`; zero for an empty `self`.
    pub fn inclusion_in(&self, other: &Self) -> f64 {
        let own = self.len();
        if own == 0 {
            return 0.0;
        }
        self.intersection_len(other) as f64 / own as f64
    }
}
