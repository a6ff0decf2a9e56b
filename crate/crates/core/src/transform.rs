//! The four-element flip group acting on the two trailing (spatial) axes.

use ndarray::{Array, ArrayView, Axis, Dimension};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
    Both,
}

impl Flip {
    /// `{id, H, V, HV}` in the order used for test-time augmentation.
    pub const GROUP: [Flip; 4] = [Flip::Identity, Flip::Horizontal, Flip::Vertical, Flip::Both];

    pub fn from_axes(horizontal: bool, vertical: bool) -> Self {
        match (horizontal, vertical) {
            (false, false) => Flip::Identity,
            (true, false) => Flip::Horizontal,
            (false, true) => Flip::Vertical,
            (true, true) => Flip::Both,
        }
    }

    pub fn horizontal(self) -> bool {
        matches!(self, Flip::Horizontal | Flip::Both)
    }

    pub fn vertical(self) -> bool {
        matches!(self, Flip::Vertical | Flip::Both)
    }

    /// Every element of the group is its own inverse.
    pub fn inverse(self) -> Self {
        self
    }

    /// Flip the last axis (horizontal) and/or the second-to-last (vertical).
    /// The result is always in standard layout.
    pub fn apply<A: Clone, D: Dimension>(self, a: ArrayView<A, D>) -> Array<A, D> {
        let nd = a.ndim();
        assert!(nd >= 2, "flip needs at least two axes");
        let mut v = a;
        if self.horizontal() {
            v.invert_axis(Axis(nd - 1));
        }
        if self.vertical() {
            v.invert_axis(Axis(nd - 2));
        }
        v.as_standard_layout().into_owned()
    }
}
