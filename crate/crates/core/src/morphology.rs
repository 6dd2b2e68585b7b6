//! The nine-element structuring set and the differentiable morphological
//! layers, plus brute-force classical binary oracles for testing.
//!
//! All layers use replicate padding so they agree with `conv3d` at the
//! volume boundary, and ties in max/min route the gradient to the lowest
//! flat index.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Real, Tensor};

#[derive(Debug, Error)]
pub enum MorphologyError {
    #[error("oracle input must be strictly binary; value {value} at flat index {index}")]
    NonBinary { index: usize, value: f32 },
    #[error("dims mismatch: {lhs:?} vs {rhs:?}")]
    DimsMismatch { lhs: (usize, usize, usize), rhs: (usize, usize, usize) },
}

/// One 3x3x3 binary structuring element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    pub mask: [[[bool; 3]; 3]; 3],
    pub name: &'static str,
}

impl StructuringElement {
    /// Support as (dz, dy, dx) offsets from the centre, in ascending scan
    /// order.
    pub fn offsets(&self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    if self.mask[dz][dy][dx] {
                        out.push([dz as i32 - 1, dy as i32 - 1, dx as i32 - 1]);
                    }
                }
            }
        }
        out
    }

    pub fn contains_center(&self) -> bool {
        self.mask[1][1][1]
    }

    pub fn is_point_symmetric(&self) -> bool {
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    if self.mask[dz][dy][dx] != self.mask[2 - dz][2 - dy][2 - dx] {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// The nine maximal discrete planes through the centre of the 3x3x3 cube:
/// three axis-aligned and six diagonal.
#[derive(Debug, Clone)]
pub struct StructuringElementSet {
    pub elements: Vec<StructuringElement>,
}

impl StructuringElementSet {
    pub fn iter(&self) -> impl Iterator<Item = &StructuringElement> {
        self.elements.iter()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Union of all supports, as offsets.
    pub fn union_offsets(&self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let covered = self.elements.iter().any(|e| {
                        e.mask[(dz + 1) as usize][(dy + 1) as usize][(dx + 1) as usize]
                    });
                    if covered {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Builds the nine planes. Each plane is the set of cube voxels satisfying
/// one linear relation through the centre; centred coordinates run over
/// `{-1, 0, 1}`.
pub fn make_elements() -> StructuringElementSet {
    // (name, predicate over centred coordinates)
    type Pred = fn(i32, i32, i32) -> bool;
    let planes: [(&'static str, Pred); 9] = [
        ("z=0", |z, _, _| z == 0),
        ("y=0", |_, y, _| y == 0),
        ("x=0", |_, _, x| x == 0),
        ("z=y", |z, y, _| z == y),
        ("z=-y", |z, y, _| z == -y),
        ("z=x", |z, _, x| z == x),
        ("z=-x", |z, _, x| z == -x),
        ("y=x", |_, y, x| y == x),
        ("y=-x", |_, y, x| y == -x),
    ];
    let elements = planes
        .iter()
        .map(|(name, pred)| {
            let mut mask = [[[false; 3]; 3]; 3];
            for (dz, plane) in mask.iter_mut().enumerate() {
                for (dy, row) in plane.iter_mut().enumerate() {
                    for (dx, v) in row.iter_mut().enumerate() {
                        *v = pred(dz as i32 - 1, dy as i32 - 1, dx as i32 - 1);
                    }
                }
            }
            StructuringElement { mask, name }
        })
        .collect();
    StructuringElementSet { elements }
}

type GraphResult = Result<Tensor, AutodiffError>;

/// Masked max pooling: per voxel, the max over the neighbourhood restricted
/// to the element's support (a dilation by `B`).
pub fn mask_pool<R: Real>(g: &mut Graph<R>, x: Tensor, elem: &StructuringElement) -> GraphResult {
    g.masked_window_max(x, &elem.offsets())
}

/// Erosion by a single element, realized as `-MaskPool(-x, B)`; evaluated
/// directly as a windowed min, which is the same function without the
/// negation nodes.
pub fn erosion_by<R: Real>(g: &mut Graph<R>, x: Tensor, elem: &StructuringElement) -> GraphResult {
    g.masked_window_min(x, &elem.offsets())
}

/// `SI(x) = max_B -MaskPool(-x, B)`: the supremum of per-element erosions.
pub fn si<R: Real>(g: &mut Graph<R>, x: Tensor, set: &StructuringElementSet) -> GraphResult {
    let eroded: Vec<Tensor> = set
        .iter()
        .map(|e| erosion_by(g, x, e))
        .collect::<Result<_, _>>()?;
    g.stack_reduce_max(&eroded)
}

/// `IS(x) = min_B MaskPool(x, B)`: the infimum of per-element dilations.
pub fn is_<R: Real>(g: &mut Graph<R>, x: Tensor, set: &StructuringElementSet) -> GraphResult {
    let dilated: Vec<Tensor> = set
        .iter()
        .map(|e| mask_pool(g, x, e))
        .collect::<Result<_, _>>()?;
    g.stack_reduce_min(&dilated)
}

/// `erosion(x) = min_B -MaskPool(-x, B)`: erosion by the union support.
pub fn erosion<R: Real>(g: &mut Graph<R>, x: Tensor, set: &StructuringElementSet) -> GraphResult {
    let eroded: Vec<Tensor> = set
        .iter()
        .map(|e| erosion_by(g, x, e))
        .collect::<Result<_, _>>()?;
    g.stack_reduce_min(&eroded)
}

/// `dilation(x) = max_B MaskPool(x, B)`: dilation by the union support.
pub fn dilation<R: Real>(g: &mut Graph<R>, x: Tensor, set: &StructuringElementSet) -> GraphResult {
    let dilated: Vec<Tensor> = set
        .iter()
        .map(|e| mask_pool(g, x, e))
        .collect::<Result<_, _>>()?;
    g.stack_reduce_max(&dilated)
}

/// Opening: erosion followed by dilation.
pub fn open<R: Real>(g: &mut Graph<R>, x: Tensor, set: &StructuringElementSet) -> GraphResult {
    let e = erosion(g, x, set)?;
    dilation(g, e, set)
}

// ---------------------------------------------------------------------------
// classical binary oracles
// ---------------------------------------------------------------------------

/// Strictly binary volume for the classical oracles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryVolume {
    pub dims: (usize, usize, usize),
    pub data: Vec<bool>,
}

impl BinaryVolume {
    pub fn new(dims: (usize, usize, usize), data: Vec<bool>) -> Self {
        assert_eq!(data.len(), dims.0 * dims.1 * dims.2);
        Self { dims, data }
    }

    pub fn from_f32(dims: (usize, usize, usize), data: &[f32]) -> Result<Self, MorphologyError> {
        let bits = data
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(MorphologyError::NonBinary { index, value: v })
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::new(dims, bits))
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    #[inline]
    fn at_clamped(&self, z: i64, y: i64, x: i64) -> bool {
        let (zd, yd, xd) = self.dims;
        let z = z.clamp(0, zd as i64 - 1) as usize;
        let y = y.clamp(0, yd as i64 - 1) as usize;
        let x = x.clamp(0, xd as i64 - 1) as usize;
        self.data[(z * yd + y) * xd + x]
    }
}

fn binary_window(
    x: &BinaryVolume,
    offsets: &[[i32; 3]],
    combine_any: bool, // true: dilation (any set), false: erosion (all set)
) -> BinaryVolume {
    let (zd, yd, xd) = x.dims;
    let mut out = vec![false; x.data.len()];
    for z in 0..zd {
        for y in 0..yd {
            for xi in 0..xd {
                let mut acc = !combine_any;
                for o in offsets {
                    let v = x.at_clamped(
                        z as i64 + o[0] as i64,
                        y as i64 + o[1] as i64,
                        xi as i64 + o[2] as i64,
                    );
                    if combine_any {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
                out[(z * yd + y) * xd + xi] = acc;
            }
        }
    }
    BinaryVolume::new(x.dims, out)
}

/// Textbook binary dilation by one element (replicate boundary, matching
/// the differentiable layers).
pub fn binary_dilate(x: &BinaryVolume, elem: &StructuringElement) -> BinaryVolume {
    binary_window(x, &elem.offsets(), true)
}

/// Textbook binary erosion by one element.
pub fn binary_erode(x: &BinaryVolume, elem: &StructuringElement) -> BinaryVolume {
    binary_window(x, &elem.offsets(), false)
}

/// Opening by one element: erosion then dilation.
pub fn binary_open(x: &BinaryVolume, elem: &StructuringElement) -> BinaryVolume {
    binary_dilate(&binary_erode(x, elem), elem)
}

/// Set-arithmetic counterparts of the layer compositions.
pub fn binary_si(x: &BinaryVolume, set: &StructuringElementSet) -> BinaryVolume {
    let mut out = vec![false; x.data.len()];
    for e in set.iter() {
        for (o, v) in out.iter_mut().zip(&binary_erode(x, e).data) {
            *o |= v;
        }
    }
    BinaryVolume::new(x.dims, out)
}

pub fn binary_is(x: &BinaryVolume, set: &StructuringElementSet) -> BinaryVolume {
    let mut out = vec![true; x.data.len()];
    for e in set.iter() {
        for (o, v) in out.iter_mut().zip(&binary_dilate(x, e).data) {
            *o &= v;
        }
    }
    BinaryVolume::new(x.dims, out)
}

pub fn binary_erosion_all(x: &BinaryVolume, set: &StructuringElementSet) -> BinaryVolume {
    binary_window(x, &set.union_offsets(), false)
}

pub fn binary_dilation_all(x: &BinaryVolume, set: &StructuringElementSet) -> BinaryVolume {
    binary_window(x, &set.union_offsets(), true)
}

pub fn binary_open_all(x: &BinaryVolume, set: &StructuringElementSet) -> BinaryVolume {
    binary_dilation_all(&binary_erosion_all(x, set), set)
}
