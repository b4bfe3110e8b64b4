//! Voxel sets, the octree pyramid, candidate generation and the sliding
//! section buffer shared by the encoder, the decoder and context collection.
//!
//! All voxel collections are kept in scan order: lexicographic on `(z, x, y)`.
//! A section is the plane of voxels sharing one `z`; inside a section rows are
//! indexed by `x` and columns by `y`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::ops::Range;

use thiserror::Error;

/// Smallest supported bit-depth (the 4x4x4 base level).
pub const MIN_BITDEPTH: u8 = 2;
/// Largest supported bit-depth.
pub const MAX_BITDEPTH: u8 = 16;
/// Section images up to this bit-depth are dense bit grids, above it hashed.
pub const DENSE_MAX_BITDEPTH: u8 = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("point ({x}, {y}, {z}) is outside the [0, 2^{bitdepth}) cube")]
    CoordinateOutOfRange { x: i64, y: i64, z: i64, bitdepth: u8 },
    #[error("bit-depth {0} is not in [2, 16]")]
    BitdepthUnsupported(u8),
    #[error("cannot downsample below bit-depth 2")]
    BitdepthUnderflow,
    #[error("candidate generation needs a nonempty parent set")]
    EmptyParent,
    #[error("occupied voxel ({x}, {y}) in section {z} is not a candidate")]
    OccupancyOutsideCandidates { x: u32, y: u32, z: u32 },
    #[error("section {z} has {expected} candidates but {recorded} were recorded")]
    SectionIncomplete {
        z: u32,
        recorded: usize,
        expected: usize,
    },
}

/// Integer voxel coordinate. Ordered by scan order `(z, x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Voxel {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Voxel {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Voxel { x, y, z }
    }

    #[inline]
    pub fn scan_key(&self) -> (u32, u32, u32) {
        (self.z, self.x, self.y)
    }

    #[inline]
    pub fn parent(&self) -> Voxel {
        Voxel::new(self.x >> 1, self.y >> 1, self.z >> 1)
    }

    /// The eight children at the next resolution, in scan order.
    pub fn children(&self) -> [Voxel; 8] {
        let (x, y, z) = (self.x << 1, self.y << 1, self.z << 1);
        let mut out = [Voxel::new(0, 0, 0); 8];
        let mut i = 0;
        for dz in 0..2 {
            for dx in 0..2 {
                for dy in 0..2 {
                    out[i] = Voxel::new(x + dx, y + dy, z + dz);
                    i += 1;
                }
            }
        }
        out
    }
}

impl Ord for Voxel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.scan_key().cmp(&other.scan_key())
    }
}

impl PartialOrd for Voxel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl From<(u32, u32, u32)> for Voxel {
    fn from((x, y, z): (u32, u32, u32)) -> Self {
        Voxel::new(x, y, z)
    }
}

fn check_bitdepth(bitdepth: u8) -> Result<(), GeometryError> {
    if (MIN_BITDEPTH..=MAX_BITDEPTH).contains(&bitdepth) {
        Ok(())
    } else {
        Err(GeometryError::BitdepthUnsupported(bitdepth))
    }
}

/// Deduplicated voxels of one resolution, stored in scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelSet {
    bitdepth: u8,
    voxels: Vec<Voxel>,
}

impl VoxelSet {
    /// Validates coordinates against `[0, 2^bitdepth)` and removes duplicates.
    pub fn voxelize<I>(points: I, bitdepth: u8) -> Result<Self, GeometryError>
    where
        I: IntoIterator<Item = [i64; 3]>,
    {
        check_bitdepth(bitdepth)?;
        let side = 1i64 << bitdepth;
        let mut voxels = Vec::new();
        for [x, y, z] in points {
            if !(0..side).contains(&x) || !(0..side).contains(&y) || !(0..side).contains(&z) {
                return Err(GeometryError::CoordinateOutOfRange { x, y, z, bitdepth });
            }
            voxels.push(Voxel::new(x as u32, y as u32, z as u32));
        }
        Ok(Self::from_unsorted(bitdepth, voxels))
    }

    pub fn from_voxels<I>(voxels: I, bitdepth: u8) -> Result<Self, GeometryError>
    where
        I: IntoIterator<Item = Voxel>,
    {
        Self::voxelize(
            voxels
                .into_iter()
                .map(|v| [v.x as i64, v.y as i64, v.z as i64]),
            bitdepth,
        )
    }

    pub fn empty(bitdepth: u8) -> Result<Self, GeometryError> {
        check_bitdepth(bitdepth)?;
        Ok(VoxelSet {
            bitdepth,
            voxels: Vec::new(),
        })
    }

    // Callers guarantee coordinates are in range.
    fn from_unsorted(bitdepth: u8, mut voxels: Vec<Voxel>) -> Self {
        voxels.sort_unstable();
        voxels.dedup();
        VoxelSet { bitdepth, voxels }
    }

    pub fn bitdepth(&self) -> u8 {
        self.bitdepth
    }

    pub fn side(&self) -> u32 {
        1 << self.bitdepth
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Voxels in scan order.
    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn iter(&self) -> impl Iterator<Item = &Voxel> {
        self.voxels.iter()
    }

    pub fn contains(&self, v: &Voxel) -> bool {
        self.voxels.binary_search(v).is_ok()
    }

    /// Floor-halves every coordinate; siblings merge.
    pub fn downsample(&self) -> Result<VoxelSet, GeometryError> {
        if self.bitdepth <= MIN_BITDEPTH {
            return Err(GeometryError::BitdepthUnderflow);
        }
        let parents = self.voxels.iter().map(Voxel::parent).collect();
        Ok(Self::from_unsorted(self.bitdepth - 1, parents))
    }
}

/// The cloud at every resolution from 2 up to its native bit-depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pyramid {
    levels: Vec<VoxelSet>,
}

impl Pyramid {
    pub fn build(vs: &VoxelSet) -> Self {
        let mut levels = vec![vs.clone()];
        while levels.last().unwrap().bitdepth() > MIN_BITDEPTH {
            let next = levels.last().unwrap().downsample().unwrap();
            levels.push(next);
        }
        levels.reverse();
        Pyramid { levels }
    }

    /// Top (native) bit-depth.
    pub fn bitdepth(&self) -> u8 {
        self.levels.last().unwrap().bitdepth()
    }

    /// Level at bit-depth `r`; panics when `r` is outside `2..=bitdepth()`.
    pub fn level(&self, r: u8) -> &VoxelSet {
        &self.levels[(r - MIN_BITDEPTH) as usize]
    }

    pub fn levels(&self) -> &[VoxelSet] {
        &self.levels
    }

    pub fn full(&self) -> &VoxelSet {
        self.levels.last().unwrap()
    }
}

/// Sequence of `VoxelSet`s for `r = 2..=R`; element `R` is the input.
pub fn build_pyramid(vs: &VoxelSet) -> Vec<VoxelSet> {
    Pyramid::build(vs).levels
}

/// Candidate voxels of one resolution: all children of the parent level,
/// sorted in scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateList {
    bitdepth: u8,
    entries: Vec<Voxel>,
}

impl CandidateList {
    pub fn generate(parent: &VoxelSet) -> Result<Self, GeometryError> {
        if parent.is_empty() {
            return Err(GeometryError::EmptyParent);
        }
        let bitdepth = parent.bitdepth() + 1;
        check_bitdepth(bitdepth)?;
        let mut entries: Vec<Voxel> = parent.iter().flat_map(Voxel::children).collect();
        entries.sort_unstable();
        Ok(CandidateList { bitdepth, entries })
    }

    pub fn bitdepth(&self) -> u8 {
        self.bitdepth
    }

    pub fn side(&self) -> u32 {
        1 << self.bitdepth
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Voxel] {
        &self.entries
    }

    /// Index range of the candidates lying in section `z`.
    pub fn section_range(&self, z: u32) -> Range<usize> {
        let start = self.entries.partition_point(|v| v.z < z);
        let end = start + self.entries[start..].partition_point(|v| v.z == z);
        start..end
    }

    pub fn section(&self, z: u32) -> &[Voxel] {
        &self.entries[self.section_range(z)]
    }

    /// Strictly increasing `z` values holding at least one candidate.
    pub fn sections(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for v in &self.entries {
            if out.last() != Some(&v.z) {
                out.push(v.z);
            }
        }
        out
    }

    /// Per-candidate membership in `truth` (which must be at the same bit-depth).
    pub fn occupancy(&self, truth: &VoxelSet) -> Vec<bool> {
        debug_assert_eq!(truth.bitdepth(), self.bitdepth);
        let occupied = truth.voxels();
        let mut j = 0;
        self.entries
            .iter()
            .map(|c| {
                while j < occupied.len() && occupied[j] < *c {
                    j += 1;
                }
                j < occupied.len() && occupied[j] == *c
            })
            .collect()
    }

    /// Candidate positions as a voxel set at the candidate bit-depth.
    pub fn to_voxel_set(&self) -> VoxelSet {
        VoxelSet {
            bitdepth: self.bitdepth,
            voxels: self.entries.clone(),
        }
    }
}

pub fn gen_candidates(parent: &VoxelSet) -> Result<CandidateList, GeometryError> {
    CandidateList::generate(parent)
}

pub fn sections_with_candidates(cl: &CandidateList) -> Vec<u32> {
    cl.sections()
}

#[derive(Debug, Clone)]
enum Cells {
    Dense { words: Vec<u64>, dirty: Vec<usize> },
    Sparse(HashSet<u64>),
}

/// Binary image of one `2^r x 2^r` section. Reads outside the image are 0.
#[derive(Debug, Clone)]
pub struct Plane {
    side: u32,
    cells: Cells,
}

impl Plane {
    pub fn new(bitdepth: u8) -> Self {
        let side = 1u32 << bitdepth;
        let cells = if bitdepth <= DENSE_MAX_BITDEPTH {
            let n = (side as usize * side as usize).div_ceil(64);
            Cells::Dense {
                words: vec![0; n],
                dirty: Vec::new(),
            }
        } else {
            Cells::Sparse(HashSet::new())
        };
        Plane { side, cells }
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> u64 {
        x as u64 * self.side as u64 + y as u64
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> bool {
        let side = self.side as i64;
        if x < 0 || y < 0 || x >= side || y >= side {
            return false;
        }
        let i = self.index(x as u32, y as u32);
        match &self.cells {
            Cells::Dense { words, .. } => (words[(i >> 6) as usize] >> (i & 63)) & 1 == 1,
            Cells::Sparse(set) => set.contains(&i),
        }
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        match &mut self.cells {
            Cells::Dense { words, dirty } => {
                let w = (i >> 6) as usize;
                let mask = 1u64 << (i & 63);
                if value {
                    if words[w] == 0 {
                        dirty.push(w);
                    }
                    words[w] |= mask;
                } else {
                    words[w] &= !mask;
                }
            }
            Cells::Sparse(set) => {
                if value {
                    set.insert(i);
                } else {
                    set.remove(&i);
                }
            }
        }
    }

    pub fn clear(&mut self) {
        match &mut self.cells {
            Cells::Dense { words, dirty } => {
                for w in dirty.drain(..) {
                    words[w] = 0;
                }
            }
            Cells::Sparse(set) => set.clear(),
        }
    }

    /// Set positions as `(x, y)`, sorted.
    pub fn positions(&self) -> Vec<(u32, u32)> {
        let side = self.side as u64;
        let mut idx: Vec<u64> = match &self.cells {
            Cells::Dense { words, dirty } => {
                let mut ws = dirty.clone();
                ws.sort_unstable();
                ws.dedup();
                ws.into_iter()
                    .flat_map(|w| {
                        let word = words[w];
                        (0..64)
                            .filter(move |b| (word >> b) & 1 == 1)
                            .map(move |b| (w as u64) * 64 + b)
                    })
                    .collect()
            }
            Cells::Sparse(set) => set.iter().copied().collect(),
        };
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| ((i / side) as u32, (i % side) as u32))
            .collect()
    }
}

impl PartialEq for Plane {
    fn eq(&self, other: &Self) -> bool {
        self.side == other.side && self.positions() == other.positions()
    }
}

/// Which image of the buffer to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Image {
    /// Final occupancy of section `z0 - 2`.
    Past2,
    /// Final occupancy of section `z0 - 1`.
    Past1,
    /// Section `z0`: occupancy where already recorded, candidacy elsewhere.
    Current,
    /// Candidacy of section `z0`.
    CurrentCandidacy,
    /// Candidacy of section `z0 + 1`.
    Next,
}

/// Decoding state around the current section `z0`.
///
/// Single writer: the scan records occupancies of section `z0` in scan order
/// and then advances. Both past images hold final occupancies only.
#[derive(Debug, Clone)]
pub struct SectionBuffer<'a> {
    candidates: &'a CandidateList,
    z0: u32,
    past2: Plane,
    past1: Plane,
    current: Plane,
    current_candidacy: Plane,
    next: Plane,
    recorded: usize,
    section_len: usize,
}

impl<'a> SectionBuffer<'a> {
    /// Buffer at section 0 with empty history.
    pub fn new(candidates: &'a CandidateList) -> Self {
        Self::with_history(candidates, 0, &[])
    }

    /// Buffer at `z0` whose past images are filled from `occupied`
    /// (only voxels in sections `z0 - 2` and `z0 - 1` are used).
    pub fn with_history(candidates: &'a CandidateList, z0: u32, occupied: &[Voxel]) -> Self {
        let r = candidates.bitdepth();
        let mut buf = SectionBuffer {
            candidates,
            z0,
            past2: Plane::new(r),
            past1: Plane::new(r),
            current: Plane::new(r),
            current_candidacy: Plane::new(r),
            next: Plane::new(r),
            recorded: 0,
            section_len: 0,
        };
        for v in occupied {
            if z0 >= 2 && v.z == z0 - 2 {
                buf.past2.set(v.x, v.y, true);
            } else if z0 >= 1 && v.z == z0 - 1 {
                buf.past1.set(v.x, v.y, true);
            }
        }
        buf.section_len = fill_candidacy(&mut buf.current, candidates, z0);
        fill_candidacy(&mut buf.current_candidacy, candidates, z0);
        fill_candidacy(&mut buf.next, candidates, z0 + 1);
        buf
    }

    pub fn z0(&self) -> u32 {
        self.z0
    }

    pub fn bitdepth(&self) -> u8 {
        self.candidates.bitdepth()
    }

    pub fn candidates(&self) -> &'a CandidateList {
        self.candidates
    }

    /// Candidates of the current section, in scan order.
    pub fn section(&self) -> &'a [Voxel] {
        self.candidates.section(self.z0)
    }

    #[inline]
    pub fn image(&self, which: Image) -> &Plane {
        match which {
            Image::Past2 => &self.past2,
            Image::Past1 => &self.past1,
            Image::Current => &self.current,
            Image::CurrentCandidacy => &self.current_candidacy,
            Image::Next => &self.next,
        }
    }

    pub fn is_candidate(&self, x: u32, y: u32) -> bool {
        self.current_candidacy.get(x as i64, y as i64)
    }

    /// Saves the true occupancy of candidate `(x, y, z0)`. Each candidate of
    /// the section must be recorded exactly once before `advance`.
    pub fn record(&mut self, x: u32, y: u32, occupied: bool) -> Result<(), GeometryError> {
        if !self.is_candidate(x, y) {
            if occupied {
                return Err(GeometryError::OccupancyOutsideCandidates { x, y, z: self.z0 });
            }
            return Ok(());
        }
        self.current.set(x, y, occupied);
        self.recorded += 1;
        Ok(())
    }

    /// Slides up by one section after every candidate of `z0` was recorded.
    pub fn advance(&mut self) -> Result<(), GeometryError> {
        if self.recorded != self.section_len {
            return Err(GeometryError::SectionIncomplete {
                z: self.z0,
                recorded: self.recorded,
                expected: self.section_len,
            });
        }
        self.rotate();
        Ok(())
    }

    /// Replaces the current section's image with `decoded` occupancy and
    /// slides up by one section.
    pub fn advance_with(&mut self, decoded: &[(u32, u32)]) -> Result<(), GeometryError> {
        if let Some(&(x, y)) = decoded.iter().find(|&&(x, y)| !self.is_candidate(x, y)) {
            return Err(GeometryError::OccupancyOutsideCandidates { x, y, z: self.z0 });
        }
        for v in self.section() {
            self.current.set(v.x, v.y, false);
        }
        for &(x, y) in decoded {
            self.current.set(x, y, true);
        }
        self.rotate();
        Ok(())
    }

    /// Advances over candidate-free sections until `z0 == z`.
    pub fn advance_to(&mut self, z: u32) -> Result<(), GeometryError> {
        while self.z0 < z {
            self.advance()?;
        }
        Ok(())
    }

    fn rotate(&mut self) {
        let z1 = self.z0 + 1;
        let mut recycled_a = std::mem::replace(&mut self.past2, Plane::new(0));
        let mut recycled_b = std::mem::replace(&mut self.current_candidacy, Plane::new(0));
        self.past2 = std::mem::replace(&mut self.past1, Plane::new(0));
        self.past1 = std::mem::replace(&mut self.current, Plane::new(0));
        self.current_candidacy = std::mem::replace(&mut self.next, Plane::new(0));

        recycled_a.clear();
        self.section_len = fill_candidacy(&mut recycled_a, self.candidates, z1);
        self.current = recycled_a;

        recycled_b.clear();
        fill_candidacy(&mut recycled_b, self.candidates, z1 + 1);
        self.next = recycled_b;

        self.z0 = z1;
        self.recorded = 0;
    }
}

impl PartialEq for SectionBuffer<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.z0 == other.z0
            && self.past2 == other.past2
            && self.past1 == other.past1
            && self.current == other.current
            && self.current_candidacy == other.current_candidacy
            && self.next == other.next
    }
}

fn fill_candidacy(plane: &mut Plane, candidates: &CandidateList, z: u32) -> usize {
    if z >= candidates.side() {
        return 0;
    }
    let section = candidates.section(z);
    for v in section {
        plane.set(v.x, v.y, true);
    }
    section.len()
}
