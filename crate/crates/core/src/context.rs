//! Context templates, context extraction from a [`SectionBuffer`], and
//! occurrence-counted context histograms used for training.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    CandidateList, GeometryError, Image, Pyramid, SectionBuffer, Voxel, VoxelSet,
};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("position is in section {got}, buffer is at section {expected}")]
    SectionMismatch { expected: u32, got: u32 },
    #[error("({x}, {y}, {z}) is not a candidate voxel")]
    PositionNotCandidate { x: u32, y: u32, z: u32 },
    #[error("corrupt histogram file: {0}")]
    CorruptHistogram(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Context template shapes. Model-level ablations (sigmoid output, second
/// hidden layer) share the `Fnnoc` template; see [`crate::Variant`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateVariant {
    Nnoc,
    Fnnoc,
    Fnnoc1,
    Fnnoc2,
    Fnnoc3,
}

impl TemplateVariant {
    pub const ALL: [TemplateVariant; 5] = [
        TemplateVariant::Nnoc,
        TemplateVariant::Fnnoc,
        TemplateVariant::Fnnoc1,
        TemplateVariant::Fnnoc2,
        TemplateVariant::Fnnoc3,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateVariant::Nnoc => "nnoc",
            TemplateVariant::Fnnoc => "fnnoc",
            TemplateVariant::Fnnoc1 => "fnnoc1",
            TemplateVariant::Fnnoc2 => "fnnoc2",
            TemplateVariant::Fnnoc3 => "fnnoc3",
        }
    }

    pub fn context_len(self) -> usize {
        match self {
            TemplateVariant::Nnoc | TemplateVariant::Fnnoc => 100,
            TemplateVariant::Fnnoc1 => 75,
            TemplateVariant::Fnnoc2 => 50,
            TemplateVariant::Fnnoc3 => 36,
        }
    }

    /// Whether current-section cells that were already scanned contribute
    /// their occupancy (only the sequential template does).
    pub fn reads_current_occupancy(self) -> bool {
        self == TemplateVariant::Nnoc
    }
}

impl fmt::Display for TemplateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateVariant {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|t| t.name() == lower)
            .ok_or_else(|| ContextError::UnknownVariant(s.to_string()))
    }
}

/// What a context bit reports about its cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    /// Final occupancy (cell already coded, or known empty).
    Occupancy,
    /// 1 iff the cell is a candidate of its section.
    Candidacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Offset {
    pub dx: i32,
    pub dy: i32,
    pub dz: i32,
    pub state: CellState,
}

impl Offset {
    fn image(&self) -> Image {
        match (self.dz, self.state) {
            (-2, _) => Image::Past2,
            (-1, _) => Image::Past1,
            (0, CellState::Occupancy) => Image::Current,
            (0, CellState::Candidacy) => Image::CurrentCandidacy,
            _ => Image::Next,
        }
    }
}

/// Ordered offsets of a template, ascending in `(dz, dx, dy)`. The index of
/// an offset is the index of its bit in the context vector.
pub fn template_offsets(variant: TemplateVariant) -> Vec<Offset> {
    let (dzs, reach): (&[i32], i32) = match variant {
        TemplateVariant::Nnoc | TemplateVariant::Fnnoc => (&[-2, -1, 0, 1], 2),
        TemplateVariant::Fnnoc1 => (&[-2, -1, 0], 2),
        TemplateVariant::Fnnoc2 => (&[-1, 0], 2),
        TemplateVariant::Fnnoc3 => (&[-2, -1, 0, 1], 1),
    };
    let mut out = Vec::with_capacity(variant.context_len());
    for &dz in dzs {
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                let scanned = dx < 0 || (dx == 0 && dy < 0);
                let state = match dz {
                    d if d < 0 => CellState::Occupancy,
                    0 if variant.reads_current_occupancy() && scanned => CellState::Occupancy,
                    _ => CellState::Candidacy,
                };
                out.push(Offset { dx, dy, dz, state });
            }
        }
    }
    debug_assert_eq!(out.len(), variant.context_len());
    out
}

/// Binary context, bit `k` packed at bit `k` of a `u128`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextVector {
    bits: u128,
    len: u8,
}

impl ContextVector {
    pub fn new(bits: u128, len: usize) -> Self {
        assert!(len <= 128);
        let mask = if len == 128 { u128::MAX } else { (1u128 << len) - 1 };
        ContextVector {
            bits: bits & mask,
            len: len as u8,
        }
    }

    pub fn from_bools(bools: &[bool]) -> Self {
        let bits = bools
            .iter()
            .enumerate()
            .fold(0u128, |acc, (k, &b)| acc | ((b as u128) << k));
        ContextVector::new(bits, bools.len())
    }

    pub fn bits(&self) -> u128 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, k: usize) -> bool {
        (self.bits >> k) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.bits.count_ones()
    }

    /// Indices of set bits, ascending.
    pub fn active(&self) -> impl Iterator<Item = usize> {
        let mut rest = self.bits;
        std::iter::from_fn(move || {
            if rest == 0 {
                None
            } else {
                let k = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(k)
            }
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|k| self.get(k)).collect()
    }

    /// `ceil(len / 8)` bytes, bit `k` at bit `k % 8` of byte `k / 8`.
    pub fn to_packed(&self) -> Vec<u8> {
        let n = self.len().div_ceil(8);
        self.bits.to_le_bytes()[..n].to_vec()
    }

    pub fn from_packed(bytes: &[u8], len: usize) -> Self {
        let mut buf = [0u8; 16];
        buf[..bytes.len()].copy_from_slice(bytes);
        ContextVector::new(u128::from_le_bytes(buf), len)
    }
}

/// A template with its offsets resolved to buffer images.
#[derive(Debug, Clone)]
pub struct Template {
    variant: TemplateVariant,
    offsets: Vec<Offset>,
    images: Vec<Image>,
}

impl Template {
    pub fn new(variant: TemplateVariant) -> Self {
        let offsets = template_offsets(variant);
        let images = offsets.iter().map(Offset::image).collect();
        Template {
            variant,
            offsets,
            images,
        }
    }

    pub fn variant(&self) -> TemplateVariant {
        self.variant
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Context of `(x, y, buf.z0())` without precondition checks.
    #[inline]
    pub fn extract_unchecked(&self, buf: &SectionBuffer<'_>, x: u32, y: u32) -> ContextVector {
        let (x, y) = (x as i64, y as i64);
        let mut bits = 0u128;
        for (k, (off, &image)) in self.offsets.iter().zip(&self.images).enumerate() {
            if buf.image(image).get(x + off.dx as i64, y + off.dy as i64) {
                bits |= 1u128 << k;
            }
        }
        ContextVector {
            bits,
            len: self.offsets.len() as u8,
        }
    }

    pub fn extract(&self, buf: &SectionBuffer<'_>, pos: Voxel) -> Result<ContextVector, ContextError> {
        if pos.z != buf.z0() {
            return Err(ContextError::SectionMismatch {
                expected: buf.z0(),
                got: pos.z,
            });
        }
        if !buf.is_candidate(pos.x, pos.y) {
            return Err(ContextError::PositionNotCandidate {
                x: pos.x,
                y: pos.y,
                z: pos.z,
            });
        }
        Ok(self.extract_unchecked(buf, pos.x, pos.y))
    }
}

pub fn extract_context(
    buf: &SectionBuffer<'_>,
    pos: Voxel,
    variant: TemplateVariant,
) -> Result<ContextVector, ContextError> {
    Template::new(variant).extract(buf, pos)
}

/// Runs the encoder-side scan of one resolution: every candidate, in scan
/// order, with its context and true occupancy. `occupied[i]` is the truth for
/// `candidates.entries()[i]`.
pub fn scan_contexts<F>(
    candidates: &CandidateList,
    occupied: &[bool],
    template: &Template,
    mut visit: F,
) -> Result<(), GeometryError>
where
    F: FnMut(usize, Voxel, ContextVector, bool),
{
    assert_eq!(occupied.len(), candidates.len());
    let mut buf = SectionBuffer::new(candidates);
    let mut i = 0;
    for z in candidates.sections() {
        buf.advance_to(z)?;
        for &v in buf.section() {
            let ctx = template.extract_unchecked(&buf, v.x, v.y);
            visit(i, v, ctx, occupied[i]);
            buf.record(v.x, v.y, occupied[i])?;
            i += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub zeros: u64,
    pub ones: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.zeros + self.ones
    }

    pub fn add(&mut self, bit: bool) {
        if bit {
            self.ones += 1;
        } else {
            self.zeros += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramStats {
    pub unique: usize,
    pub total: u64,
    pub ones: u64,
    pub min_occurrences: u64,
    pub max_occurrences: u64,
}

/// Unique contexts with their `(no0, no1)` occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextHistogram {
    template: TemplateVariant,
    entries: HashMap<u128, Counts>,
}

impl ContextHistogram {
    pub fn new(template: TemplateVariant) -> Self {
        ContextHistogram {
            template,
            entries: HashMap::new(),
        }
    }

    pub fn template(&self) -> TemplateVariant {
        self.template
    }

    pub fn context_len(&self) -> usize {
        self.template.context_len()
    }

    pub fn add(&mut self, ctx: ContextVector, bit: bool) {
        debug_assert_eq!(ctx.len(), self.context_len());
        self.entries.entry(ctx.bits).or_default().add(bit);
    }

    pub fn add_counts(&mut self, ctx: ContextVector, counts: Counts) {
        if counts.total() == 0 {
            return;
        }
        let e = self.entries.entry(ctx.bits).or_default();
        e.zeros += counts.zeros;
        e.ones += counts.ones;
    }

    pub fn merge(&mut self, other: &ContextHistogram) {
        assert_eq!(self.template, other.template);
        for (&bits, &c) in &other.entries {
            let e = self.entries.entry(bits).or_default();
            e.zeros += c.zeros;
            e.ones += c.ones;
        }
    }

    pub fn get(&self, ctx: &ContextVector) -> Option<Counts> {
        self.entries.get(&ctx.bits).copied()
    }

    pub fn unique(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(Counts::total).sum()
    }

    pub fn total_ones(&self) -> u64 {
        self.entries.values().map(|c| c.ones).sum()
    }

    /// Entries sorted by packed context value.
    pub fn sorted(&self) -> Vec<(ContextVector, Counts)> {
        let len = self.context_len();
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|(&bits, &c)| (ContextVector::new(bits, len), c))
            .collect();
        out.sort_unstable_by_key(|(ctx, _)| ctx.bits);
        out
    }

    pub fn stats(&self) -> HistogramStats {
        let totals = self.entries.values().map(Counts::total);
        HistogramStats {
            unique: self.unique(),
            total: self.total(),
            ones: self.total_ones(),
            min_occurrences: totals.clone().min().unwrap_or(0),
            max_occurrences: totals.max().unwrap_or(0),
        }
    }

    /// Little-endian: template id (u8), context length (u16), entry count
    /// (u64), then per entry the packed context, `no0` (u64) and `no1` (u64).
    /// Entries are written in ascending packed-context order.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&[self.template.id()])?;
        w.write_all(&(self.context_len() as u16).to_le_bytes())?;
        w.write_all(&(self.unique() as u64).to_le_bytes())?;
        for (ctx, c) in self.sorted() {
            w.write_all(&ctx.to_packed())?;
            w.write_all(&c.zeros.to_le_bytes())?;
            w.write_all(&c.ones.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ContextError> {
        let corrupt = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                ContextError::CorruptHistogram("truncated".into())
            } else {
                ContextError::Io(e)
            }
        };
        let mut head = [0u8; 11];
        r.read_exact(&mut head).map_err(corrupt)?;
        let template = TemplateVariant::from_id(head[0]).ok_or_else(|| {
            ContextError::CorruptHistogram(format!("unknown template id {}", head[0]))
        })?;
        let len = u16::from_le_bytes([head[1], head[2]]) as usize;
        if len != template.context_len() {
            return Err(ContextError::CorruptHistogram(format!(
                "context length {len} does not match template {template}"
            )));
        }
        let count = u64::from_le_bytes(head[3..11].try_into().unwrap());
        let packed = len.div_ceil(8);
        let mut hist = ContextHistogram::new(template);
        let mut rec = vec![0u8; packed + 16];
        for _ in 0..count {
            r.read_exact(&mut rec).map_err(corrupt)?;
            let ctx = ContextVector::from_packed(&rec[..packed], len);
            if ctx.to_packed() != rec[..packed] {
                return Err(ContextError::CorruptHistogram("padding bits set".into()));
            }
            let zeros = u64::from_le_bytes(rec[packed..packed + 8].try_into().unwrap());
            let ones = u64::from_le_bytes(rec[packed + 8..].try_into().unwrap());
            if zeros + ones == 0 {
                return Err(ContextError::CorruptHistogram("entry with zero count".into()));
            }
            if hist.entries.insert(ctx.bits, Counts { zeros, ones }).is_some() {
                return Err(ContextError::CorruptHistogram("duplicate context".into()));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(ContextError::CorruptHistogram("trailing bytes".into()));
        }
        Ok(hist)
    }
}

/// Simulates the encoder scan on every resolution `r >= 3` of `pyramid` and
/// counts each candidate's context against its true occupancy.
pub fn collect_training_contexts(pyramid: &Pyramid, variant: TemplateVariant) -> ContextHistogram {
    let template = Template::new(variant);
    let mut hist = ContextHistogram::new(variant);
    for r in 3..=pyramid.bitdepth() {
        let parent = pyramid.level(r - 1);
        if parent.is_empty() {
            continue;
        }
        let candidates = CandidateList::generate(parent).expect("nonempty parent");
        let occupied = candidates.occupancy(pyramid.level(r));
        scan_contexts(&candidates, &occupied, &template, |_, _, ctx, bit| {
            hist.add(ctx, bit)
        })
        .expect("true occupancies are always candidates");
    }
    hist
}

/// Histogram over several clouds, computed in parallel and merged.
pub fn collect_from_clouds(clouds: &[VoxelSet], variant: TemplateVariant) -> ContextHistogram {
    clouds
        .par_iter()
        .map(|vs| collect_training_contexts(&Pyramid::build(vs), variant))
        .reduce(
            || ContextHistogram::new(variant),
            |mut a, b| {
                a.merge(&b);
                a
            },
        )
}
