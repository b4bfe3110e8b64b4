//! Resolution-by-resolution occupancy coding and the bitstream container.
//!
//! The 4x4x4 level is stored raw in 64 bits. Every finer level `r` codes the
//! occupancy of each candidate (child of an occupied voxel at `r - 1`) in
//! scan order, with probabilities from the model evaluated on the context
//! of the candidate. Each level has its own range coder stream. See
//! `docs/bitstream.md` for the byte layout.

use thiserror::Error;

use crate::context::{ContextVector, Template};
use crate::entropy::{self, Decoder, Encoder, EntropyError, QuantizedDist};
use crate::geometry::{CandidateList, GeometryError, Pyramid, SectionBuffer, Voxel, VoxelSet};
use crate::model::{quantize, Model, ModelError, OutputArch};
use crate::variant::Variant;

pub const MAGIC: &[u8; 8] = b"NNOCBST1";
pub const FORMAT_VERSION: u8 = 1;
/// Bytes before the base block.
pub const HEADER_BYTES: usize = 28;
const BASE_DEPTH: u8 = 2;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("expected a voxel set of bit depth 2, got {0}")]
    WrongBitdepth(u8),
    #[error("model is for variant {model}, stream or request uses {requested}")]
    ModelVariantMismatch { model: Variant, requested: Variant },
    #[error("stream was coded with model {stream:016x}, loaded model is {model:016x}")]
    HashMismatch { stream: u64, model: u64 },
    #[error("corrupt stream: {0}")]
    StreamCorrupt(String),
    #[error("unsupported stream format version {0}")]
    UnsupportedVersion(u8),
    #[error("section mask at resolution {r} disagrees with the candidates")]
    MaskInconsistent { r: u8 },
    #[error("cannot compute bits per voxel of an empty cloud")]
    EmptyCloud,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<EntropyError> for CodecError {
    fn from(e: EntropyError) -> Self {
        CodecError::StreamCorrupt(e.to_string())
    }
}

/// Bit `z * 16 + x * 4 + y` is set iff voxel `(x, y, z)` is occupied.
pub fn encode_base(vs: &VoxelSet) -> Result<u64, CodecError> {
    if vs.bitdepth() != BASE_DEPTH {
        return Err(CodecError::WrongBitdepth(vs.bitdepth()));
    }
    Ok(vs
        .iter()
        .fold(0u64, |acc, v| acc | 1 << (v.z * 16 + v.x * 4 + v.y)))
}

pub fn decode_base(block: u64) -> VoxelSet {
    let voxels = (0..64u32)
        .filter(|i| block >> i & 1 == 1)
        .map(|i| Voxel::new(i / 4 % 4, i % 4, i / 16));
    VoxelSet::from_voxels(voxels, BASE_DEPTH).expect("base coordinates are in range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub variant: Variant,
    pub arch: OutputArch,
    pub bitdepth: u8,
    /// Occupied voxels at full resolution.
    pub voxel_count: u64,
    pub model_hash: u64,
}

/// Coded data of one resolution `r >= 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSegment {
    pub r: u8,
    /// Run-length coded flags, one per section `z in 0..2^r`, set where the
    /// section holds candidates.
    pub mask: Vec<u8>,
    /// Range coder output for the occupancy of every candidate.
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub base: u64,
    pub levels: Vec<LevelSegment>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(h.variant.id());
        out.push(h.arch.id());
        out.push(h.bitdepth);
        out.extend_from_slice(&h.voxel_count.to_le_bytes());
        out.extend_from_slice(&h.model_hash.to_le_bytes());
        out.extend_from_slice(&self.base.to_le_bytes());
        for level in &self.levels {
            out.extend_from_slice(&(level.mask.len() as u32).to_le_bytes());
            out.extend_from_slice(&level.mask);
            out.extend_from_slice(&(level.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&level.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let corrupt = |m: &str| CodecError::StreamCorrupt(m.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| corrupt("truncated magic"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let fixed = cur.take(4).ok_or_else(|| corrupt("truncated header"))?;
        if fixed[0] != FORMAT_VERSION {
            return Err(CodecError::UnsupportedVersion(fixed[0]));
        }
        let variant = Variant::from_id(fixed[1]).ok_or_else(|| corrupt("unknown variant"))?;
        let arch = OutputArch::from_id(fixed[2]).ok_or_else(|| corrupt("unknown arch"))?;
        let bitdepth = fixed[3];
        if !(BASE_DEPTH..=crate::geometry::MAX_BITDEPTH).contains(&bitdepth) {
            return Err(corrupt("bit depth out of range"));
        }
        let voxel_count = cur.u64().ok_or_else(|| corrupt("truncated header"))?;
        let model_hash = cur.u64().ok_or_else(|| corrupt("truncated header"))?;
        let base = cur.u64().ok_or_else(|| corrupt("truncated base block"))?;
        let mut levels = Vec::new();
        for r in BASE_DEPTH + 1..=bitdepth {
            let mut segment = || -> Option<Vec<u8>> {
                let n = cur.u32()? as usize;
                cur.take(n).map(<[u8]>::to_vec)
            };
            let mask = segment().ok_or_else(|| corrupt("truncated section mask"))?;
            let payload = segment().ok_or_else(|| corrupt("truncated payload"))?;
            levels.push(LevelSegment { r, mask, payload });
        }
        if cur.pos != bytes.len() {
            return Err(corrupt("trailing bytes after last resolution"));
        }
        Ok(Bitstream {
            header: Header {
                variant,
                arch,
                bitdepth,
                voxel_count,
                model_hash,
            },
            base,
            levels,
        })
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + 8 + self.levels.iter().map(|l| 8 + l.mask.len() + l.payload.len()).sum::<usize>()
    }

    /// Base block, masks and payloads, without the header and length fields.
    pub fn content_bytes(&self) -> usize {
        8 + self.levels.iter().map(|l| l.mask.len() + l.payload.len()).sum::<usize>()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// One coded decision as seen by the encoder or decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub r: u8,
    pub pos: Voxel,
    pub context: ContextVector,
    /// Model output before quantization.
    pub p1: f32,
    pub dist: QuantizedDist,
    pub bit: bool,
}

/// `sum(-log2 q(bit))` over traced decisions at the coding distributions.
pub fn ideal_codelength<'a>(trace: impl IntoIterator<Item = &'a TraceEntry>) -> f64 {
    trace.into_iter().map(|t| t.dist.cost(t.bit)).sum()
}

fn section_mask(cl: &CandidateList) -> Vec<bool> {
    let mut mask = vec![false; cl.side() as usize];
    for z in cl.sections() {
        mask[z as usize] = true;
    }
    mask
}

fn check_variant(model: &Model, requested: Variant) -> Result<(), CodecError> {
    if model.variant() != requested {
        return Err(CodecError::ModelVariantMismatch {
            model: model.variant(),
            requested,
        });
    }
    Ok(())
}

pub fn encode(vs: &VoxelSet, model: &Model, variant: Variant) -> Result<Bitstream, CodecError> {
    encode_inner(vs, model, variant, None)
}

/// `encode`, also returning every coded decision in coding order.
pub fn encode_traced(
    vs: &VoxelSet,
    model: &Model,
    variant: Variant,
) -> Result<(Bitstream, Vec<TraceEntry>), CodecError> {
    let mut trace = Vec::new();
    let bs = encode_inner(vs, model, variant, Some(&mut trace))?;
    Ok((bs, trace))
}

fn encode_inner(
    vs: &VoxelSet,
    model: &Model,
    variant: Variant,
    mut trace: Option<&mut Vec<TraceEntry>>,
) -> Result<Bitstream, CodecError> {
    check_variant(model, variant)?;
    if vs.is_empty() {
        return Err(CodecError::EmptyCloud);
    }
    let pyramid = Pyramid::build(vs);
    let template = Template::new(variant.template());
    let mut levels = Vec::new();
    for r in BASE_DEPTH + 1..=vs.bitdepth() {
        let cl = CandidateList::generate(pyramid.level(r - 1))?;
        let truth = cl.occupancy(pyramid.level(r));
        // The encoder knows every occupancy, so all contexts of the level
        // can be formed up front and evaluated in one batch.
        let mut contexts = Vec::with_capacity(cl.len());
        crate::context::scan_contexts(&cl, &truth, &template, |_, _, ctx, _| contexts.push(ctx))?;
        let probs = model.forward(&contexts)?;
        let mut enc = Encoder::new();
        for (i, (&p1, &bit)) in probs.iter().zip(&truth).enumerate() {
            let dist = quantize(p1);
            enc.encode(bit, dist);
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceEntry {
                    r,
                    pos: cl.entries()[i],
                    context: contexts[i],
                    p1,
                    dist,
                    bit,
                });
            }
        }
        levels.push(LevelSegment {
            r,
            mask: entropy::rle_encode(&section_mask(&cl)),
            payload: enc.finish(),
        });
    }
    Ok(Bitstream {
        header: Header {
            variant,
            arch: variant.arch(),
            bitdepth: vs.bitdepth(),
            voxel_count: vs.len() as u64,
            model_hash: model.content_hash(),
        },
        base: encode_base(pyramid.level(BASE_DEPTH))?,
        levels,
    })
}

pub fn decode(bs: &Bitstream, model: &Model) -> Result<VoxelSet, CodecError> {
    decode_inner(bs, model, None)
}

/// `decode`, also returning every decoded decision in decoding order.
pub fn decode_traced(bs: &Bitstream, model: &Model) -> Result<(VoxelSet, Vec<TraceEntry>), CodecError> {
    let mut trace = Vec::new();
    let vs = decode_inner(bs, model, Some(&mut trace))?;
    Ok((vs, trace))
}

fn decode_inner(
    bs: &Bitstream,
    model: &Model,
    mut trace: Option<&mut Vec<TraceEntry>>,
) -> Result<VoxelSet, CodecError> {
    let h = &bs.header;
    check_variant(model, h.variant)?;
    if h.arch != h.variant.arch() {
        return Err(CodecError::StreamCorrupt("arch does not match variant".into()));
    }
    let model_hash = model.content_hash();
    if h.model_hash != model_hash {
        return Err(CodecError::HashMismatch {
            stream: h.model_hash,
            model: model_hash,
        });
    }
    let expected_levels = (h.bitdepth - BASE_DEPTH) as usize;
    if bs.levels.len() != expected_levels
        || bs.levels.iter().zip(BASE_DEPTH + 1..).any(|(l, r)| l.r != r)
    {
        return Err(CodecError::StreamCorrupt("resolution segments out of order".into()));
    }

    let template = Template::new(h.variant.template());
    if h.voxel_count == 0 || bs.base == 0 {
        return Err(CodecError::StreamCorrupt("stream holds no voxels".into()));
    }
    let mut current = decode_base(bs.base);
    for level in &bs.levels {
        let cl = CandidateList::generate(&current)
            .map_err(|_| CodecError::StreamCorrupt(format!("no voxels left at resolution {}", level.r)))?;
        let mask = entropy::rle_decode(&level.mask, cl.side() as usize)?;
        if mask != section_mask(&cl) {
            return Err(CodecError::MaskInconsistent { r: level.r });
        }
        let mut dec = Decoder::new(&level.payload)?;
        let mut buf = SectionBuffer::new(&cl);
        let mut occupied = Vec::new();
        let mut batch = Vec::new();
        for z in cl.sections() {
            buf.advance_to(z)?;
            let section = buf.section();
            if h.variant.is_section_parallel() {
                // No context of this section reads its occupancy, so the
                // whole section is evaluated before any bit is decoded.
                batch.clear();
                batch.extend(section.iter().map(|v| template.extract_unchecked(&buf, v.x, v.y)));
                let probs = model.forward(&batch)?;
                for ((v, ctx), p1) in section.iter().zip(&batch).zip(probs) {
                    let dist = quantize(p1);
                    let bit = dec.decode(dist)?;
                    buf.record(v.x, v.y, bit)?;
                    if bit {
                        occupied.push(*v);
                    }
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(TraceEntry { r: level.r, pos: *v, context: *ctx, p1, dist, bit });
                    }
                }
            } else {
                for v in section {
                    let ctx = template.extract_unchecked(&buf, v.x, v.y);
                    let p1 = model.forward(std::slice::from_ref(&ctx))?[0];
                    let dist = quantize(p1);
                    let bit = dec.decode(dist)?;
                    buf.record(v.x, v.y, bit)?;
                    if bit {
                        occupied.push(*v);
                    }
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(TraceEntry { r: level.r, pos: *v, context: ctx, p1, dist, bit });
                    }
                }
            }
        }
        current = VoxelSet::from_voxels(occupied, level.r)?;
    }
    if current.len() as u64 != h.voxel_count {
        return Err(CodecError::StreamCorrupt(format!(
            "decoded {} voxels, header declares {}",
            current.len(),
            h.voxel_count
        )));
    }
    Ok(current)
}

/// Bits per occupied voxel, with and without the container overhead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bpov {
    pub voxels: u64,
    pub total_bits: u64,
    pub content_bits: u64,
    /// All bytes of the stream.
    pub total: f64,
    /// Base block, masks and payloads only.
    pub content: f64,
}

pub fn bits_per_voxel(bits: u64, voxels: u64) -> Result<f64, CodecError> {
    if voxels == 0 {
        return Err(CodecError::EmptyCloud);
    }
    Ok(bits as f64 / voxels as f64)
}

pub fn bpov(bs: &Bitstream, vs: &VoxelSet) -> Result<Bpov, CodecError> {
    let voxels = vs.len() as u64;
    let total_bits = 8 * bs.total_bytes() as u64;
    let content_bits = 8 * bs.content_bytes() as u64;
    Ok(Bpov {
        voxels,
        total_bits,
        content_bits,
        total: bits_per_voxel(total_bits, voxels)?,
        content: bits_per_voxel(content_bits, voxels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vs(points: &[[i64; 3]], r: u8) -> VoxelSet {
        VoxelSet::voxelize(points.iter().copied(), r).unwrap()
    }

    #[test]
    fn base_block_examples() {
        assert_eq!(encode_base(&vs(&[[0, 0, 0]], 2)).unwrap(), 1);
        let full: Vec<[i64; 3]> = (0..64).map(|i| [i / 4 % 4, i % 4, i / 16]).collect();
        assert_eq!(encode_base(&vs(&full, 2)).unwrap(), u64::MAX);
        assert_eq!(encode_base(&VoxelSet::empty(2).unwrap()).unwrap(), 0);
        assert_eq!(encode_base(&vs(&[[1, 2, 3]], 2)).unwrap(), 1 << (3 * 16 + 4 + 2));
        for block in [0, 1, u64::MAX, 0xDEAD_BEEF_0123_4567] {
            assert_eq!(encode_base(&decode_base(block)).unwrap(), block);
        }
        assert!(matches!(
            encode_base(&vs(&[[0, 0, 0]], 3)),
            Err(CodecError::WrongBitdepth(3))
        ));
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let model = Model::uniform(Variant::Nnoc);
        assert!(matches!(
            encode(&VoxelSet::empty(4).unwrap(), &model, Variant::Nnoc),
            Err(CodecError::EmptyCloud)
        ));
    }

    #[test]
    fn depth_two_stream_is_header_and_base() {
        let cloud = vs(&[[1, 1, 1], [3, 0, 2]], 2);
        let model = Model::uniform(Variant::Nnoc);
        let bs = encode(&cloud, &model, Variant::Nnoc).unwrap();
        assert!(bs.levels.is_empty());
        assert_eq!(bs.to_bytes().len(), HEADER_BYTES + 8);
        assert_eq!(decode(&bs, &model).unwrap(), cloud);
    }

    #[test]
    fn single_voxel_codes_eight_decisions() {
        let cloud = vs(&[[5, 2, 7]], 3);
        let model = Model::uniform(Variant::Fnnoc);
        let (bs, trace) = encode_traced(&cloud, &model, Variant::Fnnoc).unwrap();
        assert_eq!(bs.base.count_ones(), 1);
        assert_eq!(trace.len(), 8);
        assert_eq!(trace.iter().filter(|t| t.bit).count(), 1);
        assert_eq!(decode(&bs, &model).unwrap(), cloud);
    }

    #[test]
    fn round_trip_every_variant() {
        let cloud = vs(
            &[[0, 0, 0], [1, 0, 0], [9, 9, 9], [10, 9, 9], [15, 15, 0], [3, 12, 7], [4, 12, 7]],
            4,
        );
        for v in Variant::ALL {
            for model in [Model::uniform(v), Model::init(v, 5)] {
                let bs = encode(&cloud, &model, v).unwrap();
                let bytes = bs.to_bytes();
                let back = Bitstream::from_bytes(&bytes).unwrap();
                assert_eq!(back, bs);
                let (out, dec_trace) = decode_traced(&back, &model).unwrap();
                assert_eq!(out, cloud, "variant {v}");
                let (_, enc_trace) = encode_traced(&cloud, &model, v).unwrap();
                assert_eq!(enc_trace, dec_trace);
            }
        }
    }

    #[test]
    fn sibling_pair_feeds_first_bit_into_second_context() {
        // Two occupied siblings: (0,0,0) and (0,1,0). Under NNOC the context
        // of (0,1,0) reads the just-decoded occupancy of (0,0,0).
        let cloud = vs(&[[0, 0, 0], [0, 1, 0]], 3);
        let model = Model::init(Variant::Nnoc, 2);
        let (bs, enc) = encode_traced(&cloud, &model, Variant::Nnoc).unwrap();
        let (_, dec) = decode_traced(&bs, &model).unwrap();
        assert_eq!(enc, dec);
        let second = dec.iter().find(|t| t.pos == Voxel::new(0, 1, 0)).unwrap();
        let offsets = Template::new(Variant::Nnoc.template());
        let k = offsets
            .offsets()
            .iter()
            .position(|o| (o.dx, o.dy, o.dz) == (0, -1, 0))
            .unwrap();
        assert!(second.context.get(k));
    }

    #[test]
    fn model_checks() {
        let cloud = vs(&[[1, 2, 3]], 3);
        let model = Model::init(Variant::Fnnoc, 1);
        assert!(matches!(
            encode(&cloud, &model, Variant::Nnoc),
            Err(CodecError::ModelVariantMismatch { .. })
        ));
        let bs = encode(&cloud, &model, Variant::Fnnoc).unwrap();
        assert!(matches!(
            decode(&bs, &Model::init(Variant::Fnnoc, 2)),
            Err(CodecError::HashMismatch { .. })
        ));
        assert!(matches!(
            decode(&bs, &Model::init(Variant::Fnnoc2, 1)),
            Err(CodecError::ModelVariantMismatch { .. })
        ));
    }

    #[test]
    fn damaged_streams_are_rejected() {
        let cloud = vs(&[[1, 2, 3], [7, 7, 7], [0, 6, 1]], 3);
        let model = Model::uniform(Variant::Nnoc);
        let bs = encode(&cloud, &model, Variant::Nnoc).unwrap();
        let bytes = bs.to_bytes();
        assert!(matches!(
            Bitstream::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CodecError::StreamCorrupt(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Bitstream::from_bytes(&extra), Err(CodecError::StreamCorrupt(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&magic), Err(CodecError::StreamCorrupt(_))));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(Bitstream::from_bytes(&version), Err(CodecError::UnsupportedVersion(9))));

        let mut wrong_mask = bs.clone();
        wrong_mask.levels[0].mask = entropy::rle_encode(&[true; 8]);
        assert!(matches!(
            decode(&wrong_mask, &model),
            Err(CodecError::MaskInconsistent { r: 3 })
        ));
        let mut wrong_count = bs.clone();
        wrong_count.header.voxel_count = 4;
        assert!(matches!(decode(&wrong_count, &model), Err(CodecError::StreamCorrupt(_))));
    }

    #[test]
    fn bpov_examples() {
        assert_eq!(bits_per_voxel(100, 50).unwrap(), 2.0);
        assert!(matches!(bits_per_voxel(100, 0), Err(CodecError::EmptyCloud)));
        let cloud = vs(&[[1, 2, 3], [7, 7, 7]], 3);
        let model = Model::uniform(Variant::Nnoc);
        let bs = encode(&cloud, &model, Variant::Nnoc).unwrap();
        let b = bpov(&bs, &cloud).unwrap();
        assert_eq!(b.total_bits, 8 * bs.to_bytes().len() as u64);
        assert_eq!(b.total_bits - b.content_bits, 8 * (HEADER_BYTES as u64 + 8));
        assert!(matches!(
            bpov(&bs, &VoxelSet::empty(3).unwrap()),
            Err(CodecError::EmptyCloud)
        ));
    }

    #[test]
    fn payload_matches_ideal_codelength() {
        let mut pts = Vec::new();
        for i in 0..8i64 {
            pts.push([(i * 5) % 16, (i * 3) % 16, (i * 7) % 16]);
        }
        let cloud = vs(&pts, 4);
        let model = Model::init(Variant::Nnoc, 11);
        let (bs, trace) = encode_traced(&cloud, &model, Variant::Nnoc).unwrap();
        for level in &bs.levels {
            let ideal = ideal_codelength(trace.iter().filter(|t| t.r == level.r));
            let actual = 8.0 * level.payload.len() as f64;
            assert!((actual - ideal).abs() <= 64.0, "r={} actual {actual} ideal {ideal}", level.r);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn lossless_round_trip(
            pts in prop::collection::vec((0i64..32, 0i64..32, 0i64..32), 1..150),
            variant_id in 0u8..7,
            seed in 0u64..4,
        ) {
            let v = Variant::from_id(variant_id).unwrap();
            let cloud = VoxelSet::voxelize(pts.iter().map(|&(x, y, z)| [x, y, z]), 5).unwrap();
            let model = Model::init(v, seed);
            let bytes = encode(&cloud, &model, v).unwrap().to_bytes();
            let out = decode(&Bitstream::from_bytes(&bytes).unwrap(), &model).unwrap();
            prop_assert_eq!(out, cloud);
        }
    }
}
