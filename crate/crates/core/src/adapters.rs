//! Task-shared and task-specific low-rank adapters.
//!
//! A [`LoraPair`] holds an up-projection `A` (`d × r`) and a down-projection
//! `B` (`r × k`); its delta on a token matrix `x` (tokens as rows) is
//! `x · Bᵀ · Aᵀ`, the row form of `A·B·x`. Shared adapters live in the
//! shared segment of the network with a fixed down-projection; every task
//! gets its own specific adapters in the other segment, scaled per block by
//! positive weights `μ = softplus(ρ)`.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{AttachSet, BackboneConfig, Projection};
use crate::diffgraph::{ParamKey, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{
    matmul_nt, sample_orthogonal_rows, softplus, softplus_inverse, Matrix, SeededRng,
};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// How the shared down-projection is initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharedDownInit {
    /// Orthonormal rows from the polar factor of a Gaussian matrix.
    #[default]
    Orthogonal,
    /// The raw standard-normal matrix, not orthonormalized.
    Random,
}

impl std::fmt::Display for SharedDownInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SharedDownInit::Orthogonal => "orthogonal",
            SharedDownInit::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    Shared,
    Specific,
}

/// Adapter layout and initialization switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Transition block `l`.
    pub position: usize,
    /// Puts specific adapters in blocks `1..=l` and shared ones after.
    pub flip: bool,
    /// Keep the shared down-projection fixed.
    pub fix_shared_down: bool,
    pub shared_down: SharedDownInit,
    /// Learn per-block weights for specific adapters; when off every weight
    /// is the constant 1.
    pub block_weights: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            position: 2,
            flip: false,
            fix_shared_down: true,
            shared_down: SharedDownInit::Orthogonal,
            block_weights: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, bb: &BackboneConfig) -> Result<()> {
        if self.rank == 0 || self.rank > bb.width {
            return Err(Error::InvalidRank {
                rank: self.rank,
                max: bb.width,
            });
        }
        if self.position > bb.num_blocks {
            return Err(Error::Range {
                what: "position",
                index: self.position,
                range: format!("0..={}", bb.num_blocks),
            });
        }
        Ok(())
    }

    pub fn role(&self, block: usize) -> BlockRole {
        let early = block <= self.position;
        match (early, self.flip) {
            (true, false) | (false, true) => BlockRole::Shared,
            _ => BlockRole::Specific,
        }
    }

    pub fn shared_blocks(&self, num_blocks: usize) -> Vec<usize> {
        (1..=num_blocks)
            .filter(|&b| self.role(b) == BlockRole::Shared)
            .collect()
    }

    pub fn specific_blocks(&self, num_blocks: usize) -> Vec<usize> {
        (1..=num_blocks)
            .filter(|&b| self.role(b) == BlockRole::Specific)
            .collect()
    }

    /// Block after which the distillation target is read: the end of the
    /// shared segment (`l` normally, `N` when flipped).
    pub fn exit_block(&self, num_blocks: usize) -> usize {
        if self.flip {
            num_blocks
        } else {
            self.position
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `A`, `d × r`.
    pub up: Matrix,
    /// `B`, `r × k`.
    pub down: Matrix,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.up.cols()
    }

    /// `x · Bᵀ · Aᵀ` for tokens-as-rows `x`.
    pub fn delta(&self, x: &Matrix) -> Result<Matrix> {
        matmul_nt(&matmul_nt(x, &self.down)?, &self.up)
    }

    pub(crate) fn delta_on_tape<'a>(&self, tape: &mut Tape<'a>, x: Var, up: Var, down: Var) -> Result<Var> {
        debug_assert_eq!(tape.value(up).shape(), self.up.shape());
        let low = tape.matmul_nt(x, down)?;
        tape.matmul_nt(low, up)
    }
}

pub type AdapterSlot = (usize, Projection);

#[derive(Clone, Debug, PartialEq)]
pub struct SharedAdapter {
    rank: usize,
    down_trainable: bool,
    pairs: BTreeMap<AdapterSlot, LoraPair>,
}

impl SharedAdapter {
    /// One independent down-projection per (shared block, attached
    /// projection); every up-projection starts at zero.
    pub fn init(cfg: &AdapterConfig, bb: &BackboneConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate(bb)?;
        let (d, k, r) = (bb.width, bb.width, cfg.rank);
        let mut pairs = BTreeMap::new();
        for block in cfg.shared_blocks(bb.num_blocks) {
            for proj in bb.attach.iter() {
                let down = if !cfg.fix_shared_down {
                    Matrix::random_normal(r, k, 1.0 / (r as f64).sqrt(), rng)
                } else {
                    match cfg.shared_down {
                        SharedDownInit::Orthogonal => sample_orthogonal_rows(r, k, rng)?,
                        SharedDownInit::Random => Matrix::random_normal(r, k, 1.0, rng),
                    }
                };
                pairs.insert(
                    (block, proj),
                    LoraPair {
                        up: Matrix::zeros(d, r),
                        down,
                    },
                );
            }
        }
        Ok(Self {
            rank: r,
            down_trainable: !cfg.fix_shared_down,
            pairs,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn down_trainable(&self) -> bool {
        self.down_trainable
    }

    pub fn pairs(&self) -> &BTreeMap<AdapterSlot, LoraPair> {
        &self.pairs
    }

    pub fn pair(&self, block: usize, proj: Projection) -> Result<&LoraPair> {
        self.pairs.get(&(block, proj)).ok_or_else(|| Error::Range {
            what: "shared block",
            index: block,
            range: format!("{:?}", self.blocks()),
        })
    }

    pub fn blocks(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.pairs.keys().map(|(b, _)| *b).collect();
        b.dedup();
        b
    }

    pub fn contains_block(&self, block: usize) -> bool {
        self.pairs.keys().any(|(b, _)| *b == block)
    }

    /// `A_s · B_s · x` in row form.
    pub fn shared_delta(&self, x: &Matrix, block: usize, proj: Projection) -> Result<Matrix> {
        self.pair(block, proj)?.delta(x)
    }

    pub fn up_norms(&self) -> BTreeMap<AdapterSlot, Vec<f64>> {
        self.pairs
            .iter()
            .map(|(slot, p)| (*slot, crate::numerics::row_l2_norms(&p.up)))
            .collect()
    }

    pub(crate) fn set(&mut self, key: &ParamKey, value: Matrix) -> Result<()> {
        let (slot, is_up) = match *key {
            ParamKey::SharedUp { block, proj } => ((block, proj), true),
            ParamKey::SharedDown { block, proj } if self.down_trainable => ((block, proj), false),
            _ => return Err(Error::Internal(format!("{key} is not a writable shared parameter"))),
        };
        let pair = self
            .pairs
            .get_mut(&slot)
            .ok_or_else(|| Error::Internal(format!("{key} not present")))?;
        let target = if is_up { &mut pair.up } else { &mut pair.down };
        if target.shape() != value.shape() {
            return Err(Error::Shape {
                op: "shared update",
                left: target.shape(),
                right: value.shape(),
            });
        }
        *target = value;
        Ok(())
    }

    pub(crate) fn get(&self, key: &ParamKey) -> Option<&Matrix> {
        match *key {
            ParamKey::SharedUp { block, proj } => self.pairs.get(&(block, proj)).map(|p| &p.up),
            ParamKey::SharedDown { block, proj } => self.pairs.get(&(block, proj)).map(|p| &p.down),
            _ => None,
        }
    }

    /// Down-projection bytes only; these must never change when fixed.
    pub fn down_bytes(&self) -> Vec<u8> {
        self.pairs.values().flat_map(|p| p.down.to_le_bytes()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecificAdapter {
    pub task: usize,
    pairs: BTreeMap<AdapterSlot, LoraPair>,
    frozen: bool,
}

/// Per-block positive scaling of one task's specific adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub task: usize,
    blocks: Vec<usize>,
    /// Unconstrained `ρ`, `1 × (number of specific blocks)`; `μ = softplus(ρ)`.
    raw: Matrix,
    learned: bool,
    frozen: bool,
}

impl SpecificAdapter {
    pub fn pairs(&self) -> &BTreeMap<AdapterSlot, LoraPair> {
        &self.pairs
    }

    pub fn pair(&self, block: usize, proj: Projection) -> Result<&LoraPair> {
        self.pairs.get(&(block, proj)).ok_or_else(|| Error::Range {
            what: "specific block",
            index: block,
            range: format!("task {} adapter", self.task),
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set(&mut self, key: &ParamKey, value: Matrix) -> Result<()> {
        if self.frozen {
            return Err(Error::Protocol(format!("task {} adapter is frozen", self.task)));
        }
        let (slot, is_up) = match *key {
            ParamKey::SpecificUp { task, block, proj } if task == self.task => ((block, proj), true),
            ParamKey::SpecificDown { task, block, proj } if task == self.task => ((block, proj), false),
            _ => return Err(Error::Internal(format!("{key} does not belong to task {}", self.task))),
        };
        let pair = self
            .pairs
            .get_mut(&slot)
            .ok_or_else(|| Error::Internal(format!("{key} not present")))?;
        let target = if is_up { &mut pair.up } else { &mut pair.down };
        if target.shape() != value.shape() {
            return Err(Error::Shape {
                op: "specific update",
                left: target.shape(),
                right: value.shape(),
            });
        }
        *target = value;
        Ok(())
    }

    pub(crate) fn get(&self, key: &ParamKey) -> Option<&Matrix> {
        match *key {
            ParamKey::SpecificUp { task, block, proj } if task == self.task => {
                self.pairs.get(&(block, proj)).map(|p| &p.up)
            }
            ParamKey::SpecificDown { task, block, proj } if task == self.task => {
                self.pairs.get(&(block, proj)).map(|p| &p.down)
            }
            _ => None,
        }
    }
}

impl BlockWeights {
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    pub fn is_learned(&self) -> bool {
        self.learned
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// `U_t`: every `μ`, or all ones when block weights are disabled.
    pub fn mu(&self) -> Vec<f64> {
        if self.learned {
            self.raw.data().iter().map(|&r| softplus(r)).collect()
        } else {
            vec![1.0; self.blocks.len()]
        }
    }

    pub fn mu_for_block(&self, block: usize) -> Result<f64> {
        let idx = self.index_of(block)?;
        Ok(if self.learned {
            softplus(self.raw.data()[idx])
        } else {
            1.0
        })
    }

    pub fn index_of(&self, block: usize) -> Result<usize> {
        self.blocks
            .iter()
            .position(|&b| b == block)
            .ok_or_else(|| Error::Range {
                what: "weighted block",
                index: block,
                range: format!("{:?}", self.blocks),
            })
    }

    pub(crate) fn set_raw(&mut self, value: Matrix) -> Result<()> {
        if self.frozen || !self.learned {
            return Err(Error::Protocol(format!("task {} block weights are not writable", self.task)));
        }
        if value.shape() != self.raw.shape() {
            return Err(Error::Shape {
                op: "block weight update",
                left: self.raw.shape(),
                right: value.shape(),
            });
        }
        self.raw = value;
        Ok(())
    }
}

/// Fresh specific adapter and block weights for `task`: `A_t = 0`,
/// `B_t ~ N(0, 1/r)`, `μ ~ U(0, 2)`.
pub fn init_specific(
    task: usize,
    cfg: &AdapterConfig,
    bb: &BackboneConfig,
    rng: &mut SeededRng,
) -> Result<(SpecificAdapter, BlockWeights)> {
    cfg.validate(bb)?;
    let (d, k, r) = (bb.width, bb.width, cfg.rank);
    let blocks = cfg.specific_blocks(bb.num_blocks);
    let mut pairs = BTreeMap::new();
    for &block in &blocks {
        for proj in bb.attach.iter() {
            pairs.insert(
                (block, proj),
                LoraPair {
                    up: Matrix::zeros(d, r),
                    down: Matrix::random_normal(r, k, 1.0 / (r as f64).sqrt(), rng),
                },
            );
        }
    }
    // Drawn even when block weights are disabled so the RNG stream (and so
    // every later draw) does not depend on that switch.
    let raw: Vec<f64> = blocks
        .iter()
        .map(|_| softplus_inverse(rng.uniform_open(0.0, 2.0)))
        .collect();
    let raw = if raw.is_empty() {
        Matrix::zeros(1, 1)
    } else {
        Matrix::row_vector(raw)
    };
    Ok((
        SpecificAdapter {
            task,
            pairs,
            frozen: false,
        },
        BlockWeights {
            task,
            blocks,
            raw,
            learned: cfg.block_weights,
            frozen: false,
        },
    ))
}

/// `μ_t^i · A_t^{i,p} · B_t^{i,p} · x`; the same `μ_t^i` scales every
/// attached projection of block `i`.
pub fn specific_delta(
    x: &Matrix,
    block: usize,
    proj: Projection,
    adapter: &SpecificAdapter,
    weights: &BlockWeights,
) -> Result<Matrix> {
    let pair = adapter.pair(block, proj)?;
    Ok(pair.delta(x)?.scale(weights.mu_for_block(block)?))
}

/// Trainable parameters of a single LoRA pair: `r·(d + k)`.
pub fn lora_pair_params(rank: usize, d: usize, k: usize) -> Result<usize> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::InvalidRank {
            rank,
            max: d.min(k),
        });
    }
    Ok(rank * (d + k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub shared: usize,
    pub specific_per_task: usize,
    pub block_weights_per_task: usize,
    pub tasks: usize,
    pub total: usize,
    pub backbone: usize,
    /// `100 · total / backbone`.
    pub ratio_pct: f64,
}

/// Trainable-parameter accounting after `tasks` tasks.
pub fn count_trainable_params(
    cfg: &AdapterConfig,
    bb: &BackboneConfig,
    tasks: usize,
) -> Result<ParamCounts> {
    cfg.validate(bb)?;
    let (d, k, r) = (bb.width, bb.width, cfg.rank);
    let attach = bb.attach.len();
    let shared_blocks = cfg.shared_blocks(bb.num_blocks).len();
    let specific_blocks = cfg.specific_blocks(bb.num_blocks).len();
    let per_shared = if cfg.fix_shared_down {
        r * d
    } else {
        lora_pair_params(r, d, k)?
    };
    let shared = shared_blocks * attach * per_shared;
    let specific_per_task = specific_blocks * attach * lora_pair_params(r, d, k)?;
    let block_weights_per_task = if cfg.block_weights { specific_blocks } else { 0 };
    let total = shared + tasks * (specific_per_task + block_weights_per_task);
    let backbone = bb.param_count();
    Ok(ParamCounts {
        shared,
        specific_per_task,
        block_weights_per_task,
        tasks,
        total,
        backbone,
        ratio_pct: 100.0 * total as f64 / backbone as f64,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CLLA";
const CHECKPOINT_VERSION: u32 = 1;
const KIND_SHARED: u32 = 0;
const KIND_SPECIFIC: u32 = 1;

/// Header of one adapter checkpoint record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub kind: u32,
    pub task: u32,
    pub position: u32,
    pub num_blocks: u32,
    pub rank: u32,
    pub width: u32,
    pub attach_mask: u32,
    pub flags: u32,
}

/// Decoded checkpoint record.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub header: CheckpointHeader,
    /// `((block, projection), up, down)` in ascending slot order.
    pub pairs: Vec<(AdapterSlot, Matrix, Matrix)>,
    /// Raw block-weight vector (specific records only).
    pub block_weights: Option<Matrix>,
    pub hash: String,
}

/// Adapter checkpoint encoding, all integers `u32` little-endian:
///
/// ```text
/// "CLLA" version kind task l N r d attach_mask flags num_pairs
/// per pair (ascending block, then q < k < v):
///     block proj_code rows(A) cols(A) A as f64 LE row-major
///                     rows(B) cols(B) B as f64 LE row-major
/// specific only: rows cols raw block weights as f64 LE
/// 32-byte SHA-256 of every preceding byte
/// ```
///
/// `flags` bit 0 = flipped layout, bit 1 = learned block weights,
/// bit 2 = trainable shared down-projection.
pub struct Checkpoint;

impl Checkpoint {
    fn header_bytes(h: &CheckpointHeader, num_pairs: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(48);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            h.kind,
            h.task,
            h.position,
            h.num_blocks,
            h.rank,
            h.width,
            h.attach_mask,
            h.flags,
            num_pairs,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn matrix_bytes(out: &mut Vec<u8>, m: &Matrix) {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        out.extend(m.to_le_bytes());
    }

    fn flags(cfg: &AdapterConfig) -> u32 {
        (cfg.flip as u32) | ((cfg.block_weights as u32) << 1) | ((!cfg.fix_shared_down as u32) << 2)
    }

    fn finish(mut body: Vec<u8>) -> Vec<u8> {
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        body
    }

    pub fn encode_shared(shared: &SharedAdapter, cfg: &AdapterConfig, bb: &BackboneConfig) -> Vec<u8> {
        let header = CheckpointHeader {
            kind: KIND_SHARED,
            task: 0,
            position: cfg.position as u32,
            num_blocks: bb.num_blocks as u32,
            rank: cfg.rank as u32,
            width: bb.width as u32,
            attach_mask: u32::from(bb.attach.bitmask()),
            flags: Self::flags(cfg),
        };
        let mut body = Self::header_bytes(&header, shared.pairs.len() as u32);
        Self::pairs_bytes(&mut body, &shared.pairs);
        Self::finish(body)
    }

    pub fn encode_specific(
        adapter: &SpecificAdapter,
        weights: &BlockWeights,
        cfg: &AdapterConfig,
        bb: &BackboneConfig,
    ) -> Vec<u8> {
        let header = CheckpointHeader {
            kind: KIND_SPECIFIC,
            task: adapter.task as u32,
            position: cfg.position as u32,
            num_blocks: bb.num_blocks as u32,
            rank: cfg.rank as u32,
            width: bb.width as u32,
            attach_mask: u32::from(bb.attach.bitmask()),
            flags: Self::flags(cfg),
        };
        let mut body = Self::header_bytes(&header, adapter.pairs.len() as u32);
        Self::pairs_bytes(&mut body, &adapter.pairs);
        Self::matrix_bytes(&mut body, &weights.raw);
        Self::finish(body)
    }

    fn pairs_bytes(out: &mut Vec<u8>, pairs: &BTreeMap<AdapterSlot, LoraPair>) {
        for ((block, proj), pair) in pairs {
            out.extend_from_slice(&(*block as u32).to_le_bytes());
            out.extend_from_slice(&u32::from(proj.code()).to_le_bytes());
            Self::matrix_bytes(out, &pair.up);
            Self::matrix_bytes(out, &pair.down);
        }
    }

    /// Hex SHA-256 stored at the end of an encoded record.
    pub fn hash_of(encoded: &[u8]) -> String {
        hex::encode(&encoded[encoded.len().saturating_sub(32)..])
    }

    pub fn write(path: &std::path::Path, records: &[Vec<u8>]) -> Result<()> {
        crate::harness::write_atomic(path, &records.concat())
    }

    pub fn read_all(mut reader: impl Read) -> Result<Vec<CheckpointRecord>> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let mut out = Vec::new();
        while cursor < bytes.len() {
            let (rec, used) = Self::decode(&bytes[cursor..], cursor as u64)?;
            out.push(rec);
            cursor += used;
        }
        Ok(out)
    }

    /// Decodes one record; returns it with the number of bytes consumed.
    pub fn decode(bytes: &[u8], base_offset: u64) -> Result<(CheckpointRecord, usize)> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            base: base_offset,
        };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}, expected \"CLLA\"")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let header = CheckpointHeader {
            kind: r.u32()?,
            task: r.u32()?,
            position: r.u32()?,
            num_blocks: r.u32()?,
            rank: r.u32()?,
            width: r.u32()?,
            attach_mask: r.u32()?,
            flags: r.u32()?,
        };
        let num_pairs = r.u32()?;
        let mut pairs = Vec::with_capacity(num_pairs as usize);
        for _ in 0..num_pairs {
            let block = r.u32()? as usize;
            let at = r.pos;
            let proj = match r.u32()? {
                0 => Projection::Q,
                1 => Projection::K,
                2 => Projection::V,
                other => return Err(r.error(at, format!("unknown projection code {other}"))),
            };
            let up = r.matrix()?;
            let down = r.matrix()?;
            pairs.push(((block, proj), up, down));
        }
        let block_weights = match header.kind {
            KIND_SHARED => None,
            KIND_SPECIFIC => Some(r.matrix()?),
            other => return Err(r.error(8, format!("unknown record kind {other}"))),
        };
        let body_end = r.pos;
        let stored = r.take(32)?;
        let digest = Sha256::digest(&bytes[..body_end]);
        if stored != digest.as_slice() {
            return Err(r.error(body_end, "content hash mismatch".into()));
        }
        Ok((
            CheckpointRecord {
                header,
                pairs,
                block_weights,
                hash: hex::encode(stored),
            },
            r.pos,
        ))
    }
}

struct ByteReader<'b> {
    bytes: &'b [u8],
    pos: usize,
    base: u64,
}

impl<'b> ByteReader<'b> {
    fn error(&self, at: usize, message: String) -> Error {
        Error::Format {
            offset: self.base + at as u64,
            message,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let at = self.pos;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| self.error(at, e.to_string()))
    }
}

/// Shape summary used by reports.
pub fn describe(cfg: &AdapterConfig, bb: &BackboneConfig) -> String {
    format!(
        "r={} l={} attach={} flip={} fixB={} down={} bw={}",
        cfg.rank,
        cfg.position,
        bb.attach,
        cfg.flip,
        cfg.fix_shared_down,
        cfg.shared_down,
        cfg.block_weights
    )
}

impl CheckpointHeader {
    pub fn attach(&self) -> Result<AttachSet> {
        AttachSet::new(
            Projection::ALL
                .into_iter()
                .filter(|p| self.attach_mask & (1 << p.code()) != 0)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::orthonormality_error;

    fn desk() -> (AdapterConfig, BackboneConfig) {
        (AdapterConfig::default(), BackboneConfig::desk())
    }

    #[test]
    fn shared_init_zero_up_and_orthonormal_down() {
        let (cfg, bb) = desk();
        let shared = SharedAdapter::init(&cfg, &bb, &mut SeededRng::new(1)).unwrap();
        assert_eq!(shared.pairs().len(), cfg.position * bb.attach.len());
        for pair in shared.pairs().values() {
            assert!(pair.up.data().iter().all(|&v| v == 0.0));
            assert_eq!(pair.down.shape(), (cfg.rank, bb.width));
            // Gram check written out entry by entry.
            for i in 0..cfg.rank {
                for j in 0..cfg.rank {
                    let dot: f64 = (0..bb.width).map(|c| pair.down.get(i, c) * pair.down.get(j, c)).sum();
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - target).abs() <= 1e-6);
                }
            }
        }
        let again = SharedAdapter::init(&cfg, &bb, &mut SeededRng::new(1)).unwrap();
        assert_eq!(shared, again);
    }

    #[test]
    fn shared_rank_above_width_is_rejected() {
        let (mut cfg, bb) = desk();
        cfg.rank = bb.width + 1;
        assert!(matches!(
            SharedAdapter::init(&cfg, &bb, &mut SeededRng::new(0)),
            Err(Error::InvalidRank { .. })
        ));
    }

    #[test]
    fn random_down_is_not_orthonormal() {
        let (mut cfg, bb) = desk();
        cfg.shared_down = SharedDownInit::Random;
        let shared = SharedAdapter::init(&cfg, &bb, &mut SeededRng::new(1)).unwrap();
        let pair = shared.pair(1, Projection::Q).unwrap();
        assert!(orthonormality_error(&pair.down) > 1.0);
    }

    #[test]
    fn shared_delta_cases() {
        let pair = LoraPair {
            up: Matrix::from_rows(&[&[2.0]]),
            down: Matrix::from_rows(&[&[1.0]]),
        };
        assert_eq!(pair.delta(&Matrix::from_rows(&[&[3.0]])).unwrap().data(), &[6.0]);

        let (cfg, bb) = desk();
        let mut rng = SeededRng::new(2);
        let shared = SharedAdapter::init(&cfg, &bb, &mut rng).unwrap();
        let x = Matrix::random_normal(5, bb.width, 1.0, &mut rng);
        let zero = shared.shared_delta(&x, 1, Projection::V).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            shared.shared_delta(&x, cfg.position + 1, Projection::V),
            Err(Error::Range { .. })
        ));
        assert!(shared.shared_delta(&x, 1, Projection::K).is_err());
    }

    #[test]
    fn lora_delta_is_linear() {
        let mut rng = SeededRng::new(3);
        let pair = LoraPair {
            up: Matrix::random_normal(6, 2, 1.0, &mut rng),
            down: Matrix::random_normal(2, 6, 1.0, &mut rng),
        };
        let x1 = Matrix::random_normal(3, 6, 1.0, &mut rng);
        let x2 = Matrix::random_normal(3, 6, 1.0, &mut rng);
        let lhs = pair.delta(&x1.add(&x2).unwrap()).unwrap();
        let rhs = pair.delta(&x1).unwrap().add(&pair.delta(&x2).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn specific_init_and_delta() {
        let (cfg, bb) = desk();
        let mut rng = SeededRng::new(4);
        let (adapter, weights) = init_specific(1, &cfg, &bb, &mut rng).unwrap();
        assert_eq!(adapter.pairs().len(), (bb.num_blocks - cfg.position) * bb.attach.len());
        for mu in weights.mu() {
            assert!(mu > 0.0 && mu < 2.0, "{mu}");
        }
        let x = Matrix::random_normal(5, bb.width, 1.0, &mut rng);
        let d = specific_delta(&x, 3, Projection::Q, &adapter, &weights).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            specific_delta(&x, 1, Projection::Q, &adapter, &weights),
            Err(Error::Range { .. })
        ));
        let (again, w2) = init_specific(1, &cfg, &bb, &mut SeededRng::new(4)).unwrap();
        assert_eq!(adapter, again);
        assert_eq!(weights, w2);
    }

    #[test]
    fn specific_delta_scalar_and_homogeneity() {
        let mut pairs = BTreeMap::new();
        pairs.insert(
            (2, Projection::Q),
            LoraPair {
                up: Matrix::from_rows(&[&[1.0]]),
                down: Matrix::from_rows(&[&[2.0]]),
            },
        );
        let adapter = SpecificAdapter {
            task: 1,
            pairs,
            frozen: false,
        };
        let mut weights = BlockWeights {
            task: 1,
            blocks: vec![2],
            raw: Matrix::row_vector(vec![softplus_inverse(3.0)]),
            learned: true,
            frozen: false,
        };
        let x = Matrix::from_rows(&[&[5.0]]);
        let d = specific_delta(&x, 2, Projection::Q, &adapter, &weights).unwrap();
        assert!((d.data()[0] - 30.0).abs() < 1e-12);
        weights.raw = Matrix::row_vector(vec![softplus_inverse(6.0)]);
        let d2 = specific_delta(&x, 2, Projection::Q, &adapter, &weights).unwrap();
        assert!((d2.data()[0] - 60.0).abs() < 1e-12);
    }

    #[test]
    fn disabled_block_weights_are_unit() {
        let (mut cfg, bb) = desk();
        cfg.block_weights = false;
        let (_, weights) = init_specific(1, &cfg, &bb, &mut SeededRng::new(4)).unwrap();
        assert_eq!(weights.mu(), vec![1.0; 2]);
    }

    #[test]
    fn param_accounting() {
        assert_eq!(lora_pair_params(10, 768, 768).unwrap(), 15360);
        assert!(matches!(lora_pair_params(0, 768, 768), Err(Error::InvalidRank { .. })));

        let mut bb = BackboneConfig::paper();
        bb.attach = AttachSet::query_value();
        let cfg = AdapterConfig {
            rank: 10,
            position: 6,
            ..AdapterConfig::default()
        };
        let counts = count_trainable_params(&cfg, &bb, 1).unwrap();
        // Enumerate shared tensors: one d × r up-projection per (block, proj).
        let mut enumerated = 0;
        for _block in 1..=6 {
            for _proj in ["q", "v"] {
                enumerated += 768 * 10;
            }
        }
        assert_eq!(counts.shared, enumerated);
        assert_eq!(counts.shared, 92160);
        assert_eq!(counts.specific_per_task, 6 * 2 * 15360);
        assert_eq!(counts.block_weights_per_task, 6);
        assert_eq!(counts.total, 92160 + 6 * 2 * 15360 + 6);
        let zero_rank = AdapterConfig { rank: 0, ..cfg };
        assert!(count_trainable_params(&zero_rank, &bb, 1).is_err());
    }

    #[test]
    fn flipped_layout_roles() {
        let cfg = AdapterConfig {
            position: 1,
            flip: true,
            ..AdapterConfig::default()
        };
        assert_eq!(cfg.specific_blocks(4), vec![1]);
        assert_eq!(cfg.shared_blocks(4), vec![2, 3, 4]);
        assert_eq!(cfg.exit_block(4), 4);
        let plain = AdapterConfig::default();
        assert_eq!(plain.exit_block(4), 2);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let (cfg, bb) = desk();
        let mut rng = SeededRng::new(9);
        let shared = SharedAdapter::init(&cfg, &bb, &mut rng).unwrap();
        let (adapter, weights) = init_specific(3, &cfg, &bb, &mut rng).unwrap();
        let a = Checkpoint::encode_shared(&shared, &cfg, &bb);
        let b = Checkpoint::encode_specific(&adapter, &weights, &cfg, &bb);
        let mut all = a.clone();
        all.extend_from_slice(&b);
        let records = Checkpoint::read_all(&all[..]).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].hash, Checkpoint::hash_of(&a));
        assert_eq!(records[1].header.task, 3);
        assert_eq!(records[1].block_weights.as_ref(), Some(weights.raw()));
        let (slot, up, down) = &records[0].pairs[0];
        assert_eq!(*slot, (1, Projection::Q));
        assert_eq!(up, &shared.pair(1, Projection::Q).unwrap().up);
        assert_eq!(down, &shared.pair(1, Projection::Q).unwrap().down);
        assert_eq!(records[0].header.attach().unwrap(), bb.attach);

        let truncated = &a[..a.len() - 5];
        assert!(matches!(Checkpoint::read_all(truncated), Err(Error::Format { .. })));
        let mut corrupt = a.clone();
        corrupt[60] ^= 1;
        assert!(matches!(Checkpoint::read_all(&corrupt[..]), Err(Error::Format { .. })));
        let mut magic = a;
        magic[0] = b'X';
        let err = Checkpoint::read_all(&magic[..]).unwrap_err();
        assert!(err.to_string().contains("CLLA"));
    }
}
