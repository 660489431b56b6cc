//! Frozen miniature vision transformer.
//!
//! Pre-norm blocks (`z + MHSA(LN(z))`, then `z + MLP(LN(z))`), a prepended
//! [CLS] token, fixed sinusoidal positions, and a final layer norm applied
//! before the [CLS] row is read out. Weights are stored `out × in` and
//! applied as `x · Wᵀ` with tokens as rows. Blocks are numbered from 1.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffgraph::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub const LN_EPS: f64 = 1e-6;

/// Attention projections an adapter can attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    pub fn code(self) -> u8 {
        match self {
            Projection::Q => 0,
            Projection::K => 1,
            Projection::V => 2,
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        })
    }
}

/// Non-empty, sorted, duplicate-free set of projections.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AttachSet(Vec<Projection>);

impl AttachSet {
    pub fn new(mut projections: Vec<Projection>) -> Result<Self> {
        projections.sort();
        projections.dedup();
        if projections.is_empty() {
            return Err(Error::Config("attach set must not be empty".into()));
        }
        Ok(Self(projections))
    }

    pub fn query_value() -> Self {
        Self(vec![Projection::Q, Projection::V])
    }

    pub fn contains(&self, p: Projection) -> bool {
        self.0.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Projection> + '_ {
        self.0.iter().copied()
    }

    pub fn bitmask(&self) -> u8 {
        self.0.iter().fold(0, |m, p| m | (1 << p.code()))
    }
}

impl Default for AttachSet {
    fn default() -> Self {
        Self::query_value()
    }
}

impl std::str::FromStr for AttachSet {
    type Err = Error;

    /// Parses strings such as `"qv"` or `"q,k,v"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for ch in s.chars().filter(|c| !matches!(c, ',' | ' ')) {
            out.push(match ch.to_ascii_lowercase() {
                'q' => Projection::Q,
                'k' => Projection::K,
                'v' => Projection::V,
                other => {
                    return Err(Error::Config(format!("unknown projection '{other}' in attach set")))
                }
            });
        }
        Self::new(out)
    }
}

impl TryFrom<String> for AttachSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttachSet> for String {
    fn from(a: AttachSet) -> String {
        a.to_string()
    }
}

impl fmt::Display for AttachSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.0 {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub attach: AttachSet,
}

impl BackboneConfig {
    /// Small enough to train in seconds on a laptop.
    pub fn desk() -> Self {
        Self {
            num_blocks: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4.0,
            image_side: 16,
            patch_side: 8,
            channels: 1,
            attach: AttachSet::query_value(),
        }
    }

    /// ViT-B/16 layer shapes.
    pub fn paper() -> Self {
        Self {
            num_blocks: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4.0,
            image_side: 224,
            patch_side: 16,
            channels: 3,
            attach: AttachSet::query_value(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("width", self.width),
            ("heads", self.heads),
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::Config(format!(
                "patch_side ({}) must divide image_side ({})",
                self.patch_side, self.image_side
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            )));
        }
        if self.attach.is_empty() {
            return Err(Error::Config("attach set must not be empty".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_side;
        per_side * per_side
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_side * self.image_side
    }

    /// Frozen scalar count of a backbone with this shape, without
    /// instantiating it.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let h = self.mlp_hidden();
        let per_block = 4 * d + 4 * (d * d + d) + (h * d + h) + (d * h + d);
        self.patch_dim() * d + d + d + self.num_blocks * per_block + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl BlockParams {
    fn init(d: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let proj_std = 1.0 / (d as f64).sqrt();
        Self {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            wq: Matrix::random_normal(d, d, proj_std, rng),
            bq: Matrix::zeros(1, d),
            wk: Matrix::random_normal(d, d, proj_std, rng),
            bk: Matrix::zeros(1, d),
            wv: Matrix::random_normal(d, d, proj_std, rng),
            bv: Matrix::zeros(1, d),
            wo: Matrix::random_normal(d, d, proj_std, rng),
            bo: Matrix::zeros(1, d),
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            w1: Matrix::random_normal(hidden, d, proj_std, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::random_normal(d, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn projection(&self, p: Projection) -> (&Matrix, &Matrix) {
        match p {
            Projection::Q => (&self.wq, &self.bq),
            Projection::K => (&self.wk, &self.bk),
            Projection::V => (&self.wv, &self.bv),
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> (&mut Matrix, &mut Matrix) {
        match p {
            Projection::Q => (&mut self.wq, &mut self.bq),
            Projection::K => (&mut self.wk, &mut self.bk),
            Projection::V => (&mut self.wv, &mut self.bv),
        }
    }

    fn param_count(&self) -> usize {
        let mats = [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.w1, &self.b1, &self.w2, &self.b2,
        ];
        mats.iter().map(|m| m.len()).sum::<usize>()
            + self.ln1_gamma.len()
            + self.ln1_beta.len()
            + self.ln2_gamma.len()
            + self.ln2_beta.len()
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        for v in self.ln1_gamma.iter().chain(&self.ln1_beta) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
        ] {
            out.extend(m.to_le_bytes());
        }
        for v in self.ln2_gamma.iter().chain(&self.ln2_beta) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in [&self.w1, &self.b1, &self.w2, &self.b2] {
            out.extend(m.to_le_bytes());
        }
    }
}

/// Token matrix after `block_index` blocks; row 0 is [CLS].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState {
    pub tokens: Matrix,
    pub block_index: usize,
}

/// Hook invoked for every attached projection of a block: receives the
/// layer-normalized block input and returns the delta added to that
/// projection's output, or `None` to leave it untouched.
pub trait AdapterHook<'a> {
    fn delta(
        &mut self,
        tape: &mut Tape<'a>,
        block: usize,
        proj: Projection,
        x: Var,
    ) -> Result<Option<Var>>;
}

/// Hook that never adapts anything.
pub struct NoAdapter;

impl<'a> AdapterHook<'a> for NoAdapter {
    fn delta(&mut self, _: &mut Tape<'a>, _: usize, _: Projection, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    pub(crate) patch_weight: Matrix,
    pub(crate) patch_bias: Matrix,
    pub(crate) cls: Matrix,
    positions: Matrix,
    pub(crate) blocks: Vec<BlockParams>,
    final_gamma: Vec<f64>,
    final_beta: Vec<f64>,
}

impl Backbone {
    pub fn init(cfg: &BackboneConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let patch_dim = cfg.patch_dim();
        let patch_weight =
            Matrix::random_normal(d, patch_dim, 1.0 / (patch_dim as f64).sqrt(), rng);
        let cls = Matrix::random_normal(1, d, 1.0, rng);
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams::init(d, cfg.mlp_hidden(), rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch_weight,
            patch_bias: Matrix::zeros(1, d),
            cls,
            positions: sinusoidal_positions(cfg.num_tokens(), d),
            blocks,
            final_gamma: vec![1.0; d],
            final_beta: vec![0.0; d],
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn block(&self, block: usize) -> Result<&BlockParams> {
        self.check_block(block)?;
        Ok(&self.blocks[block - 1])
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    pub fn cls_embedding(&self) -> &Matrix {
        &self.cls
    }

    /// Number of frozen scalars. The sinusoidal position table is not a
    /// parameter and is not counted.
    pub fn param_count(&self) -> usize {
        self.patch_weight.len()
            + self.patch_bias.len()
            + self.cls.len()
            + self.blocks.iter().map(BlockParams::param_count).sum::<usize>()
            + self.final_gamma.len()
            + self.final_beta.len()
    }

    /// Every weight as little-endian bytes in a fixed order; used for the
    /// frozen-weights hash.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(self.patch_weight.to_le_bytes());
        out.extend(self.patch_bias.to_le_bytes());
        out.extend(self.cls.to_le_bytes());
        out.extend(self.positions.to_le_bytes());
        for b in &self.blocks {
            b.write_bytes(&mut out);
        }
        for v in self.final_gamma.iter().chain(&self.final_beta) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn content_hash(&self) -> String {
        crate::adapters::sha256_hex(&self.to_le_bytes())
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block == 0 || block > self.cfg.num_blocks {
            return Err(Error::Range {
                what: "block",
                index: block,
                range: format!("1..={}", self.cfg.num_blocks),
            });
        }
        Ok(())
    }

    /// Splits a `channels × H × W` image into flattened patches, projects
    /// them, prepends [CLS], and adds positions.
    pub fn patch_embed(&self, image: &[f32]) -> Result<TokenState> {
        let cfg = &self.cfg;
        if image.len() != cfg.pixels() {
            return Err(Error::Shape {
                op: "patch_embed",
                left: (image.len(), 1),
                right: (cfg.pixels(), 1),
            });
        }
        let side = cfg.image_side;
        let p = cfg.patch_side;
        let per_side = side / p;
        let mut patches = Matrix::zeros(cfg.num_patches(), cfg.patch_dim());
        for py in 0..per_side {
            for px in 0..per_side {
                let row = patches.row_mut(py * per_side + px);
                let mut idx = 0;
                for c in 0..cfg.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = py * p + dy;
                            let x = px * p + dx;
                            row[idx] = f64::from(image[c * side * side + y * side + x]);
                            idx += 1;
                        }
                    }
                }
            }
        }
        let projected = crate::numerics::matmul_nt(&patches, &self.patch_weight)?;
        let d = cfg.width;
        let mut tokens = Matrix::zeros(cfg.num_tokens(), d);
        for c in 0..d {
            tokens.set(0, c, self.cls.get(0, c) + self.positions.get(0, c));
        }
        for r in 0..cfg.num_patches() {
            for c in 0..d {
                let v = projected.get(r, c) + self.patch_bias.get(0, c) + self.positions.get(r + 1, c);
                tokens.set(r + 1, c, v);
            }
        }
        Ok(TokenState {
            tokens,
            block_index: 0,
        })
    }

    /// One pre-norm transformer block recorded on `tape`.
    pub fn block_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        z: Var,
        block: usize,
        hook: &mut dyn AdapterHook<'a>,
    ) -> Result<Var> {
        self.check_block(block)?;
        let bp = &self.blocks[block - 1];
        let x = tape.layer_norm(z, &bp.ln1_gamma, &bp.ln1_beta, LN_EPS)?;

        let mut qkv = Vec::with_capacity(3);
        for p in Projection::ALL {
            let (w, b) = bp.projection(p);
            let wv = tape.constant(w);
            let bv = tape.constant(b);
            let out = tape.matmul_nt(x, wv)?;
            let mut out = tape.add_row(out, bv)?;
            if self.cfg.attach.contains(p) {
                if let Some(delta) = hook.delta(tape, block, p, x)? {
                    out = tape.add(out, delta)?;
                }
            }
            qkv.push(out);
        }
        let (q, k, v) = (qkv[0], qkv[1], qkv[2]);

        let dh = self.cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.cols(q, h * dh, dh)?;
            let kh = tape.cols(k, h * dh, dh)?;
            let vh = tape.cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let weights = tape.softmax_rows(scores);
            heads.push(tape.matmul(weights, vh)?);
        }
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let wo = tape.constant(&bp.wo);
        let bo = tape.constant(&bp.bo);
        let attn = tape.matmul_nt(attn, wo)?;
        let attn = tape.add_row(attn, bo)?;
        let z = tape.add(z, attn)?;

        let y = tape.layer_norm(z, &bp.ln2_gamma, &bp.ln2_beta, LN_EPS)?;
        let w1 = tape.constant(&bp.w1);
        let b1 = tape.constant(&bp.b1);
        let w2 = tape.constant(&bp.w2);
        let b2 = tape.constant(&bp.b2);
        let hidden = tape.matmul_nt(y, w1)?;
        let hidden = tape.add_row(hidden, b1)?;
        let hidden = tape.gelu(hidden);
        let out = tape.matmul_nt(hidden, w2)?;
        let out = tape.add_row(out, b2)?;
        tape.add(z, out)
    }

    /// Final layer norm applied to the [CLS] row, as a `1 × d` tape node.
    pub fn cls_on_tape<'a>(&'a self, tape: &mut Tape<'a>, z: Var) -> Result<Var> {
        let cls = tape.row(z, 0)?;
        tape.layer_norm(cls, &self.final_gamma, &self.final_beta, LN_EPS)
    }

    /// Applies block `block` (1-based) to `state`, which must have passed
    /// through exactly `block − 1` blocks.
    pub fn block_forward(
        &self,
        state: &TokenState,
        block: usize,
        adapter_delta: Option<&dyn Fn(Projection, &Matrix) -> Matrix>,
    ) -> Result<TokenState> {
        self.check_block(block)?;
        if state.block_index + 1 != block {
            return Err(Error::Protocol(format!(
                "state has passed {} blocks, cannot apply block {block}",
                state.block_index
            )));
        }
        struct FnHook<'f>(&'f dyn Fn(Projection, &Matrix) -> Matrix);
        impl<'a> AdapterHook<'a> for FnHook<'_> {
            fn delta(
                &mut self,
                tape: &mut Tape<'a>,
                _: usize,
                proj: Projection,
                x: Var,
            ) -> Result<Option<Var>> {
                let d = (self.0)(proj, tape.value(x));
                Ok(Some(tape.constant_owned(d)))
            }
        }
        let mut tape = Tape::new();
        let z = tape.constant(&state.tokens);
        let out = match adapter_delta {
            Some(f) => self.block_on_tape(&mut tape, z, block, &mut FnHook(f))?,
            None => self.block_on_tape(&mut tape, z, block, &mut NoAdapter)?,
        };
        Ok(TokenState {
            tokens: tape.value(out).clone(),
            block_index: block,
        })
    }

    /// Row 0 of the tokens after the final layer norm.
    pub fn extract_cls(&self, state: &TokenState) -> Vec<f64> {
        let mut tape = Tape::new();
        let z = tape.constant(&state.tokens);
        let cls = self
            .cls_on_tape(&mut tape, z)
            .expect("token matrix always has a [CLS] row of width d");
        tape.value(cls).data().to_vec()
    }
}

/// Standard transformer sinusoid table: even columns sin, odd columns cos.
pub fn sinusoidal_positions(tokens: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(tokens, d);
    for pos in 0..tokens {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul_nt, softmax_temperature};

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            num_blocks: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2.0,
            image_side: 4,
            patch_side: 2,
            channels: 1,
            attach: AttachSet::query_value(),
        }
    }

    fn image(cfg: &BackboneConfig, seed: u64) -> Vec<f32> {
        let mut rng = SeededRng::new(seed);
        (0..cfg.pixels()).map(|_| rng.uniform(0.0, 1.0) as f32).collect()
    }

    #[test]
    fn paper_preset_matches_vit_b16_shape_count() {
        let cfg = BackboneConfig::paper();
        // Layer-by-layer enumeration of tensor shapes.
        let d = 768usize;
        let hidden = 3072usize;
        let patch = 3 * 16 * 16 * d + d;
        let cls = d;
        let per_block = [
            d, d,            // ln1
            d * d, d,        // q
            d * d, d,        // k
            d * d, d,        // v
            d * d, d,        // out proj
            d, d,            // ln2
            hidden * d, hidden, // fc1
            d * hidden, d,   // fc2
        ]
        .iter()
        .sum::<usize>();
        let expected = patch + cls + 12 * per_block + 2 * d;
        // ViT-B/16 without classifier head is 85,798,656 scalars including a
        // learned 197 × 768 position table, which is fixed here.
        assert_eq!(expected, 85_798_656 - 197 * 768);

        let mut counted = 0;
        counted += cfg.patch_dim() * cfg.width + cfg.width + cfg.width;
        counted += cfg.num_blocks
            * (4 * cfg.width + 4 * (cfg.width * cfg.width + cfg.width) + 2 * cfg.mlp_hidden() * cfg.width
                + cfg.mlp_hidden()
                + cfg.width);
        counted += 2 * cfg.width;
        assert_eq!(counted, expected);

        assert_eq!(cfg.param_count(), expected);

        let desk = BackboneConfig::desk();
        let bb = Backbone::init(&desk, &mut SeededRng::new(0)).unwrap();
        assert_eq!(bb.param_count(), desk.param_count());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = BackboneConfig::desk();
        let a = Backbone::init(&cfg, &mut SeededRng::new(5)).unwrap();
        let b = Backbone::init(&cfg, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        let c = Backbone::init(&cfg, &mut SeededRng::new(6)).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn config_errors() {
        let mut cfg = BackboneConfig::desk();
        cfg.heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = BackboneConfig::desk();
        cfg.patch_side = 5;
        assert!(matches!(
            Backbone::init(&cfg, &mut SeededRng::new(0)),
            Err(Error::Config(_))
        ));
        assert!("".parse::<AttachSet>().is_err());
        assert!("qx".parse::<AttachSet>().is_err());
        assert_eq!("v,q".parse::<AttachSet>().unwrap(), AttachSet::query_value());
    }

    #[test]
    fn patch_embed_token_count_and_zero_image() {
        let cfg = BackboneConfig::desk();
        let bb = Backbone::init(&cfg, &mut SeededRng::new(1)).unwrap();
        let state = bb.patch_embed(&vec![0.0; cfg.pixels()]).unwrap();
        assert_eq!(state.tokens.shape(), (5, 64));
        for c in 0..64 {
            assert_eq!(state.tokens.get(0, c), bb.cls.get(0, c) + bb.positions.get(0, c));
            for r in 1..5 {
                assert_eq!(state.tokens.get(r, c), bb.positions.get(r, c));
            }
        }
        assert!(matches!(bb.patch_embed(&[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_delta_matches_adapter_free_block() {
        let cfg = tiny_cfg();
        let bb = Backbone::init(&cfg, &mut SeededRng::new(2)).unwrap();
        let s0 = bb.patch_embed(&image(&cfg, 3)).unwrap();
        let plain = bb.block_forward(&s0, 1, None).unwrap();
        let zero = |_: Projection, x: &Matrix| Matrix::zeros(x.rows(), x.cols());
        let with_zero = bb.block_forward(&s0, 1, Some(&zero)).unwrap();
        assert_eq!(plain, with_zero);
        assert_eq!(plain, bb.block_forward(&s0, 1, None).unwrap());
        assert_eq!(plain.tokens.shape(), s0.tokens.shape());
        assert!(matches!(bb.block_forward(&plain, 1, None), Err(Error::Protocol(_))));
    }

    #[test]
    fn delta_shape_mismatch_is_rejected() {
        let cfg = tiny_cfg();
        let bb = Backbone::init(&cfg, &mut SeededRng::new(2)).unwrap();
        let s0 = bb.patch_embed(&image(&cfg, 3)).unwrap();
        let bad = |_: Projection, _: &Matrix| Matrix::zeros(1, 1);
        assert!(matches!(
            bb.block_forward(&s0, 1, Some(&bad)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn single_token_single_head_closed_form() {
        let cfg = BackboneConfig {
            num_blocks: 1,
            width: 4,
            heads: 1,
            mlp_ratio: 1.0,
            image_side: 2,
            patch_side: 2,
            channels: 1,
            attach: AttachSet::query_value(),
        };
        let bb = Backbone::init(&cfg, &mut SeededRng::new(4)).unwrap();
        let z = Matrix::from_rows(&[&[0.3, -1.0, 2.0, 0.5]]);
        let mut tape = Tape::new();
        let zv = tape.constant(&z);
        let out = bb.block_on_tape(&mut tape, zv, 1, &mut NoAdapter).unwrap();
        let got = tape.value(out).clone();

        // By hand: a lone token attends to itself with weight exactly 1.
        let ln = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / x.len() as f64;
            x.iter().map(|a| (a - m) / (v + LN_EPS).sqrt()).collect()
        };
        let b = &bb.blocks[0];
        let x = Matrix::row_vector(ln(z.row(0)));
        let v = matmul_nt(&x, &b.wv).unwrap().add(&b.bv).unwrap();
        let attn = matmul_nt(&v, &b.wo).unwrap().add(&b.bo).unwrap();
        let z1 = z.add(&attn).unwrap();
        let y = Matrix::row_vector(ln(z1.row(0)));
        let h = matmul_nt(&y, &b.w1).unwrap().add(&b.b1).unwrap().map(|t| {
            0.5 * t * (1.0 + (0.797_884_560_802_865_4 * (t + 0.044_715 * t * t * t)).tanh())
        });
        let m = matmul_nt(&h, &b.w2).unwrap().add(&b.b2).unwrap();
        let expected = z1.add(&m).unwrap();
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-12);
        let w = softmax_temperature(&[0.7], 1.0).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn extract_cls_is_layer_normalized_row_zero() {
        let cfg = tiny_cfg();
        let bb = Backbone::init(&cfg, &mut SeededRng::new(8)).unwrap();
        let mut tokens = Matrix::zeros(cfg.num_tokens(), cfg.width);
        tokens.row_mut(0).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let cls = bb.extract_cls(&TokenState {
            tokens,
            block_index: 2,
        });
        let mean = cls.iter().sum::<f64>() / 8.0;
        let var = cls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cls_is_permutation_invariant_with_content_free_attention() {
        let cfg = tiny_cfg();
        let mut bb = Backbone::init(&cfg, &mut SeededRng::new(10)).unwrap();
        for b in &mut bb.blocks {
            b.wq = Matrix::zeros(cfg.width, cfg.width);
            b.wk = Matrix::zeros(cfg.width, cfg.width);
        }
        let s0 = bb.patch_embed(&image(&cfg, 11)).unwrap();
        let mut permuted = s0.clone();
        let rows: Vec<Vec<f64>> = (0..cfg.num_tokens()).map(|r| s0.tokens.row(r).to_vec()).collect();
        let order = [0, 3, 1, 4, 2];
        for (dst, &src) in order.iter().enumerate() {
            permuted.tokens.row_mut(dst).copy_from_slice(&rows[src]);
        }
        let run = |s: &TokenState| {
            let mut s = s.clone();
            for i in 1..=cfg.num_blocks {
                s = bb.block_forward(&s, i, None).unwrap();
            }
            bb.extract_cls(&s)
        };
        let a = run(&s0);
        let b = run(&permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_are_sinusoids() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(0, 1), 1.0);
        assert!((p.get(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((p.get(1, 2) - (1.0f64 / 100.0).sin()).abs() < 1e-15);
    }
}
