//! The divided space-time attention encoder, the lightweight reconstruction
//! decoder, and the classification head.
//!
//! Every forward runs on a [`Tape`], so the same code path serves training,
//! evaluation and gradient checking. Attention is factorized: a temporal
//! sub-block attends across frames within one patch column, a spatial
//! sub-block attends across patches within one frame. Groups are ragged on
//! purpose — after masking, each patch column keeps a different number of
//! visible frames.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{MvccError, Result};
use crate::masking::TokenBatch;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl EncoderConfig {
    /// Desk-scale default geometry; everything is configurable.
    pub fn desk_default() -> Self {
        EncoderConfig {
            patch_size: 8,
            token_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            frames: 16,
            height: 64,
            width: 64,
            channels: 1,
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn pixel_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.token_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(MvccError::Config("encoder dims must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(MvccError::Config("encoder depth must be >= 1".into()));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(MvccError::Config(format!(
                "token_dim {} must divide by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.patch_size == 0
            || self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
        {
            return Err(MvccError::Config(format!(
                "H={} W={} must divide by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(MvccError::Config("mlp_ratio must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl DecoderConfig {
    pub fn desk_default() -> Self {
        DecoderConfig {
            token_dim: 32,
            depth: 2,
            heads: 4,
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.depth == 0 {
            return Err(MvccError::Config("decoder depth must be >= 1".into()));
        }
        if self.depth > encoder.depth {
            return Err(MvccError::Config(format!(
                "decoder depth {} exceeds encoder depth {}",
                self.depth, encoder.depth
            )));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(MvccError::Config(format!(
                "decoder token_dim {} must divide by heads {}",
                self.token_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk_default(),
            decoder: DecoderConfig::desk_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)
    }
}

/// Flat, name-addressed store of every trainable tensor.
#[derive(Debug, Clone)]
pub struct ParamBank {
    names: Vec<String>,
    mats: Vec<Mat>,
    by_name: HashMap<String, usize>,
}

impl ParamBank {
    pub fn new() -> Self {
        ParamBank {
            names: Vec::new(),
            mats: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn add(&mut self, name: &str, mat: Mat) -> usize {
        debug_assert!(!self.by_name.contains_key(name), "duplicate param {name}");
        let id = self.mats.len();
        self.names.push(name.to_string());
        self.mats.push(mat);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.mats[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.mats[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.mats.iter())
    }

    /// Total scalar count, handy for sizing reports.
    pub fn n_scalars(&self) -> usize {
        self.mats.iter().map(Mat::len).sum()
    }
}

impl Default for ParamBank {
    fn default() -> Self {
        Self::new()
    }
}

/// Caches one tape leaf per parameter so repeated uses share a node and
/// gradients accumulate there.
pub struct ParamVars {
    vars: Vec<Option<Var>>,
}

impl ParamVars {
    pub fn new(bank: &ParamBank) -> Self {
        ParamVars {
            vars: vec![None; bank.len()],
        }
    }

    pub fn get(&mut self, tape: &mut Tape, bank: &ParamBank, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let v = tape.param_leaf(bank.get(id).clone(), id);
        self.vars[id] = Some(v);
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncBlockIds {
    pub ln1: LayerNormIds,
    pub attn_t: AttnIds,
    pub ln2: LayerNormIds,
    pub attn_s: AttnIds,
    pub ln3: LayerNormIds,
    pub mlp: MlpIds,
}

#[derive(Debug, Clone, Copy)]
pub struct DecBlockIds {
    pub ln1: LayerNormIds,
    pub attn: AttnIds,
    pub ln2: LayerNormIds,
    pub mlp: MlpIds,
}

#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub patch_w: usize,
    pub patch_b: usize,
    pub pos_time: usize,
    pub pos_space: usize,
    pub blocks: Vec<EncBlockIds>,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub proj_w: usize,
    pub proj_b: usize,
    pub mask_token: usize,
    pub pos_time: usize,
    pub pos_space: usize,
    pub blocks: Vec<DecBlockIds>,
    pub head_w: usize,
    pub head_b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub w: usize,
    pub b: usize,
}

/// Encoder, decoder and classifier parameters plus their configuration.
/// The decoder only participates during pretraining and the classifier
/// only during fine-tuning; unused parts simply receive no gradients.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub bank: ParamBank,
    pub enc: EncoderIds,
    pub dec: DecoderIds,
    pub head: HeadIds,
}

const INIT_STD: f64 = 0.02;

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).unwrap(),
        }
    }

    fn normal(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| self.normal.sample(&mut self.rng))
    }
}

fn add_layer_norm(bank: &mut ParamBank, prefix: &str, dim: usize) -> LayerNormIds {
    LayerNormIds {
        gamma: bank.add(&format!("{prefix}.gamma"), Mat::from_elem((1, dim), 1.0)),
        beta: bank.add(&format!("{prefix}.beta"), Mat::zeros((1, dim))),
    }
}

fn add_attention(bank: &mut ParamBank, init: &mut Init, prefix: &str, dim: usize) -> AttnIds {
    AttnIds {
        wq: bank.add(&format!("{prefix}.wq"), init.normal(dim, dim)),
        bq: bank.add(&format!("{prefix}.bq"), Mat::zeros((1, dim))),
        wk: bank.add(&format!("{prefix}.wk"), init.normal(dim, dim)),
        bk: bank.add(&format!("{prefix}.bk"), Mat::zeros((1, dim))),
        wv: bank.add(&format!("{prefix}.wv"), init.normal(dim, dim)),
        bv: bank.add(&format!("{prefix}.bv"), Mat::zeros((1, dim))),
        wo: bank.add(&format!("{prefix}.wo"), init.normal(dim, dim)),
        bo: bank.add(&format!("{prefix}.bo"), Mat::zeros((1, dim))),
    }
}

fn add_mlp(bank: &mut ParamBank, init: &mut Init, prefix: &str, dim: usize, hidden: usize) -> MlpIds {
    MlpIds {
        w1: bank.add(&format!("{prefix}.w1"), init.normal(dim, hidden)),
        b1: bank.add(&format!("{prefix}.b1"), Mat::zeros((1, hidden))),
        w2: bank.add(&format!("{prefix}.w2"), init.normal(hidden, dim)),
        b2: bank.add(&format!("{prefix}.b2"), Mat::zeros((1, dim))),
    }
}

impl Model {
    /// Deterministic initialization: the parameter draw order is the
    /// construction order below, from a ChaCha stream seeded with `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let d = &cfg.decoder;
        let mut bank = ParamBank::new();
        let mut init = Init::new(seed);
        let (dim, p) = (e.token_dim, e.patches_per_frame());

        let enc = EncoderIds {
            patch_w: bank.add("enc.patch_embed.weight", init.normal(e.pixel_dim(), dim)),
            patch_b: bank.add("enc.patch_embed.bias", Mat::zeros((1, dim))),
            pos_time: bank.add("enc.pos_time", init.normal(e.frames, dim)),
            pos_space: bank.add("enc.pos_space", init.normal(p, dim)),
            blocks: (0..e.depth)
                .map(|i| {
                    let pre = format!("enc.block{i}");
                    EncBlockIds {
                        ln1: add_layer_norm(&mut bank, &format!("{pre}.ln1"), dim),
                        attn_t: add_attention(&mut bank, &mut init, &format!("{pre}.attn_t"), dim),
                        ln2: add_layer_norm(&mut bank, &format!("{pre}.ln2"), dim),
                        attn_s: add_attention(&mut bank, &mut init, &format!("{pre}.attn_s"), dim),
                        ln3: add_layer_norm(&mut bank, &format!("{pre}.ln3"), dim),
                        mlp: add_mlp(&mut bank, &mut init, &format!("{pre}.mlp"), dim, e.mlp_hidden()),
                    }
                })
                .collect(),
        };

        let dd = d.token_dim;
        let dec_hidden = ((dd as f64 * e.mlp_ratio).round() as usize).max(1);
        let dec = DecoderIds {
            proj_w: bank.add("dec.proj.weight", init.normal(dim, dd)),
            proj_b: bank.add("dec.proj.bias", Mat::zeros((1, dd))),
            mask_token: bank.add("dec.mask_token", init.normal(1, dd)),
            pos_time: bank.add("dec.pos_time", init.normal(e.frames, dd)),
            pos_space: bank.add("dec.pos_space", init.normal(p, dd)),
            blocks: (0..d.depth)
                .map(|i| {
                    let pre = format!("dec.block{i}");
                    DecBlockIds {
                        ln1: add_layer_norm(&mut bank, &format!("{pre}.ln1"), dd),
                        attn: add_attention(&mut bank, &mut init, &format!("{pre}.attn"), dd),
                        ln2: add_layer_norm(&mut bank, &format!("{pre}.ln2"), dd),
                        mlp: add_mlp(&mut bank, &mut init, &format!("{pre}.mlp"), dd, dec_hidden),
                    }
                })
                .collect(),
            head_w: bank.add("dec.head.weight", init.normal(dd, e.pixel_dim())),
            head_b: bank.add("dec.head.bias", Mat::zeros((1, e.pixel_dim()))),
        };

        let head = HeadIds {
            w: bank.add("head.weight", init.normal(dim, 2)),
            b: bank.add("head.bias", Mat::zeros((1, 2))),
        };

        Ok(Model {
            cfg: cfg.clone(),
            bank,
            enc,
            dec,
            head,
        })
    }

    fn check_positions(&self, positions: &[(usize, usize)]) -> Result<()> {
        let t = self.cfg.encoder.frames;
        let p = self.cfg.encoder.patches_per_frame();
        for &(f, j) in positions {
            if f >= t || j >= p {
                return Err(MvccError::Contract(format!(
                    "position ({f}, {j}) outside the {t}x{p} grid"
                )));
            }
        }
        Ok(())
    }
}

/// How tokens are grouped for one attention sub-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    /// Tokens sharing a patch index attend across frames (temporal).
    PatchIndex,
    /// Tokens sharing a frame index attend across patches (spatial).
    FrameIndex,
    /// One joint group over every token (decoder).
    All,
}

fn build_groups(positions: &[(usize, usize)], by: GroupBy) -> Vec<Rc<Vec<usize>>> {
    match by {
        GroupBy::All => vec![Rc::new((0..positions.len()).collect())],
        _ => {
            let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &(f, j)) in positions.iter().enumerate() {
                let key = match by {
                    GroupBy::PatchIndex => j,
                    GroupBy::FrameIndex => f,
                    GroupBy::All => unreachable!(),
                };
                map.entry(key).or_default().push(i);
            }
            map.into_values().map(Rc::new).collect()
        }
    }
}

fn inverse_permutation(groups: &[Rc<Vec<usize>>], n: usize) -> Rc<Vec<usize>> {
    let mut inv = vec![0usize; n];
    let mut at = 0;
    for g in groups {
        for &tok in g.iter() {
            inv[tok] = at;
            at += 1;
        }
    }
    Rc::new(inv)
}

fn layer_norm(tape: &mut Tape, pv: &mut ParamVars, bank: &ParamBank, x: Var, ids: LayerNormIds) -> Var {
    let gamma = pv.get(tape, bank, ids.gamma);
    let beta = pv.get(tape, bank, ids.beta);
    tape.layer_norm_rows(x, gamma, beta)
}

fn linear(tape: &mut Tape, pv: &mut ParamVars, bank: &ParamBank, x: Var, w: usize, b: usize) -> Var {
    let wv = pv.get(tape, bank, w);
    let bv = pv.get(tape, bank, b);
    let prod = tape.matmul(x, wv);
    tape.add_row_broadcast(prod, bv)
}

/// Multi-head scaled dot-product attention restricted to `groups`. Output
/// rows line up with the input rows.
fn attention(
    tape: &mut Tape,
    pv: &mut ParamVars,
    bank: &ParamBank,
    x: Var,
    groups: &[Rc<Vec<usize>>],
    ids: AttnIds,
    heads: usize,
) -> Var {
    let dim = tape.value(x).ncols();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let n = tape.value(x).nrows();

    let mut group_outputs = Vec::with_capacity(groups.len());
    for g in groups {
        let xg = tape.gather_rows(x, Rc::clone(g));
        let q = linear(tape, pv, bank, xg, ids.wq, ids.bq);
        let k = linear(tape, pv, bank, xg, ids.wk, ids.bk);
        let v = linear(tape, pv, bank, xg, ids.wv, ids.bv);
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scaled);
            head_outs.push(tape.matmul(weights, vh));
        }
        let merged = tape.concat_cols(head_outs);
        group_outputs.push(linear(tape, pv, bank, merged, ids.wo, ids.bo));
    }
    let stacked = tape.concat_rows(group_outputs);
    tape.gather_rows(stacked, inverse_permutation(groups, n))
}

fn mlp(tape: &mut Tape, pv: &mut ParamVars, bank: &ParamBank, x: Var, ids: MlpIds) -> Var {
    let h = linear(tape, pv, bank, x, ids.w1, ids.b1);
    let act = tape.gelu(h);
    linear(tape, pv, bank, act, ids.w2, ids.b2)
}

/// Linear patch projection plus separable learned positional embeddings:
/// `pos(f, j) = pos_time[f] + pos_space[j]`, added per token.
pub fn embed_tokens(
    tape: &mut Tape,
    pv: &mut ParamVars,
    model: &Model,
    tokens: &Mat,
    positions: &[(usize, usize)],
) -> Result<Var> {
    if tokens.ncols() != model.cfg.encoder.pixel_dim() {
        return Err(MvccError::Contract(format!(
            "token pixel dim {} != expected {}",
            tokens.ncols(),
            model.cfg.encoder.pixel_dim()
        )));
    }
    if tokens.nrows() != positions.len() {
        return Err(MvccError::Contract("one position per token required".into()));
    }
    model.check_positions(positions)?;
    let x = tape.constant(tokens.clone());
    let projected = linear(tape, pv, &model.bank, x, model.enc.patch_w, model.enc.patch_b);
    let frame_idx: Rc<Vec<usize>> = Rc::new(positions.iter().map(|&(f, _)| f).collect());
    let patch_idx: Rc<Vec<usize>> = Rc::new(positions.iter().map(|&(_, j)| j).collect());
    let pos_t_table = pv.get(tape, &model.bank, model.enc.pos_time);
    let pos_s_table = pv.get(tape, &model.bank, model.enc.pos_space);
    let pos_t = tape.gather_rows(pos_t_table, frame_idx);
    let pos_s = tape.gather_rows(pos_s_table, patch_idx);
    let with_t = tape.add(projected, pos_t);
    Ok(tape.add(with_t, pos_s))
}

pub struct EncodeOutput {
    /// Per-token representations after the final block.
    pub tokens: Var,
    /// Mean pooled clip representation q (1 x D).
    pub pooled: Var,
}

/// Run the encoder; `sub_block_limit` truncates after that many sub-blocks
/// (temporal, spatial, mlp count as one each), which diagnostics use to
/// observe intermediate locality.
pub fn encode_with_limit(
    tape: &mut Tape,
    pv: &mut ParamVars,
    model: &Model,
    embedded: Var,
    positions: &[(usize, usize)],
    sub_block_limit: Option<usize>,
) -> Result<EncodeOutput> {
    if positions.is_empty() {
        return Err(MvccError::Contract(
            "encoder requires a nonempty token sequence".into(),
        ));
    }
    let limit = sub_block_limit.unwrap_or(usize::MAX);
    let temporal_groups = build_groups(positions, GroupBy::PatchIndex);
    let spatial_groups = build_groups(positions, GroupBy::FrameIndex);
    let heads = model.cfg.encoder.heads;
    let bank = &model.bank;

    let mut x = embedded;
    let mut applied = 0;
    'blocks: for block in &model.enc.blocks {
        for stage in 0..3 {
            if applied >= limit {
                break 'blocks;
            }
            x = match stage {
                0 => {
                    let n = layer_norm(tape, pv, bank, x, block.ln1);
                    let a = attention(tape, pv, bank, n, &temporal_groups, block.attn_t, heads);
                    tape.add(x, a)
                }
                1 => {
                    let n = layer_norm(tape, pv, bank, x, block.ln2);
                    let a = attention(tape, pv, bank, n, &spatial_groups, block.attn_s, heads);
                    tape.add(x, a)
                }
                _ => {
                    let n = layer_norm(tape, pv, bank, x, block.ln3);
                    let m = mlp(tape, pv, bank, n, block.mlp);
                    tape.add(x, m)
                }
            };
            applied += 1;
        }
    }
    let pooled = tape.mean_rows(x);
    Ok(EncodeOutput { tokens: x, pooled })
}

pub fn encode(
    tape: &mut Tape,
    pv: &mut ParamVars,
    model: &Model,
    embedded: Var,
    positions: &[(usize, usize)],
) -> Result<EncodeOutput> {
    encode_with_limit(tape, pv, model, embedded, positions, None)
}

/// Embed then encode a (possibly masked) token batch.
pub fn encode_token_batch(
    tape: &mut Tape,
    pv: &mut ParamVars,
    model: &Model,
    batch: &TokenBatch,
) -> Result<EncodeOutput> {
    let embedded = embed_tokens(tape, pv, model, &batch.tokens, &batch.token_positions)?;
    encode(tape, pv, model, embedded, &batch.token_positions)
}

pub struct DecodeOutput {
    /// Reconstructed pixels for every grid position, visible rows first,
    /// then masked rows in mask-position order.
    pub full: Var,
    /// Reconstructed pixels for the masked positions only.
    pub masked: Var,
    pub n_visible: usize,
}

/// Decoder over the full token set: projected visible latents plus one
/// shared learnable mask token per masked position, with the decoder's own
/// separable positional embeddings, joint space-time attention blocks, and
/// a linear pixel head.
pub fn decode(
    tape: &mut Tape,
    pv: &mut ParamVars,
    model: &Model,
    encoder_tokens: Var,
    visible_positions: &[(usize, usize)],
    mask_positions: &[(usize, usize)],
) -> Result<DecodeOutput> {
    let expected = model.cfg.encoder.frames * model.cfg.encoder.patches_per_frame();
    if visible_positions.len() + mask_positions.len() != expected {
        return Err(MvccError::Contract(format!(
            "visible ({}) + masked ({}) must cover the {} grid slots",
            visible_positions.len(),
            mask_positions.len(),
            expected
        )));
    }
    model.check_positions(mask_positions)?;
    let bank = &model.bank;
    let dec = &model.dec;
    let n_vis = visible_positions.len();

    let projected = linear(tape, pv, bank, encoder_tokens, dec.proj_w, dec.proj_b);
    let all = if mask_positions.is_empty() {
        projected
    } else {
        let mask_tok = pv.get(tape, bank, dec.mask_token);
        let mask_rows = tape.broadcast_row(mask_tok, mask_positions.len());
        tape.concat_rows(vec![projected, mask_rows])
    };

    let positions: Vec<(usize, usize)> = visible_positions
        .iter()
        .chain(mask_positions.iter())
        .copied()
        .collect();
    let frame_idx: Rc<Vec<usize>> = Rc::new(positions.iter().map(|&(f, _)| f).collect());
    let patch_idx: Rc<Vec<usize>> = Rc::new(positions.iter().map(|&(_, j)| j).collect());
    let pos_t_table = pv.get(tape, bank, dec.pos_time);
    let pos_s_table = pv.get(tape, bank, dec.pos_space);
    let pos_t = tape.gather_rows(pos_t_table, frame_idx);
    let pos_s = tape.gather_rows(pos_s_table, patch_idx);
    let with_t = tape.add(all, pos_t);
    let mut x = tape.add(with_t, pos_s);

    let joint = build_groups(&positions, GroupBy::All);
    for block in &dec.blocks {
        let n = layer_norm(tape, pv, bank, x, block.ln1);
        let a = attention(tape, pv, bank, n, &joint, block.attn, model.cfg.decoder.heads);
        x = tape.add(x, a);
        let n = layer_norm(tape, pv, bank, x, block.ln2);
        let m = mlp(tape, pv, bank, n, block.mlp);
        x = tape.add(x, m);
    }
    let full = linear(tape, pv, bank, x, dec.head_w, dec.head_b);
    let mask_rows: Rc<Vec<usize>> = Rc::new((n_vis..n_vis + mask_positions.len()).collect());
    let masked = tape.gather_rows(full, mask_rows);
    Ok(DecodeOutput {
        full,
        masked,
        n_visible: n_vis,
    })
}

/// Affine map D -> 2; no softmax baked in, the loss applies it.
pub fn classify(tape: &mut Tape, pv: &mut ParamVars, model: &Model, pooled: Var) -> Var {
    linear(tape, pv, &model.bank, pooled, model.head.w, model.head.b)
}

/// Forward-only pooled representation of a token batch (fresh tape).
pub fn pooled_representation(model: &Model, batch: &TokenBatch) -> Result<Mat> {
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(&model.bank);
    let out = encode_token_batch(&mut tape, &mut pv, model, batch)?;
    Ok(tape.value(out.pooled).clone())
}

/// Forward-only logits for a token batch (fresh tape).
pub fn classify_token_batch(model: &Model, batch: &TokenBatch) -> Result<Mat> {
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(&model.bank);
    let out = encode_token_batch(&mut tape, &mut pv, model, batch)?;
    let logits = classify(&mut tape, &mut pv, model, out.pooled);
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{apply_mask, make_mask_plan, patchify};
    use crate::data::VideoClip;
    use rand::Rng;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                patch_size: 2,
                token_dim: 8,
                depth: 2,
                heads: 2,
                mlp_ratio: 2.0,
                frames: 3,
                height: 4,
                width: 4,
                channels: 1,
            },
            decoder: DecoderConfig {
                token_dim: 4,
                depth: 1,
                heads: 2,
            },
        }
    }

    fn random_clip(cfg: &EncoderConfig, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.frames * cfg.height * cfg.width * cfg.channels;
        let pixels: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        VideoClip::new("m".into(), 0, cfg.frames, cfg.height, cfg.width, cfg.channels, pixels)
            .unwrap()
    }

    fn full_batch(cfg: &EncoderConfig, seed: u64) -> TokenBatch {
        let clip = random_clip(cfg, seed);
        let grid = patchify(&clip, cfg.patch_size).unwrap();
        let plan = make_mask_plan(grid.t, grid.p, 0.0, 0.0, 0).unwrap();
        apply_mask(&grid, &plan).unwrap()
    }

    #[test]
    fn zero_projection_leaves_positional_embeddings() {
        let cfg = micro_config();
        let mut model = Model::init(&cfg, 1).unwrap();
        let pw = model.enc.patch_w;
        model.bank.get_mut(pw).fill(0.0);
        let positions = vec![(0usize, 0usize), (2, 3)];
        let tokens = Mat::zeros((2, cfg.encoder.pixel_dim()));
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model.bank);
        let out = embed_tokens(&mut tape, &mut pv, &model, &tokens, &positions).unwrap();
        let value = tape.value(out);
        for (row, &(f, j)) in positions.iter().enumerate() {
            let pos_t = model.bank.get(model.enc.pos_time);
            let pos_s = model.bank.get(model.enc.pos_space);
            for d in 0..cfg.encoder.token_dim {
                assert_eq!(value[[row, d]], pos_t[[f, d]] + pos_s[[j, d]]);
            }
        }
    }

    #[test]
    fn equal_pixels_at_equal_positions_embed_equally() {
        let cfg = micro_config();
        let model = Model::init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pix: Vec<f64> = (0..cfg.encoder.pixel_dim()).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut tokens = Mat::zeros((2, cfg.encoder.pixel_dim()));
        for (i, &v) in pix.iter().enumerate() {
            tokens[[0, i]] = v;
            tokens[[1, i]] = v;
        }
        let positions = vec![(1usize, 2usize), (1, 2)];
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model.bank);
        let out = embed_tokens(&mut tape, &mut pv, &model, &tokens, &positions).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn position_outside_grid_is_contract_violation() {
        let cfg = micro_config();
        let model = Model::init(&cfg, 3).unwrap();
        let tokens = Mat::zeros((1, cfg.encoder.pixel_dim()));
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model.bank);
        let err = embed_tokens(&mut tape, &mut pv, &model, &tokens, &[(9, 0)]).unwrap_err();
        assert!(matches!(err, MvccError::Contract(_)));
    }

    #[test]
    fn encoder_is_permutation_equivariant_over_tokens() {
        let cfg = micro_config();
        let model = Model::init(&cfg, 4).unwrap();
        let batch = full_batch(&cfg.encoder, 11);

        let run = |tokens: &Mat, positions: &[(usize, usize)]| -> Mat {
            let mut tape = Tape::new();
            let mut pv = ParamVars::new(&model.bank);
            let emb = embed_tokens(&mut tape, &mut pv, &model, tokens, positions).unwrap();
            let out = encode(&mut tape, &mut pv, &model, emb, positions).unwrap();
            tape.value(out.tokens).clone()
        };

        let base = run(&batch.tokens, &batch.token_positions);

        // Swap two tokens in sequence order, keeping positions attached.
        let mut tokens = batch.tokens.clone();
        let mut positions = batch.token_positions.clone();
        let (a, b) = (1usize, 7usize);
        positions.swap(a, b);
        let tmp = tokens.row(a).to_owned();
        let row_b = tokens.row(b).to_owned();
        tokens.row_mut(a).assign(&row_b);
        tokens.row_mut(b).assign(&tmp);

        let swapped = run(&tokens, &positions);
        for (swapped_row, orig_row) in [(a, b), (b, a)] {
            for d in 0..cfg.encoder.token_dim {
                assert!(
                    (swapped[[swapped_row, d]] - base[[orig_row, d]]).abs() < 1e-9,
                    "per-token outputs should travel with their tokens"
                );
            }
        }
        for row in 0..base.nrows() {
            if row == a || row == b {
                continue;
            }
            for d in 0..cfg.encoder.token_dim {
                assert!((swapped[[row, d]] - base[[row, d]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_encodes_deterministically() {
        let cfg = micro_config();
        let model = Model::init(&cfg, 5).unwrap();
        let tokens = Mat::from_elem((1, cfg.encoder.pixel_dim()), 0.4);
        let positions = vec![(1usize, 1usize)];
        let run = || -> Mat {
            let mut tape = Tape::new();
            let mut pv = ParamVars::new(&model.bank);
            let emb = embed_tokens(&mut tape, &mut pv, &model, &tokens, &positions).unwrap();
            let out = encode(&mut tape, &mut pv, &model, emb, &positions).unwrap();
            tape.value(out.pooled).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_inputs_pool_to_identical_q() {
        let cfg = micro_config();
        let model = Model::init(&cfg, 6).unwrap();
        let batch = full_batch(&cfg.encoder, 21);
        let q1 = pooled_representation(&model, &batch).unwrap();
        let q2 = pooled_representation(&model, &batch).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(q1.ncols(), cfg.encoder.token_dim);
    }

    #[test]
    fn temporal_subblock_confines_perturbation_to_patch_column() {
        let cfg = micro_config();
        let mut model = Model::init(&cfg, 8).unwrap();
        // Zero the MLP sub-blocks so only attention mixes information.
        for b in 0..cfg.encoder.depth {
            let ids = model.enc.blocks[b].mlp;
            for id in [ids.w1, ids.b1, ids.w2, ids.b2] {
                model.bank.get_mut(id).fill(0.0);
            }
        }
        let batch = full_batch(&cfg.encoder, 31);
        let run = |tokens: &Mat| -> Mat {
            let mut tape = Tape::new();
            let mut pv = ParamVars::new(&model.bank);
            let emb = embed_tokens(&mut tape, &mut pv, &model, tokens, &batch.token_positions)
                .unwrap();
            let out = encode_with_limit(
                &mut tape,
                &mut pv,
                &model,
                emb,
                &batch.token_positions,
                Some(1),
            )
            .unwrap();
            tape.value(out.tokens).clone()
        };
        let base = run(&batch.tokens);
        let perturb_at = 0usize;
        let (_, j0) = batch.token_positions[perturb_at];
        let mut tokens = batch.tokens.clone();
        tokens[[perturb_at, 0]] += 0.37;
        let perturbed = run(&tokens);
        for (row, &(_, j)) in batch.token_positions.iter().enumerate() {
            if j != j0 {
                for d in 0..cfg.encoder.token_dim {
                    assert_eq!(
                        base[[row, d]], perturbed[[row, d]],
                        "token at patch {j} changed after temporal sub-block"
                    );
                }
            }
        }
    }

    #[test]
    fn decoder_emits_exactly_the_masked_rows() {
        let cfg = micro_config();
        let model = Model::init(&cfg, 9).unwrap();
        let clip = random_clip(&cfg.encoder, 41);
        let grid = patchify(&clip, cfg.encoder.patch_size).unwrap();
        let plan = make_mask_plan(grid.t, grid.p, 0.34, 50.0, 77).unwrap();
        let batch = apply_mask(&grid, &plan).unwrap();

        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model.bank);
        let enc_out = encode_token_batch(&mut tape, &mut pv, &model, &batch).unwrap();
        let dec_out = decode(
            &mut tape,
            &mut pv,
            &model,
            enc_out.tokens,
            &batch.token_positions,
            &batch.mask_positions,
        )
        .unwrap();
        let masked = tape.value(dec_out.masked);
        assert_eq!(masked.nrows(), batch.mask_positions.len());
        assert_eq!(masked.ncols(), cfg.encoder.pixel_dim());
        let full = tape.value(dec_out.full);
        assert_eq!(full.nrows(), grid.t * grid.p);
    }

    #[test]
    fn decoder_runs_with_all_tokens_visible() {
        let cfg = micro_config();
        let model = Model::init(&cfg, 10).unwrap();
        let batch = full_batch(&cfg.encoder, 51);
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model.bank);
        let enc_out = encode_token_batch(&mut tape, &mut pv, &model, &batch).unwrap();
        let dec_out = decode(
            &mut tape,
            &mut pv,
            &model,
            enc_out.tokens,
            &batch.token_positions,
            &[],
        )
        .unwrap();
        assert_eq!(tape.value(dec_out.masked).nrows(), 0);
    }

    #[test]
    fn classifier_is_a_plain_affine_map() {
        let cfg = micro_config();
        let mut model = Model::init(&cfg, 11).unwrap();
        // zero weights -> logits (0, 0)
        model.bank.get_mut(model.head.w).fill(0.0);
        let q = Mat::from_elem((1, cfg.encoder.token_dim), 0.3);
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model.bank);
        let qv = tape.leaf(q.clone());
        let logits = classify(&mut tape, &mut pv, &model, qv);
        assert_eq!(tape.value(logits), &Mat::zeros((1, 2)));

        // random head matches an independent matrix multiply
        let model = Model::init(&cfg, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = Mat::from_shape_fn((1, cfg.encoder.token_dim), |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model.bank);
        let qv = tape.leaf(q.clone());
        let logits = classify(&mut tape, &mut pv, &model, qv);
        let w = model.bank.get(model.head.w);
        let b = model.bank.get(model.head.b);
        for k in 0..2 {
            let mut expect = b[[0, k]];
            for d in 0..cfg.encoder.token_dim {
                expect += q[[0, d]] * w[[d, k]];
            }
            assert!((tape.value(logits)[[0, k]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_token_content_never_reaches_the_encoder() {
        let cfg = micro_config();
        let model = Model::init(&cfg, 14).unwrap();
        let clip = random_clip(&cfg.encoder, 61);
        let grid = patchify(&clip, cfg.encoder.patch_size).unwrap();
        let plan = make_mask_plan(grid.t, grid.p, 0.34, 50.0, 5).unwrap();

        let batch = apply_mask(&grid, &plan).unwrap();
        let base = pooled_representation(&model, &batch).unwrap();

        // Mutate the pixels of every masked patch in the source grid.
        let mut poisoned = grid.clone();
        for &(f, j) in &batch.mask_positions {
            poisoned.tokens.row_mut(f * grid.p + j).fill(0.999);
        }
        let poisoned_batch = apply_mask(&poisoned, &plan).unwrap();
        assert_eq!(batch.tokens, poisoned_batch.tokens);
        let after = pooled_representation(&model, &poisoned_batch).unwrap();
        assert_eq!(base, after);
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut cfg = micro_config();
        cfg.encoder.token_dim = 9; // not divisible by heads=2
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.decoder.depth = 5; // deeper than encoder
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.encoder.height = 5; // not divisible by patch size
        assert!(cfg.validate().is_err());
    }
}
