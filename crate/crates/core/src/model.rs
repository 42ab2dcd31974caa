//! Encode-process-decode network: an MLP encoder, `L` blocks of masked
//! multi-head attention and gated MLP with post-norm residuals, and an MLP
//! decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{positional_encoding, AugmentSpec, HeadMaskPlan, MaskBank, PeMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeFeatures};
use crate::ndiff::{AttentionMode, Tape, Tensor, Var};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Preset {
    S,
    M,
    L,
    XL,
    #[default]
    #[serde(rename = "custom")]
    Custom,
}

impl Preset {
    /// `(d, L, H)` for the named sizes.
    pub fn dims(self) -> Option<(usize, usize, usize)> {
        match self {
            Preset::S => Some((64, 10, 2)),
            Preset::M => Some((128, 15, 4)),
            Preset::L => Some((256, 15, 4)),
            Preset::XL => Some((512, 15, 4)),
            Preset::Custom => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Embedding width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Gated MLP expansion factor.
    pub expansion: usize,
    /// Node feature width before positional encoding.
    pub p_in: usize,
    pub p_out: usize,
    pub pe_mode: PeMode,
    /// Spatial dimension, used to size coordinate encodings.
    pub spatial_dim: usize,
    pub augment: AugmentSpec,
    pub self_loops: bool,
    pub attention: AttentionMode,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: Preset::Custom,
            d: 32,
            layers: 4,
            heads: 2,
            expansion: 3,
            p_in: 1,
            p_out: 1,
            pe_mode: PeMode::None,
            spatial_dim: 2,
            augment: AugmentSpec::none(),
            self_loops: false,
            attention: AttentionMode::NeighborhoodSoftmax,
            rms_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, p_in: usize, p_out: usize) -> ModelConfig {
        let (d, layers, heads) = preset.dims().unwrap_or((32, 4, 2));
        ModelConfig { preset, d, layers, heads, p_in, p_out, ..ModelConfig::default() }
    }

    pub fn custom(d: usize, layers: usize, heads: usize, p_in: usize, p_out: usize) -> ModelConfig {
        ModelConfig { d, layers, heads, p_in, p_out, ..ModelConfig::default() }
    }

    /// Encoder input width, `p_in + q`.
    pub fn input_width(&self) -> usize {
        self.p_in + self.pe_mode.width(self.spatial_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn gated_width(&self) -> usize {
        self.expansion * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.layers == 0 || self.expansion == 0 {
            return bad("layers and expansion must be at least 1".into());
        }
        if self.p_out == 0 || self.input_width() == 0 {
            return bad("input and output widths must be positive".into());
        }
        if let Some((d, layers, heads)) = self.preset.dims() {
            if (self.d, self.layers, self.heads) != (d, layers, heads) {
                return bad(format!("preset {:?} requires (d, L, H) = ({d}, {layers}, {heads})", self.preset));
            }
        }
        self.augment.validate()
    }
}

/// Two linear layers with a GeLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub g1: Tensor,
    pub g2: Tensor,
    pub wl: Tensor,
    pub bl: Tensor,
    pub wr: Tensor,
    pub br: Tensor,
    pub wf: Tensor,
    pub bf: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub encoder: MlpWeights,
    pub blocks: Vec<BlockWeights>,
    pub decoder: MlpWeights,
}

const MLP_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];
const BLOCK_NAMES: [&str; 12] =
    ["wq", "wk", "wv", "wo", "g1", "g2", "wl", "bl", "wr", "br", "wf", "bf"];

impl MlpWeights {
    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl BlockWeights {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.g1, &self.g2, &self.wl, &self.bl,
            &self.wr, &self.br, &self.wf, &self.bf,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.g1, &mut self.g2,
            &mut self.wl, &mut self.bl, &mut self.wr, &mut self.br, &mut self.wf, &mut self.bf,
        ]
    }
}

impl Weights {
    /// Every parameter array in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.encoder.tensors().to_vec();
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend(self.decoder.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.encoder.tensors_mut().into_iter().collect();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend(self.decoder.tensors_mut());
        out
    }

    /// Names aligned with [`Weights::tensors`], e.g. `block03.wq`.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = MLP_NAMES.iter().map(|n| format!("encoder.{n}")).collect();
        for l in 0..self.blocks.len() {
            out.extend(BLOCK_NAMES.iter().map(|n| format!("block{l:02}.{n}")));
        }
        out.extend(MLP_NAMES.iter().map(|n| format!("decoder.{n}")));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds weights from tensors in [`Weights::tensors`] order, checking shapes.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Weights> {
        let mut template = zero_weights(cfg);
        let slots = template.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::shape(
                "Weights::from_tensors",
                format!("{} arrays for {} slots", tensors.len(), slots.len()),
            ));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "Weights::from_tensors",
                    format!("{:?} vs {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(template)
    }

    /// Copies the encoder MLP and every block from `other` where shapes agree.
    /// Returns the number of arrays copied.
    pub fn transfer_trunk(&mut self, other: &Weights) -> usize {
        let mut copied = 0;
        let pairs = self
            .encoder
            .tensors_mut()
            .into_iter()
            .zip(other.encoder.tensors())
            .chain(
                self.blocks
                    .iter_mut()
                    .zip(&other.blocks)
                    .flat_map(|(a, b)| a.tensors_mut().into_iter().zip(b.tensors())),
            );
        for (dst, src) in pairs {
            if dst.shape() == src.shape() {
                *dst = src.clone();
                copied += 1;
            }
        }
        copied
    }
}

fn mlp_shapes(input: usize, hidden: usize, output: usize) -> [Vec<usize>; 4] {
    [vec![input, hidden], vec![hidden], vec![hidden, output], vec![output]]
}

fn block_shapes(d: usize, ed: usize) -> [Vec<usize>; 12] {
    [
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d, ed],
        vec![ed],
        vec![d, ed],
        vec![ed],
        vec![ed, d],
        vec![d],
    ]
}

fn all_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = mlp_shapes(cfg.input_width(), cfg.d, cfg.d).to_vec();
    for _ in 0..cfg.layers {
        out.extend(block_shapes(cfg.d, cfg.gated_width()));
    }
    out.extend(mlp_shapes(cfg.d, cfg.d, cfg.p_out));
    out
}

fn zero_weights(cfg: &ModelConfig) -> Weights {
    let mut it = all_shapes(cfg).into_iter().map(|s| Tensor::zeros(&s));
    let mlp = |it: &mut dyn Iterator<Item = Tensor>| MlpWeights {
        w1: it.next().unwrap(),
        b1: it.next().unwrap(),
        w2: it.next().unwrap(),
        b2: it.next().unwrap(),
    };
    let encoder = mlp(&mut it);
    let blocks = (0..cfg.layers)
        .map(|_| BlockWeights {
            wq: it.next().unwrap(),
            wk: it.next().unwrap(),
            wv: it.next().unwrap(),
            wo: it.next().unwrap(),
            g1: it.next().unwrap(),
            g2: it.next().unwrap(),
            wl: it.next().unwrap(),
            bl: it.next().unwrap(),
            wr: it.next().unwrap(),
            br: it.next().unwrap(),
            wf: it.next().unwrap(),
            bf: it.next().unwrap(),
        })
        .collect();
    let decoder = mlp(&mut it);
    Weights { encoder, blocks, decoder }
}

/// Matrices ~ Normal(0, 1/fan_in); biases 0; norm gains 1.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Weights {
    let mut w = zero_weights(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Init, 0));
    for block in &mut w.blocks {
        block.g1 = Tensor::ones(block.g1.shape());
        block.g2 = Tensor::ones(block.g2.shape());
    }
    for t in w.tensors_mut() {
        if t.shape().len() == 2 {
            let fan_in = t.shape()[0].max(1) as f64;
            let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive std");
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    w
}

/// Exact number of scalars in [`Weights`] for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    all_shapes(cfg).iter().map(|s| s.iter().product::<usize>()).sum()
}

/// Parameters recorded as tape leaves, mirroring [`Weights::tensors`] order.
pub struct WeightVars {
    pub all: Vec<Var>,
    layers: usize,
}

impl WeightVars {
    pub fn record(tape: &mut Tape, w: &Weights) -> WeightVars {
        let all = w.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        WeightVars { all, layers: w.blocks.len() }
    }

    /// Wraps leaves already on the tape, in [`Weights::tensors`] order.
    pub fn from_vars(cfg: &ModelConfig, all: Vec<Var>) -> Result<WeightVars> {
        let expected = 4 + 12 * cfg.layers + 4;
        if all.len() != expected {
            return Err(Error::shape("WeightVars", format!("{} leaves, expected {expected}", all.len())));
        }
        Ok(WeightVars { all, layers: cfg.layers })
    }

    fn encoder(&self) -> &[Var] {
        &self.all[..4]
    }

    fn block(&self, l: usize) -> &[Var] {
        &self.all[4 + 12 * l..4 + 12 * (l + 1)]
    }

    fn decoder(&self) -> &[Var] {
        &self.all[4 + 12 * self.layers..]
    }
}

fn mlp(tape: &mut Tape, w: &[Var], x: Var) -> Result<Var> {
    let h = tape.linear(x, w[0], Some(w[1]))?;
    let h = tape.gelu(h)?;
    tape.linear(h, w[2], Some(w[3]))
}

/// `Z0 = MLP(X)`.
pub fn encode(tape: &mut Tape, w: &WeightVars, x: Var) -> Result<Var> {
    mlp(tape, w.encoder(), x)
}

/// `y = MLP(Z_L)`.
pub fn decode(tape: &mut Tape, w: &WeightVars, z: Var) -> Result<Var> {
    mlp(tape, w.decoder(), z)
}

/// Masked multi-head attention followed by `W_O`.
fn mmha(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &[Var],
    z: Var,
    plan: &HeadMaskPlan,
    layer: usize,
) -> Result<Var> {
    let q = tape.linear(z, w[0], None)?;
    let k = tape.linear(z, w[1], None)?;
    let v = tape.linear(z, w[2], None)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let mask = plan.mask(layer, h).clone();
        heads.push(tape.masked_attention(qh, kh, vh, mask, cfg.attention)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    tape.linear(cat, w[3], None)
}

/// One processor block:
/// `Z' = RMSNorm(MMHA(Z) + Z)`, then `Z = RMSNorm(GatedMLP(Z') + Z')`.
pub fn block_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &WeightVars,
    z: Var,
    plan: &HeadMaskPlan,
    layer: usize,
) -> Result<Var> {
    let bw = w.block(layer);
    let attn = mmha(tape, cfg, bw, z, plan, layer)?;
    let res = tape.add(attn, z)?;
    let z1 = tape.rmsnorm(res, bw[4], cfg.rms_eps)?;

    let left = tape.linear(z1, bw[6], Some(bw[7]))?;
    let left = tape.gelu(left)?;
    let right = tape.linear(z1, bw[8], Some(bw[9]))?;
    let gated = tape.hadamard(left, right)?;
    let mlp_out = tape.linear(gated, bw[10], Some(bw[11]))?;
    let res = tape.add(mlp_out, z1)?;
    tape.rmsnorm(res, bw[5], cfg.rms_eps)
}

/// Full network on a tape. `x` must already include any positional encoding.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &WeightVars,
    x: Var,
    plan: &HeadMaskPlan,
) -> Result<Var> {
    if plan.layers() != cfg.layers || plan.heads() != cfg.heads {
        return Err(Error::shape(
            "forward",
            format!(
                "plan is {}x{}, model is {}x{}",
                plan.layers(),
                plan.heads(),
                cfg.layers,
                cfg.heads
            ),
        ));
    }
    let xv = tape.value(x);
    if xv.cols() != cfg.input_width() || xv.rows() != plan.num_nodes() {
        return Err(Error::shape(
            "forward",
            format!(
                "input {:?}, expected [{}, {}]",
                xv.shape(),
                plan.num_nodes(),
                cfg.input_width()
            ),
        ));
    }
    let mut z = encode(tape, w, x)?;
    for layer in 0..cfg.layers {
        z = block_forward(tape, cfg, w, z, plan, layer)?;
    }
    decode(tape, w, z)
}

/// Configuration plus weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let weights = init_weights(&cfg, seed);
        Ok(Model { cfg, weights })
    }

    pub fn from_weights(cfg: ModelConfig, weights: Weights) -> Result<Model> {
        cfg.validate()?;
        let check = Weights::from_tensors(&cfg, weights.tensors().into_iter().cloned().collect())?;
        drop(check);
        Ok(Model { cfg, weights })
    }

    /// Output for an input matrix that already includes positional encoding.
    pub fn predict(&self, x: &Tensor, plan: &HeadMaskPlan) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = WeightVars::record(&mut tape, &self.weights);
        let xv = tape.leaf(x.clone());
        let y = forward_on_tape(&mut tape, &self.cfg, &w, xv, plan)?;
        Ok(tape.value(y).clone())
    }

    /// Builds masks and positional encodings for `g` and runs the network.
    pub fn forward(&self, g: &Graph, x: &NodeFeatures, mask_seed: u64) -> Result<Tensor> {
        let bank = MaskBank::new(g, &self.cfg.augment, self.cfg.layers, self.cfg.heads, self.cfg.self_loops, mask_seed)?;
        let plan = bank.plan(mask_seed)?;
        let input = with_positional_encoding(g, &x.values, self.cfg.pe_mode)?;
        self.predict(&input, &plan)
    }
}

/// Appends positional-encoding columns to `x`.
pub fn with_positional_encoding(g: &Graph, x: &Tensor, mode: PeMode) -> Result<Tensor> {
    if mode == PeMode::None {
        return Ok(x.clone());
    }
    let pe = positional_encoding(g, mode)?;
    Tensor::hcat(&[x, &pe.values])
}

/// Per-node FLOP estimates for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub transformer_per_node: f64,
    pub mps_per_node: f64,
    pub two_p: f64,
    pub ratio_transformer: f64,
    pub ratio_mps: f64,
}

/// Transformer `L * 26 d^2`, message passing `6 d^2 + L * 22 d^2`, and both
/// relative to `2P`.
pub fn flops_estimate(cfg: &ModelConfig) -> FlopsEstimate {
    let d2 = (cfg.d * cfg.d) as f64;
    let layers = cfg.layers as f64;
    let transformer_per_node = layers * 26.0 * d2;
    let mps_per_node = 6.0 * d2 + layers * 22.0 * d2;
    let two_p = 2.0 * param_count(cfg) as f64;
    FlopsEstimate {
        transformer_per_node,
        mps_per_node,
        two_p,
        ratio_transformer: transformer_per_node / two_p,
        ratio_mps: mps_per_node / two_p,
    }
}

/// Training FLOPs `6 P D`: `2P` per node forward, twice that backward.
pub fn training_flops(params: usize, nodes: u64) -> f64 {
    6.0 * params as f64 * nodes as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SparseMask;
    use std::sync::Arc;

    fn tiny() -> ModelConfig {
        ModelConfig::custom(4, 1, 2, 3, 2)
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let cfg = tiny();
        let a = init_weights(&cfg, 11);
        assert_eq!(a, init_weights(&cfg, 11));
        assert_ne!(a, init_weights(&cfg, 12));
        for b in &a.blocks {
            assert!(b.g1.data().iter().chain(b.g2.data()).all(|&g| g == 1.0));
            assert!(b.bl.data().iter().chain(b.br.data()).chain(b.bf.data()).all(|&v| v == 0.0));
        }
        assert!(a.encoder.b1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_std_matches_fan_in() {
        let cfg = ModelConfig::custom(64, 1, 2, 3, 2);
        let w = init_weights(&cfg, 3);
        let wq = w.blocks[0].wq.data();
        assert_eq!(wq.len(), 4096);
        let mean = wq.iter().sum::<f64>() / 4096.0;
        let std = (wq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4095.0).sqrt();
        let target = 1.0 / 8.0;
        assert!(std > 0.8 * target && std < 1.2 * target, "std {std}");
    }

    #[test]
    fn param_count_matches_weights() {
        for cfg in [tiny(), ModelConfig::custom(16, 3, 4, 7, 3), ModelConfig::from_preset(Preset::S, 9, 2)] {
            assert_eq!(param_count(&cfg), init_weights(&cfg, 0).num_scalars());
        }
    }

    #[test]
    fn names_align_with_tensors() {
        let w = init_weights(&ModelConfig::custom(4, 2, 2, 3, 2), 0);
        let names = w.names();
        assert_eq!(names.len(), w.tensors().len());
        assert_eq!(names[4], "block00.wq");
        assert_eq!(names.last().unwrap(), "decoder.b2");
    }

    #[test]
    fn validate_rejects_bad_heads() {
        assert!(ModelConfig::custom(10, 1, 4, 1, 1).validate().is_err());
        let mut cfg = ModelConfig::from_preset(Preset::S, 3, 1);
        cfg.d = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_encoding() {
        let cfg = tiny();
        let w = zero_weights(&cfg);
        let mut tape = Tape::new();
        let wv = WeightVars::record(&mut tape, &w);
        let x = tape.leaf(Tensor::zeros(&[5, 3]));
        let z = encode(&mut tape, &wv, x).unwrap();
        assert_eq!(tape.value(z).shape(), &[5, 4]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let cfg = tiny();
        let model = Model::new(cfg, 0).unwrap();
        let plan = HeadMaskPlan::uniform(1, 2, Arc::new(SparseMask::identity(5)));
        assert!(matches!(
            model.predict(&Tensor::zeros(&[5, 4]), &plan),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_attention_keeps_residual() {
        let cfg = tiny();
        let mut w = init_weights(&cfg, 5);
        let b = &mut w.blocks[0];
        for t in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
            *t = Tensor::zeros(t.shape());
        }
        let z0 = Tensor::from_fn(3, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let mut tape = Tape::new();
        let wv = WeightVars::record(&mut tape, &w);
        let z = tape.leaf(z0.clone());
        let plan = HeadMaskPlan::uniform(1, 2, Arc::new(SparseMask::identity(3)));
        let attn = mmha(&mut tape, &cfg, wv.block(0), z, &plan, 0).unwrap();
        let res = tape.add(attn, z).unwrap();
        let z1 = tape.rmsnorm(res, wv.block(0)[4], cfg.rms_eps).unwrap();
        let g = tape.leaf(Tensor::ones(&[4]));
        let direct = tape.rmsnorm(z, g, cfg.rms_eps).unwrap();
        assert!(tape.value(z1).max_abs_diff(tape.value(direct)) < 1e-15);
        let out = block_forward(&mut tape, &cfg, &wv, z, &plan, 0).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 4]);
    }

    #[test]
    fn flops_arithmetic() {
        let cfg = ModelConfig::custom(64, 10, 2, 9, 2);
        assert_eq!(flops_estimate(&cfg).transformer_per_node, 1_064_960.0);
        assert_eq!(training_flops(1, 1), 6.0);
        assert!((training_flops(550_000, 1_000_000) - 3.3e12).abs() < 1.0);
        assert!(training_flops(2, 1) > training_flops(1, 1));
        assert!(training_flops(1, 2) > training_flops(1, 1));
    }
}
