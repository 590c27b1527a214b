//! The full network: embedding, a stack of blocks (temporal attention,
//! spatial attention, MLP, each pre-normalized with a residual), and a
//! linear phase classifier on the final CLS token.

mod config;
mod weights;

use rand::Rng;
use serde::Serialize;

pub use config::{parse_kv_text, ModelConfig, MODEL_KEYS};
pub use weights::{load_params, load_params_expecting, read_params, save_params, write_params};

use crate::asa::{asa_forward, SpatialAttentionParams};
use crate::error::{dim_err, Error, Result};
use crate::hta::{temporal_branch, AttentionParams, AttentionRecord};
use crate::numerics::{linear, Tape, Tensor, Var};
use crate::params::{join, param_struct, LayerNormParams};
use crate::tokenizer::{embed, resize_temporal_positions, EmbeddingParams, FrameVolume, GridShape, PatchConfig};

const INIT_STD: f64 = 0.02;

param_struct! {
    /// Two-layer feed-forward network, `D → hidden → D`.
    MlpParams { w1, b1, w2, b2 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P = Tensor> {
    pub ln1: LayerNormParams<P>,
    pub temporal: AttentionParams<P>,
    pub ln2: LayerNormParams<P>,
    pub spatial: SpatialAttentionParams<P>,
    pub ln3: LayerNormParams<P>,
    pub mlp: MlpParams<P>,
}

impl<P> BlockParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> BlockParams<Q> {
        BlockParams {
            ln1: self.ln1.map(&join(prefix, "ln1"), f),
            temporal: self.temporal.map(&join(prefix, "temporal"), f),
            ln2: self.ln2.map(&join(prefix, "ln2"), f),
            spatial: self.spatial.map(&join(prefix, "spatial"), f),
            ln3: self.ln3.map(&join(prefix, "ln3"), f),
            mlp: self.mlp.map(&join(prefix, "mlp"), f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.temporal.visit(&join(prefix, "temporal"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.ln3.visit(&join(prefix, "ln3"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.temporal.visit_mut(&join(prefix, "temporal"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.ln3.visit_mut(&join(prefix, "ln3"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub embed: EmbeddingParams<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub norm: LayerNormParams<P>,
    /// `D × num_phases`
    pub head_w: P,
    /// `num_phases`
    pub head_b: P,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        ModelParams {
            embed: self.embed.map("embed", f),
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("blocks.{i}"), f)).collect(),
            norm: self.norm.map("norm", f),
            head_w: f("head_w", &self.head_w),
            head_b: f("head_b", &self.head_b),
        }
    }

    /// Visits every leaf in a fixed order with its dotted name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &P)) {
        self.embed.visit("embed", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.norm.visit("norm", f);
        f("head_w", &self.head_w);
        f("head_b", &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        self.embed.visit_mut("embed", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.norm.visit_mut("norm", f);
        f("head_w", &mut self.head_w);
        f("head_b", &mut self.head_b);
    }
}

/// Per-leaf bookkeeping for optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// 0 for the embedding, `1..=L` for blocks, `L + 1` for the final norm and head.
    pub depth: usize,
    /// Whether weight decay applies (projection matrices only).
    pub decay: bool,
}

impl ParamMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn param_depth(name: &str, layers: usize) -> usize {
    if name.starts_with("embed.") {
        0
    } else if let Some(rest) = name.strip_prefix("blocks.") {
        rest.split('.').next().and_then(|i| i.parse::<usize>().ok()).map_or(layers + 1, |i| i + 1)
    } else {
        layers + 1
    }
}

fn is_projection(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "wq" | "wk" | "wv" | "wo" | "w1" | "w2" | "patch_w" | "head_w")
}

fn layer_norm_init(d: usize) -> LayerNormParams {
    LayerNormParams::identity(d)
}

impl ModelParams {
    /// Random initialization: truncated normal (std 0.02) for projections and
    /// position tables, zeros for biases and the CLS token, unit LN scales.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        ModelParams::build(cfg, &mut |shape| Tensor::trunc_normal(shape, INIT_STD, rng))
    }

    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        ModelParams::build(cfg, &mut Tensor::zeros)
    }

    fn build(cfg: &ModelConfig, tn: &mut dyn FnMut(&[usize]) -> Tensor) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim();
        let hidden = cfg.mlp_ratio * d;
        let embed = EmbeddingParams {
            patch_w: tn(&[cfg.patch.patch_dim(), d]),
            patch_b: Tensor::zeros(&[d]),
            cls_token: Tensor::zeros(&[1, d]),
            pos_spatial: tn(&[cfg.patch.num_patches(), d]),
            pos_temporal: tn(&[cfg.frames(), d]),
            pos_cls: tn(&[1, d]),
        };
        let attention = |tn: &mut dyn FnMut(&[usize]) -> Tensor| AttentionParams {
            wq: tn(&[d, d]),
            wk: tn(&[d, d]),
            wv: tn(&[d, d]),
            wo: tn(&[d, d]),
            bo: Tensor::zeros(&[d]),
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(BlockParams {
                ln1: layer_norm_init(d),
                temporal: attention(tn),
                ln2: layer_norm_init(d),
                spatial: attention(tn),
                ln3: layer_norm_init(d),
                mlp: MlpParams {
                    w1: tn(&[d, hidden]),
                    b1: Tensor::zeros(&[hidden]),
                    w2: tn(&[hidden, d]),
                    b2: Tensor::zeros(&[d]),
                },
            });
        }
        Ok(ModelParams {
            embed,
            blocks,
            norm: layer_norm_init(d),
            head_w: tn(&[d, cfg.num_phases]),
            head_b: Tensor::zeros(&[cfg.num_phases]),
        })
    }

    pub fn metas(&self, layers: usize) -> Vec<ParamMeta> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| {
            out.push(ParamMeta {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                depth: param_depth(name, layers),
                decay: is_projection(name),
            })
        });
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.all_finite());
        ok
    }

    /// Leaves onto `tape`; `trainable` decides between params and constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |_, t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
    }

    /// Copy with the temporal position table interpolated to `frames` rows.
    pub fn resized(&self, frames: usize) -> Result<ModelParams> {
        let mut out = self.clone();
        out.embed.pos_temporal = resize_temporal_positions(&self.embed.pos_temporal, frames)?;
        Ok(out)
    }
}

/// Temporal attention weights of one window at one spatial position of one block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionDump {
    pub layer: usize,
    pub segment_index: usize,
    pub spatial_position: usize,
    pub head: usize,
    pub matrix: Vec<Vec<f64>>,
}

/// One block: temporal attention on patch rows, spatial attention with CLS
/// aggregation, then the MLP, each as `x + branch(LN(x))`.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    shape: GridShape,
    params: &BlockParams<Var>,
    cfg: &ModelConfig,
    record: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var> {
    let (rows, d) = (tape.value(x).rows(), tape.value(x).cols());
    if rows != shape.rows() || d != cfg.dim() {
        return Err(dim_err!("block input {rows}×{d}, expected {}×{}", shape.rows(), cfg.dim()));
    }
    let n1 = layer_norm(tape, x, &params.ln1)?;
    let temporal = temporal_branch(tape, n1, shape, &params.temporal, &cfg.hta, record)?;
    let cls = tape.slice_rows(x, 0, 1)?;
    let patches = tape.slice_rows(x, 1, rows - 1)?;
    let patches = tape.add(patches, temporal)?;
    let xt = tape.concat_rows(&[cls, patches])?;

    let n2 = layer_norm(tape, xt, &params.ln2)?;
    let spatial = asa_forward(tape, n2, shape, &params.spatial, &cfg.asa)?;
    let xst = tape.add(xt, spatial)?;

    let n3 = layer_norm(tape, xst, &params.ln3)?;
    let h = linear(tape, n3, params.mlp.w1, params.mlp.b1)?;
    let h = tape.gelu(h);
    let m = linear(tape, h, params.mlp.w2, params.mlp.b2)?;
    tape.add(xst, m)
}

fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta)
}

/// Embedding, blocks, final norm on CLS and the head. Returns `1 × num_phases` logits.
/// `records[l]` collects the temporal attention nodes of block `l` when given.
pub fn forward_logits(
    tape: &mut Tape,
    vol: &FrameVolume,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    mut records: Option<&mut Vec<Vec<AttentionRecord>>>,
) -> Result<Var> {
    if params.blocks.len() != cfg.layers {
        return Err(Error::Config(format!("{} blocks for {} layers", params.blocks.len(), cfg.layers)));
    }
    let shape = GridShape { frames: cfg.frames(), patches: cfg.patch.num_patches() };
    let mut x = embed(tape, vol, &params.embed, &cfg.patch)?;
    for block in &params.blocks {
        let rec = match records.as_deref_mut() {
            Some(all) => {
                all.push(Vec::new());
                all.last_mut()
            }
            None => None,
        };
        x = block_forward(tape, x, shape, block, cfg, rec)?;
    }
    let cls = tape.slice_rows(x, 0, 1)?;
    let cls = layer_norm(tape, cls, &params.norm)?;
    linear(tape, cls, params.head_w, params.head_b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePrediction {
    pub logits: Vec<f64>,
    pub phase: usize,
    pub target_index: u64,
}

impl PhasePrediction {
    pub fn from_logits(logits: Vec<f64>, target_index: u64) -> Self {
        PhasePrediction { phase: argmax(&logits), logits, target_index }
    }

    pub fn csv_header(num_phases: usize) -> String {
        let mut s = String::from("target_index,phase");
        for i in 0..num_phases {
            s.push_str(&format!(",logit_{i}"));
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.target_index, self.phase);
        for l in &self.logits {
            s.push_str(&format!(",{l:e}"));
        }
        s
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inference on a volume whose length matches `cfg`.
pub fn forward(vol: &FrameVolume, params: &ModelParams, cfg: &ModelConfig) -> Result<PhasePrediction> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let logits = forward_logits(&mut tape, vol, &p, cfg, None)?;
    Ok(PhasePrediction::from_logits(tape.value(logits).data().to_vec(), vol.target_index))
}

/// Anything that maps a frame volume to a phase prediction.
pub trait PhaseClassifier {
    /// Clip geometry the classifier expects.
    fn patch_config(&self) -> PatchConfig;

    fn num_phases(&self) -> usize;

    fn predict(&self, vol: &FrameVolume) -> Result<PhasePrediction>;
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        let want = ModelParams::zeros(&cfg)?.metas(cfg.layers);
        if params.metas(cfg.layers) != want {
            return Err(Error::Config("parameter shapes do not match the configuration".into()));
        }
        Ok(Model { cfg, params })
    }

    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&cfg, rng)?;
        Ok(Model { cfg, params })
    }

    /// The same model run on `frames`-frame clips.
    pub fn at_frames(&self, frames: usize) -> Result<Model> {
        if frames == self.cfg.frames() {
            return Ok(self.clone());
        }
        let cfg = self.cfg.for_frames(frames);
        cfg.validate()?;
        Ok(Model { params: self.params.resized(frames)?, cfg })
    }

    pub fn forward(&self, vol: &FrameVolume) -> Result<PhasePrediction> {
        forward(vol, &self.params, &self.cfg)
    }

    /// Temporal attention matrices of block `layer`, optionally for one spatial position.
    pub fn inspect_attention(
        &self,
        vol: &FrameVolume,
        layer: usize,
        position: Option<usize>,
    ) -> Result<Vec<AttentionDump>> {
        if layer >= self.cfg.layers {
            return Err(Error::Argument(format!("layer {layer} out of range (model has {})", self.cfg.layers)));
        }
        if let Some(k) = position {
            if k >= self.cfg.patch.num_patches() {
                return Err(Error::Argument(format!("spatial position {k} out of range")));
            }
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut records = Vec::new();
        forward_logits(&mut tape, vol, &p, &self.cfg, Some(&mut records))?;
        let mut out = Vec::new();
        for rec in &records[layer] {
            if position.is_some_and(|k| k != rec.spatial_position) {
                continue;
            }
            let probs = tape.attention_probs(rec.attention).expect("attention node");
            for h in 0..probs.heads {
                out.push(AttentionDump {
                    layer,
                    segment_index: rec.segment_index,
                    spatial_position: rec.spatial_position,
                    head: h,
                    matrix: probs.head(h),
                });
            }
        }
        Ok(out)
    }
}

impl PhaseClassifier for Model {
    fn patch_config(&self) -> PatchConfig {
        self.cfg.patch.clone()
    }

    fn num_phases(&self) -> usize {
        self.cfg.num_phases
    }

    fn predict(&self, vol: &FrameVolume) -> Result<PhasePrediction> {
        self.forward(vol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asa::Aggregation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(frames: usize) -> ModelConfig {
        let patch = PatchConfig { frames, frame_rate: 2, height: 4, width: 4, channels: 1, patch: 2, embed_dim: 8 };
        ModelConfig::new(patch, 2, 2, 2, 3, Aggregation::Ma)
    }

    fn volume(cfg: &ModelConfig, seed: u64) -> FrameVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.frames() * cfg.patch.frame_len();
        let frames = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let idx = (0..cfg.frames() as u64).map(|i| i * 2).collect();
        FrameVolume::new(frames, idx, cfg.patch.channels, cfg.patch.height, cfg.patch.width).unwrap()
    }

    #[test]
    fn depth_assignment() {
        assert_eq!(param_depth("embed.patch_w", 4), 0);
        assert_eq!(param_depth("blocks.0.temporal.wq", 4), 1);
        assert_eq!(param_depth("blocks.3.mlp.b2", 4), 4);
        assert_eq!(param_depth("norm.gamma", 4), 5);
        assert_eq!(param_depth("head_w", 4), 5);
        assert!(is_projection("blocks.1.spatial.wo") && !is_projection("blocks.1.spatial.bo"));
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let cfg = small(4);
        let a = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.num_scalars(), b.num_scalars());
        assert_eq!(a.metas(2), b.metas(2));
        assert_ne!(a, b);
        let d = 8;
        let block = 3 * 2 * d + 2 * (4 * d * d + d) + (d * 2 * d + 2 * d + 2 * d * d + d);
        let embed = 4 * d + d + d + 4 * d + 4 * d + d;
        assert_eq!(a.num_scalars(), embed + 2 * block + 2 * d + d * 3 + 3);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0; 7]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut cfg = small(4);
        cfg.num_phases = 7;
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        p.head_w.data_mut().fill(0.0);
        let pred = forward(&volume(&cfg, 0), &p, &cfg).unwrap();
        assert_eq!(pred.logits, vec![0.0; 7]);
        assert_eq!(pred.phase, 0);
    }

    #[test]
    fn zero_output_projections_make_blocks_identity() {
        let cfg = small(4);
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for b in &mut p.blocks {
            b.temporal.wo.data_mut().fill(0.0);
            b.spatial.wo.data_mut().fill(0.0);
            b.mlp.w2.data_mut().fill(0.0);
        }
        let vol = volume(&cfg, 1);
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape, false);
        let x = embed(&mut tape, &vol, &pv.embed, &cfg.patch).unwrap();
        let shape = GridShape { frames: 4, patches: 4 };
        let y = block_forward(&mut tape, x, shape, &pv.blocks[0], &cfg, None).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn block_rejects_wrong_shape() {
        let cfg = small(4);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[10, 8]));
        let shape = GridShape { frames: 4, patches: 4 };
        assert!(matches!(block_forward(&mut tape, x, shape, &pv.blocks[0], &cfg, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small(4);
        let m = Model::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let vol = volume(&cfg, 2);
        assert_eq!(m.forward(&vol).unwrap(), m.forward(&vol).unwrap());
    }

    #[test]
    fn resizing_to_same_length_is_identity() {
        let cfg = small(4);
        let m = Model::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(m.at_frames(4).unwrap(), m);
        let long = m.at_frames(6).unwrap();
        let pred = long.forward(&volume(&long.cfg, 3)).unwrap();
        assert!(pred.logits.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn attention_dump_rows_are_stochastic() {
        let cfg = small(4);
        let m = Model::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let dumps = m.inspect_attention(&volume(&cfg, 4), 1, Some(2)).unwrap();
        // segments {1, 2, 4} × 2 heads
        assert_eq!(dumps.len(), 6);
        for d in &dumps {
            assert_eq!(d.spatial_position, 2);
            for row in &d.matrix {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(m.inspect_attention(&volume(&cfg, 4), 2, None).is_err());
    }

    #[test]
    fn model_new_checks_shapes() {
        let cfg = small(4);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut other = cfg.clone();
        other.num_phases = 4;
        assert!(Model::new(cfg, p.clone()).is_ok());
        assert!(Model::new(other, p).is_err());
    }
}
