//! Hierarchical temporal attention.
//!
//! At every spatial position the T temporal tokens attend to each other only
//! inside m nested suffix windows that all end at the target frame (index
//! T-1). The m window outputs are then merged smallest-first: shared time
//! steps are blended as `alpha·running + beta·current`, time steps covered
//! only by the larger window are taken from it unchanged.

use crate::error::{Error, Result};
use crate::numerics::{linear, Tape, Var};
use crate::params::param_struct;
use crate::tokenizer::GridShape;

#[derive(Clone, Debug, PartialEq)]
pub struct HTAConfig {
    /// Window lengths, strictly increasing, the last equal to T.
    pub segment_lengths: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub heads: usize,
    pub dim: usize,
}

impl HTAConfig {
    /// Three windows of `ceil(T/4)`, `ceil(T/2)` and `T` frames with an even blend.
    pub fn new(frames: usize, heads: usize, dim: usize) -> Self {
        HTAConfig { segment_lengths: default_segment_lengths(frames), alpha: 0.5, beta: 0.5, heads, dim }
    }

    pub fn num_segments(&self) -> usize {
        self.segment_lengths.len()
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        let lens = &self.segment_lengths;
        if lens.is_empty() || lens[0] == 0 {
            return Err(Error::Config("segment lengths must be non-empty and at least 1".into()));
        }
        if lens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("segment lengths {lens:?} must be strictly increasing")));
        }
        let largest = *lens.last().expect("non-empty");
        if largest > frames {
            return Err(Error::Config(format!("segment length {largest} exceeds T={frames}")));
        }
        if largest != frames {
            return Err(Error::Config(format!("largest segment {largest} must equal T={frames}")));
        }
        Ok(())
    }

    pub fn segments(&self, frames: usize) -> Vec<SegmentSpec> {
        self.segment_lengths.iter().map(|&len| SegmentSpec::suffix(frames, len)).collect()
    }

    /// Rescales the window lengths from `from` frames to `to` frames (ceil).
    pub fn for_frames(&self, from: usize, to: usize) -> HTAConfig {
        let mut lens: Vec<usize> = self.segment_lengths.iter().map(|&l| (l * to).div_ceil(from).clamp(1, to)).collect();
        if let Some(last) = lens.last_mut() {
            *last = to;
        }
        lens.dedup();
        HTAConfig { segment_lengths: lens, ..self.clone() }
    }
}

/// `ceil(T/4), ceil(T/2), T` with duplicates removed for very short clips.
pub fn default_segment_lengths(frames: usize) -> Vec<usize> {
    let mut lens = vec![frames.div_ceil(4).max(1), frames.div_ceil(2).max(1), frames.max(1)];
    lens.dedup();
    lens
}

/// Temporal window `[start, end)`; suffix windows have `end = T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpec {
    pub start: usize,
    pub end: usize,
}

impl SegmentSpec {
    pub fn suffix(frames: usize, len: usize) -> Self {
        SegmentSpec { start: frames - len.min(frames), end: frames }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

param_struct! {
    /// Query/key/value/output projections (`D × D`) plus output bias.
    AttentionParams { wq, wk, wv, wo, bo }
}

/// Handle to one segment's attention weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub segment_index: usize,
    pub spatial_position: usize,
    pub attention: Var,
}

pub(crate) struct Projected {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub(crate) fn project(tape: &mut Tape, x: Var, params: &AttentionParams<Var>) -> Result<Projected> {
    Ok(Projected { q: tape.matmul(x, params.wq)?, k: tape.matmul(x, params.wk)?, v: tape.matmul(x, params.wv)? })
}

/// Self-attention among `rows` of already projected tokens, then the output
/// projection. Returns `(output, attention node)`.
pub(crate) fn attend_rows(
    tape: &mut Tape,
    proj: &Projected,
    rows: &[usize],
    params: &AttentionParams<Var>,
    heads: usize,
) -> Result<(Var, Var)> {
    let q = tape.gather_rows(proj.q, rows)?;
    let k = tape.gather_rows(proj.k, rows)?;
    let v = tape.gather_rows(proj.v, rows)?;
    let attn = tape.attention(q, k, v, heads, None)?;
    let out = linear(tape, attn, params.wo, params.bo)?;
    Ok((out, attn))
}

/// Multi-head attention among the tokens of one window of `tokens_at_k` (`T × D`).
/// Returns the `T_s × D` enhanced window tokens.
pub fn segment_attend(
    tape: &mut Tape,
    tokens_at_k: Var,
    spec: SegmentSpec,
    params: &AttentionParams<Var>,
    cfg: &HTAConfig,
) -> Result<Var> {
    let t = tape.value(tokens_at_k).rows();
    if spec.is_empty() {
        return Err(Error::Segment(format!("empty window [{}, {})", spec.start, spec.end)));
    }
    if spec.end > t {
        return Err(Error::Segment(format!("window [{}, {}) outside {t} frames", spec.start, spec.end)));
    }
    let window = tape.slice_rows(tokens_at_k, spec.start, spec.len())?;
    let proj = project(tape, window, params)?;
    let rows: Vec<usize> = (0..spec.len()).collect();
    Ok(attend_rows(tape, &proj, &rows, params, cfg.heads)?.0)
}

/// Merges window outputs (ascending length, each `T_s × D`) into `frames × D`.
pub fn pyramid_aggregate(tape: &mut Tape, outputs: &[Var], alpha: f64, beta: f64, frames: usize) -> Result<Var> {
    let first = *outputs.first().ok_or_else(|| Error::Aggregation("no segment outputs".into()))?;
    let mut running = first;
    let mut covered = tape.value(first).rows();
    for &current in &outputs[1..] {
        let len = tape.value(current).rows();
        if len <= covered {
            return Err(Error::Aggregation(format!("segment outputs must grow in length, got {len} after {covered}")));
        }
        let fresh = len - covered;
        let head = tape.slice_rows(current, 0, fresh)?;
        let shared = tape.slice_rows(current, fresh, covered)?;
        let a = tape.scale(running, alpha);
        let b = tape.scale(shared, beta);
        let blended = tape.add(a, b)?;
        running = tape.concat_rows(&[head, blended])?;
        covered = len;
    }
    if covered != frames {
        return Err(Error::Aggregation(format!("segments cover {covered} of {frames} frames")));
    }
    Ok(running)
}

/// The temporal branch for all patch tokens of a grid: returns `T·K × D`
/// in grid order (without the CLS row).
pub(crate) fn temporal_branch(
    tape: &mut Tape,
    grid: Var,
    shape: GridShape,
    params: &AttentionParams<Var>,
    cfg: &HTAConfig,
    mut record: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var> {
    let t = shape.frames;
    cfg.validate(t)?;
    let proj = project(tape, grid, params)?;
    let segments = cfg.segments(t);
    let mut per_position = Vec::with_capacity(shape.patches);
    for k in 0..shape.patches {
        let rows = shape.temporal_rows(k);
        let mut outputs = Vec::with_capacity(segments.len());
        for (s, spec) in segments.iter().enumerate() {
            let (out, attn) = attend_rows(tape, &proj, &rows[spec.start..spec.end], params, cfg.heads)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(AttentionRecord { segment_index: s, spatial_position: k, attention: attn });
            }
            outputs.push(out);
        }
        per_position.push(pyramid_aggregate(tape, &outputs, cfg.alpha, cfg.beta, t)?);
    }
    // per_position is k-major; reorder rows to frame-major grid order
    let stacked = tape.concat_rows(&per_position)?;
    let order: Vec<usize> = (0..t).flat_map(|tt| (0..shape.patches).map(move |k| k * t + tt)).collect();
    tape.gather_rows(stacked, &order)
}

/// Hierarchical temporal attention over a token grid. The CLS row passes through unchanged.
pub fn hta_forward(
    tape: &mut Tape,
    grid: Var,
    shape: GridShape,
    params: &AttentionParams<Var>,
    cfg: &HTAConfig,
    record: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var> {
    let largest = cfg.segment_lengths.last().copied().unwrap_or(0);
    if shape.frames < largest {
        return Err(Error::Config(format!("T={} is shorter than segment length {largest}", shape.frames)));
    }
    let patches = temporal_branch(tape, grid, shape, params, cfg, record)?;
    let cls = tape.slice_rows(grid, 0, 1)?;
    tape.concat_rows(&[cls, patches])
}
