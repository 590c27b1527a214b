//! Frame sampling, patch partition and token embedding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::param_struct;

pub const FVOL_MAGIC: &[u8; 5] = b"FVOL1";

/// Geometry of the input clip and its tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    /// Temporal resolution T (frames per clip).
    pub frames: usize,
    /// Sampling stride R between consecutive clip frames.
    pub frame_rate: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch side P in pixels.
    pub patch: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frame_rate == 0 {
            return Err(Error::Config("frames and frame_rate must be at least 1".into()));
        }
        if self.patch == 0 || self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("patch, channels and embed_dim must be positive".into()));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return Err(Error::Config(format!(
                "frame {}x{} is not tiled by {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    /// K = H·W / P².
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// T sampled frames ending at the target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameVolume {
    /// `T × C × H × W`, row-major.
    pub frames: Vec<f64>,
    pub source_indices: Vec<u64>,
    pub target_index: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameVolume {
    pub fn new(
        frames: Vec<f64>,
        source_indices: Vec<u64>,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let t = source_indices.len();
        if t == 0 {
            return Err(dim_err!("frame volume with no frames"));
        }
        if frames.len() != t * channels * height * width {
            return Err(dim_err!("{} values for {t}x{channels}x{height}x{width} frames", frames.len()));
        }
        if source_indices.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Input("source indices must be non-decreasing".into()));
        }
        let target_index = source_indices[t - 1];
        Ok(FrameVolume { frames, source_indices, target_index, channels, height, width })
    }

    /// Samples the clip for `target` from `source` per [`sample_window`].
    pub fn from_source(source: &dyn FrameSource, target: usize, cfg: &PatchConfig) -> Result<Self> {
        let (c, h, w) = source.frame_dims();
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
            return Err(dim_err!(
                "source frames are {c}x{h}x{w}, config expects {}x{}x{}",
                cfg.channels,
                cfg.height,
                cfg.width
            ));
        }
        let indices = sample_window(source.num_frames(), target, cfg)?;
        let mut frames = Vec::with_capacity(indices.len() * c * h * w);
        for &i in &indices {
            source.read_frame(i, &mut frames)?;
        }
        FrameVolume::new(frames, indices.iter().map(|&i| i as u64).collect(), c, h, w)
    }

    pub fn num_frames(&self) -> usize {
        self.source_indices.len()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.channels * self.height * self.width;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let t = self.num_frames();
        w.write_all(FVOL_MAGIC)?;
        for v in [t, self.channels, self.height, self.width] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.target_index as u32).to_le_bytes())?;
        for &i in &self.source_indices {
            w.write_all(&i.to_le_bytes())?;
        }
        for &x in &self.frames {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated FVOL1 header".into()))?;
        if &magic != FVOL_MAGIC {
            return Err(Error::Format("missing FVOL1 magic".into()));
        }
        let mut header = [0u32; 5];
        for h in &mut header {
            *h = read_u32(&mut r)?;
        }
        let [t, c, hh, ww, target_low] = header.map(|v| v as usize);
        if t == 0 || c == 0 || hh == 0 || ww == 0 {
            return Err(Error::Format(format!("degenerate FVOL1 dims {t}x{c}x{hh}x{ww}")));
        }
        let mut indices = Vec::with_capacity(t);
        for _ in 0..t {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated FVOL1 indices".into()))?;
            indices.push(u64::from_le_bytes(b));
        }
        let n = t.checked_mul(c * hh * ww).ok_or_else(|| Error::Format("FVOL1 payload size overflows".into()))?;
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload).map_err(|_| Error::Format("truncated FVOL1 payload".into()))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after FVOL1 payload".into()));
        }
        let frames = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let vol = FrameVolume::new(frames, indices, c, hh, ww).map_err(|e| Error::Format(e.to_string()))?;
        if vol.target_index as u32 as usize != target_low {
            return Err(Error::Format(format!(
                "header target {target_low} disagrees with last source index {}",
                vol.target_index
            )));
        }
        Ok(vol)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FrameVolume::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated FVOL1 header".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Random-access frame store for streaming inference.
pub trait FrameSource {
    fn num_frames(&self) -> usize;
    /// `(channels, height, width)`.
    fn frame_dims(&self) -> (usize, usize, usize);
    /// Appends frame `index` (`C × H × W` values) to `out`.
    fn read_frame(&self, index: usize, out: &mut Vec<f64>) -> Result<()>;
}

/// Whole video held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct InMemoryVideo {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f64>,
}

impl InMemoryVideo {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Every frame of the video as one volume with indices `0..n`.
    pub fn to_volume(&self) -> Result<FrameVolume> {
        let n = self.num_frames();
        FrameVolume::new(self.frames.clone(), (0..n as u64).collect(), self.channels, self.height, self.width)
    }

    /// Inverse of [`InMemoryVideo::to_volume`]; indices must be `0..n`.
    pub fn from_volume(vol: FrameVolume) -> Result<Self> {
        if vol.source_indices.iter().enumerate().any(|(i, &s)| s != i as u64) {
            return Err(Error::Format("video volume must hold consecutive frames from 0".into()));
        }
        Ok(InMemoryVideo { channels: vol.channels, height: vol.height, width: vol.width, frames: vol.frames })
    }
}

impl FrameSource for InMemoryVideo {
    fn num_frames(&self) -> usize {
        self.frames.len() / self.frame_len()
    }

    fn frame_dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn read_frame(&self, index: usize, out: &mut Vec<f64>) -> Result<()> {
        let n = self.frame_len();
        if index >= self.num_frames() {
            return Err(Error::Index(format!("frame {index} of {}", self.num_frames())));
        }
        out.extend_from_slice(&self.frames[index * n..(index + 1) * n]);
        Ok(())
    }
}

/// Backward sampling: frame `j` of the clip is `target - R·(T-1-j)`, clamped at 0.
pub fn sample_window(video_length: usize, target_index: usize, cfg: &PatchConfig) -> Result<Vec<usize>> {
    if target_index >= video_length {
        return Err(Error::Index(format!("target {target_index} outside video of {video_length} frames")));
    }
    let t = cfg.frames;
    Ok((0..t).map(|j| target_index.saturating_sub(cfg.frame_rate * (t - 1 - j))).collect())
}

/// `T·K × C·P²` patch matrix; patches in raster order per frame, each
/// flattened channel-major then row-major within the patch.
pub fn patchify(vol: &FrameVolume, cfg: &PatchConfig) -> Result<Tensor> {
    check_volume(vol, cfg)?;
    let (p, c) = (cfg.patch, cfg.channels);
    let (h, w) = (cfg.height, cfg.width);
    let per_row = w / p;
    let k = cfg.num_patches();
    let pd = cfg.patch_dim();
    let mut out = Vec::with_capacity(vol.num_frames() * k * pd);
    for t in 0..vol.num_frames() {
        let frame = vol.frame(t);
        for kk in 0..k {
            let (py, px) = (kk / per_row, kk % per_row);
            for ch in 0..c {
                for dy in 0..p {
                    let row = ch * h * w + (py * p + dy) * w + px * p;
                    out.extend_from_slice(&frame[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![vol.num_frames() * k, pd], out)
}

/// Inverse of [`patchify`]: rebuilds the `T × C × H × W` frame buffer.
pub fn unpatchify(patches: &Tensor, cfg: &PatchConfig) -> Result<Vec<f64>> {
    let (p, c, h, w) = (cfg.patch, cfg.channels, cfg.height, cfg.width);
    let k = cfg.num_patches();
    if patches.cols() != cfg.patch_dim() || !patches.rows().is_multiple_of(k) {
        return Err(dim_err!("patch matrix {:?} does not fit {k} patches of {}", patches.shape(), cfg.patch_dim()));
    }
    let t = patches.rows() / k;
    let per_row = w / p;
    let mut frames = vec![0.0; t * c * h * w];
    for tt in 0..t {
        let frame = &mut frames[tt * c * h * w..(tt + 1) * c * h * w];
        for kk in 0..k {
            let (py, px) = (kk / per_row, kk % per_row);
            let patch = patches.row(tt * k + kk);
            for ch in 0..c {
                for dy in 0..p {
                    let row = ch * h * w + (py * p + dy) * w + px * p;
                    let src = (ch * p + dy) * p;
                    frame[row..row + p].copy_from_slice(&patch[src..src + p]);
                }
            }
        }
    }
    Ok(frames)
}

fn check_volume(vol: &FrameVolume, cfg: &PatchConfig) -> Result<()> {
    cfg.validate()?;
    if (vol.channels, vol.height, vol.width) != (cfg.channels, cfg.height, cfg.width) {
        return Err(dim_err!(
            "volume frames are {}x{}x{}, config expects {}x{}x{}",
            vol.channels,
            vol.height,
            vol.width,
            cfg.channels,
            cfg.height,
            cfg.width
        ));
    }
    Ok(())
}

param_struct! {
    /// Patch projection, CLS token and factorized position tables.
    EmbeddingParams {
        /// `C·P² × D`
        patch_w,
        /// `D`
        patch_b,
        /// `1 × D`
        cls_token,
        /// `K × D`
        pos_spatial,
        /// `T_train × D`
        pos_temporal,
        /// `1 × D`
        pos_cls,
    }
}

/// Row layout of the token grid: CLS first, then frame-major tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub frames: usize,
    pub patches: usize,
}

impl GridShape {
    pub fn rows(&self) -> usize {
        self.frames * self.patches + 1
    }

    pub fn row(&self, t: usize, k: usize) -> usize {
        1 + t * self.patches + k
    }

    /// Grid rows of spatial position `k`, ordered by time.
    pub fn temporal_rows(&self, k: usize) -> Vec<usize> {
        (0..self.frames).map(|t| self.row(t, k)).collect()
    }

    /// Grid rows of frame `t`, ordered by patch.
    pub fn spatial_rows(&self, t: usize) -> Vec<usize> {
        (0..self.patches).map(|k| self.row(t, k)).collect()
    }
}

/// Spatial-temporal tokens `(T·K + 1) × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub shape: GridShape,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, shape: GridShape) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != shape.rows() {
            return Err(dim_err!("token tensor {:?} does not hold {} rows", tokens.shape(), shape.rows()));
        }
        Ok(TokenGrid { tokens, shape })
    }

    pub fn cls(&self) -> &[f64] {
        self.tokens.row(0)
    }

    pub fn token(&self, t: usize, k: usize) -> &[f64] {
        self.tokens.row(self.shape.row(t, k))
    }
}

/// Embeds `vol` into a token grid on `tape`.
///
/// `token(t,k) = patch·W + b + pos_spatial[k] + pos_temporal[t]`, `CLS = cls_token + pos_cls`.
pub fn embed(tape: &mut Tape, vol: &FrameVolume, params: &EmbeddingParams<Var>, cfg: &PatchConfig) -> Result<Var> {
    let t = vol.num_frames();
    if t != cfg.frames {
        return Err(Error::Length(format!("volume has {t} frames, config expects {}", cfg.frames)));
    }
    let pos_t = tape.value(params.pos_temporal).rows();
    if pos_t != t {
        return Err(Error::Length(format!("temporal position table has {pos_t} rows for {t} frames; resize it first")));
    }
    let k = cfg.num_patches();
    let patches = tape.constant(patchify(vol, cfg)?);
    let proj = tape.matmul(patches, params.patch_w)?;
    let proj = tape.add_row(proj, params.patch_b)?;
    let spatial_idx: Vec<usize> = (0..t).flat_map(|_| 0..k).collect();
    let temporal_idx: Vec<usize> = (0..t).flat_map(|tt| std::iter::repeat_n(tt, k)).collect();
    let ps = tape.gather_rows(params.pos_spatial, &spatial_idx)?;
    let pt = tape.gather_rows(params.pos_temporal, &temporal_idx)?;
    let tokens = tape.add(proj, ps)?;
    let tokens = tape.add(tokens, pt)?;
    let cls = tape.add(params.cls_token, params.pos_cls)?;
    tape.concat_rows(&[cls, tokens])
}

/// Value-level [`embed`].
pub fn embed_tokens(vol: &FrameVolume, params: &EmbeddingParams, cfg: &PatchConfig) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let p = params.map("", &mut |_, t| tape.constant(t.clone()));
    let grid = embed(&mut tape, vol, &p, cfg)?;
    TokenGrid::new(tape.value(grid).clone(), GridShape { frames: vol.num_frames(), patches: cfg.num_patches() })
}

/// Linearly interpolates each channel of a `T_train × D` table to `T_test` rows,
/// mapping output row `i` to input coordinate `i·(T_train-1)/(T_test-1)`.
/// A single output row takes the last (target-frame) row.
pub fn resize_temporal_positions(pos: &Tensor, t_test: usize) -> Result<Tensor> {
    let (t_train, d) = (pos.rows(), pos.cols());
    if t_test < 1 {
        return Err(Error::Argument("temporal resolution must be at least 1".into()));
    }
    if t_train == t_test {
        return Ok(pos.clone());
    }
    if t_train < 2 {
        return Err(Error::Argument("need at least two temporal positions to interpolate".into()));
    }
    let mut out = Vec::with_capacity(t_test * d);
    for i in 0..t_test {
        let x = if t_test == 1 { (t_train - 1) as f64 } else { i as f64 * (t_train - 1) as f64 / (t_test - 1) as f64 };
        let lo = (x.floor() as usize).min(t_train - 1);
        let hi = (lo + 1).min(t_train - 1);
        let frac = x - lo as f64;
        for j in 0..d {
            let a = pos.get(lo, j);
            let b = pos.get(hi, j);
            out.push(a + (b - a) * frac);
        }
    }
    Tensor::new(vec![t_test, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(t: usize, r: usize) -> PatchConfig {
        PatchConfig { frames: t, frame_rate: r, height: 4, width: 4, channels: 2, patch: 2, embed_dim: 2 }
    }

    #[test]
    fn sample_window_examples() {
        assert_eq!(sample_window(200, 100, &cfg(4, 4)).unwrap(), vec![88, 92, 96, 100]);
        assert_eq!(sample_window(200, 4, &cfg(4, 4)).unwrap(), vec![0, 0, 0, 4]);
        assert_eq!(sample_window(10, 0, &cfg(5, 3)).unwrap(), vec![0; 5]);
        assert!(matches!(sample_window(10, 10, &cfg(4, 4)), Err(Error::Index(_))));
    }

    #[test]
    fn patch_count_matches_vit_geometry() {
        let c = PatchConfig { frames: 1, frame_rate: 1, height: 224, width: 224, channels: 3, patch: 16, embed_dim: 8 };
        assert_eq!(c.num_patches(), 196);
    }

    #[test]
    fn whole_frame_patch() {
        let c = PatchConfig { frames: 1, frame_rate: 1, height: 3, width: 3, channels: 2, patch: 3, embed_dim: 2 };
        let frames: Vec<f64> = (0..18).map(f64::from).collect();
        let vol = FrameVolume::new(frames.clone(), vec![0], 2, 3, 3).unwrap();
        let p = patchify(&vol, &c).unwrap();
        assert_eq!(p.shape(), &[1, 18]);
        assert_eq!(p.data(), &frames[..]);
    }

    #[test]
    fn constant_frame_gives_identical_patches() {
        let c = cfg(1, 1);
        let vol = FrameVolume::new(vec![0.7; 32], vec![0], 2, 4, 4).unwrap();
        let p = patchify(&vol, &c).unwrap();
        for k in 1..p.rows() {
            assert_eq!(p.row(k), p.row(0));
        }
    }

    #[test]
    fn patchify_rejects_wrong_dims() {
        let vol = FrameVolume::new(vec![0.0; 18], vec![0], 2, 3, 3).unwrap();
        assert!(matches!(patchify(&vol, &cfg(1, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn embed_additive_structure() {
        let c = PatchConfig { frames: 2, frame_rate: 1, height: 2, width: 4, channels: 1, patch: 2, embed_dim: 2 };
        let vol = FrameVolume::new(vec![0.0; 16], vec![0, 1], 1, 2, 4).unwrap();
        let params = EmbeddingParams {
            patch_w: Tensor::zeros(&[4, 2]),
            patch_b: Tensor::zeros(&[2]),
            cls_token: Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap(),
            pos_spatial: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            pos_temporal: Tensor::from_rows(&[vec![10.0, 20.0], vec![30.0, 40.0]]).unwrap(),
            pos_cls: Tensor::from_rows(&[vec![0.25, 0.25]]).unwrap(),
        };
        let g = embed_tokens(&vol, &params, &c).unwrap();
        assert_eq!(g.tokens.rows(), 5);
        assert_eq!(g.cls(), &[0.75, -0.25]);
        assert_eq!(g.token(0, 0), &[11.0, 22.0]);
        assert_eq!(g.token(0, 1), &[13.0, 24.0]);
        assert_eq!(g.token(1, 0), &[31.0, 42.0]);
        assert_eq!(g.token(1, 1), &[33.0, 44.0]);
    }

    #[test]
    fn embed_hand_computed() {
        // T=2, K=2, D=2, one channel, 1x1 patches
        let c = PatchConfig { frames: 2, frame_rate: 1, height: 1, width: 2, channels: 1, patch: 1, embed_dim: 2 };
        let vol = FrameVolume::new(vec![1.0, 2.0, 3.0, 4.0], vec![5, 6], 1, 1, 2).unwrap();
        let params = EmbeddingParams {
            patch_w: Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap(),
            patch_b: Tensor::vector(vec![0.5, 0.0]).unwrap(),
            cls_token: Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            pos_spatial: Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            pos_temporal: Tensor::from_rows(&[vec![0.1, 0.1], vec![0.2, 0.2]]).unwrap(),
            pos_cls: Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap(),
        };
        let g = embed_tokens(&vol, &params, &c).unwrap();
        // pixel x -> (2x + 0.5, -x); plus spatial then temporal positions
        let want = [
            [0.0, 1.0],
            [2.5 + 0.0 + 0.1, -1.0 + 1.0 + 0.1],
            [4.5 + 1.0 + 0.1, -2.0 + 0.0 + 0.1],
            [6.5 + 0.0 + 0.2, -3.0 + 1.0 + 0.2],
            [8.5 + 1.0 + 0.2, -4.0 + 0.0 + 0.2],
        ];
        for (r, w) in want.iter().enumerate() {
            for j in 0..2 {
                assert!((g.tokens.get(r, j) - w[j]).abs() < 1e-12, "row {r}");
            }
        }
    }

    #[test]
    fn embed_rejects_unresized_positions() {
        let c = cfg(2, 1);
        let vol = FrameVolume::new(vec![0.0; 64], vec![0, 1], 2, 4, 4).unwrap();
        let params = EmbeddingParams {
            patch_w: Tensor::zeros(&[8, 2]),
            patch_b: Tensor::zeros(&[2]),
            cls_token: Tensor::zeros(&[1, 2]),
            pos_spatial: Tensor::zeros(&[4, 2]),
            pos_temporal: Tensor::zeros(&[3, 2]),
            pos_cls: Tensor::zeros(&[1, 2]),
        };
        assert!(matches!(embed_tokens(&vol, &params, &c), Err(Error::Length(_))));
    }

    #[test]
    fn resize_examples() {
        let ramp = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_temporal_positions(&ramp, 7).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(resize_temporal_positions(&ramp, 4).unwrap(), ramp);
        assert!(matches!(resize_temporal_positions(&ramp, 0), Err(Error::Argument(_))));

        let ramp16 = Tensor::new(vec![16, 2], (0..32).map(|i| (i / 2) as f64 * 0.3 - 1.0).collect()).unwrap();
        let back = resize_temporal_positions(&resize_temporal_positions(&ramp16, 24).unwrap(), 16).unwrap();
        assert!(back.max_abs_diff(&ramp16) < 1e-12);
    }

    #[test]
    fn fvol_round_trip_and_errors() {
        let vol = FrameVolume::new((0..64).map(|i| i as f64 * 0.5).collect(), vec![3, 7], 2, 4, 4).unwrap();
        let mut buf = Vec::new();
        vol.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 5 + 20 + 16 + 64 * 4);
        assert_eq!(FrameVolume::read_from(&buf[..]).unwrap(), vol);

        assert!(matches!(FrameVolume::read_from(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(FrameVolume::read_from(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[5 + 16] = 9; // target_low
        assert!(matches!(FrameVolume::read_from(&bad[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn sampling_is_causal_and_regular(len in 1usize..500, t in 1usize..24, r in 1usize..8, pick in 0.0f64..1.0) {
            let target = ((len as f64 - 1.0) * pick) as usize;
            let idx = sample_window(len, target, &cfg(t, r)).unwrap();
            prop_assert_eq!(idx.len(), t);
            prop_assert_eq!(*idx.last().unwrap(), target);
            for w in idx.windows(2) {
                prop_assert!(w[0] <= w[1]);
                prop_assert!(w[1] - w[0] == r || w[0] == 0);
            }
            prop_assert!(idx.iter().all(|&i| i <= target));
        }

        #[test]
        fn patchify_inverts(seed in any::<u64>(), t in 1usize..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = PatchConfig { frames: t, frame_rate: 1, height: 6, width: 4, channels: 3, patch: 2, embed_dim: 2 };
            let frames: Vec<f64> = (0..t * 3 * 24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vol = FrameVolume::new(frames.clone(), (0..t as u64).collect(), 3, 6, 4).unwrap();
            let back = unpatchify(&patchify(&vol, &c).unwrap(), &c).unwrap();
            prop_assert_eq!(back, frames);
        }
    }
}
