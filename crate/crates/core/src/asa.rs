//! Aggregated spatial attention: per-frame self-attention over the K patch
//! tokens plus a copy of the CLS token, followed by merging the T enhanced
//! CLS copies into one.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::hta::{attend_rows, project, AttentionParams};
use crate::numerics::{Tape, Var};
use crate::tokenizer::GridShape;

pub type SpatialAttentionParams<P = crate::numerics::Tensor> = AttentionParams<P>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Plain average of the per-frame CLS tokens (MA).
    Ma,
    /// Softmax-weighted by similarity to the target frame's CLS (TFA).
    Tfa,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ma" | "mean" => Ok(Aggregation::Ma),
            "tfa" | "target" => Ok(Aggregation::Tfa),
            other => Err(Error::Config(format!("unknown aggregation `{other}` (expected ma or tfa)"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Ma => "ma",
            Aggregation::Tfa => "tfa",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ASAConfig {
    pub heads: usize,
    pub dim: usize,
    pub aggregation: Aggregation,
}

impl ASAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Self-attention over `[cls; frame_tokens]`. Returns `(K × D tokens, 1 × D cls)`.
pub fn spatial_attend_frame(
    tape: &mut Tape,
    frame_tokens: Var,
    cls: Var,
    params: &SpatialAttentionParams<Var>,
    cfg: &ASAConfig,
) -> Result<(Var, Var)> {
    let k = tape.value(frame_tokens).rows();
    if k == 0 {
        return Err(dim_err!("frame with no patch tokens"));
    }
    let x = tape.concat_rows(&[cls, frame_tokens])?;
    let proj = project(tape, x, params)?;
    let rows: Vec<usize> = (0..=k).collect();
    let (out, _) = attend_rows(tape, &proj, &rows, params, cfg.heads)?;
    let cls_out = tape.slice_rows(out, 0, 1)?;
    let tokens = tape.slice_rows(out, 1, k)?;
    Ok((tokens, cls_out))
}

/// TFA weights: softmax over t of `<cls_target, cls_t> / sqrt(D)`, target = last row. Returns `1 × T`.
pub fn tfa_weights(tape: &mut Tape, cls_per_frame: Var) -> Result<Var> {
    let (t, d) = (tape.value(cls_per_frame).rows(), tape.value(cls_per_frame).cols());
    let target = tape.slice_rows(cls_per_frame, t - 1, 1)?;
    let all_t = tape.transpose(cls_per_frame)?;
    let scores = tape.matmul(target, all_t)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    tape.softmax(scores)
}

/// Merges `T × D` per-frame CLS tokens into `1 × D`.
pub fn aggregate_cls(tape: &mut Tape, cls_per_frame: Var, mode: Aggregation) -> Result<Var> {
    match mode {
        Aggregation::Ma => Ok(tape.mean_rows(cls_per_frame)),
        Aggregation::Tfa => {
            let w = tfa_weights(tape, cls_per_frame)?;
            tape.matmul(w, cls_per_frame)
        }
    }
}

/// Aggregated spatial attention over a token grid. Output keeps the grid
/// layout; its CLS row is the aggregated CLS.
pub fn asa_forward(
    tape: &mut Tape,
    grid: Var,
    shape: GridShape,
    params: &SpatialAttentionParams<Var>,
    cfg: &ASAConfig,
) -> Result<Var> {
    cfg.validate()?;
    if shape.patches == 0 {
        return Err(dim_err!("grid with no spatial positions"));
    }
    let proj = project(tape, grid, params)?;
    let mut cls_copies = Vec::with_capacity(shape.frames);
    let mut patch_outputs = Vec::with_capacity(shape.frames);
    for t in 0..shape.frames {
        let mut rows = vec![0];
        rows.extend(shape.spatial_rows(t));
        let (out, _) = attend_rows(tape, &proj, &rows, params, cfg.heads)?;
        cls_copies.push(tape.slice_rows(out, 0, 1)?);
        patch_outputs.push(tape.slice_rows(out, 1, shape.patches)?);
    }
    let cls_all = tape.concat_rows(&cls_copies)?;
    let cls = aggregate_cls(tape, cls_all, cfg.aggregation)?;
    let mut parts = Vec::with_capacity(shape.frames + 1);
    parts.push(cls);
    parts.extend(patch_outputs);
    tape.concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(tape: &mut Tape, d: usize, seed: u64, symmetric: bool) -> SpatialAttentionParams<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Tensor::uniform(&[d, d], -0.5, 0.5, &mut rng);
        let wq = m();
        let wk = if symmetric { wq.clone() } else { m() };
        let p = AttentionParams { wq, wk, wv: m(), wo: m(), bo: Tensor::full(&[d], -0.05) };
        p.map("", &mut |_, t| tape.constant(t.clone()))
    }

    fn rows(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn aggregation_names() {
        assert_eq!("MA".parse::<Aggregation>().unwrap(), Aggregation::Ma);
        assert_eq!("tfa".parse::<Aggregation>().unwrap(), Aggregation::Tfa);
        assert!("kca".parse::<Aggregation>().is_err());
    }

    #[test]
    fn mean_aggregation() {
        let mut tape = Tape::new();
        let c = rows(&mut tape, &[vec![0.0, 2.0], vec![2.0, 0.0]]);
        let out = aggregate_cls(&mut tape, c, Aggregation::Ma).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0]);
    }

    #[test]
    fn tfa_scalar_case() {
        let mut tape = Tape::new();
        // cls values {2, 0} with the target (2) placed last
        let c = rows(&mut tape, &[vec![0.0], vec![2.0]]);
        let w = tfa_weights(&mut tape, c).unwrap();
        let e4 = 4f64.exp();
        assert!((tape.value(w).data()[1] - e4 / (e4 + 1.0)).abs() < 1e-15);
        assert!((tape.value(w).data()[1] - 0.9820).abs() < 1e-4);
        let out = aggregate_cls(&mut tape, c, Aggregation::Tfa).unwrap();
        assert!((tape.value(out).data()[0] - 1.9641).abs() < 1e-4);
    }

    #[test]
    fn tfa_equal_tokens_reduce_to_mean() {
        let mut tape = Tape::new();
        let c = rows(&mut tape, &vec![vec![0.4, -1.2, 3.0]; 5]);
        let w = tfa_weights(&mut tape, c).unwrap();
        assert!(tape.value(w).data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let tfa = aggregate_cls(&mut tape, c, Aggregation::Tfa).unwrap();
        let ma = aggregate_cls(&mut tape, c, Aggregation::Ma).unwrap();
        assert!(tape.value(tfa).max_abs_diff(tape.value(ma)) < 1e-15);
    }

    #[test]
    fn single_token_equal_to_cls() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 4, 1, false);
        let cfg = ASAConfig { heads: 2, dim: 4, aggregation: Aggregation::Ma };
        let tok = rows(&mut tape, &[vec![0.1, 0.2, -0.3, 0.4]]);
        let (out, cls) = spatial_attend_frame(&mut tape, tok, tok, &p, &cfg).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(cls)) < 1e-15);
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 4, 2, true);
        let cfg = ASAConfig { heads: 1, dim: 4, aggregation: Aggregation::Ma };
        let r = vec![0.5, -0.1, 0.0, 0.7];
        let toks = rows(&mut tape, &vec![r.clone(); 3]);
        let cls = rows(&mut tape, &[r]);
        let (out, c) = spatial_attend_frame(&mut tape, toks, cls, &p, &cfg).unwrap();
        for i in 0..3 {
            assert!(tape.value(out).row(i).iter().zip(tape.value(c).data()).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn single_frame_cls_is_enhanced_cls() {
        for mode in [Aggregation::Ma, Aggregation::Tfa] {
            let mut tape = Tape::new();
            let p = params(&mut tape, 4, 3, false);
            let cfg = ASAConfig { heads: 2, dim: 4, aggregation: mode };
            let shape = GridShape { frames: 1, patches: 3 };
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let g = tape.constant(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
            let out = asa_forward(&mut tape, g, shape, &p, &cfg).unwrap();
            let cls = tape.slice_rows(g, 0, 1).unwrap();
            let toks = tape.slice_rows(g, 1, 3).unwrap();
            let (_, want) = spatial_attend_frame(&mut tape, toks, cls, &p, &cfg).unwrap();
            assert!((0..4).all(|j| (tape.value(out).get(0, j) - tape.value(want).get(0, j)).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_patch_frame_is_rejected() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 2, 4, false);
        let cfg = ASAConfig { heads: 1, dim: 2, aggregation: Aggregation::Ma };
        let g = tape.constant(Tensor::zeros(&[1, 2]));
        let shape = GridShape { frames: 2, patches: 0 };
        assert!(matches!(asa_forward(&mut tape, g, shape, &p, &cfg), Err(Error::Dimension(_))));
    }
}
