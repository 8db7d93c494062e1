//! Attention-based feature highlighter.
//!
//! For a key feature `X_i` (`[C,HW]`) and a query feature `X_j` of the same
//! class, the spatial similarity is `S = (θ_q X_j)ᵀ (θ_k X_i)`. Averaging `S`
//! over query positions and applying a softmax gives one weight per key
//! position; the highlighted feature is the weighted spatial average of
//! `X_i`. Training uses the mixed query `(θ_q X_j + θ_q X_i)/2`, inference
//! uses the sample's own query.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Mixed query with a same-class partner.
    TrainMixed,
    /// The sample attends to itself.
    EvalSelf,
}

/// Softmax-normalized attention weights over the `h×w` key positions of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScore {
    pub h: usize,
    pub w: usize,
    pub weights: Vec<f32>,
}

impl AttentionScore {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.weights[y * self.w + x]
    }

    /// Binary PGM (`P5`) with the weights min-max rescaled to `0..=255`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let lo = self.weights.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.weights.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.weights.iter().map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        }));
        out
    }

    /// One line per row, space-separated weights.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.weights.chunks(self.w) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

fn project(theta: &Tensor, x: &Tensor, op: &'static str) -> Result<Vec<f32>> {
    let (d, c) = theta.dims2(op)?;
    let (cx, hw) = x.dims2(op)?;
    if c != cx {
        return Err(Error::shape(op, "channels", format!("θ has {c} columns, feature has {cx} channels")));
    }
    let mut out = vec![0.0; d * hw];
    crate::autodiff::kernels::gemm_nn(d, c, hw, theta.data(), x.data(), &mut out);
    Ok(out)
}

fn gram(d: usize, hw: usize, q: &[f32], k: &[f32]) -> Tensor {
    let mut s = vec![0.0; hw * hw];
    crate::autodiff::kernels::gemm_tn(hw, d, hw, q, k, &mut s);
    Tensor::new(vec![hw, hw], s).expect("hw×hw")
}

/// `S = (θ_q X_j)ᵀ (θ_k X_i)` for flattened `[C,HW]` features.
pub fn spatial_similarity(xi: &Tensor, xj: &Tensor, theta_q: &Tensor, theta_k: &Tensor) -> Result<Tensor> {
    if xi.shape() != xj.shape() {
        return Err(Error::shape("spatial_similarity", "feature", format!("{:?} vs {:?}", xi.shape(), xj.shape())));
    }
    let q = project(theta_q, xj, "spatial_similarity")?;
    let k = project(theta_k, xi, "spatial_similarity")?;
    Ok(gram(theta_q.shape()[0], xi.shape()[1], &q, &k))
}

/// `S = ((θ_q X_j + θ_q X_i)/2)ᵀ (θ_k X_i)`.
pub fn mixed_similarity(xi: &Tensor, xj: &Tensor, theta_q: &Tensor, theta_k: &Tensor) -> Result<Tensor> {
    if xi.shape() != xj.shape() {
        return Err(Error::shape("mixed_similarity", "feature", format!("{:?} vs {:?}", xi.shape(), xj.shape())));
    }
    let qj = project(theta_q, xj, "mixed_similarity")?;
    let qi = project(theta_q, xi, "mixed_similarity")?;
    let q: Vec<f32> = qj.iter().zip(&qi).map(|(a, b)| (a + b) * 0.5).collect();
    let k = project(theta_k, xi, "mixed_similarity")?;
    Ok(gram(theta_q.shape()[0], xi.shape()[1], &q, &k))
}

/// Mean of `S` over query positions, softmax-normalized over the key positions.
pub fn attention_score(s: &Tensor, h: usize, w: usize) -> Result<AttentionScore> {
    let hw = h * w;
    if s.shape() != [hw, hw] {
        return Err(Error::shape(
            "attention_score",
            "similarity",
            format!("expected [{hw},{hw}] for {h}×{w}, got {:?}", s.shape()),
        ));
    }
    let mut logits = vec![0.0f32; hw];
    for (m, l) in logits.iter_mut().enumerate() {
        let col: f64 = (0..hw).map(|p| s.data()[p * hw + m] as f64).sum();
        *l = (col / hw as f64) as f32;
    }
    let mut weights = vec![0.0f32; hw];
    crate::autodiff::softmax_into(&logits, &mut weights);
    Ok(AttentionScore { h, w, weights })
}

/// `A[c] = Σ_{h,w} a_s[h,w] · z[c,h,w]`, divided by `Σ a_s` (1 up to f32
/// rounding) so that a constant channel pools to exactly its value.
pub fn attention_pool(z: &Tensor, score: &AttentionScore) -> Result<Vec<f32>> {
    let (c, hw) = match z.shape() {
        [c, h, w] if *h == score.h && *w == score.w => (*c, h * w),
        other => {
            return Err(Error::shape(
                "attention_pool",
                "feature",
                format!("expected [C,{},{}], got {other:?}", score.h, score.w),
            ))
        }
    };
    let total: f64 = score.weights.iter().map(|&a| a as f64).sum();
    if !(total > 0.0) {
        return Err(Error::Numeric(format!("attention weights sum to {total}")));
    }
    Ok((0..c)
        .map(|ch| {
            let dot: f64 = z.data()[ch * hw..(ch + 1) * hw]
                .iter()
                .zip(&score.weights)
                .map(|(&v, &a)| v as f64 * a as f64)
                .sum();
            (dot / total) as f32
        })
        .collect())
}

/// A uniformly drawn same-class partner for every sample, never itself.
/// Duplicated samples occupy distinct batch positions and pair normally.
pub fn sample_pairing<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if let Some((&class, _)) = members.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::SingletonClass { class });
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let pool = &members[l];
            let pos = pool.iter().position(|&p| p == i).expect("member");
            let r = rng.random_range(0..pool.len() - 1);
            pool[if r >= pos { r + 1 } else { r }]
        })
        .collect())
}

/// Highlighter on the tape. `pairing = None` selects self-attention.
///
/// Returns the attention features `[B,C]` and the normalized scores `[B,HW]`.
pub fn highlight(
    tape: &mut Tape,
    z: Var,
    theta_q: Var,
    theta_k: Var,
    pairing: Option<&[usize]>,
) -> Result<(Var, Var)> {
    let (b, c, _, _) = tape.value(z).dims4("highlight")?;
    let (d, cq) = tape.value(theta_q).dims2("highlight")?;
    if cq != c || tape.value(theta_k).shape() != [d, c] {
        return Err(Error::shape(
            "highlight",
            "projection",
            format!(
                "θ_q {:?}, θ_k {:?} for {c} channels",
                tape.value(theta_q).shape(),
                tape.value(theta_k).shape()
            ),
        ));
    }
    let wq = tape.reshape(theta_q, &[d, c, 1, 1])?;
    let wk = tape.reshape(theta_k, &[d, c, 1, 1])?;
    let q = tape.conv2d(z, wq, None, 1, 0)?;
    let k = tape.conv2d(z, wk, None, 1, 0)?;
    let query = match pairing {
        None => q,
        Some(p) => {
            if p.len() != b {
                return Err(Error::shape("highlight", "pairing", format!("{} entries for batch {b}", p.len())));
            }
            let partner = tape.gather_rows(q, p)?;
            let sum = tape.add(partner, q)?;
            tape.scale(sum, 0.5)
        }
    };
    let logits = tape.similarity_scores(query, k)?;
    let scores = tape.softmax_rows(logits)?;
    let pooled = tape.attention_pool(z, scores)?;
    Ok((pooled, scores))
}

/// Plain-tensor highlighter over a `[B,C,h,w]` batch.
pub fn highlight_batch<R: Rng + ?Sized>(
    z: &Tensor,
    labels: &[usize],
    theta_q: &Tensor,
    theta_k: &Tensor,
    mode: AttentionMode,
    rng: &mut R,
) -> Result<(Tensor, Vec<AttentionScore>)> {
    let (_, _, h, w) = z.dims4("highlight")?;
    let pairing = match mode {
        AttentionMode::TrainMixed => Some(sample_pairing(labels, rng)?),
        AttentionMode::EvalSelf => None,
    };
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let tq = tape.constant(theta_q.clone());
    let tk = tape.constant(theta_k.clone());
    let (pooled, scores) = highlight(&mut tape, zv, tq, tk, pairing.as_deref())?;
    Ok((tape.value(pooled).clone(), split_scores(tape.value(scores), h, w)))
}

/// Split a `[B,HW]` score matrix into per-sample maps.
pub fn split_scores(scores: &Tensor, h: usize, w: usize) -> Vec<AttentionScore> {
    scores
        .data()
        .chunks(h * w)
        .map(|row| AttentionScore { h, w, weights: row.to_vec() })
        .collect()
}

/// Fan-in scaled uniform initialization for a `[d,C]` projection.
pub fn init_projection<R: Rng + ?Sized>(d: usize, c: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (c as f32).sqrt();
    Tensor::from_fn(&[d, c], |_| rng.random_range(-bound..bound))
}
