//! Style-based learning on intermediate feature maps.
//!
//! Style statistics are the channel-wise mean and standard deviation of a
//! `[C,H,W]` feature map. A client summarizes its whole local dataset as a
//! [`StyleInfo`] (center and spread of those statistics), which is shared
//! with one other client per round. During local training the mini-batch
//! features are then
//!
//! 1. partly shifted to the received style (AdaIN), keeping the half picked
//!    by k-means++ seeding in style space,
//! 2. oversampled in a class-balanced way,
//! 3. explored: the oversampled copies have their styles extrapolated away
//!    from the batch style center by the exploration level `alpha`,
//! 4. mixed: every sample's statistics are interpolated with a random
//!    partner's (MixStyle).
//!
//! Each batch operation exists twice: as a tape builder (`shift_rows`,
//! `explore_tail`, `mix_rows`) used inside the model forward, and as a plain
//! tensor function wrapping it for standalone use.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to `σ(s)²` under the square root in every AdaIN denominator.
pub const EPS_STAB: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl StyleStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// The point `(μ, σ)` in `R^{2C}` used for k-means++ seeding.
    pub fn as_point(&self) -> Vec<f32> {
        self.mu.iter().chain(&self.sigma).copied().collect()
    }
}

/// A client's style identity: center and elementwise variance of its
/// per-sample style statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleInfo {
    pub client_id: u32,
    pub sample_count: u32,
    pub mu_bar: Vec<f32>,
    pub sigma_bar: Vec<f32>,
    pub var_mu: Vec<f32>,
    pub var_sigma: Vec<f32>,
}

impl StyleInfo {
    pub fn channels(&self) -> usize {
        self.mu_bar.len()
    }

    /// Wire size for `channels` channels.
    pub fn encoded_len(channels: usize) -> usize {
        8 + 16 * channels
    }

    /// `client_id: u32`, `sample_count: u32`, then `mu_bar`, `sigma_bar`,
    /// `var_mu`, `var_sigma` as little-endian `f32` vectors.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.channels()));
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.sample_count.to_le_bytes());
        for v in [&self.mu_bar, &self.sigma_bar, &self.var_mu, &self.var_sigma] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || !(bytes.len() - 8).is_multiple_of(16) {
            return Err(Error::Format(format!(
                "style info payload of {} bytes is not 8 + 16·C",
                bytes.len()
            )));
        }
        let c = (bytes.len() - 8) / 16;
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let vec_at = |k: usize| -> Vec<f32> {
            (0..c)
                .map(|i| {
                    let o = 8 + (k * c + i) * 4;
                    f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
                })
                .collect()
        };
        Ok(StyleInfo {
            client_id: u32_at(0),
            sample_count: u32_at(4),
            mu_bar: vec_at(0),
            sigma_bar: vec_at(1),
            var_mu: vec_at(2),
            var_sigma: vec_at(3),
        })
    }
}

/// Reference center for style exploration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploreRef {
    /// Mean statistics of the original mini-batch only.
    #[default]
    Original,
    /// Mean statistics of the original batch concatenated with the oversampled copies.
    Concatenated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorationParams {
    pub alpha: f32,
    pub oversample_size: usize,
    pub mix_beta: f32,
    pub explore_ref: ExploreRef,
}

impl Default for ExplorationParams {
    fn default() -> Self {
        ExplorationParams {
            alpha: 3.0,
            oversample_size: 16,
            mix_beta: 0.1,
            explore_ref: ExploreRef::Original,
        }
    }
}

/// Channel-wise mean and population standard deviation of a `[C,H,W]` map.
pub fn compute_style_stats(feature: &Tensor) -> Result<StyleStats> {
    let (c, hw) = match feature.shape() {
        [c, h, w] if h * w >= 1 => (*c, h * w),
        other => {
            return Err(Error::shape(
                "compute_style_stats",
                "rank",
                format!("expected non-empty [C,H,W], got {other:?}"),
            ))
        }
    };
    Ok(stats_of_planes(feature.data(), c, hw))
}

fn stats_of_planes(data: &[f32], c: usize, hw: usize) -> StyleStats {
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for plane in data.chunks(hw).take(c) {
        let m = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / hw as f64;
        mu.push(m as f32);
        sigma.push(var.sqrt() as f32);
    }
    StyleStats { mu, sigma }
}

/// Style statistics of every sample in a `[B,C,H,W]` batch.
pub fn batch_style_stats(batch: &Tensor) -> Result<Vec<StyleStats>> {
    let (b, c, h, w) = batch.dims4("batch_style_stats")?;
    let n = c * h * w;
    Ok((0..b)
        .map(|i| stats_of_planes(&batch.data()[i * n..(i + 1) * n], c, h * w))
        .collect())
}

/// Center and elementwise population variance of a client's per-sample
/// style statistics.
pub fn compute_style_info(stats: &[StyleStats], client_id: u32) -> Result<StyleInfo> {
    let first = stats
        .first()
        .ok_or(Error::EmptyDataset("style info needs at least one sample"))?;
    let c = first.channels();
    let n = stats.len() as f64;
    let mean_var = |pick: &dyn Fn(&StyleStats) -> &[f32]| -> (Vec<f32>, Vec<f32>) {
        let mut mean = vec![0.0f64; c];
        for s in stats {
            for (m, &v) in mean.iter_mut().zip(pick(s)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; c];
        for s in stats {
            for ((acc, &m), &v) in var.iter_mut().zip(&mean).zip(pick(s)) {
                *acc += (m - v as f64).powi(2);
            }
        }
        (
            mean.iter().map(|&m| m as f32).collect(),
            var.iter().map(|&v| (v / n) as f32).collect(),
        )
    };
    let (mu_bar, var_mu) = mean_var(&|s| &s.mu);
    let (sigma_bar, var_sigma) = mean_var(&|s| &s.sigma);
    Ok(StyleInfo {
        client_id,
        sample_count: stats.len() as u32,
        mu_bar,
        sigma_bar,
        var_mu,
        var_sigma,
    })
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

/// k-means++ seeding of `⌈B/2⌉` centers among the batch's style points.
///
/// The first center is uniform; each further center is drawn with
/// probability proportional to its squared distance to the nearest center
/// chosen so far. No Lloyd refinement follows, so the centers are actual
/// samples. Returns the sorted indices of the samples that keep their style.
pub fn select_keepers_kmeanspp<R: Rng + ?Sized>(stats: &[StyleStats], rng: &mut R) -> Result<Vec<usize>> {
    let b = stats.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b, "k-means++ keeper selection"));
    }
    let k = b.div_ceil(2);
    let points: Vec<Vec<f32>> = stats.iter().map(StyleStats::as_point).collect();
    let mut chosen = vec![false; b];
    let mut nearest = vec![f64::INFINITY; b];
    let mut centers = Vec::with_capacity(k);
    let mut next = rng.random_range(0..b);
    for _ in 0..k {
        chosen[next] = true;
        centers.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, &points[next]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
        if centers.len() == k {
            break;
        }
        let total: f64 = (0..b).filter(|&i| !chosen[i]).map(|i| nearest[i]).sum();
        next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for i in (0..b).filter(|&i| !chosen[i]) {
                if nearest[i] <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < nearest[i] {
                    break;
                }
                target -= nearest[i];
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point coincides with a center
            let rest: Vec<usize> = (0..b).filter(|&i| !chosen[i]).collect();
            rest[rng.random_range(0..rest.len())]
        };
    }
    centers.sort_unstable();
    Ok(centers)
}

/// Per-row AdaIN targets for style shifting, `[n,C]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftTargets {
    pub mean: Tensor,
    pub std: Tensor,
}

/// Targets `μ' + ε_μ ⊙ Σ'(μ)` and `σ' + ε_σ ⊙ Σ'(σ)` for `rows` samples, with
/// `ε` drawn per sample and channel from the standard normal.
pub fn draw_shift_targets<R: Rng + ?Sized>(target: &StyleInfo, rows: usize, rng: &mut R) -> ShiftTargets {
    let c = target.channels();
    let mut eps_mu = Vec::with_capacity(rows * c);
    let mut eps_sigma = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        for _ in 0..c {
            eps_mu.push(StandardNormal.sample(rng));
        }
        for _ in 0..c {
            eps_sigma.push(StandardNormal.sample(rng));
        }
    }
    shift_targets_with_noise(target, rows, &eps_mu, &eps_sigma)
}

/// Shift targets with explicit noise (`rows·C` values each, row-major).
pub fn shift_targets_with_noise(
    target: &StyleInfo,
    rows: usize,
    eps_mu: &[f32],
    eps_sigma: &[f32],
) -> ShiftTargets {
    let c = target.channels();
    let mean = Tensor::from_fn(&[rows, c], |i| target.mu_bar[i % c] + eps_mu[i] * target.var_mu[i % c]);
    let std = Tensor::from_fn(&[rows, c], |i| {
        target.sigma_bar[i % c] + eps_sigma[i] * target.var_sigma[i % c]
    });
    ShiftTargets { mean, std }
}

/// AdaIN of every row of `x` to the given per-row statistics.
pub fn adain_to(tape: &mut Tape, x: Var, target_mean: Var, target_std: Var, eps: f32) -> Result<Var> {
    let mean = tape.channel_mean(x)?;
    let std = tape.channel_std(x)?;
    tape.adain(x, mean, std, target_mean, target_std, eps)
}

/// Shift the styles of `rows` of the batch `x` to `targets`; other rows pass
/// through unchanged and the batch order is preserved.
pub fn shift_rows(tape: &mut Tape, x: Var, rows: &[usize], targets: &ShiftTargets, eps: f32) -> Result<Var> {
    let b = tape.value(x).shape()[0];
    if rows.is_empty() {
        return Ok(x);
    }
    let mut is_shifted = vec![false; b];
    for &r in rows {
        is_shifted[r] = true;
    }
    let kept: Vec<usize> = (0..b).filter(|&i| !is_shifted[i]).collect();
    let picked = tape.gather_rows(x, rows)?;
    let tm = tape.constant(targets.mean.clone());
    let ts = tape.constant(targets.std.clone());
    let shifted = adain_to(tape, picked, tm, ts, eps)?;
    if kept.is_empty() {
        let order = inverse_permutation(rows);
        return tape.gather_rows(shifted, &order);
    }
    let untouched = tape.gather_rows(x, &kept)?;
    let stacked = tape.concat_rows(&[untouched, shifted])?;
    let layout: Vec<usize> = kept.iter().chain(rows).copied().collect();
    tape.gather_rows(stacked, &inverse_permutation(&layout))
}

fn inverse_permutation(layout: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; layout.len()];
    for (pos, &orig) in layout.iter().enumerate() {
        inv[orig] = pos;
    }
    inv
}

/// Shift a single `[C,H,W]` feature to `target`, drawing fresh noise.
pub fn style_shift<R: Rng + ?Sized>(feature: &Tensor, target: &StyleInfo, rng: &mut R) -> Result<Tensor> {
    let targets = draw_shift_targets(target, 1, rng);
    shift_single(feature, &targets)
}

/// [`style_shift`] with fixed noise; `ε = 0` gives plain AdaIN to `(μ', σ')`.
pub fn style_shift_with_noise(
    feature: &Tensor,
    target: &StyleInfo,
    eps_mu: &[f32],
    eps_sigma: &[f32],
) -> Result<Tensor> {
    let targets = shift_targets_with_noise(target, 1, eps_mu, eps_sigma);
    shift_single(feature, &targets)
}

fn shift_single(feature: &Tensor, targets: &ShiftTargets) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(feature.shape());
    let mut tape = Tape::new();
    let x = tape.constant(feature.clone().reshape(&shape)?);
    let y = shift_rows(&mut tape, x, &[0], targets, EPS_STAB)?;
    tape.value(y).clone().reshape(feature.shape())
}

/// Batch positions to duplicate so that `[labels, labels[picked]]` is as
/// class-balanced as possible.
///
/// Extra slots go one at a time to the currently least represented class
/// (ties broken uniformly at random) among the classes present; the sample
/// within a class is drawn uniformly with replacement.
pub fn oversample_indices<R: Rng + ?Sized>(labels: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    if size == 0 || labels.is_empty() {
        return Vec::new();
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let classes: Vec<usize> = members.keys().copied().collect();
    let mut counts: Vec<usize> = classes.iter().map(|c| members[c].len()).collect();
    let mut extra = vec![0usize; classes.len()];
    for _ in 0..size {
        let min = *counts.iter().min().expect("non-empty");
        let tied: Vec<usize> = (0..classes.len()).filter(|&k| counts[k] == min).collect();
        let k = tied[rng.random_range(0..tied.len())];
        counts[k] += 1;
        extra[k] += 1;
    }
    let mut picked = Vec::with_capacity(size);
    for (k, &n) in extra.iter().enumerate() {
        let pool = &members[&classes[k]];
        for _ in 0..n {
            picked.push(pool[rng.random_range(0..pool.len())]);
        }
    }
    picked
}

/// Class-balanced oversampling of a `[B,...]` batch: returns the `size`
/// duplicated samples and their labels.
pub fn oversample_class_balanced<R: Rng + ?Sized>(
    batch: &Tensor,
    labels: &[usize],
    size: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    if batch.rank() == 0 || batch.shape()[0] != labels.len() {
        return Err(Error::shape(
            "oversample_class_balanced",
            "batch",
            format!("{:?} with {} labels", batch.shape(), labels.len()),
        ));
    }
    let picked = oversample_indices(labels, size, rng);
    let n = batch.row_len();
    let mut data = Vec::with_capacity(picked.len() * n);
    for &i in &picked {
        data.extend_from_slice(&batch.data()[i * n..(i + 1) * n]);
    }
    let mut shape = batch.shape().to_vec();
    shape[0] = picked.len();
    let out_labels = picked.iter().map(|&i| labels[i]).collect();
    Ok((Tensor::new(shape, data)?, out_labels))
}

/// Style exploration on the rows `base_rows..` of `x` (the oversampled part):
/// `μ_new = μ + α(μ − μ_ref)`, `σ_new = max(0, σ + α(σ − σ_ref))`, followed by
/// AdaIN to the new statistics. Rows before `base_rows` pass through.
pub fn explore_tail(
    tape: &mut Tape,
    x: Var,
    base_rows: usize,
    alpha: f32,
    reference: ExploreRef,
    eps: f32,
) -> Result<Var> {
    let total = tape.value(x).shape()[0];
    if base_rows == 0 || base_rows > total {
        return Err(Error::shape(
            "explore",
            "base rows",
            format!("{base_rows} original rows in a batch of {total}"),
        ));
    }
    if base_rows == total {
        return Ok(x);
    }
    let mean = tape.channel_mean(x)?;
    let std = tape.channel_std(x)?;
    let ref_rows: Vec<usize> = match reference {
        ExploreRef::Original => (0..base_rows).collect(),
        ExploreRef::Concatenated => (0..total).collect(),
    };
    let tail: Vec<usize> = (base_rows..total).collect();
    let head: Vec<usize> = (0..base_rows).collect();
    let n_tail = tail.len();

    let ref_mean = mean_of_rows(tape, mean, &ref_rows, n_tail)?;
    let ref_std = mean_of_rows(tape, std, &ref_rows, n_tail)?;
    let tail_mean = tape.gather_rows(mean, &tail)?;
    let tail_std = tape.gather_rows(std, &tail)?;

    let new_mean = extrapolate(tape, tail_mean, ref_mean, alpha)?;
    let new_std = extrapolate(tape, tail_std, ref_std, alpha)?;
    let new_std = tape.relu(new_std);

    let x_tail = tape.gather_rows(x, &tail)?;
    let explored = tape.adain(x_tail, tail_mean, tail_std, new_mean, new_std, eps)?;
    let x_head = tape.gather_rows(x, &head)?;
    tape.concat_rows(&[x_head, explored])
}

/// Column means of the selected rows of a `[R,C]` matrix, repeated `copies` times.
fn mean_of_rows(tape: &mut Tape, stats: Var, rows: &[usize], copies: usize) -> Result<Var> {
    let sel = tape.gather_rows(stats, rows)?;
    let m = tape.mean_rows(sel)?;
    tape.gather_rows(m, &vec![0; copies])
}

/// `v + α (v − r)`
fn extrapolate(tape: &mut Tape, v: Var, r: Var, alpha: f32) -> Result<Var> {
    let diff = tape.sub(v, r)?;
    let step = tape.scale(diff, alpha);
    tape.add(v, step)
}

/// Explore the styles of `oversampled` around the statistics of `base_batch`
/// and return the explored copies.
pub fn style_explore(
    oversampled: &Tensor,
    base_batch: &Tensor,
    alpha: f32,
    reference: ExploreRef,
) -> Result<Tensor> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("exploration level must be ≥ 0, got {alpha}")));
    }
    let base_rows = base_batch.shape().first().copied().unwrap_or(0);
    let mut tape = Tape::new();
    let a = tape.constant(base_batch.clone());
    let b = tape.constant(oversampled.clone());
    let cat = tape.concat_rows(&[a, b])?;
    let out = explore_tail(&mut tape, cat, base_rows, alpha, reference, EPS_STAB)?;
    let rows: Vec<usize> = (base_rows..tape.value(out).shape()[0]).collect();
    let tail = tape.gather_rows(out, &rows)?;
    Ok(tape.value(tail).clone())
}

/// Mixing plan: sample `i` is mixed with sample `partner[i]` using weight
/// `lambda[i]` on its own statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub partner: Vec<usize>,
    pub lambda: Vec<f32>,
}

/// Random partner permutation and `λ ~ Beta(β, β)` per sample.
pub fn sample_mix_plan<R: Rng + ?Sized>(n: usize, mix_beta: f32, rng: &mut R) -> Result<MixPlan> {
    let beta = Beta::new(mix_beta, mix_beta)
        .map_err(|e| Error::Config(format!("mix_beta {mix_beta}: {e}")))?;
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    let lambda = (0..n).map(|_| beta.sample(rng)).collect();
    Ok(MixPlan { partner, lambda })
}

/// MixStyle: AdaIN every row to `λ·(μ_i, σ_i) + (1−λ)·(μ_j, σ_j)`.
pub fn mix_rows(tape: &mut Tape, x: Var, plan: &MixPlan, eps: f32) -> Result<Var> {
    let (b, c, _, _) = tape.value(x).dims4("mixstyle")?;
    if plan.partner.len() != b || plan.lambda.len() != b {
        return Err(Error::shape(
            "mixstyle",
            "plan",
            format!("plan for {} rows, batch has {b}", plan.partner.len()),
        ));
    }
    let mean = tape.channel_mean(x)?;
    let std = tape.channel_std(x)?;
    let lam = tape.constant(Tensor::from_fn(&[b, c], |i| plan.lambda[i / c]));
    let one_minus = tape.constant(Tensor::from_fn(&[b, c], |i| 1.0 - plan.lambda[i / c]));
    let mix = |tape: &mut Tape, stat: Var| -> Result<Var> {
        let other = tape.gather_rows(stat, &plan.partner)?;
        let own = tape.mul(lam, stat)?;
        let theirs = tape.mul(one_minus, other)?;
        tape.add(own, theirs)
    };
    let new_mean = mix(tape, mean)?;
    let new_std = mix(tape, std)?;
    tape.adain(x, mean, std, new_mean, new_std, eps)
}

/// MixStyle over a `[N,C,H,W]` batch with a random plan.
pub fn mixstyle<R: Rng + ?Sized>(batch: &Tensor, mix_beta: f32, rng: &mut R) -> Result<Tensor> {
    let n = batch.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::BatchTooSmall(n, "mixstyle"));
    }
    let plan = sample_mix_plan(n, mix_beta, rng)?;
    mixstyle_with(batch, &plan)
}

pub fn mixstyle_with(batch: &Tensor, plan: &MixPlan) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let y = mix_rows(&mut tape, x, plan, EPS_STAB)?;
    Ok(tape.value(y).clone())
}
