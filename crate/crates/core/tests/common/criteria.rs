//! The acceptance criteria as reusable checks. Every check computes its
//! expected values with an oracle written here, independently of the crate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use fdg_core::attention::{attention_score, mixed_similarity, spatial_similarity, AttentionScore};
use fdg_core::autodiff::Tape;
use fdg_core::data::{generate_corpus, CorpusSpec, SyntheticCorpus};
use fdg_core::federation::{
    fedavg_aggregate, make_shards, partition_multi_domain, partition_single_domain, run_federation,
    style_sharing_round, FederationConfig, LrSchedule, Method, Partition,
};
use fdg_core::harness::{run_experiment_on, ExperimentConfig, ExperimentResult};
use fdg_core::model::{forward, ArchConfig, ForwardPlan, Mode, ModelParams};
use fdg_core::style::{
    oversample_indices, select_keepers_kmeanspp, style_explore, style_shift_with_noise, ExploreRef, StyleInfo,
    StyleStats,
};
use fdg_core::{seed, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::FdReport;
use super::grad_suite::{composed_report, op_reports};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-channel mean and population std of a `[C,H,W]` map, in f64.
pub fn oracle_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = t.shape()[0];
    let hw = t.numel() / c;
    let mut mu = vec![0.0; c];
    let mut sd = vec![0.0; c];
    for ch in 0..c {
        let plane = &t.data()[ch * hw..(ch + 1) * hw];
        let m = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / hw as f64;
        mu[ch] = m;
        sd[ch] = var.sqrt();
    }
    (mu, sd)
}

/// A `[C,H,W]` map with per-channel offset and scale drawn from the stream.
pub fn random_feature(c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor {
    let offsets: Vec<f32> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
    let scales: Vec<f32> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        offsets[ch] + scales[ch] * r.random_range(-1.7f32..1.7)
    })
}

// ------------------------------------------------------------------ 1

pub fn gradient_suite() -> (Outcome, Vec<FdReport>) {
    let started = Instant::now();
    let mut reports = op_reports();
    reports.push(composed_report(8));
    let secs = started.elapsed().as_secs_f64();
    let coords: usize = reports.iter().map(|r| r.coords).sum();
    let worst = reports.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).expect("reports");
    let passed = reports.iter().all(FdReport::passed) && coords >= 200 && secs < 60.0;
    let detail = format!(
        "{} checks, {coords} coordinates, worst {:.2e} ({}), {secs:.1}s",
        reports.len(),
        worst.worst,
        worst.name
    );
    (Outcome::new(passed, detail), reports)
}

// ------------------------------------------------------------------ 2

pub fn adain_fidelity() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = r.random_range(1..=16);
        let (h, w) = (r.random_range(4..=8), r.random_range(4..=8));
        let feature = random_feature(c, h, w, &mut r);
        let target = StyleInfo {
            client_id: 1,
            sample_count: 1,
            mu_bar: (0..c).map(|_| r.random_range(-2.0..2.0)).collect(),
            sigma_bar: (0..c).map(|_| r.random_range(0.05..3.0)).collect(),
            var_mu: (0..c).map(|_| r.random_range(0.0..0.5)).collect(),
            var_sigma: (0..c).map(|_| r.random_range(0.0..0.5)).collect(),
        };
        let zeros = vec![0.0f32; c];
        let out = style_shift_with_noise(&feature, &target, &zeros, &zeros).expect("shift");
        let (mu, sd) = oracle_stats(&out);
        for ch in 0..c {
            worst = worst.max((mu[ch] - target.mu_bar[ch] as f64).abs());
            worst = worst.max((sd[ch] - target.sigma_bar[ch] as f64).abs());
        }
    }
    Outcome::new(worst < 1e-4, format!("100 pairs, worst per-channel deviation {worst:.2e} (tol 1e-4)"))
}

// ------------------------------------------------------------------ 3

pub fn exploration_law() -> Outcome {
    let mut r = rng(3);
    let (mut worst0, mut worst3) = (0.0f64, 0.0f64);
    let mut clamped = 0usize;
    for _ in 0..20 {
        let (c, b, n) = (8, 6, 5);
        let base: Vec<Tensor> = (0..b).map(|_| random_feature(c, 6, 6, &mut r)).collect();
        let over: Vec<Tensor> = (0..n).map(|_| base[r.random_range(0..b)].clone()).collect();
        let base_t = Tensor::stack(&base).expect("stack");
        let over_t = Tensor::stack(&over).expect("stack");
        let stats: Vec<(Vec<f64>, Vec<f64>)> = base.iter().map(oracle_stats).collect();
        let ref_mu: Vec<f64> = (0..c).map(|ch| stats.iter().map(|s| s.0[ch]).sum::<f64>() / b as f64).collect();
        let ref_sd: Vec<f64> = (0..c).map(|ch| stats.iter().map(|s| s.1[ch]).sum::<f64>() / b as f64).collect();

        let same = style_explore(&over_t, &base_t, 0.0, ExploreRef::Original).expect("explore");
        let far = style_explore(&over_t, &base_t, 3.0, ExploreRef::Original).expect("explore");
        for i in 0..n {
            let (mu0, sd0) = oracle_stats(&over[i]);
            let (mu_a, sd_a) = oracle_stats(&same.index_row(i));
            let (mu_b, sd_b) = oracle_stats(&far.index_row(i));
            for ch in 0..c {
                worst0 = worst0.max((mu_a[ch] - mu0[ch]).abs()).max((sd_a[ch] - sd0[ch]).abs());
                let mu_off = mu_b[ch] - ref_mu[ch];
                worst3 = worst3.max((mu_off - 4.0 * (mu0[ch] - ref_mu[ch])).abs());
                let sd_expected = ref_sd[ch] + 4.0 * (sd0[ch] - ref_sd[ch]);
                if sd_expected > 0.0 {
                    worst3 = worst3.max((sd_b[ch] - sd_expected).abs());
                } else {
                    clamped += 1;
                    worst3 = worst3.max(sd_b[ch]);
                }
            }
        }
    }
    Outcome::new(
        worst0 < 1e-4 && worst3 < 1e-3,
        format!(
            "α=0 worst change {worst0:.2e} (tol 1e-4); α=3 worst deviation from 4× offset {worst3:.2e} (tol 1e-3, {clamped} σ clamped at 0)"
        ),
    )
}

// ------------------------------------------------------------------ 4

/// Class counts `{a:3, b:2, c:1}` with the expected extra counts per size.
const OVERSAMPLE_CASES: [(usize, [usize; 3]); 3] = [(1, [0, 0, 1]), (3, [0, 1, 2]), (6, [1, 2, 3])];

pub fn oversampling_oracle() -> Outcome {
    let mut mismatches = 0;
    for s in 0..1000u64 {
        let mut r = rng(10_000 + s);
        let mut labels = vec![0, 0, 0, 1, 1, 2];
        labels.shuffle(&mut r);
        for (size, expected) in OVERSAMPLE_CASES {
            let picked = oversample_indices(&labels, size, &mut r);
            let mut got = [0usize; 3];
            for &i in &picked {
                got[labels[i]] += 1;
            }
            if got != expected || picked.len() != size {
                mismatches += 1;
            }
        }
    }
    Outcome::new(mismatches == 0, format!("1000 seeds × sizes 1/3/6, {mismatches} allotment mismatches"))
}

// ------------------------------------------------------------------ 5

fn point(mu: f32, sigma: f32) -> StyleStats {
    StyleStats { mu: vec![mu], sigma: vec![sigma] }
}

pub fn kmeanspp_configurations() -> Vec<Vec<StyleStats>> {
    let mut r = rng(5);
    let mut sets = vec![
        vec![point(0.0, 1.0), point(1.0, 1.0), point(0.0, 2.0), point(1.0, 2.0)],
        vec![point(0.0, 1.0), point(0.1, 1.0), point(0.2, 1.0), point(3.0, 1.0)],
        vec![point(0.0, 0.5), point(1.0, 0.5), point(2.0, 0.5), point(3.0, 0.5)],
        vec![point(0.0, 1.0), point(0.0, 1.0), point(0.5, 1.5), point(2.0, 0.2)],
    ];
    for _ in 0..4 {
        sets.push((0..4).map(|_| point(r.random_range(-1.0..1.0), r.random_range(0.1..2.0))).collect());
    }
    sets
}

/// Exact distribution of the unordered keeper pair for 4 points under D²
/// seeding of 2 centers.
pub fn exact_pair_distribution(points: &[StyleStats]) -> BTreeMap<(usize, usize), f64> {
    let d2 = |a: &StyleStats, b: &StyleStats| -> f64 {
        a.mu.iter()
            .zip(&b.mu)
            .chain(a.sigma.iter().zip(&b.sigma))
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum()
    };
    let n = points.len();
    let mut dist = BTreeMap::new();
    for first in 0..n {
        let weights: Vec<f64> = (0..n).map(|j| if j == first { 0.0 } else { d2(&points[first], &points[j]) }).collect();
        let total: f64 = weights.iter().sum();
        for second in (0..n).filter(|&j| j != first) {
            let p = if total > 0.0 { weights[second] / total } else { 1.0 / (n - 1) as f64 };
            let key = (first.min(second), first.max(second));
            *dist.entry(key).or_insert(0.0) += p / n as f64;
        }
    }
    dist
}

pub fn kmeanspp_seeding() -> Outcome {
    let draws = 10_000;
    let mut worst = 0.0f64;
    let configs = kmeanspp_configurations();
    for (k, points) in configs.iter().enumerate() {
        let exact = exact_pair_distribution(points);
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut r = rng(500 + k as u64);
        for _ in 0..draws {
            let kept = select_keepers_kmeanspp(points, &mut r).expect("keepers");
            assert_eq!(kept.len(), 2);
            *counts.entry((kept[0].min(kept[1]), kept[0].max(kept[1]))).or_insert(0) += 1;
        }
        let keys: BTreeSet<_> = exact.keys().chain(counts.keys()).copied().collect();
        let tv = 0.5
            * keys
                .iter()
                .map(|key| {
                    let e = exact.get(key).copied().unwrap_or(0.0);
                    let o = counts.get(key).copied().unwrap_or(0) as f64 / draws as f64;
                    (e - o).abs()
                })
                .sum::<f64>();
        worst = worst.max(tv);
    }
    Outcome::new(
        worst < 0.02,
        format!("{} configurations × {draws} draws, worst TV distance {worst:.4} (tol 0.02)", configs.len()),
    )
}

// ------------------------------------------------------------------ 6

pub fn attention_algebra() -> Outcome {
    let mut r = rng(6);
    let (mut sum_dev, mut mix_dev) = (0.0f64, 0.0f64);
    let mut positive = true;
    let mut pool_exact = true;
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..=5), r.random_range(1..=5));
        let hw = h * w;
        let s = Tensor::from_fn(&[hw, hw], |_| r.random_range(-4.0..4.0));
        let map = attention_score(&s, h, w).expect("score");
        let total: f64 = map.weights.iter().map(|&v| v as f64).sum();
        sum_dev = sum_dev.max((total - 1.0).abs());
        positive &= map.weights.iter().all(|&v| v > 0.0);

        let (c, d) = (r.random_range(1..=6), r.random_range(1..=6));
        let xi = Tensor::from_fn(&[c, hw], |_| r.random_range(-1.0..1.0));
        let xj = Tensor::from_fn(&[c, hw], |_| r.random_range(-1.0..1.0));
        let tq = Tensor::from_fn(&[d, c], |_| r.random_range(-1.0..1.0));
        let tk = Tensor::from_fn(&[d, c], |_| r.random_range(-1.0..1.0));
        let mixed = mixed_similarity(&xi, &xj, &tq, &tk).expect("mixed");
        let cross = spatial_similarity(&xi, &xj, &tq, &tk).expect("cross");
        let own = spatial_similarity(&xi, &xi, &tq, &tk).expect("self");
        for ((m, a), b) in mixed.data().iter().zip(cross.data()).zip(own.data()) {
            mix_dev = mix_dev.max((*m as f64 - 0.5 * (*a as f64 + *b as f64)).abs());
        }

        let consts: Vec<f32> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
        let z = Tensor::from_fn(&[c, h, w], |i| consts[i / hw]);
        let pooled = fdg_core::attention::attention_pool(&z, &AttentionScore { h, w, weights: map.weights.clone() })
            .expect("pool");
        pool_exact &= pooled == consts;
    }
    Outcome::new(
        sum_dev <= 1e-5 && positive && mix_dev <= 1e-5 && pool_exact,
        format!(
            "map sums within {sum_dev:.1e} of 1 (all positive: {positive}); mixed vs mean of cross/self {mix_dev:.1e}; constant pooling exact: {pool_exact}"
        ),
    )
}

// ------------------------------------------------------------------ 7

fn disjoint_cover(shards: &[Vec<usize>], expected: &BTreeSet<usize>) -> bool {
    let mut seen = BTreeSet::new();
    for s in shards {
        for &i in s {
            if !seen.insert(i) {
                return false;
            }
        }
    }
    &seen == expected && shards.iter().all(|s| !s.is_empty())
}

pub fn protocol_invariants() -> Outcome {
    let corpus_spec = CorpusSpec { per_domain: 60, ..CorpusSpec::default() };
    let domains: Vec<usize> = (0..corpus_spec.num_domains).flat_map(|d| vec![d; corpus_spec.per_domain]).collect();
    let arch = ArchConfig { image_size: 16, stem_channels: 4, block_channels: [4, 4, 6, 6], ..ArchConfig::default() };
    let (mut fixed_points, mut bad_single, mut bad_multi, mut inexact) = (0, 0, 0, 0);
    for round in 0..1000u64 {
        let mut r = rng(70_000 + round);
        let m = r.random_range(2..=12);
        let participants = rand::seq::index::sample(&mut r, 12, m).into_vec();
        let uploaded: Vec<StyleInfo> = participants
            .iter()
            .map(|&id| StyleInfo {
                client_id: id as u32,
                sample_count: 1,
                mu_bar: vec![id as f32],
                sigma_bar: vec![1.0],
                var_mu: vec![0.0],
                var_sigma: vec![0.0],
            })
            .collect();
        let received = style_sharing_round(&uploaded, &mut r);
        let ids: BTreeSet<u32> = received.iter().map(|s| s.client_id).collect();
        fixed_points += participants.iter().zip(&received).filter(|(&p, s)| s.client_id == p as u32).count();
        fixed_points += usize::from(ids.len() != m);

        let target = (round % 4) as usize;
        let sources: Vec<usize> = (0..4).filter(|&d| d != target).collect();
        let expected: BTreeSet<usize> = (0..domains.len()).filter(|&i| domains[i] != target).collect();
        let single = partition_single_domain(&domains, &sources, 12, &mut r).expect("single");
        bad_single += usize::from(
            !disjoint_cover(&single, &expected)
                || single.iter().any(|s| s.iter().any(|&i| domains[i] != domains[s[0]])),
        );
        let beta = [0.1, 0.5, 1.0, 100.0][(round % 4) as usize];
        let multi = partition_multi_domain(&domains, &sources, 12, beta, &mut r).expect("multi");
        bad_multi += usize::from(!disjoint_cover(&multi, &expected));

        let model = ModelParams::init(&arch, &mut r).expect("init");
        let copies = vec![model.clone(); r.random_range(1..=6)];
        let weights: Vec<f64> = copies.iter().map(|_| r.random_range(1.0..100.0f64).floor()).collect();
        let avg = fedavg_aggregate(&copies, &weights).expect("aggregate");
        let same = avg.entries().iter().zip(model.entries()).all(|(a, b)| bits(&a.1) == bits(&b.1))
            && avg.buffers().iter().zip(model.buffers()).all(|(a, b)| bits(&a.1) == bits(&b.1));
        inexact += usize::from(!same);
    }
    Outcome::new(
        fixed_points + bad_single + bad_multi + inexact == 0,
        format!(
            "1000 rounds: {fixed_points} style fixed points, {bad_single} bad single-domain partitions, {bad_multi} bad Dirichlet partitions, {inexact} inexact aggregations"
        ),
    )
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// ------------------------------------------------------------------ 8

pub fn centralized_config() -> (FederationConfig, CorpusSpec) {
    let corpus = CorpusSpec { num_domains: 3, per_domain: 40, ..CorpusSpec::default() };
    let config = FederationConfig {
        num_clients: 1,
        participation: 1,
        rounds: 10,
        local_epochs: 2,
        batch_size: 16,
        mode: Method::FedAvg,
        partition: Partition::MultiDomain,
        target_domain: 2,
        lr_schedule: LrSchedule::Cosine,
        seed: 42,
        eval_every: 100,
        ..FederationConfig::default()
    };
    (config, corpus)
}

/// Plain mini-batch SGD over all source samples, written out step by step.
pub fn standalone_sgd(config: &FederationConfig, corpus: &SyntheticCorpus) -> (ModelParams, Vec<f32>) {
    let samples = make_shards(config, corpus).expect("shards").concat();
    let mut params = fdg_core::federation::init_params(config, corpus.num_classes()).expect("init");
    let mut r = fdg_core::federation::client_rng(config.seed, 0);
    let mut velocity: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut losses = Vec::new();
    let total_epochs = (config.rounds * config.local_epochs) as f64;
    for epoch in 0..config.rounds * config.local_epochs {
        let frac = epoch as f64 / total_epochs;
        let lr = (config.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32;
        let mut order = samples.clone();
        order.shuffle(&mut r);
        for batch in order.chunks(config.batch_size) {
            assert!(batch.len() > 1, "oracle assumes no singleton tail");
            let (images, labels) = corpus.gather(batch);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = forward(
                &mut tape,
                &params,
                &bound,
                x,
                &labels,
                &ForwardPlan::inactive(Mode::Train),
                None,
                &mut r,
            )
            .expect("forward");
            let loss = tape.softmax_cross_entropy(out.logits, &out.labels).expect("loss");
            losses.push(tape.value(loss).item());
            tape.backward(loss).expect("backward");
            let grads = bound.gradients(&tape);
            let mut tensors = params.tensors();
            for ((p, g), v) in tensors.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
                for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vv = config.momentum * *vv + gv + config.weight_decay * *pv;
                    *pv -= lr * *vv;
                }
            }
            params = params.with_tensors(tensors).expect("layout");
            params.update_running_stats(&tape, &out);
        }
    }
    (params, losses)
}

pub fn centralized_equivalence() -> Outcome {
    let (config, spec) = centralized_config();
    let corpus = generate_corpus(&spec).expect("corpus");
    let outcome = run_federation(&config, &corpus).expect("federation");
    let (oracle, oracle_losses) = standalone_sgd(&config, &corpus);
    let fed_losses: Vec<f32> = outcome
        .logs
        .iter()
        .flat_map(|l| l.client_losses.iter().flat_map(|c| c.losses.iter().copied()))
        .collect();
    let steps = oracle_losses.len();
    let losses_match = fed_losses.iter().map(|v| v.to_bits()).eq(oracle_losses.iter().map(|v| v.to_bits()));
    let params_match = outcome.params.entries().iter().zip(oracle.entries()).all(|(a, b)| bits(&a.1) == bits(&b.1));
    let buffers_match = outcome.params.buffers().iter().zip(oracle.buffers()).all(|(a, b)| bits(&a.1) == bits(&b.1));
    Outcome::new(
        steps == 100 && losses_match && params_match && buffers_match,
        format!(
            "{steps} steps; losses bit-identical: {losses_match}; parameters: {params_match}; running statistics: {buffers_match}"
        ),
    )
}

// ------------------------------------------------------------------ 9

pub struct EndToEnd {
    pub outcome: Outcome,
    pub result: ExperimentResult,
    pub means: Vec<(Method, f64)>,
}

pub fn end_to_end_config() -> ExperimentConfig {
    ExperimentConfig {
        modes: Method::ALL.to_vec(),
        seeds: vec![0, 1, 2],
        targets: Vec::new(),
        ..ExperimentConfig::default()
    }
}

pub fn end_to_end(out_dir: Option<&Path>) -> EndToEnd {
    let config = end_to_end_config();
    let started = Instant::now();
    let corpus = generate_corpus(&config.corpus).expect("corpus");
    let result = run_experiment_on(&config, &corpus, out_dir).expect("experiment");
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let means: Vec<(Method, f64)> = result.summarize().iter().map(|s| (s.mode, s.mean)).collect();
    let mean_of = |m: Method| means.iter().find(|(k, _)| *k == m).map(|p| p.1).expect("mode run");
    let fedavg = mean_of(Method::FedAvg);
    let full = mean_of(Method::StableFdg);
    let style = mean_of(Method::StyleOnly);
    let attention = mean_of(Method::AttentionOnly);
    let passed = full >= fedavg + 0.03 && style >= fedavg && attention >= fedavg && minutes < 30.0;
    let detail = format!(
        "mean target accuracy fedavg {:.1}, style_only {:.1}, attention_only {:.1}, stablefdg {:.1} (gain {:+.1} pp, need ≥ +3.0); {:.1} min",
        100.0 * fedavg,
        100.0 * style,
        100.0 * attention,
        100.0 * full,
        100.0 * (full - fedavg),
        minutes
    );
    EndToEnd { outcome: Outcome::new(passed, detail), result, means }
}

// ------------------------------------------------------------------ 10

pub fn target_isolation() -> Outcome {
    let corpus = generate_corpus(&CorpusSpec::default()).expect("corpus");
    let mut hits = 0;
    let mut audited = 0;
    let mut runs = 0;
    for target in 0..corpus.num_domains() {
        // one full-length run; short runs cover the other held-out domains
        let rounds = if target == 0 { 30 } else { 3 };
        let config = FederationConfig { target_domain: target, rounds, mode: Method::StableFdg, ..FederationConfig::default() };
        let outcome = run_federation(&config, &corpus).expect("federation");
        hits += outcome.audit.hits(&corpus.domains, target).len();
        hits += outcome.shards.iter().flatten().filter(|&&i| corpus.domains[i] == target).count();
        audited += outcome.audit.gradient.len() + outcome.audit.style.len();
        runs += 1;
    }
    Outcome::new(
        hits == 0 && audited > 0,
        format!("{runs} runs, {audited} audited sample uses, {hits} held-out indices found"),
    )
}

/// Seeds for deterministic helpers that need a stream outside this module.
pub fn stream(seed_value: u64) -> ChaCha8Rng {
    seed::stream(seed_value, &[0xacc])
}
