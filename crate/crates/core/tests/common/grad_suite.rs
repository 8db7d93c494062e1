//! Finite-difference checks of every differentiable op and of the composed
//! training forward with all hooks active.

use fdg_core::autodiff::Tape;
use fdg_core::model::{forward, ArchConfig, ForwardPlan, Mode, ModelParams, StyleContext};
use fdg_core::style::{self, ExplorationParams, ExploreRef, MixPlan, ShiftTargets, StyleInfo};
use fdg_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fd::{away_from_zero, check_op, numeric, random_tensor, rel_err, FdReport};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One report per op family; together they cover well over 200 coordinates.
pub fn op_reports() -> Vec<FdReport> {
    let mut r = rng(11);
    let mut out = Vec::new();
    let x = random_tensor(&[2, 3, 6, 6], -1.0, 1.0, &mut r);
    let w = random_tensor(&[4, 3, 3, 3], -0.5, 0.5, &mut r);
    let bias = random_tensor(&[4], -0.5, 0.5, &mut r);
    out.push(check_op("conv2d 3x3 s1 p1", &[x.clone(), w.clone(), bias.clone()], 12, 1, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    }));
    let w4 = random_tensor(&[4, 3, 4, 4], -0.5, 0.5, &mut r);
    out.push(check_op("conv2d 4x4 s2 p1", &[x.clone(), w4], 12, 2, |t, v| t.conv2d(v[0], v[1], None, 2, 1)));

    let xa = away_from_zero(&[2, 3, 4, 4], 0.05, 1.0, &mut r);
    out.push(check_op("relu", std::slice::from_ref(&xa), 12, 3, |t, v| Ok(t.relu(v[0]))));
    out.push(check_op("leaky_relu", std::slice::from_ref(&xa), 12, 4, |t, v| Ok(t.leaky_relu(v[0], 0.01))));

    let gamma = random_tensor(&[3], 0.5, 1.5, &mut r);
    let beta = random_tensor(&[3], -0.5, 0.5, &mut r);
    out.push(check_op("layer_norm", &[x.clone(), gamma.clone(), beta.clone()], 12, 5, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    }));
    out.push(check_op("batch_norm batch moments", &[x.clone(), gamma.clone(), beta.clone()], 12, 6, |t, v| {
        t.batch_norm(v[0], v[1], v[2], 1e-5, None)
    }));
    let (rm, rv) = (vec![0.1f32, -0.2, 0.05], vec![0.8f32, 1.3, 0.6]);
    out.push(check_op("batch_norm running stats", &[x.clone(), gamma, beta], 12, 7, |t, v| {
        t.batch_norm(v[0], v[1], v[2], 1e-5, Some((&rm, &rv)))
    }));
    out.push(check_op("global_avg_pool", std::slice::from_ref(&x), 12, 8, |t, v| t.global_avg_pool(v[0])));

    let m = random_tensor(&[3, 5], -1.0, 1.0, &mut r);
    let lw = random_tensor(&[4, 5], -1.0, 1.0, &mut r);
    let lb = random_tensor(&[4], -1.0, 1.0, &mut r);
    out.push(check_op("linear", &[m.clone(), lw, lb], 10, 9, |t, v| t.linear(v[0], v[1], v[2])));
    let logits = random_tensor(&[4, 5], -2.0, 2.0, &mut r);
    out.push(check_op("softmax_cross_entropy", std::slice::from_ref(&logits), 20, 10, |t, v| {
        t.softmax_cross_entropy(v[0], &[0, 3, 1, 3])
    }));
    out.push(check_op("softmax_rows", std::slice::from_ref(&logits), 20, 11, |t, v| t.softmax_rows(v[0])));

    let a = random_tensor(&[3, 5], -1.0, 1.0, &mut r);
    out.push(check_op("add/sub/mul/scale", &[m.clone(), a.clone()], 8, 12, |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        let p = t.mul(s, d)?;
        Ok(t.scale(p, 1.7))
    }));
    out.push(check_op("sum/reshape", std::slice::from_ref(&m), 8, 13, |t, v| {
        let r = t.reshape(v[0], &[5, 3])?;
        let sq = t.mul(r, r)?;
        Ok(t.sum(sq))
    }));
    out.push(check_op("gather/concat rows", &[m.clone(), a.clone()], 8, 14, |t, v| {
        let g = t.gather_rows(v[0], &[2, 0, 2])?;
        t.concat_rows(&[g, v[1]])
    }));
    out.push(check_op("concat_cols/mean_rows", &[m.clone(), a], 8, 15, |t, v| {
        let c = t.concat_cols(v[0], v[1])?;
        let sq = t.mul(c, c)?;
        t.mean_rows(sq)
    }));
    out.push(check_op("channel_mean/channel_std", std::slice::from_ref(&x), 12, 16, |t, v| {
        let mu = t.channel_mean(v[0])?;
        let sd = t.channel_std(v[0])?;
        t.concat_cols(mu, sd)
    }));

    let tm = random_tensor(&[2, 3], -0.5, 0.5, &mut r);
    let ts = random_tensor(&[2, 3], 0.3, 1.2, &mut r);
    out.push(check_op("adain (statistics of the input)", &[x.clone(), tm.clone(), ts.clone()], 12, 17, |t, v| {
        style::adain_to(t, v[0], v[1], v[2], style::EPS_STAB)
    }));
    out.push(check_op("adain (explicit statistics)", &[x.clone(), tm.clone(), ts.clone(), tm, ts], 6, 18, |t, v| {
        t.adain(v[0], v[1], v[2], v[3], v[4], style::EPS_STAB)
    }));

    let q = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
    let k = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
    out.push(check_op("similarity_scores", &[q, k], 12, 19, |t, v| t.similarity_scores(v[0], v[1])));
    let z = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
    let wts = random_tensor(&[2, 9], 0.0, 1.0, &mut r);
    out.push(check_op("attention_pool", &[z.clone(), wts], 12, 20, |t, v| t.attention_pool(v[0], v[1])));
    let tq = random_tensor(&[4, 3], -0.8, 0.8, &mut r);
    let tk = random_tensor(&[4, 3], -0.8, 0.8, &mut r);
    out.push(check_op("highlighter (mixed query)", &[z.clone(), tq.clone(), tk.clone()], 10, 21, |t, v| {
        let (pooled, _) = fdg_core::attention::highlight(t, v[0], v[1], v[2], Some(&[1, 0]))?;
        Ok(pooled)
    }));
    out.push(check_op("highlighter (self)", &[z, tq, tk], 10, 22, |t, v| {
        let (pooled, _) = fdg_core::attention::highlight(t, v[0], v[1], v[2], None)?;
        Ok(pooled)
    }));

    let targets = ShiftTargets {
        mean: random_tensor(&[1, 3], -0.5, 0.5, &mut r),
        std: random_tensor(&[1, 3], 0.3, 1.2, &mut r),
    };
    out.push(check_op("style shift rows", std::slice::from_ref(&x), 16, 23, |t, v| {
        style::shift_rows(t, v[0], &[1], &targets, style::EPS_STAB)
    }));
    // rows 2.. are the oversampled tail; the base rows set the reference
    let xe = random_tensor(&[4, 3, 4, 4], -1.0, 1.0, &mut r);
    out.push(check_op("style exploration α=3", std::slice::from_ref(&xe), 16, 24, |t, v| {
        style::explore_tail(t, v[0], 2, 3.0, ExploreRef::Original, style::EPS_STAB)
    }));
    let plan = MixPlan { partner: vec![2, 3, 0, 1], lambda: vec![0.3, 0.9, 0.05, 0.6] };
    out.push(check_op("mixstyle (λ pinned)", &[xe], 16, 25, |t, v| style::mix_rows(t, v[0], &plan, style::EPS_STAB)));
    out
}

/// Parameters and inputs for the composed check.
pub struct Composed {
    pub params: ModelParams,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ctx: StyleContext,
    pub plan: ForwardPlan,
    pub draw_seed: u64,
}

pub fn composed_setup() -> Composed {
    let mut r = rng(31);
    // Leaky slope 1 removes the activation kinks: with slope 0.01 some of
    // the thousands of pre-activations cross zero inside the difference
    // stencil and the quotient no longer measures the derivative. The
    // activation itself is checked on its own, away from zero.
    let arch = ArchConfig {
        image_size: 16,
        stem_channels: 4,
        block_channels: [4, 4, 6, 6],
        num_classes: 3,
        attention_dim: Some(5),
        leaky_slope: 1.0,
        ..ArchConfig::default()
    };
    let params = ModelParams::init(&arch, &mut r).expect("init");
    let images = random_tensor(&[6, 3, arch.image_size, arch.image_size], 0.0, 1.0, &mut r);
    let labels = vec![0, 1, 0, 2, 1, 2];
    let c = arch.style_channels();
    let received = StyleInfo {
        client_id: 1,
        sample_count: 10,
        mu_bar: random_tensor(&[c], 0.2, 0.6, &mut r).into_data(),
        sigma_bar: random_tensor(&[c], 0.5, 1.0, &mut r).into_data(),
        var_mu: random_tensor(&[c], 0.0, 0.05, &mut r).into_data(),
        var_sigma: random_tensor(&[c], 0.0, 0.05, &mut r).into_data(),
    };
    let ctx = StyleContext {
        received: Some(received),
        exploration: ExplorationParams { oversample_size: 6, ..ExplorationParams::default() },
        eps_stab: style::EPS_STAB,
    };
    let plan = ForwardPlan {
        share_shift_active: true,
        explore_active: [true; 3],
        mix_active: true,
        mode: Mode::Train,
    };
    Composed { params, images, labels, ctx, plan, draw_seed: 7 }
}

/// Logits contracted with a fixed projection, in f64, plus the analytic
/// gradient of every parameter tensor. All random draws (keepers, ε, λ,
/// oversampling, pairing) come from the same seeded stream on every call.
fn composed_eval(c: &Composed, params: &ModelParams, proj: &Tensor) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(c.images.clone());
    let mut draws = rng(c.draw_seed);
    let out = forward(&mut tape, params, &bound, x, &c.labels, &c.plan, Some(&c.ctx), &mut draws).expect("forward");
    let logits = tape.value(out.logits).clone();
    assert_eq!(logits.shape(), proj.shape());
    let pv = tape.constant(proj.clone());
    let prod = tape.mul(out.logits, pv).expect("mul");
    let loss = tape.sum(prod);
    tape.backward(loss).expect("backward");
    let value = logits.data().iter().zip(proj.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
    (value, bound.gradients(&tape))
}

pub fn composed_report(per_tensor: usize) -> FdReport {
    let c = composed_setup();
    let rows = c.labels.len() + c.ctx.exploration.oversample_size;
    let mut r = rng(41);
    let proj = random_tensor(&[rows, c.params.arch().num_classes], -1.0, 1.0, &mut r);
    let (_, grads) = composed_eval(&c, &c.params, &proj);
    let base = c.params.tensors();
    let f = |ts: &[Tensor]| composed_eval(&c, &c.params.with_tensors(ts.to_vec()).expect("layout"), &proj).0;
    let mut parts = Vec::new();
    for (k, (name, t)) in c.params.entries().iter().enumerate() {
        let mut report = FdReport { name: name.clone(), coords: 0, worst: 0.0, worst_at: String::new() };
        let step = (t.numel() / per_tensor).max(1);
        for i in (0..t.numel()).step_by(step).take(per_tensor) {
            let n = numeric(&base, k, i, &f);
            let a = grads[k].data()[i] as f64;
            let e = rel_err(a, n);
            report.coords += 1;
            if e >= report.worst {
                report.worst = e;
                report.worst_at = format!("[{i}] analytic {a:.6e} numeric {n:.6e}");
            }
        }
        parts.push(report);
    }
    FdReport::merge("composed stablefdg forward", &parts)
}
