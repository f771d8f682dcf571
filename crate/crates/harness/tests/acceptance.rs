//! Acceptance run: one pass/fail line per criterion.
//!
//! Criterion 5 trains all three schemes at the default desk-scale size and
//! runs the SNR, path-loss and pilot sweeps, which takes several minutes on
//! one core. Artifacts land in `$CARGO_TARGET_TMPDIR/acceptance`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use v2v_core::channel::{
    apply_flat, draw_flat_channel, draw_multipath_channel, mean_power, ofdm_transmit, zf_detect, CsiEstimate,
    FlatChannelConfig, MultipathChannelConfig, NoiseReference, C64,
};
use v2v_core::perception::{
    box_residuals, detection_loss, fuse_attentive, Anchor, Box3, Group, Label, PerceptionModel, Targets,
};
use v2v_core::transport::{transmit, Link};
use v2v_core::weighting::{
    make_augmentations, self_supervised_loss, AugmentationPair, SelfSupervisedBatch, SelfSupervisedParams,
    WeightingNet,
};
use v2v_harness::config::RunConfig;
use v2v_harness::evaluate::ChannelPoint;
use v2v_harness::metrics::{write_metrics, FusionMode, MetricsRecord};
use v2v_harness::pipeline::{self, Scheme};
use v2v_harness::sweep::{evaluate_points, find, Axis, Models};
use v2v_harness::seeds;
use v2v_nn::functional::{focal_loss, kl_divergence, smooth_l1};
use v2v_nn::gradcheck::{check_gradients, GradCheckConfig};
use v2v_nn::{BatchNorm, Conv2d, Graph, Linear, LossParams, Mode, ParamStore, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn random_dist(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3 {
    Box3 {
        x: rng.gen_range(-30.0..30.0),
        y: rng.gen_range(-30.0..30.0),
        z: rng.gen_range(0.0..2.0),
        w: rng.gen_range(0.5..3.0),
        l: rng.gen_range(1.0..6.0),
        h: rng.gen_range(0.5..2.5),
        theta: rng.gen_range(-1.5..1.5),
    }
}

fn softmax_t(v: &[f64], t: f64) -> Vec<f64> {
    let m = v.iter().map(|x| x / t).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x / t - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn kl_loop(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            total += p[i] * (p[i].ln() - q[i].ln());
        }
    }
    total
}

fn formula_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let fixtures = 100;
    let mut worst = [0.0f64; 5];

    for _ in 0..fixtures {
        let x: f64 = rng.gen_range(-4.0..4.0);
        // Huber form with unit threshold
        let m = x.abs().min(1.0);
        let want = m * (x.abs() - 0.5 * m);
        worst[0] = worst[0].max((smooth_l1(x) - want).abs());
    }

    for _ in 0..fixtures {
        let p = LossParams {
            alpha: rng.gen_range(0.05..0.95),
            gamma: rng.gen_range(0.0..4.0),
            ..LossParams::default()
        };
        let q: f64 = rng.gen_range(0.001..0.999);
        let want = -p.alpha * (p.gamma * (1.0 - q).ln()).exp() * q.ln();
        worst[1] = worst[1].max((focal_loss(q, &p) - want).abs());
    }

    for _ in 0..fixtures {
        let n = rng.gen_range(2..40);
        let p = random_dist(n, &mut rng);
        let q = random_dist(n, &mut rng);
        worst[2] = worst[2].max((kl_divergence(&p, &q).unwrap() - kl_loop(&p, &q)).abs());
    }

    for _ in 0..fixtures {
        let gt = random_box(&mut rng);
        let a = random_box(&mut rng);
        let got = box_residuals(&gt, &Anchor::new(a).unwrap()).unwrap();
        let d = (a.w * a.w + a.l * a.l).sqrt();
        let want = [
            (gt.x - a.x) / d,
            (gt.y - a.y) / d,
            (gt.z - a.z) / a.h,
            gt.w.ln() - a.w.ln(),
            gt.l.ln() - a.l.ln(),
            gt.h.ln() - a.h.ln(),
            gt.theta.sin() * a.theta.cos() - gt.theta.cos() * a.theta.sin(),
        ];
        for k in 0..7 {
            worst[3] = worst[3].max((got[k] - want[k]).abs());
        }
    }

    let net = WeightingNet::new(17).unwrap();
    for _ in 0..fixtures {
        let params = SelfSupervisedParams {
            lambda_pos: rng.gen_range(0.0..2.0),
            lambda_neg: rng.gen_range(0.0..2.0),
            temperature: rng.gen_range(0.5..30.0),
            ..SelfSupervisedParams::default()
        };
        let k = rng.gen_range(1..4);
        let feature = |rng: &mut ChaCha8Rng| Tensor::randn(&[8, 16, 16], 1.0, rng).map(|v| v.max(0.0));
        let ego = feature(&mut rng);
        let pairs: Vec<AugmentationPair> = (0..k)
            .map(|_| make_augmentations(&feature(&mut rng), &params, &mut rng).unwrap())
            .collect();
        let batch = SelfSupervisedBatch::from_scenes(&[(ego.clone(), pairs.clone())]).unwrap();
        let mut g = Graph::new();
        let out = self_supervised_loss(&mut g, &net.layers, &net.store, &batch, &params, Mode::Eval).unwrap();
        let got = g.value(out.loss).data()[0];
        let t = params.temperature;
        let mut want = 0.0;
        for pair in &pairs {
            let q = softmax_t(pair.clean.data(), t);
            let wp = net.weight(&ego, &pair.positive).unwrap();
            let wn = net.weight(&ego, &pair.negative).unwrap();
            let sp: Vec<f64> = pair.positive.data().iter().map(|v| wp * v).collect();
            let sn: Vec<f64> = pair.negative.data().iter().map(|v| wn * v).collect();
            want += params.lambda_pos * kl_loop(&softmax_t(&sp, t), &q);
            want += params.lambda_neg * kl_loop(&softmax_t(&sn, t), &q);
        }
        want *= t * t / k as f64;
        worst[4] = worst[4].max((got - want).abs());
    }

    let names = ["smooth_l1", "focal_loss", "kl_divergence", "box_residuals", "self_supervised_loss"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(worst.iter().all(|w| *w < 1e-6), format!("max abs error over {fixtures} fixtures each: {detail}"))
}

// ---------------------------------------------------------------- 2

const GRAD_TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn project(g: &mut Graph, y: Var, seed: u64) -> v2v_nn::Result<Var> {
    let w = Tensor::randn(g.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n = w.numel();
    let flat = g.reshape(y, &[1, n])?;
    let wv = g.input(w.reshape(&[1, n])?);
    let b = g.input(Tensor::zeros(&[1]));
    let out = g.linear(flat, wv, b)?;
    Ok(g.sum(out))
}

struct GradTally {
    worst: f64,
    worst_name: String,
    failures: Vec<String>,
}

impl GradTally {
    fn record<F>(&mut self, name: &str, seed: u64, store: &mut ParamStore, coords: usize, f: F)
    where
        F: Fn(&mut Graph, &ParamStore) -> v2v_nn::Result<Var>,
    {
        let cfg = GradCheckConfig {
            seed,
            max_coords_per_param: coords,
            ..GradCheckConfig::default()
        };
        match check_gradients(store, &cfg, f) {
            Ok(rep) => {
                if rep.max_rel_error > self.worst {
                    self.worst = rep.max_rel_error;
                    self.worst_name = name.to_string();
                }
                if !rep.passes(GRAD_TOL) {
                    self.failures.push(format!("{name}/seed {seed}: {:.2e}", rep.max_rel_error));
                }
            }
            Err(e) => self.failures.push(format!("{name}/seed {seed}: {e}")),
        }
    }
}

fn gradient_suite() -> Outcome {
    let mut t = GradTally {
        worst: 0.0,
        worst_name: String::new(),
        failures: Vec::new(),
    };
    for seed in 0..SEEDS {
        let mut r = ChaCha8Rng::seed_from_u64(seed);

        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r)).unwrap();
        let conv = Conv2d::new(&mut s, "c", 2, 3, 3, 1 + seed as usize % 2, 1, &mut r).unwrap();
        t.record("conv2d", seed, &mut s, 64, |g, st| {
            let xv = g.param(st, x);
            let y = conv.forward(g, st, xv)?;
            project(g, y, seed)
        });

        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&[3, 2, 3, 3], 1.5, &mut r)).unwrap();
        let bn = BatchNorm::new(&mut s, "bn", 2).unwrap();
        *s.value_mut(bn.gamma) = Tensor::randn(&[2], 1.0, &mut r);
        *s.value_mut(bn.beta) = Tensor::randn(&[2], 1.0, &mut r);
        for mode in [Mode::Train, Mode::Eval] {
            t.record("batchnorm", seed, &mut s, 64, |g, st| {
                let xv = g.param(st, x);
                let y = bn.forward(g, st, xv, mode)?;
                project(g, y, seed)
            });
        }

        let mut s = ParamStore::new();
        let away = Tensor::randn(&[4, 5], 1.0, &mut r).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
        let x = s.add("x", away).unwrap();
        t.record("relu", seed, &mut s, 64, |g, st| {
            let xv = g.param(st, x);
            let y = g.relu(xv);
            project(g, y, seed)
        });

        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&[3, 6], 1.0, &mut r)).unwrap();
        let lin = Linear::new(&mut s, "fc", 6, 5, &mut r).unwrap();
        let q = {
            let mut d = Vec::new();
            for _ in 0..3 {
                d.extend(random_dist(5, &mut r));
            }
            Tensor::new(&[3, 5], d).unwrap()
        };
        t.record("linear+softmax+kl", seed, &mut s, 64, |g, st| {
            let xv = g.param(st, x);
            let y = lin.forward(g, st, xv)?;
            let p = g.softmax(y);
            g.kl_div(p, &q)
        });
        t.record("linear+softmax+row kl", seed, &mut s, 64, |g, st| {
            let xv = g.param(st, x);
            let y = lin.forward(g, st, xv)?;
            let p = g.softmax(y);
            let kl = g.kl_div_rows(p, &q)?;
            project(g, kl, seed)
        });

        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r)).unwrap();
        let b = s.add("b", Tensor::randn(&[3, 1, 2, 2], 1.0, &mut r)).unwrap();
        let w = s.add("w", Tensor::randn(&[3], 1.0, &mut r)).unwrap();
        let m = s.add("m", Tensor::randn(&[4, 3], 1.0, &mut r)).unwrap();
        let offset = Tensor::randn(&[3, 3, 2, 2], 1.0, &mut r);
        t.record("structural", seed, &mut s, 64, |g, st| {
            let av = g.param(st, a);
            let bv = g.param(st, b);
            let wv = g.param(st, w);
            let cat = g.concat(av, bv)?;
            let shifted = g.add_const(cat, &offset)?;
            let scaled = g.scale_rows(wv, shifted)?;
            let gathered = g.gather_rows(scaled, &[2, 0, 2])?;
            let sc = g.scale(gathered, 0.7);
            let flat = g.flatten(sc)?;
            let sum_a = project(g, flat, seed)?;
            let mv = g.param(st, m);
            let col = g.column(mv, 1)?;
            let mean = g.mean(col);
            let both = g.add(sum_a, mean)?;
            let prod = g.scale_rows(mean, both)?;
            g.add(prod, sum_a)
        });

        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&[5, 3, 2, 2], 1.0, &mut r)).unwrap();
        let groups = Group::consecutive(&[2, 3]);
        t.record("attention fusion", seed, &mut s, 64, |g, st| {
            let xv = g.param(st, x);
            let y = fuse_attentive(g, xv, &groups).unwrap();
            project(g, y, seed)
        });

        let mut s = ParamStore::new();
        let h = s.add("head", Tensor::randn(&[2, 8, 2, 3], 1.0, &mut r)).unwrap();
        let targets: Vec<Targets> = (0..2)
            .map(|_| Targets {
                labels: (0..6)
                    .map(|_| [Label::Positive, Label::Negative, Label::Ignore][r.gen_range(0..3)])
                    .collect(),
                residuals: (0..6).map(|_| std::array::from_fn(|_| r.gen_range(-1.5..1.5))).collect(),
            })
            .collect();
        let lp = LossParams::default();
        t.record("detection loss", seed, &mut s, 64, |g, st| {
            let hv = g.param(st, h);
            Ok(detection_loss(g, hv, &targets, &lp).unwrap())
        });

        let mut model = PerceptionModel::new(seed).unwrap();
        let raster = Tensor::uniform(&[2, 1, 64, 64], 0.0, 1.0, &mut r);
        let layers = model.layers.clone();
        t.record("encoder", seed, &mut model.store, 16, |g, st| {
            let x = g.input(raster.clone());
            let f = layers.encode(g, st, x, Mode::Train).unwrap();
            project(g, f, seed)
        });

        let mut net = WeightingNet::new(seed).unwrap();
        let ego = Tensor::randn(&[3, 8, 16, 16], 1.0, &mut r).map(|v| v.max(0.0));
        let recv = Tensor::randn(&[3, 8, 16, 16], 1.0, &mut r).map(|v| v.max(0.0));
        let wl = net.layers.clone();
        t.record("weighting net", seed, &mut net.store, 16, |g, st| {
            let e = g.input(ego.clone());
            let rv = g.input(recv.clone());
            let w = wl.weight_forward(g, st, e, rv, Mode::Train).unwrap();
            project(g, w, seed)
        });
    }
    let detail = if t.failures.is_empty() {
        format!("{SEEDS} seeds per op, worst relative error {:.2e} ({})", t.worst, t.worst_name)
    } else {
        format!("failures: {}", t.failures.join("; "))
    };
    outcome(t.failures.is_empty(), detail)
}

// ---------------------------------------------------------------- 3, 4

fn qpsk(count: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    (0..count)
        .map(|_| C64::from_polar(1.0, std::f64::consts::FRAC_PI_4 * (2 * rng.gen_range(0..4) + 1) as f64))
        .collect()
}

fn channel_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let links = [
        ("flat", Link::Flat(FlatChannelConfig::rician(1.0, f64::INFINITY))),
        (
            "ofdm",
            Link::Multipath(MultipathChannelConfig {
                perfect_csi: true,
                ..MultipathChannelConfig::with_pilots(16, f64::INFINITY)
            }),
        ),
    ];
    let mut round_trip = [0.0f64; 2];
    for (i, (_, link)) in links.iter().enumerate() {
        for _ in 0..50 {
            let f = Tensor::randn(&[8, 16, 16], 1.0, &mut rng).map(|v| v.max(0.0));
            let out = transmit(1, &f, link, &mut rng).unwrap().feature;
            for (a, b) in out.data().iter().zip(f.data()) {
                round_trip[i] = round_trip[i].max((a - b).abs());
            }
        }
    }
    let cfg = MultipathChannelConfig::with_pilots(16, f64::INFINITY);
    let mut ofdm_worst: f64 = 0.0;
    for _ in 0..100 {
        let ch = draw_multipath_channel(&cfg, &mut rng);
        let x = qpsk(64 * 8, &mut rng);
        let rx = ofdm_transmit(&x, &ch, &cfg, &mut rng).unwrap();
        let y: Vec<C64> = rx.frames.iter().flat_map(|f| f.rx_data.iter().copied()).collect();
        for (i, (yv, xv)) in y.iter().zip(&x).enumerate() {
            ofdm_worst = ofdm_worst.max((yv - ch.response[i % 64] * xv).norm());
        }
    }
    outcome(
        round_trip.iter().all(|w| *w < 1e-6) && ofdm_worst < 1e-6,
        format!(
            "round trip flat {:.1e}, ofdm {:.1e}; max|Y-HX| {:.1e} (CP {})",
            round_trip[0], round_trip[1], ofdm_worst, cfg.cyclic_prefix
        ),
    )
}

fn ls_mse(pilots: usize, rng: &mut ChaCha8Rng) -> f64 {
    let cfg = MultipathChannelConfig::with_pilots(pilots, 10.0);
    let frames = 1000;
    let mut total = 0.0;
    for _ in 0..frames {
        let ch = draw_multipath_channel(&cfg, rng);
        let x = qpsk(64, rng);
        let rx = ofdm_transmit(&x, &ch, &cfg, rng).unwrap();
        let est = &rx.equalize().unwrap().estimates[0];
        let err: Vec<C64> = est.values.iter().zip(&ch.response).map(|(a, b)| a - b).collect();
        total += mean_power(&err);
    }
    total / frames as f64
}

fn channel_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = FlatChannelConfig::rician(1.0, 10.0);
    let power = (0..100_000).map(|_| draw_flat_channel(&cfg, &mut rng).h.norm_sqr()).sum::<f64>() / 1e5;

    // ZF error against sigma^2 / |gain h|^2 on fixed realizations
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..40 {
        let link = FlatChannelConfig {
            p0: rng.gen_range(0.5..2.0),
            distance: rng.gen_range(1.0..20.0),
            path_loss_exponent: rng.gen_range(0.0..2.0),
            ..FlatChannelConfig::rician(1.0, rng.gen_range(-5.0..20.0))
        };
        let ch = draw_flat_channel(&link, &mut rng);
        let x = qpsk(50_000, &mut rng);
        let rx = apply_flat(&x, &ch, link.snr_db, NoiseReference::RealizedLink, &mut rng).unwrap();
        let out = zf_detect(&rx.y, &CsiEstimate::perfect(vec![ch.h]), ch.gain).unwrap();
        let err: Vec<C64> = out.symbols.iter().zip(&x).map(|(a, b)| a - b).collect();
        let want = rx.noise_var / (ch.gain * ch.gain * ch.h.norm_sqr());
        worst_ratio = worst_ratio.max((mean_power(&err) / want - 1.0).abs());
    }

    let dense = ls_mse(64, &mut rng);
    let sparse = ls_mse(16, &mut rng);
    outcome(
        (power - 1.0).abs() < 0.02 && worst_ratio < 0.05 && dense < sparse,
        format!(
            "E|h|^2 {power:.4}; ZF error vs sigma^2/|gain h|^2 worst deviation {:.2}%; LS MSE 64 pilots {dense:.2e} < 16 pilots {sparse:.2e}",
            100.0 * worst_ratio
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

struct FullRun {
    records: Vec<MetricsRecord>,
    backbone_checksum_before: u64,
    backbone_checksum_after: u64,
    checkpoint_checksum: u64,
    extra: Vec<(String, bool)>,
}

fn full_run(dir: &Path) -> FullRun {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.to_path_buf();
    let t0 = Instant::now();
    let train = pipeline::training_scenes(&cfg).unwrap();
    let test = pipeline::test_scenes(&cfg).unwrap();
    let (s1, log1) = pipeline::run_scheme1(&cfg, &train).unwrap();
    pipeline::save_backbone(dir, Scheme::Ideal, &s1, &log1).unwrap();
    let (s2, log2) = pipeline::run_scheme2(&cfg, &train).unwrap();
    pipeline::save_backbone(dir, Scheme::Distorted, &s2, &log2).unwrap();
    eprintln!("  backbones trained in {:.0}s", t0.elapsed().as_secs_f64());

    let frozen = pipeline::load_backbone(&Scheme::Distorted.checkpoint(dir)).unwrap();
    let before = frozen.store.checksum();
    let (net, wlog) = pipeline::run_scheme3(&cfg, &frozen, &train).unwrap();
    let after = frozen.store.checksum();
    pipeline::save_weighting(dir, &net, &wlog).unwrap();
    let checkpoint_checksum = pipeline::load_backbone(&Scheme::Distorted.checkpoint(dir)).unwrap().store.checksum();
    eprintln!("  weighting trained at {:.0}s", t0.elapsed().as_secs_f64());

    let models = Models {
        scheme1: Some(&s1),
        scheme2: Some(&frozen),
        weighting: Some(&net),
    };
    let anchors = pipeline::anchors(&cfg);
    let seed = seeds::derive(cfg.seed, "eval", 0);
    let modes = [FusionMode::EgoOnly, FusionMode::Unweighted, FusionMode::Weighted];
    let mut points = vec![ChannelPoint::Ideal];
    for axis in [Axis::Snr, Axis::PathLoss, Axis::Pilots] {
        points.extend(axis.points(&cfg.evaluation));
    }
    let records = evaluate_points(&models, &points, &modes, &test, &anchors, &cfg.evaluation, seed).unwrap();
    write_metrics(std::fs::File::create(dir.join("metrics.csv")).unwrap(), &records).unwrap();
    eprintln!("  sweeps done at {:.0}s", t0.elapsed().as_secs_f64());

    // run-level checks beyond the numbered criteria
    let untrained = PerceptionModel::new(999).unwrap();
    let untrained_models = Models {
        scheme1: Some(&untrained),
        ..Models::default()
    };
    let ideal = ChannelPoint::Ideal;
    let untrained_ap = evaluate_points(&untrained_models, &[ideal], &[FusionMode::Unweighted], &test, &anchors, &cfg.evaluation, seed)
        .unwrap()[0]
        .ap_03;
    let ap = |scheme: u8, mode: FusionMode, p: &ChannelPoint| find(&records, scheme, mode, p).unwrap().ap_03;
    let flat = |snr_db: f64| ChannelPoint::FlatSnr { snr_db };
    let mut extra = Vec::new();
    let s1_ideal = ap(1, FusionMode::Unweighted, &ideal);
    extra.push((format!("trained scheme 1 beats untrained at the ideal point: {s1_ideal:.3} vs {untrained_ap:.3}"), s1_ideal > untrained_ap));
    let s1_ego = ap(1, FusionMode::EgoOnly, &ideal);
    extra.push((format!("ideal cooperative >= ego-only (scheme 1): {s1_ideal:.3} vs {s1_ego:.3}"), s1_ideal >= s1_ego));
    let (a2, a1) = (ap(2, FusionMode::Unweighted, &flat(30.0)), ap(1, FusionMode::Unweighted, &flat(30.0)));
    extra.push((format!("scheme 2 >= scheme 1 - 0.02 at 30 dB: {a2:.3} vs {a1:.3}"), a2 >= a1 - 0.02));
    let ego2 = ap(2, FusionMode::EgoOnly, &flat(-10.0));
    let (b2, b1) = (ap(2, FusionMode::Unweighted, &flat(-10.0)), ap(1, FusionMode::Unweighted, &flat(-10.0)));
    extra.push((format!("schemes 1 and 2 below ego-only at -10 dB: {b1:.3}, {b2:.3} vs {ego2:.3}"), b1 < ego2 && b2 < ego2));
    let descending = |l: &[f64]| l.first().zip(l.last()).is_some_and(|(a, b)| b < a);
    let l1: Vec<f64> = log1.iter().map(|e| e.loss).collect();
    let l2: Vec<f64> = log2.iter().map(|e| e.loss).collect();
    let lw: Vec<f64> = wlog.iter().map(|e| e.loss).collect();
    extra.push((format!("training losses fall: scheme 1 {:.3}->{:.3}, scheme 2 {:.3}->{:.3}, weighting {:.2e}->{:.2e}", l1[0], l1[l1.len() - 1], l2[0], l2[l2.len() - 1], lw[0], lw[lw.len() - 1]), descending(&l1) && descending(&l2) && descending(&lw)));
    let w_ideal = find(&records, 3, FusionMode::Weighted, &ideal).unwrap().mean_weight.unwrap();
    extra.push((format!("ideal channel mean weight > 0.8: {w_ideal:.3}"), w_ideal > 0.8));
    let mut envelope_gap: f64 = 0.0;
    for p in Axis::Snr.points(&cfg.evaluation) {
        let best = ap(2, FusionMode::EgoOnly, &p).max(ap(2, FusionMode::Unweighted, &p));
        envelope_gap = envelope_gap.max(best - ap(3, FusionMode::Weighted, &p));
    }
    extra.push((format!("weighted within 0.05 of max(ego-only, unweighted) across the SNR sweep: largest gap {envelope_gap:.3}"), envelope_gap <= 0.05));
    let pl: Vec<f64> = Axis::PathLoss.points(&cfg.evaluation).iter().map(|p| ap(2, FusionMode::Unweighted, p)).collect();
    extra.push((format!("unweighted AP nonincreasing in n: {pl:.3?}"), pl.windows(2).all(|w| w[1] <= w[0])));
    let mse = |p: &ChannelPoint| find(&records, 2, FusionMode::Unweighted, p).unwrap().feature_mse.unwrap();
    extra.push((format!("feature MSE at 30 dB below -10 dB: {:.2e} vs {:.2e}", mse(&flat(30.0)), mse(&flat(-10.0))), mse(&flat(30.0)) < mse(&flat(-10.0))));
    let egos: Vec<f64> = Axis::Snr.points(&cfg.evaluation).iter().map(|p| ap(2, FusionMode::EgoOnly, p)).collect();
    extra.push(("ego-only AP identical at every SNR".to_string(), egos.windows(2).all(|w| w[0] == w[1])));

    FullRun {
        records,
        backbone_checksum_before: before,
        backbone_checksum_after: after,
        checkpoint_checksum,
        extra,
    }
}

fn paper_trends(run: &FullRun) -> Outcome {
    let r = &run.records;
    let ap = |scheme: u8, mode: FusionMode, p: ChannelPoint| find(r, scheme, mode, &p).map(|x| x.ap_03).unwrap_or(f64::NAN);
    let flat = |snr_db: f64| ChannelPoint::FlatSnr { snr_db };
    let mut parts = Vec::new();
    let mut all = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        all &= pass;
        parts.push(format!("({name}) {} {detail}", if pass { "ok" } else { "FAIL" }));
    };

    let ego = ap(2, FusionMode::EgoOnly, flat(-10.0));
    let s3 = ap(3, FusionMode::Weighted, flat(-10.0));
    let s2 = ap(2, FusionMode::Unweighted, flat(-10.0));
    check(
        "i",
        s3 >= ego - 0.05 && s2 <= ego - 0.15,
        format!("-10 dB: scheme 3 {s3:.3}, scheme 2 {s2:.3}, ego-only {ego:.3}"),
    );

    let s3 = ap(3, FusionMode::Weighted, flat(30.0));
    let s2 = ap(2, FusionMode::Unweighted, flat(30.0));
    check("ii", s3 >= s2 - 0.05, format!("30 dB: scheme 3 {s3:.3}, scheme 2 {s2:.3}"));

    let ws: Vec<f64> = [-10.0, 0.0, 10.0, 20.0, 30.0]
        .iter()
        .map(|s| find(r, 3, FusionMode::Weighted, &flat(*s)).and_then(|x| x.mean_weight).unwrap_or(f64::NAN))
        .collect();
    check(
        "iii",
        ws.windows(2).all(|w| w[1] >= w[0]) && ws[4] - ws[0] >= 0.3,
        format!("mean W {ws:.3?}"),
    );

    let pl = |n: f64| ChannelPoint::PathLoss { n, snr_db: 30.0 };
    let du = ap(2, FusionMode::Unweighted, pl(1.0)) - ap(2, FusionMode::Unweighted, pl(3.0));
    let dw = ap(3, FusionMode::Weighted, pl(1.0)) - ap(3, FusionMode::Weighted, pl(3.0));
    check("iv", du >= 0.15 && dw < du, format!("drop n 1->3: unweighted {du:.3}, weighted {dw:.3}"));

    let of = ChannelPoint::Ofdm { pilots: 16, snr_db: 30.0 };
    let (e, w, u) = (ap(2, FusionMode::EgoOnly, of), ap(3, FusionMode::Weighted, of), ap(2, FusionMode::Unweighted, of));
    check(
        "v",
        w >= e - 0.05 && u < e,
        format!("OFDM 16 pilots: weighted {w:.3}, unweighted {u:.3}, ego-only {e:.3}"),
    );
    outcome(all, parts.join("; "))
}

fn freeze_contract(run: &FullRun) -> Outcome {
    let pass = run.backbone_checksum_before == run.backbone_checksum_after
        && run.backbone_checksum_before == run.checkpoint_checksum;
    outcome(
        pass,
        format!(
            "scheme-2 checksum before {:016x}, after {:016x}, on disk {:016x}",
            run.backbone_checksum_before, run.backbone_checksum_after, run.checkpoint_checksum
        ),
    )
}

// ---------------------------------------------------------------- 7

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_v2v"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_run(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let _ = std::fs::remove_dir_all(dir);
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let config = dir.join("run.toml");
    let text = format!(
        "version = 1\nseed = 7\noutput_dir = {:?}\n\n[dataset]\ntrain = 24\nval = 4\ntest = 12\n\n[training]\nepochs = 2\n\n[weighting]\nepochs = 2\n",
        dir.join("out")
    );
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let c = config.to_str().unwrap();
    let out = dir.join("out");
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-scenes", "--config", c],
        vec!["train", "--scheme", "1", "--config", c],
        vec!["train", "--scheme", "2", "--config", c],
        vec!["train", "--scheme", "3", "--config", c],
    ];
    for s in &steps {
        if !cli(s) {
            return Err(format!("command failed: {}", s.join(" ")));
        }
    }
    let mut files = Vec::new();
    for (axis, name) in [("snr", "snr.csv"), ("pathloss", "pathloss.csv"), ("pilots", "pilots.csv")] {
        let target = out.join(name);
        let t = target.to_str().unwrap();
        if !cli(&["sweep", "--axis", axis, "--config", c, "--out", t]) {
            return Err(format!("sweep {axis} failed"));
        }
    }
    let eval_out = out.join("evaluate.csv");
    if !cli(&["evaluate", "--snr", "5", "--config", c, "--out", eval_out.to_str().unwrap()]) {
        return Err("evaluate failed".into());
    }
    let rels = [
        "snr.csv",
        "pathloss.csv",
        "pilots.csv",
        "evaluate.csv",
        "scenes_test.jsonl",
        "scheme1/model.ckpt",
        "scheme2/model.ckpt",
        "scheme3/weighting.ckpt",
        "scheme1/train_log.csv",
        "scheme3/train_log.csv",
    ];
    for rel in rels {
        let bytes = std::fs::read(out.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        files.push((rel.to_string(), bytes));
    }
    Ok(files)
}

fn determinism(base: &Path) -> Outcome {
    let dir = base.join("determinism");
    let first = cli_run(&dir);
    let second = cli_run(&dir);
    match (first, second) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&str> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x.1 != y.1)
                .map(|(x, _)| x.0.as_str())
                .collect();
            outcome(
                differing.is_empty(),
                if differing.is_empty() {
                    format!("{} outputs byte-identical across two CLI runs (gen-scenes, train 1-3, sweep x3, evaluate)", a.len())
                } else {
                    format!("differing outputs: {}", differing.join(", "))
                },
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, o: &Outcome, secs: f64) {
    println!(
        "criterion {n} [{}] {name} ({secs:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn timed(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    report(n, name, &o, t.elapsed().as_secs_f64());
    o.pass
}

fn main() {
    let base: PathBuf = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&base).unwrap();
    let mut passed = vec![
        timed(1, "formula oracles", formula_oracles),
        timed(2, "gradient suite", gradient_suite),
        timed(3, "channel exactness", channel_exactness),
        timed(4, "channel statistics", channel_statistics),
    ];

    let t = Instant::now();
    eprintln!("training schemes 1-3 and running sweeps (several minutes)");
    let run = full_run(&base.join("full"));
    let secs = t.elapsed().as_secs_f64();
    passed.push(timed(5, "trend reproduction", || {
        let o = paper_trends(&run);
        Outcome {
            detail: format!("{} [train + sweeps {secs:.0}s]", o.detail),
            ..o
        }
    }));
    passed.push(timed(6, "freeze contract", || freeze_contract(&run)));
    passed.push(timed(7, "determinism", || determinism(&base)));

    println!("additional run checks:");
    for (text, ok) in &run.extra {
        println!("  [{}] {text}", if *ok { "ok" } else { "miss" });
    }
    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", passed.len() - failed, passed.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
