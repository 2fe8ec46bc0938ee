//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria share work and
//! print in order. Exits nonzero when any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use oopk_cli::config::RunConfig;
use oopk_cli::{
    ablation_config, cmd_adapt, cmd_eval, cmd_gen_data, cmd_merge, cmd_pretrain, cmd_sweep, cmd_toy, forward_deviation,
    run_on_stream, source_sets, sweep_settings, toy_images, train_source, SweepAxis,
};
use oopk_core::adapter::{inject_adapters, total_orth_loss, AdaptedLayer, LayerKind, OrthReduction, PlacementSpec};
use oopk_core::autodiff::{finite_diff_grad, Graph};
use oopk_core::engine::{ema_update, FULL_METHOD, PLAIN_ADAPTER, SOURCE_ONLY};
use oopk_core::exec::Exec;
use oopk_core::masking::{apply_mask, Fill, MaskSpec};
use oopk_core::metrics::{ConfusionMatrix, RunReport};
use oopk_core::nn::{Adam, AdamConfig, ParamId, ParamStore, Parameter};
use oopk_core::rng::{self, Rng};
use oopk_core::segnet::{soft_cross_entropy, SegNet};
use oopk_core::tensor::{softmax_axis, Tensor};
use oopk_core::toy::{compare_modes, conv_mode, train_autoencoder, ActMode, ANGLE_EPS};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn randn(shape: &[usize], std: f64, r: &mut rng::StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng::normal(r)).collect()).unwrap()
}

fn rand_uniform(shape: &[usize], r: &mut rng::StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(r)).collect()).unwrap()
}

/// Randomizes every `lora_b` so adapters are not at their zero start.
fn randomize_b(store: &mut ParamStore, std: f64, seed: u64) {
    let mut r = rng::substream(seed, "acceptance-b", &[]);
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.name.ends_with(".lora_b")).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = randn(&shape, std, &mut r);
    }
}

// 1 ─────────────────────────────────────────────────────────────────────────

struct TwoLayer {
    layers: Vec<AdaptedLayer>,
    store: ParamStore,
    x: Tensor,
    target: Tensor,
    lambda: f64,
    reduction: OrthReduction,
}

impl TwoLayer {
    fn random(seed: u64) -> Self {
        let mut r = rng::substream(seed, "gradcheck", &[]);
        let c = r.gen_range(1..=3);
        let hidden = r.gen_range(2..=5);
        let classes = r.gen_range(2..=4);
        let (h, w) = (r.gen_range(3..=5), r.gen_range(3..=5));
        let mut store = ParamStore::new();
        let l1 = AdaptedLayer::register(
            &mut store,
            "l1",
            LayerKind::Conv { size: 3, stride: 1, pad: 1 },
            randn(&[hidden, c, 3, 3], 0.5, &mut r),
            Some(randn(&[hidden], 0.1, &mut r)),
        )
        .unwrap();
        let l2 = AdaptedLayer::register(
            &mut store,
            "l2",
            LayerKind::Conv { size: 1, stride: 1, pad: 0 },
            randn(&[classes, hidden, 1, 1], 0.5, &mut r),
            None,
        )
        .unwrap();
        let mut layers = vec![l1, l2];
        let rank = r.gen_range(1..=3);
        inject_adapters(&mut layers, &mut store, &PlacementSpec::all(), rank, 0.3, seed).unwrap();
        randomize_b(&mut store, 0.3, seed);
        let x = rand_uniform(&[c, h, w], &mut r);
        let target = softmax_axis(&randn(&[classes, h, w], 1.0, &mut r), 0).unwrap();
        let reduction = [OrthReduction::Mean, OrthReduction::Sum, OrthReduction::Norm][(seed % 3) as usize];
        TwoLayer { layers, store, x, target, lambda: r.gen_range(0.1..2.0), reduction }
    }

    fn loss(&self, store: &ParamStore, g: &mut Graph) -> oopk_core::autodiff::Var {
        let x = g.constant(self.x.clone());
        let h = self.layers[0].forward(g, store, x).unwrap();
        let h = g.sigmoid(h);
        let logits = self.layers[1].forward(g, store, h).unwrap();
        let p = g.softmax(logits, 0).unwrap();
        let seg = soft_cross_entropy(g, p, &self.target, 1e-12).unwrap();
        let orth = total_orth_loss(g, &self.layers, store, self.reduction).unwrap();
        let wo = g.scale(orth, self.lambda);
        g.add(seg, wo).unwrap()
    }
}

fn criterion_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let net = TwoLayer::random(seed);
        let mut g = Graph::new();
        let loss = net.loss(&net.store, &mut g);
        g.backward(loss).unwrap();
        let mut store = net.store.clone();
        g.accumulate_into(&mut store);
        for id in store.trainable_ids() {
            let analytic = store.get(id).value.grad.clone().unwrap();
            let x0 = net.store.get(id).value.clone();
            let numeric = finite_diff_grad(
                |x| {
                    let mut s = net.store.clone();
                    s.get_mut(id).value = x.clone();
                    let mut g = Graph::no_grad();
                    let l = net.loss(&s, &mut g);
                    g.value(l).item()
                },
                &x0,
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.iter().zip(numeric.data()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 20 configurations"))
}

// 2 ─────────────────────────────────────────────────────────────────────────

fn probe(seed: u64, i: u64, h: usize, w: usize) -> Tensor {
    let mut r = rng::substream(seed, "acceptance-probe", &[i]);
    rand_uniform(&[3, h, w], &mut r)
}

fn criterion_zero_start() -> Outcome {
    let source = SegNet::new(8, 5, 11).unwrap();
    let mut adapted = source.clone();
    adapted.inject(&PlacementSpec::all(), 32, 0.02, 3).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let x = probe(2, i, 16, 16);
        worst = worst.max(source.logits(&x).unwrap().max_abs_diff(&adapted.logits(&x).unwrap()));
    }
    outcome(worst < 1e-12, format!("max elementwise deviation {worst:.1e} on 100 inputs"))
}

// 3 ─────────────────────────────────────────────────────────────────────────

fn criterion_merge() -> Outcome {
    let source = SegNet::new(8, 5, 12).unwrap();
    let mut adapted = source.clone();
    adapted.inject(&PlacementSpec::all(), 32, 0.02, 4).unwrap();
    randomize_b(&mut adapted.store, 0.05, 4);
    let merged = adapted.merged().unwrap();
    let dev = forward_deviation(&adapted, &merged, 16, 16, 100, 5, Exec::Parallel).unwrap();
    let shapes_match = merged
        .store
        .iter()
        .zip(source.store.iter())
        .all(|((_, a), (_, b))| a.name == b.name && a.value.shape() == b.value.shape());
    let counts = (merged.store.numel(), source.store.numel());
    outcome(
        dev < 1e-9 && counts.0 == counts.1 && shapes_match,
        format!("max deviation {dev:.1e} over 100 inputs; parameters merged {} / source {}", counts.0, counts.1),
    )
}

// 4 ─────────────────────────────────────────────────────────────────────────

fn criterion_orth_attainable() -> Outcome {
    let mut steps_needed = Vec::new();
    for seed in 0..5u64 {
        let mut store = ParamStore::new();
        let mut r = rng::substream(seed, "orth-base", &[]);
        let l = AdaptedLayer::register(&mut store, "w", LayerKind::Linear, randn(&[8, 4], 0.5, &mut r), None).unwrap();
        let mut layers = vec![l];
        inject_adapters(&mut layers, &mut store, &PlacementSpec::all(), 4, 0.02, seed).unwrap();
        randomize_b(&mut store, 0.1, seed);
        let mut opt = Adam::new(&store, AdamConfig { lr: 1e-2, ..AdamConfig::default() });
        let mut reached = None;
        for step in 0..=2000 {
            let mut g = Graph::new();
            let loss = total_orth_loss(&mut g, &layers, &store, OrthReduction::Mean).unwrap();
            if g.value(loss).item() < 1e-3 {
                reached = Some(step);
                break;
            }
            if step == 2000 {
                break;
            }
            g.backward(loss).unwrap();
            g.accumulate_into(&mut store);
            opt.step(&mut store).unwrap();
        }
        steps_needed.push(reached);
    }
    let ok = steps_needed.iter().all(Option::is_some);
    outcome(ok, format!("steps to loss < 1e-3 per seed: {steps_needed:?}"))
}

// 5 ─────────────────────────────────────────────────────────────────────────

fn criterion_masks() -> Outcome {
    let mut r = rng::substream(0, "acceptance-mask", &[]);
    let spec = MaskSpec::new(32, 0.75, Fill::Zero).unwrap();
    let mut total = 0.0;
    for _ in 0..1000 {
        total += spec.draw(64, 64, &mut r).unwrap().masked_fraction();
    }
    let mean = total / 1000.0;
    let none = MaskSpec::new(32, 0.0, Fill::Zero).unwrap().draw(64, 64, &mut r).unwrap().masked_fraction();
    let all = MaskSpec::new(32, 1.0, Fill::Zero).unwrap().draw(64, 64, &mut r).unwrap().masked_fraction();
    let x = rand_uniform(&[3, 64, 64], &mut r);
    let m = spec.draw(64, 64, &mut r).unwrap();
    let y = apply_mask(&x, &m, Fill::Max.value_at(0)).unwrap();
    let mut max_fill_exact = true;
    for c in 0..3 {
        for p in 0..64 * 64 {
            let (xv, yv) = (x.data()[c * 4096 + p], y.data()[c * 4096 + p]);
            let ok = if m.upscaled[p] == 0 { yv == 1.0 } else { yv == xv };
            max_fill_exact &= ok;
        }
    }
    outcome(
        (mean - 0.75).abs() <= 0.01 && none == 0.0 && all == 1.0 && max_fill_exact,
        format!("mean masked fraction {mean:.4}; α=0 → {none}; α=1 → {all}; max fill exact: {max_fill_exact}"),
    )
}

// 6 ─────────────────────────────────────────────────────────────────────────

fn distance(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|((_, x), (_, y))| x.value.data().iter().zip(y.value.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn criterion_ema() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = rng::substream(0, "acceptance-ema", &[]);
    for beta in [0.9, 0.99, 0.999] {
        let (mut t, mut s) = (ParamStore::new(), ParamStore::new());
        for (i, shape) in [vec![4, 3], vec![7], vec![2, 2, 3]].into_iter().enumerate() {
            t.add(Parameter::new(format!("p{i}"), randn(&shape, 1.0, &mut r), true));
            s.add(Parameter::new(format!("p{i}"), randn(&shape, 1.0, &mut r), true));
        }
        let d0 = distance(&t, &s);
        for n in 1..=50 {
            ema_update(&mut t, &s, beta).unwrap();
            let expected = beta.powi(n) * d0;
            worst = worst.max((distance(&t, &s) - expected).abs() / expected);
        }
    }
    outcome(worst < 1e-12, format!("max relative deviation from βⁿ decay {worst:.1e} over 50 steps"))
}

// 7 ─────────────────────────────────────────────────────────────────────────

/// Set-based mIoU and mAcc, independent of the confusion matrix.
fn set_oracle(pred: &[u8], gt: &[u8], k: u8) -> (f64, f64) {
    let (mut ious, mut accs) = (Vec::new(), Vec::new());
    for c in 0..k {
        let p: BTreeSet<usize> = pred.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect();
        let g: BTreeSet<usize> = gt.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect();
        let inter = p.intersection(&g).count();
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
        if !g.is_empty() {
            accs.push(inter as f64 / g.len() as f64);
        }
    }
    (ious.iter().sum::<f64>() / ious.len() as f64, accs.iter().sum::<f64>() / accs.len() as f64)
}

fn criterion_metrics() -> Outcome {
    let mut r = rng::substream(0, "acceptance-metrics", &[]);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k: u8 = r.gen_range(2..=6);
        let n = r.gen_range(4..=64);
        let pred: Vec<u8> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let gt: Vec<u8> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.update(&pred, &gt).unwrap();
        if (cm.miou().unwrap(), cm.macc().unwrap()) != set_oracle(&pred, &gt, k) {
            mismatches += 1;
        }
    }
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&[0u8, 0, 0, 0], &[0u8, 0, 1, 1]).unwrap();
    let closed = cm.miou().unwrap();
    outcome(
        mismatches == 0 && closed == 0.25,
        format!("{mismatches} mismatches on 100 random maps; half/half closed form mIoU {closed}"),
    )
}

// 8–10 ──────────────────────────────────────────────────────────────────────

struct SeedRuns {
    source: RunReport,
    plain: RunReport,
    full: RunReport,
    net: SegNet,
    clean_miou: f64,
}

fn desk_runs(seed: u64) -> SeedRuns {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    let (train, held) = source_sets(&cfg, Exec::Parallel).unwrap();
    let m = train_source(&cfg, &train, &held, Exec::Parallel).unwrap();
    let run = |t| run_on_stream(&ablation_config(&cfg, t).unwrap(), &m.net, Exec::Parallel).unwrap();
    SeedRuns {
        source: run(SOURCE_ONLY),
        plain: run(PLAIN_ADAPTER),
        full: run(FULL_METHOD),
        clean_miou: m.clean_miou,
        net: m.net,
    }
}

fn criterion_desk(runs: &[SeedRuns]) -> Outcome {
    let beats_source = runs.iter().filter(|r| r.full.mean_miou() > r.source.mean_miou()).count();
    let beats_plain = runs.iter().filter(|r| r.full.mean_miou() >= r.plain.mean_miou()).count();
    let rows: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{:.2}/{:.2}/{:.2}",
                100.0 * r.source.mean_miou(),
                100.0 * r.plain.mean_miou(),
                100.0 * r.full.mean_miou()
            )
        })
        .collect();
    let clean: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.clean_miou)).collect();
    outcome(
        beats_source >= 4 && beats_plain >= 3,
        format!(
            "full > source on {beats_source}/5, full ≥ plain on {beats_plain}/5; source/plain/full mIoU {}; clean source mIoU {}",
            rows.join(" "),
            clean.join(" ")
        ),
    )
}

fn criterion_forgetting(runs: &[SeedRuns]) -> Outcome {
    let mut ok_seeds = 0;
    let mut worst_drops = Vec::new();
    for r in runs {
        let last = *r.full.rounds().last().unwrap();
        let domains: Vec<&str> = r.full.cells.iter().filter(|c| c.round == 1).map(|c| c.domain.as_str()).collect();
        let worst = domains
            .iter()
            .map(|d| r.full.cell(1, d).unwrap().miou() - r.full.cell(last, d).unwrap().miou())
            .fold(f64::MIN, f64::max);
        worst_drops.push(format!("{:.2}", 100.0 * worst));
        if worst <= 0.02 {
            ok_seeds += 1;
        }
    }
    outcome(
        ok_seeds >= 3,
        format!("round 3 ≥ round 1 − 2 points on every domain for {ok_seeds}/5 seeds; worst drop per seed {}", worst_drops.join(" ")),
    )
}

fn criterion_orders(net: &SegNet) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 0;
    let settings = sweep_settings(&cfg, SweepAxis::Order).unwrap();
    let reports: Vec<(String, RunReport)> = settings
        .iter()
        .map(|(name, c)| (name.clone(), run_on_stream(c, net, Exec::Parallel).unwrap()))
        .collect();
    let accounting = |r: &RunReport| {
        let mut cells: Vec<(usize, String, usize, u64)> =
            r.cells.iter().map(|c| (c.round, c.domain.clone(), c.samples, c.matrix.total())).collect();
        cells.sort();
        cells
    };
    let reference = accounting(&reports[0].1);
    let identical = reports.iter().all(|(_, r)| accounting(r) == reference);
    let means: Vec<f64> = reports.iter().map(|(_, r)| r.mean_miou()).collect();
    let spread = means.iter().copied().fold(f64::MIN, f64::max) - means.iter().copied().fold(f64::MAX, f64::min);
    let listed: Vec<String> = reports.iter().map(|(n, r)| format!("{n}:{:.2}", 100.0 * r.mean_miou())).collect();
    outcome(
        reports.len() == 4 && identical,
        format!(
            "{} orders, identical accounting: {identical}, {} samples each; spread {:.2} mIoU points ({})",
            reports.len(),
            reports[0].1.total_samples(),
            100.0 * spread,
            listed.join(" ")
        ),
    )
}

// 11 ────────────────────────────────────────────────────────────────────────

fn criterion_toy() -> Outcome {
    let mut wins = 0;
    let mut worst_fact: f64 = 0.0;
    let mut triples = Vec::new();
    for seed in 0..5 {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        let (train, held) = toy_images(&cfg).unwrap();
        let (model, _) = train_autoencoder(&train, &cfg.toy()).unwrap();
        // factorization on every encoder input the trained model actually sees
        let first = model.store.iter().next().unwrap().1.value.clone();
        for x in &held {
            let inner = conv_mode(x, &first, 2, 1, ActMode::Inner).unwrap();
            let mag = conv_mode(x, &first, 2, 1, ActMode::Magnitude).unwrap();
            let ang = conv_mode(x, &first, 2, 1, ActMode::Angle).unwrap();
            for ((i, m), a) in inner.data().iter().zip(mag.data()).zip(ang.data()) {
                if *m > ANGLE_EPS {
                    worst_fact = worst_fact.max((i - m * a).abs());
                }
            }
        }
        let e = compare_modes(&model, &held, Exec::Parallel).unwrap();
        if e.angle < e.magnitude {
            wins += 1;
        }
        triples.push(format!("{:.3}/{:.3e}/{:.3}", e.inner, e.magnitude, e.angle));
    }
    outcome(
        worst_fact < 1e-9 && wins >= 4,
        format!(
            "factorization error {worst_fact:.1e}; angle < magnitude on {wins}/5 seeds; inner/magnitude/angle MSE {}",
            triples.join(" ")
        ),
    )
}

// 12 ────────────────────────────────────────────────────────────────────────

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(
        "seed = 7\n[data]\nheight = 24\nwidth = 32\nsource_samples = 6\nheldout_samples = 3\nsamples_per_domain = 3\nrounds = 2\n\
         [model]\npretrain_epochs = 3\n[toy]\nepochs = 3\ntrain_images = 2\nheldout_images = 2\ntriptychs = 1\nsize = 16\n\
         [sweep]\nranks = [2, 4]\n",
    )
    .unwrap();
    cfg.paths.data = dir.join("data");
    cfg.paths.checkpoint = dir.join("source").join("source.ckpt");
    cfg
}

fn run_all_commands(dir: &Path) {
    let mut cfg = small_config(dir);
    cmd_gen_data(&cfg, &dir.join("data"), Exec::Parallel).unwrap();
    cmd_pretrain(&cfg, &dir.join("source"), Exec::Parallel).unwrap();
    cmd_adapt(&cfg, &dir.join("adapt"), Exec::Parallel).unwrap();
    cmd_eval(&cfg, &dir.join("eval"), Exec::Parallel).unwrap();
    cmd_sweep(&cfg, SweepAxis::Rank, &dir.join("sweep"), Exec::Parallel).unwrap();
    cmd_toy(&cfg, &dir.join("toy"), Exec::Parallel).unwrap();
    cfg.paths.checkpoint = dir.join("adapt").join("adapted.ckpt");
    cmd_merge(&cfg, &dir.join("merge"), Exec::Parallel).unwrap();
}

fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_reproducible() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all_commands(&a);
    run_all_commands(&b);
    let files = csv_files(&a);
    // the second run must see the same paths, so compare relative to each root
    let differing: Vec<String> = files
        .iter()
        .filter(|f| {
            let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
            x != y
        })
        .map(|f| f.display().to_string())
        .collect();
    outcome(
        differing.is_empty() && files.len() >= 10 && csv_files(&b) == files,
        format!("{} CSV files compared across two runs of every command; differing: {differing:?}", files.len()),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let el = t.elapsed();
        let in_time = limit.is_none_or(|l| el <= l);
        let pass = o.pass && in_time;
        if !pass {
            failures += 1;
        }
        let budget = limit.map(|l| format!(" / budget {}s", l.as_secs())).unwrap_or_default();
        println!(
            "[{}] criterion {n:>2} {name}: {} ({:.1}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64()
        );
    };
    let s = |secs| Some(Duration::from_secs(secs));

    report(1, "gradient correctness", s(10), &mut criterion_gradients);
    report(2, "zero-start identity", s(5), &mut criterion_zero_start);
    report(3, "merge equivalence", s(5), &mut criterion_merge);
    report(4, "orthogonality attainability", s(10), &mut criterion_orth_attainable);
    report(5, "mask statistics", s(5), &mut criterion_masks);
    report(6, "EMA exactness", s(5), &mut criterion_ema);
    report(7, "metric oracle", s(5), &mut criterion_metrics);

    let mut runs: Vec<SeedRuns> = Vec::new();
    report(8, "desk-scale continual adaptation", s(15 * 60), &mut || {
        runs = (0..5).map(desk_runs).collect();
        criterion_desk(&runs)
    });
    report(9, "forgetting", None, &mut || criterion_forgetting(&runs));
    report(10, "domain-order harness", None, &mut || criterion_orders(&runs[0].net));
    report(11, "toy angle vs magnitude", s(5 * 60), &mut criterion_toy);
    report(12, "reproducibility", None, &mut criterion_reproducible);

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
