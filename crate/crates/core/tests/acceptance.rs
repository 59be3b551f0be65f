//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `CPDC_ACCEPTANCE_ONLY=3,4` restricts the run to the listed criteria.
//! Criteria 6 and 9 reuse the model trained for criterion 8.
//! `CPDC_ACCEPTANCE_STRICT=1` makes any FAIL line a nonzero exit.

mod common;

use common::grad::*;
use cpdc::ablation::{ablation_table, latent_volumes, PostHocConfig};
use cpdc::autoencoder::{Model, RateModel, TrainConfig};
use cpdc::codec::{compress_image, decode_symbols, range_encode, apply_floor, Bitstream, DecodeStrategy};
use cpdc::context_model::{build_mask, coding_cost, cost_grad_logits, masked_coding_cost, ContextModel, SymbolVolume};
use cpdc::data::{crop_at, procedural_corpus, tiles, Dataset};
use cpdc::image_io::{quantize_8bit, read_image};
use cpdc::importance::{apply_mask, binarize, expand_map, recover_mask};
use cpdc::metrics::{ms_ssim, MsSsimConfig};
use cpdc::model_file;
use cpdc::nn::Adam;
use cpdc::quantizer::{quantize_ste, CenterSet};
use cpdc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_context_model(rng: &mut ChaCha8Rng, l: usize, hidden: usize) -> ContextModel {
    let mut m = ContextModel::new(l, hidden, 4).unwrap();
    m.init(rng);
    for layer in &mut m.layers {
        layer.bias.value = random_tensor(rng, &[layer.cout], 0.5);
    }
    m
}

fn random_volume(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, l: usize) -> SymbolVolume {
    let idx = (0..h * w * k).map(|_| rng.gen_range(0..l) as u16).collect();
    SymbolVolume::new(h, w, k, idx, l).unwrap()
}

// ---------------------------------------------------------------- 1

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let l = 6;
    let centers = CenterSet::evenly_spaced(l, 1.0).unwrap();
    let mut pairs = 0usize;
    let mut violations = 0usize;
    for &(h, w, k) in &[(4, 4, 2), (6, 6, 4)] {
        for _ in 0..2 {
            let ctx = random_context_model(&mut rng, l, 24);
            let base = random_volume(&mut rng, h, w, k, l);
            let p0 = ctx.context_forward(&base, &centers).unwrap();
            for j in 0..base.len() {
                for alt in 0..l {
                    if alt == base.indices()[j] as usize {
                        continue;
                    }
                    let mut v = base.clone();
                    v.set_scan(j, alt);
                    let p = ctx.context_forward(&v, &centers).unwrap();
                    for i in 0..=j {
                        pairs += 1;
                        if p.data()[i * l..(i + 1) * l] != p0.data()[i * l..(i + 1) * l] {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    outcome(violations == 0, format!("{pairs} (position, later flip) pairs, {violations} changed outputs"))
}

// ---------------------------------------------------------------- 2

fn mask_construction() -> Outcome {
    let ones = |inc| build_mask(3, 3, 3, inc).unwrap().sum() as usize;
    let (strict, inclusive) = (ones(false), ones(true));
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let l = 4;
    let centers = CenterSet::evenly_spaced(l, 1.0).unwrap();
    let mut ctx = random_context_model(&mut rng, l, 8);
    let adam = Adam::new(1e-2);
    for _ in 0..100 {
        let v = random_volume(&mut rng, 4, 4, 3, l);
        let cache = ctx.forward(&v.center_volume(&centers).unwrap()).unwrap();
        let g = cost_grad_logits(&cache.probs, &v, None, 1.0).unwrap();
        ctx.backward(&cache, &g, true, false).unwrap();
        adam.step(&mut ctx.params_mut()).unwrap();
        ctx.remask();
    }
    let closed = ctx.check_masks().is_ok();
    outcome(
        strict == 13 && inclusive == 14 && closed,
        format!("strict mask {strict} ones, inclusive {inclusive}; filters masked after 100 Adam steps: {closed}"),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_suite() -> Outcome {
    let suites: Vec<(&str, GradStats, f64)> = vec![
        ("conv2d", conv2d_suite(20, 11), 1e-4),
        ("conv_transpose2d", conv_transpose2d_suite(20, 12), 1e-4),
        ("batch_norm", batch_norm_suite(20, 13), 1e-4),
        ("masked_conv3d", masked_conv3d_suite(20, 14), 1e-4),
        ("soft quantization", soft_quantization_suite(20, 15), 1e-4),
        ("cross entropy", cross_entropy_suite(20, 16), 1e-4),
        ("ms-ssim", ms_ssim_suite(20, 17), 1e-4),
        ("end-to-end", end_to_end_suite(20, 18), 1e-3),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, s, tol) in &suites {
        pass &= s.passes(*tol);
        parts.push(format!("{name} {:.1e}", s.worst));
        println!("    {name}: {}", s.summary());
    }
    outcome(pass, format!("worst rel err: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 4

fn codec_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut failures = 0;
    let trials = 1000;
    for t in 0..trials {
        let l = rng.gen_range(2..=16);
        let centers = CenterSet::evenly_spaced(l, 1.0).unwrap();
        let hidden = rng.gen_range(2..=6);
        let ctx = random_context_model(&mut rng, l, hidden);
        let (h, w, k) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=4));
        // sample symbols from the model itself half the time, uniformly otherwise
        let mut v = random_volume(&mut rng, h, w, k, l);
        if t % 2 == 0 {
            ctx_sample(&ctx, &centers, &mut v, &mut rng);
        }
        let probs = ctx.context_forward(&v, &centers).unwrap();
        let s = range_encode(v.indices(), |i, _| Ok(apply_floor(&probs.data()[i * l..(i + 1) * l]))).unwrap();
        match decode_symbols(&ctx, &centers, (h, w, k), &s.payload, s.checksum, DecodeStrategy::Windowed) {
            Ok(d) if d == v => {}
            _ => failures += 1,
        }
    }

    // overhead on long streams
    let mut worst_excess: f64 = f64::NEG_INFINITY;
    let mut bound_ok = true;
    let mut long_streams = Vec::new();
    for _ in 0..20 {
        let l = rng.gen_range(2..=8);
        let centers = CenterSet::evenly_spaced(l, 1.0).unwrap();
        let ctx = random_context_model(&mut rng, l, 6);
        let (h, w, k) = (rng.gen_range(12..=16), rng.gen_range(12..=16), rng.gen_range(8..=10));
        let mut v = random_volume(&mut rng, h, w, k, l);
        ctx_sample(&ctx, &centers, &mut v, &mut rng);
        let probs = ctx.context_forward(&v, &centers).unwrap();
        let c = coding_cost(&probs, &v).unwrap();
        let s = range_encode(v.indices(), |i, _| Ok(apply_floor(&probs.data()[i * l..(i + 1) * l]))).unwrap();
        let bits = s.payload.len() as f64 * 8.0;
        worst_excess = worst_excess.max((bits - c).abs() - 0.01 * c);
        bound_ok &= v.len() >= 1000 && (bits - c).abs() <= 64.0 + 0.01 * c;
        long_streams.push((ctx, centers, v, s));
    }

    // damage detection
    let mut damaged = 0;
    let mut detected = 0;
    for (ctx, centers, v, s) in long_streams.iter().take(5) {
        let dims = (v.height(), v.width(), v.depth());
        let mut cuts: Vec<usize> = (0..s.payload.len()).step_by((s.payload.len() / 40).max(1)).collect();
        cuts.push(s.payload.len() - 1);
        for cut in cuts {
            damaged += 1;
            detected += decode_symbols(ctx, centers, dims, &s.payload[..cut], s.checksum, DecodeStrategy::Windowed)
                .is_err() as usize;
        }
        for _ in 0..40 {
            let mut p = s.payload.clone();
            let i = rng.gen_range(0..p.len());
            p[i] ^= 1 << rng.gen_range(0..8);
            damaged += 1;
            detected += decode_symbols(ctx, centers, dims, &p, s.checksum, DecodeStrategy::Windowed).is_err() as usize;
        }
    }
    outcome(
        failures == 0 && bound_ok && detected == damaged,
        format!(
            "{} / {trials} round trips exact; payload bound on 20 long streams: {bound_ok} (max |bits-C|-0.01C = {worst_excess:.1}); {detected}/{damaged} damaged payloads rejected",
            trials - failures
        ),
    )
}

/// Replaces the symbols of `v` by an autoregressive sample from `ctx`.
fn ctx_sample(ctx: &ContextModel, centers: &CenterSet, v: &mut SymbolVolume, rng: &mut ChaCha8Rng) {
    let mut values = Tensor::zeros(&[v.depth(), v.height(), v.width(), 1]);
    for i in 0..v.len() {
        let p = ctx.probs_at(&values, i).unwrap();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut s = p.len() - 1;
        for (j, &pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc {
                s = j;
                break;
            }
        }
        v.set_scan(i, s);
        values.data_mut()[i] = centers.values()[s];
    }
}

// ---------------------------------------------------------------- 5

fn straight_through() -> Outcome {
    let (s, exact) = straight_through_suite(40, 505);
    outcome(
        exact && s.passes(1e-4),
        format!("forward equals hard assignment: {exact}; backward vs soft-path differences: {}", s.summary()),
    )
}

// ---------------------------------------------------------------- 6 (model-free parts)

fn importance_contract() -> (bool, String) {
    let k = 5;
    let ys: Vec<f64> = (0..=140).map(|i| -1.0 + i as f64 * 0.05).collect();
    let y = Tensor::new(&[1, ys.len(), 1], ys.clone()).unwrap();
    let (m, _) = expand_map(&y, k).unwrap();
    let mut grid_ok = true;
    for (j, &yv) in ys.iter().enumerate() {
        for ch in 0..k {
            let want = (yv.clamp(0.0, k as f64) - ch as f64).min(1.0).max(0.0);
            grid_ok &= m.data()[j * k + ch] == want;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mc_ok = true;
    let mut recover_ok = true;
    for _ in 0..300 {
        let (h, w, kk) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=5));
        let l = rng.gen_range(2..=7);
        let centers = CenterSet::evenly_spaced(l, 1.0).unwrap();
        let z = random_tensor(&mut rng, &[h, w, kk], 1.5);
        let y = random_tensor(&mut rng, &[h, w, 1], 1.0).map(|v| (v + 1.0) * 0.5 * (kk as f64 + 1.0) - 0.5);
        let (m, _) = expand_map(&y, kk).unwrap();
        let (_, sym) = quantize_ste(&apply_mask(&z, &m).unwrap(), &centers).unwrap();
        let m_bin = binarize(&m);
        // redefined mask: drop trailing mask entries whose symbol is the zero symbol anyway
        let zero = centers.zero_symbol_index();
        let mut want = m_bin.clone();
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * kk;
                let mut n = (0..kk).filter(|&c| m_bin.data()[base + c] == 1.0).count();
                while n > 0 && sym.get(i, j, n - 1) == zero {
                    n -= 1;
                }
                for c in 0..kk {
                    want.data_mut()[base + c] = (c < n) as u8 as f64;
                }
            }
        }
        recover_ok &= recover_mask(&sym, zero) == want;

        let ctx = random_context_model(&mut rng, l, 4);
        let probs = ctx.context_forward(&sym, &centers).unwrap();
        let scan_mask = cpdc::context_model::hwk_to_scan(&m_bin).unwrap();
        let scan_mask = Tensor::new(&[scan_mask.len()], scan_mask).unwrap();
        let c = coding_cost(&probs, &sym).unwrap();
        let mc = masked_coding_cost(&probs, &sym, &m_bin).unwrap();
        mc_ok &= mc <= c && scan_mask.len() == sym.len();
    }
    (
        grid_ok && mc_ok && recover_ok,
        format!("clamp grid exact: {grid_ok}; MC <= C on 300 volumes: {mc_ok}; recovered mask matches: {recover_ok}"),
    )
}

// ---------------------------------------------------------------- training runs

fn photo(name: &str) -> Tensor {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/photos").join(format!("{name}.ppm"));
    read_image(&p).unwrap()
}

/// Procedural textures plus four photos for training; disjoint textures and two other photos held out.
fn corpus() -> (Dataset, Vec<Tensor>) {
    let mut train = procedural_corpus(7, 24, 128);
    let names = ["astronaut", "chelsea", "coffee", "rocket"];
    train.extend(
        Dataset::from_images(names.iter().map(|s| s.to_string()).collect(), names.iter().map(|n| photo(n)).collect()).unwrap(),
    );
    let mut held = procedural_corpus(1007, 6, 128).images;
    held.push(photo("immunohistochemistry"));
    held.push(photo("hubble_deep_field"));
    (train, tiles(&held, 64))
}

fn base_config() -> TrainConfig {
    TrainConfig {
        channels: 8,
        centers: 6,
        widths: vec![16, 32, 32],
        batch: 8,
        crop: 64,
        lr_ctx: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn train_model(cfg: &TrainConfig, data: &Dataset) -> (Model, f64) {
    let start = Instant::now();
    let mut last = None;
    let model = cpdc::autoencoder::train(cfg, data, |r| {
        if r.step % 100 == 0 || r.step + 1 == cfg.steps {
            println!(
                "    step {:5}: d {:7.3}  MS-SSIM {:.4}  C {:8.1}  MC {:8.1}  bpp {:.4}",
                r.step, r.distortion, r.ms_ssim, r.coding_cost, r.masked_coding_cost, r.bpp
            );
        }
        last = Some(r.clone());
        Ok(())
    })
    .unwrap();
    let _ = last;
    // evaluate exactly what a reader of the model file would see
    let loaded = model_file::round_trip(&model, Some(cfg)).unwrap().model;
    (loaded, start.elapsed().as_secs_f64())
}

struct HeldOut {
    bpp: f64,
    uniform_bpp: f64,
    ms_ssim: f64,
    coding_cost: Vec<f64>,
    masked_coding_cost: Vec<f64>,
    occupancy: Vec<f64>,
}

fn evaluate(model: &mut Model, crops: &[Tensor]) -> HeldOut {
    let cfg = MsSsimConfig::default();
    let k = model.channels();
    let l = model.num_symbols() as f64;
    let mut out = HeldOut {
        bpp: 0.0,
        uniform_bpp: 0.0,
        ms_ssim: 0.0,
        coding_cost: Vec::new(),
        masked_coding_cost: Vec::new(),
        occupancy: vec![0.0; k],
    };
    let n = crops.len() as f64;
    for x in crops {
        let area = (x.shape()[0] * x.shape()[1]) as f64;
        let c = compress_image(model, [0; 8], x).unwrap();
        let (res, _) = model.analyze(x).unwrap();
        out.bpp += c.bitstream.bpp() / n;
        out.uniform_bpp += res.importance.m_bin.sum() * l.log2() / area / n;
        out.ms_ssim += ms_ssim(x, &quantize_8bit(&c.x_hat), &cfg).unwrap() / n;
        out.coding_cost.push(c.coding_cost);
        out.masked_coding_cost.push(c.masked_coding_cost);
        let m = &res.importance.m_bin;
        let cols = m.len() / k;
        for (ch, o) in out.occupancy.iter_mut().enumerate() {
            *o += m.data().iter().skip(ch).step_by(k).sum::<f64>() / cols as f64 / n;
        }
    }
    out
}

struct RateRun {
    main: HeldOut,
}

fn concurrent_training(target: f64) -> (Outcome, RateRun) {
    let (train, held) = corpus();
    let steps = 600;
    let cfg = TrainConfig {
        beta: 10.0,
        target_bpp: target,
        steps,
        lr_decay_every: steps / 3,
        ..base_config()
    };
    println!("    context-model run ({steps} steps)");
    let (mut model, secs_a) = train_model(&cfg, &train);
    let main = evaluate(&mut model, &held);
    let base_cfg = TrainConfig {
        rate_model: RateModel::Uniform,
        ..cfg.clone()
    };
    println!("    uniform-prior baseline ({steps} steps)");
    let (mut baseline, secs_b) = train_model(&base_cfg, &train);
    let base = evaluate(&mut baseline, &held);
    let within = (main.bpp - target).abs() <= 0.25 * target;
    let base_within = (base.uniform_bpp - target).abs() <= 0.25 * target;
    let better = main.ms_ssim > base.ms_ssim;
    let detail = format!(
        "target {target} bpp; context run: {:.4} bpp, MS-SSIM {:.4}; uniform baseline: {:.4} bpp, MS-SSIM {:.4}; {:.0}s + {:.0}s",
        main.bpp, main.ms_ssim, base.uniform_bpp, base.ms_ssim, secs_a, secs_b
    );
    (outcome(within && base_within && better, detail), RateRun { main })
}

fn mc_ce_gap(run: &RateRun) -> Outcome {
    let ce: f64 = run.main.coding_cost.iter().sum::<f64>() / run.main.coding_cost.len() as f64;
    let mc: f64 = run.main.masked_coding_cost.iter().sum::<f64>() / run.main.masked_coding_cost.len() as f64;
    let always = run.main.coding_cost.iter().zip(&run.main.masked_coding_cost).all(|(c, m)| m <= c);
    outcome(
        always,
        format!("mean CE {ce:.1} bits, mean MC {mc:.1} bits, (CE - MC)/CE = {:.2}%; MC <= CE on every crop: {always}", 100.0 * (ce - mc) / ce),
    )
}

fn occupancy(run: &RateRun) -> (bool, String) {
    let o = &run.main.occupancy;
    let mono = o.windows(2).all(|w| w[1] <= w[0]);
    let s: Vec<String> = o.iter().map(|v| format!("{v:.3}")).collect();
    (mono, format!("channel occupancy [{}] nonincreasing: {mono}", s.join(", ")))
}

fn ablation() -> Outcome {
    let (train, held) = corpus();
    let cfg = TrainConfig {
        beta: 0.0,
        steps: 1000,
        lr_decay_every: 800,
        ..base_config()
    };
    println!("    beta = 0 run ({} steps)", cfg.steps);
    let (mut model, secs) = train_model(&cfg, &train);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let crops: Vec<Tensor> = (0..600)
        .map(|_| {
            let img = &train.images[rng.gen_range(0..train.len())];
            let (h, w) = (img.shape()[0], img.shape()[1]);
            crop_at(img, rng.gen_range(0..=h - 64), rng.gen_range(0..=w - 64), 64, rng.gen_bool(0.5))
        })
        .collect();
    let train_vols = latent_volumes(&mut model, &crops).unwrap();
    let eval_vols = latent_volumes(&mut model, &held).unwrap();
    let post = PostHocConfig {
        steps: 1500,
        batch: 8,
        lr: 1e-3,
        ..PostHocConfig::default()
    };
    let start = Instant::now();
    let t = ablation_table(&train_vols, &eval_vols, &model.centers, held.len() * 64 * 64, &post, &mut rng).unwrap();
    for line in t.to_text().lines() {
        println!("    {line}");
    }
    let r = |n| t.rate(n).unwrap();
    let (u, z, f, p) = (r("uniform"), r("zeroth-order"), r("first-order"), r("context model (post hoc)"));
    let pass = p <= f && f <= z && z <= u && p <= 0.97 * z;
    outcome(
        pass,
        format!(
            "bits/symbol uniform {u:.3}, zeroth {z:.3}, first {f:.3}, post-hoc P {p:.3} ({:.1}% below zeroth); {:.0}s + {:.0}s",
            100.0 * (1.0 - p / z),
            secs,
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let data = procedural_corpus(5, 4, 64);
    let cfg = TrainConfig {
        widths: vec![8, 8, 8],
        channels: 4,
        batch: 2,
        steps: 15,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = cpdc::autoencoder::train(&cfg, &data, |_| Ok(())).unwrap();
    let b = cpdc::autoencoder::train(&cfg, &data, |_| Ok(())).unwrap();
    let fa = model_file::to_bytes(&a, Some(&cfg)).unwrap();
    let fb = model_file::to_bytes(&b, Some(&cfg)).unwrap();
    let report = |bytes: &[u8]| {
        let mut m = model_file::from_bytes(bytes).unwrap();
        let lines = cpdc::cli::eval_report(&mut m, &data).unwrap();
        lines.iter().map(|l| l.to_string() + "\n").collect::<String>()
    };
    let (ra, rb) = (report(&fa), report(&fb));
    // the bitstream of a decoded image must also be reproducible
    let mut m = model_file::from_bytes(&fa).unwrap();
    let c1 = compress_image(&mut m.model, m.hash, &data.images[0]).unwrap().bitstream.to_bytes();
    let c2 = compress_image(&mut m.model, m.hash, &data.images[0]).unwrap().bitstream.to_bytes();
    let same_bs = c1 == c2 && Bitstream::from_bytes(&c1).is_ok();
    outcome(
        fa == fb && ra == rb && same_bs,
        format!(
            "model files identical: {} ({} bytes); eval reports identical: {} ({} bytes); bitstreams identical: {same_bs}",
            fa == fb,
            fa.len(),
            ra == rb,
            ra.len()
        ),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("CPDC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome, results: &mut Vec<(u32, &str, Outcome)>| {
        if !want(n) {
            return;
        }
        println!("criterion {n}: {name}");
        let start = Instant::now();
        let o = f();
        println!("    ({:.1}s)", start.elapsed().as_secs_f64());
        results.push((n, name, o));
    };
    run(1, "causality", &mut causality, &mut results);
    run(2, "mask construction", &mut mask_construction, &mut results);
    run(3, "gradients", &mut gradient_suite, &mut results);
    run(4, "codec", &mut codec_suite, &mut results);
    run(5, "straight-through", &mut straight_through, &mut results);
    run(10, "determinism", &mut determinism, &mut results);

    let mut rate_run = None;
    if want(6) || want(8) || want(9) {
        println!("criterion 8: concurrent training");
        let (o, r) = concurrent_training(0.12);
        if want(8) {
            results.push((8, "concurrent training", o));
        }
        rate_run = Some(r);
    }
    if let Some(r) = &rate_run {
        run(9, "MC/CE gap", &mut || mc_ce_gap(r), &mut results);
        run(
            6,
            "importance map",
            &mut || {
                let (a, da) = importance_contract();
                let (b, db) = occupancy(r);
                outcome(a && b, format!("{da}; {db}"))
            },
            &mut results,
        );
    }
    run(7, "ablation ordering", &mut ablation, &mut results);

    results.sort_by_key(|r| r.0);
    println!();
    for (n, name, o) in &results {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed} of {} criteria passed", results.len());
    // FAIL lines are reported, not turned into an exit code, so that a long
    // training criterion does not stop cargo from running the other suites.
    // Set CPDC_ACCEPTANCE_STRICT=1 to exit nonzero on any failure.
    if passed < results.len() && std::env::var_os("CPDC_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
