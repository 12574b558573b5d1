//! Acceptance criteria 1-10. Each test prints one PASS/FAIL line (bypassing
//! the test harness's output capture) and then asserts.

mod common;

use std::io::Write;
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seglab::app::{build_app, combined_loss, AppConfig, AppVariant};
use seglab::dataset::synthetic::{generate_blobs, BlobSpec};
use seglab::dataset::{preprocess, reassemble_tiles, tile_image, AugmentStep, DatasetKind, Image, ImageSample, Mask};
use seglab::experiment::{parse_config_str, run_experiment, RunOptions, RESULTS_FILE, SUMMARY_FILE};
use seglab::metrics::{iou, mean_ci, parse_table, read_results};
use seglab::models::{Architecture, EncoderKind, SegModelConfig};
use seglab::nn::{Ctx, ParamStore, Tape, Tensor};
use seglab::train::{cosine_lr, TrainConfig, Trainer};
use seglab::weights::{
    cdw_weights, compute_pixel_stats, compute_weights, median_frequency_weights, WeightPair,
    WeightScheme,
};

use common::{dermatomyositis_masks, dermofit_masks, isic_masks, round4};

fn verdict(n: u32, name: &str, ok: bool, detail: &str, elapsed: Duration, budget: Duration) {
    let in_time = elapsed <= budget;
    let status = if ok && in_time { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {n:>2} {status} {name}: {detail} ({:.2}s of {}s budget)\n",
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {n} failed: {detail}");
    assert!(in_time, "criterion {n} exceeded its {}s budget", budget.as_secs());
}

#[test]
fn criterion_01_weight_table_reproduction() {
    let t0 = Instant::now();
    let expected = [(0.1479, 0.8521), (0.3037, 0.6963), (0.2020, 0.7980)];
    let sets = [dermatomyositis_masks(), dermofit_masks(), isic_masks()];
    let mut got = Vec::new();
    for masks in &sets {
        let stats = compute_pixel_stats(masks).unwrap();
        let w = cdw_weights(&stats).unwrap();
        got.push((round4(w.background), round4(w.foreground)));
    }
    let ok = got.iter().zip(&expected).all(|(g, e)| g == e);
    verdict(1, "cdw weight rows", ok, &format!("{got:?}"), t0.elapsed(), Duration::from_secs(1));
}

#[test]
fn criterion_02_median_frequency_identity() {
    let t0 = Instant::now();
    let mut ok = true;
    let mut worst_product = 0.0f64;
    let mut worst_reciprocal = 0.0f64;
    for masks in [dermatomyositis_masks(), dermofit_masks(), isic_masks()] {
        let w = median_frequency_weights(&compute_pixel_stats(&masks).unwrap()).unwrap();
        // Independent frequencies: class pixels over pixels of images containing the class.
        let mut n = [0.0; 2];
        for (c, slot) in n.iter_mut().enumerate() {
            let class = c as u8;
            let alpha: usize = masks.iter().map(|m| m.data.iter().filter(|&&v| v == class).count()).sum();
            let beta: usize = masks.iter().filter(|m| m.data.contains(&class)).map(Mask::len).sum();
            *slot = alpha as f64 / beta as f64;
        }
        let med = 0.5 * (n[0] + n[1]);
        worst_product = worst_product
            .max((w.background * n[0] - med).abs())
            .max((w.foreground * n[1] - med).abs());
        worst_reciprocal = worst_reciprocal.max((1.0 / w.background + 1.0 / w.foreground - 2.0).abs());
    }
    ok &= worst_product < 1e-12 && worst_reciprocal < 5e-4;
    let dm = median_frequency_weights(&compute_pixel_stats(&dermatomyositis_masks()).unwrap()).unwrap();
    let dm_pair = (round4(dm.background), round4(dm.foreground));
    ok &= dm_pair == (0.5986, 3.0348);
    verdict(
        2,
        "median-frequency identity",
        ok,
        &format!("max |w*n - med| {worst_product:.1e}, max |sum 1/w - 2| {worst_reciprocal:.1e}, DM pair {dm_pair:?}"),
        t0.elapsed(),
        Duration::from_secs(1),
    );
}

fn brute_force_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for r in 0..a.height {
        for c in 0..a.width {
            let (x, y) = (a.get(r, c) == 1, b.get(r, c) == 1);
            inter += u32::from(x && y);
            union += u32::from(x || y);
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn criterion_03_iou_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for i in 0..1000 {
        // Vary density so sparse, dense and empty masks all appear.
        let density = (i % 11) as f64 / 10.0;
        let mut random_mask = || {
            let data = (0..256).map(|_| u8::from(rng.gen_bool(density))).collect();
            Mask::new(16, 16, data).unwrap()
        };
        let (a, b) = (random_mask(), random_mask());
        if iou(&a, &b).unwrap() != brute_force_iou(&a, &b) {
            mismatches += 1;
        }
    }
    verdict(
        3,
        "iou vs brute force",
        mismatches == 0,
        &format!("{mismatches} mismatches in 1000 pairs"),
        t0.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_04_tiling() {
    let t0 = Instant::now();
    let (h, w) = (1408, 1876);
    let image = Image::zeros(1, h, w);
    let mask = Mask::zeros(h, w);
    let (tiles, _) = tile_image(&image, &mask, 480, DatasetKind::Dermatomyositis, "slide").unwrap();
    let twelve = tiles.len() == 12 && tiles.iter().all(|t| t.image.height == 480 && t.image.width == 480);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = 0;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..700), rng.gen_range(1..700));
        let channels = if rng.gen_bool(0.5) { 1 } else { 3 };
        let data = (0..channels * h * w).map(|_| rng.gen::<f32>()).collect();
        let image = Image::new(channels, h, w, data).unwrap();
        let mask = Mask::new(h, w, (0..h * w).map(|_| u8::from(rng.gen_bool(0.3))).collect()).unwrap();
        let tile = rng.gen_range(16..=480);
        let (tiles, grid) = tile_image(&image, &mask, tile, DatasetKind::Dermatomyositis, "r").unwrap();
        let (img2, mask2) = reassemble_tiles(&tiles, &grid).unwrap();
        let same_bits = img2.data.iter().map(|v| v.to_bits()).eq(image.data.iter().map(|v| v.to_bits()));
        if same_bits && mask2 == mask && (img2.height, img2.width) == (h, w) {
            exact += 1;
        }
    }
    verdict(
        4,
        "tiling",
        twelve && exact == 100,
        &format!("{} tiles for 1408x1876, {exact}/100 bit-exact round trips", tiles.len()),
        t0.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_05_scheduler_endpoints() {
    let t0 = Instant::now();
    let start = cosine_lr(0.0, 3.6e-4, 3.4e-4, 50.0);
    let end = cosine_lr(50.0, 3.6e-4, 3.4e-4, 50.0);
    let mid = cosine_lr(25.0, 3.6e-4, 3.4e-4, 50.0);
    let ok = start == 3.6e-4 && end == 3.4e-4 && (mid - 3.5e-4).abs() < 1e-12;
    verdict(
        5,
        "cosine schedule",
        ok,
        &format!("lr(0)={start:e}, lr(50)={end:e}, lr(25)={mid:e}"),
        t0.elapsed(),
        Duration::from_secs(1),
    );
}

/// Loss of the segmenter-free graph: logits are a leaf, the APP reads their
/// foreground probabilities.
fn app_loss(store: &ParamStore<f64>, app: &seglab::app::App, logits: &Tensor<f64>, gt: &Rc<[u8]>, w: &WeightPair) -> f64 {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, true);
    let l = tape.leaf(logits.clone());
    let probs = tape.foreground_prob(l);
    let out = app.forward(&cx, probs).unwrap();
    let loss = combined_loss(&tape, l, Some(out), gt, w, 1.0).unwrap();
    let v = tape.value(loss).item();
    v
}

#[test]
fn criterion_06_combined_loss_gradient_check() {
    let t0 = Instant::now();
    let h = 1e-5;
    let weights = compute_weights(
        &compute_pixel_stats(&dermatomyositis_masks()).unwrap(),
        WeightScheme::Cdw,
        false,
    )
    .unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for instance in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + instance);
        let mut store = ParamStore::<f64>::new();
        let cfg = AppConfig {
            variant: AppVariant::Relu,
            ..AppConfig::default()
        };
        let app = build_app(&cfg, 64, &mut store, &mut rng).unwrap().unwrap();
        let logits = Tensor::new(vec![1, 2, 8, 8], (0..128).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let gt: Rc<[u8]> = (0..64).map(|_| u8::from(rng.gen_bool(0.3))).collect();

        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, true);
        let l = tape.leaf(logits.clone());
        let probs = tape.foreground_prob(l);
        let out = app.forward(&cx, probs).unwrap();
        let loss = combined_loss(&tape, l, Some(out), &gt, &weights, 1.0).unwrap();
        let grads = tape.backward(loss);

        let mut compare = |a: f64, n: f64| {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        };
        let g_logits = grads.wrt(l).unwrap().clone();
        for i in 0..logits.numel() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let n = (app_loss(&store, &app, &plus, &gt, &weights) - app_loss(&store, &app, &minus, &gt, &weights)) / (2.0 * h);
            compare(g_logits.data()[i], n);
        }
        let ids: Vec<_> = store.trainable_ids();
        for id in ids {
            let analytic = grads.param(id).unwrap().clone();
            for i in 0..analytic.numel() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = app_loss(&store, &app, &logits, &gt, &weights);
                store.get_mut(id).data_mut()[i] = orig - h;
                let down = app_loss(&store, &app, &logits, &gt, &weights);
                store.get_mut(id).data_mut()[i] = orig;
                compare(analytic.data()[i], (up - down) / (2.0 * h));
            }
        }
    }
    verdict(
        6,
        "combined-loss gradients",
        worst < 1e-4,
        &format!("max relative error {worst:.2e} over {checked} entries"),
        t0.elapsed(),
        Duration::from_secs(30),
    );
}

fn blob_set(count: usize, size: usize, seed: u64) -> Vec<ImageSample> {
    let spec = BlobSpec {
        count,
        size,
        ..BlobSpec::default()
    };
    generate_blobs(&spec, seed)
        .into_iter()
        .map(|s| preprocess(s, &[AugmentStep::Rnorm]))
        .collect()
}

fn tiny_config(arch: Architecture, variant: AppVariant) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model = SegModelConfig::new(arch, EncoderKind::Tiny, 3);
    c.app.variant = variant;
    c.batch_size = 8;
    c
}

#[test]
fn criterion_07_app_is_train_time_only() {
    let t0 = Instant::now();
    let data = blob_set(8, 32, 7);
    let stats = compute_pixel_stats(data.iter().map(|s| &s.mask)).unwrap();
    let w = compute_weights(&stats, WeightScheme::Cdw, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("segmenter.ckpt");

    let mut ok = true;
    let mut detail = String::new();
    for arch in [Architecture::Unet, Architecture::Unetpp] {
        // Train briefly with an APP so weights and running stats move.
        let mut trainer = Trainer::new(&tiny_config(arch, AppVariant::Relu), w, 1, 32, 32).unwrap();
        let refs: Vec<&ImageSample> = data.iter().collect();
        for step in 0..3 {
            trainer.train_step(&refs, 1e-3, 0, step).unwrap();
        }
        trainer.save_inference_checkpoint(&ckpt, &Default::default()).unwrap();

        let mut outputs = Vec::new();
        for (k, variant) in AppVariant::ALL.iter().enumerate() {
            let mut t = Trainer::new(&tiny_config(arch, *variant), w, 100 + k as u64, 32, 32).unwrap();
            t.load_inference_checkpoint(&ckpt).unwrap();
            outputs.push(t.predict(&data).unwrap());
        }
        let same = outputs.windows(2).all(|p| p[0] == p[1]);
        let fg: usize = outputs[0].iter().map(Mask::foreground_count).sum();
        ok &= same;
        detail.push_str(&format!("{arch}: identical={same} ({fg} fg px); "));
    }
    verdict(7, "APP train-time only", ok, detail.trim_end_matches("; "), t0.elapsed(), Duration::from_secs(60));
}

#[test]
fn criterion_08_overfit_sanity() {
    let t0 = Instant::now();
    const MAX_STEPS: usize = 300;
    const CHECK_EVERY: usize = 25;
    let data = blob_set(32, 64, 0);
    let stats = compute_pixel_stats(data.iter().map(|s| &s.mask)).unwrap();
    let mut failures = Vec::new();
    let mut worst_steps = 0;
    let mut lowest_iou = f64::INFINITY;
    for arch in [Architecture::Unet, Architecture::Unetpp] {
        for variant in AppVariant::ALL {
            for scheme in WeightScheme::ALL {
                let cfg = tiny_config(arch, *variant);
                let w = compute_weights(&stats, scheme, false).unwrap();
                let mut trainer = Trainer::new(&cfg, w, 0, 64, 64).unwrap();
                let mut step = 0;
                let mut train_iou = 0.0;
                'train: while step < MAX_STEPS {
                    for chunk in data.chunks(cfg.batch_size) {
                        let refs: Vec<&ImageSample> = chunk.iter().collect();
                        trainer.train_step(&refs, 1e-3, 0, step).unwrap();
                        step += 1;
                        if step % CHECK_EVERY == 0 || step == MAX_STEPS {
                            train_iou = trainer.evaluate(&data).unwrap().0;
                            if train_iou > 0.9 || step == MAX_STEPS {
                                break 'train;
                            }
                        }
                    }
                }
                worst_steps = worst_steps.max(step);
                lowest_iou = lowest_iou.min(train_iou);
                if train_iou <= 0.9 {
                    failures.push(format!("{arch}/{variant}/{scheme} iou {train_iou:.4}"));
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("18/18 cells above 0.9 train IoU; slowest took {worst_steps} steps, lowest IoU {lowest_iou:.4}")
    } else {
        format!("failing cells: {}", failures.join(", "))
    };
    verdict(8, "overfit sanity", failures.is_empty(), &detail, t0.elapsed(), Duration::from_secs(600));
}

#[test]
fn criterion_09_end_to_end_grid() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
dataset = "synthetic"
output_dir = "{}"

[data.synthetic]
count = 12
size = 32

[grid]
architecture = ["unet", "unetpp"]
encoder = ["tiny", "resnet18"]
weight_scheme = ["cdw"]
app_variant = ["none", "relu", "gelu"]

[train]
epochs = 3
batch_size = 4
seeds = [0, 1]
"#,
        dir.path().display()
    );
    let config = parse_config_str(&text).unwrap();
    let first = run_experiment(&config, RunOptions::default()).unwrap();
    let rows = read_results(&dir.path().join(RESULTS_FILE)).unwrap();
    let per_arch = |a: Architecture| rows.iter().filter(|r| r.architecture == a).count();
    let (unet_rows, unetpp_rows) = (per_arch(Architecture::Unet), per_arch(Architecture::Unetpp));

    let table = std::fs::read_to_string(dir.path().join("table_by_encoder.csv")).unwrap();
    let blocks = parse_table(&table).unwrap();
    let table_shaped = blocks.len() == 2
        && blocks.iter().all(|b| {
            b.rows.len() == 2 && b.rows.iter().all(|(_, cells)| cells.iter().all(Option::is_some))
        });
    let summary_rows = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap().lines().count() - 1;

    let second = run_experiment(&config, RunOptions::default()).unwrap();
    let rows_after = read_results(&dir.path().join(RESULTS_FILE)).unwrap().len();

    let ok = first.exit_code() == 0
        && unet_rows == 12
        && unetpp_rows == 12
        && table_shaped
        && summary_rows == 12
        && second.runs_succeeded == 0
        && rows_after == rows.len();
    verdict(
        9,
        "end-to-end grid",
        ok,
        &format!(
            "rows unet={unet_rows} unetpp={unetpp_rows}, {} table blocks, {summary_rows} summary rows, resume added {} rows",
            blocks.len(),
            rows_after - rows.len()
        ),
        t0.elapsed(),
        Duration::from_secs(900),
    );
}

#[test]
fn criterion_10_confidence_interval() {
    let t0 = Instant::now();
    let (mean, half) = mean_ci(&[0.52, 0.54, 0.56, 0.58, 0.60], 0.95).unwrap();
    // Independent check: t(0.975, 4 dof) = 2.776445 from tables, s = sqrt(0.001).
    let oracle = 2.776_445 * 0.001f64.sqrt() / 5f64.sqrt();
    let ok = round4(mean) == 0.56 && (half - 0.03927).abs() < 1e-4 && (half - oracle).abs() < 1e-6;
    verdict(
        10,
        "confidence interval",
        ok,
        &format!("mean {mean:.4}, half width {half:.5}"),
        t0.elapsed(),
        Duration::from_secs(1),
    );
}
