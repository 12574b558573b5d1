use std::collections::BTreeMap;

use seglab::app::AppVariant;
use seglab::dataset::synthetic::{generate_blobs, BlobSpec};
use seglab::dataset::{preprocess, split_dataset, AugmentStep, ImageSample, Split, SplitRatios};
use seglab::error::Error;
use seglab::metrics::{mean_ci, MetricReport};
use seglab::models::{Architecture, EncoderKind, SegModelConfig};
use seglab::nn::checkpoint::load_tensors;
use seglab::train::{run_seeds, train_run, RunContext, SplitData, TrainConfig, Trainer};
use seglab::weights::{compute_pixel_stats, compute_weights, WeightPair, WeightScheme};

fn blobs(count: usize, size: usize) -> Vec<ImageSample> {
    let spec = BlobSpec {
        count,
        size,
        ..BlobSpec::default()
    };
    generate_blobs(&spec, 11)
}

fn split(count: usize, size: usize) -> SplitData {
    let mut samples = blobs(count, size);
    let ratios = SplitRatios {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };
    split_dataset(&mut samples, ratios, 0).unwrap();
    let mut data = SplitData::default();
    for s in samples {
        match s.split {
            Some(Split::Train) => data.train.push(s),
            Some(Split::Val) => data.val.push(s),
            _ => data.test.push(s),
        }
    }
    data
}

fn cdw(data: &SplitData) -> WeightPair {
    let stats = compute_pixel_stats(data.train.iter().map(|s| &s.mask)).unwrap();
    compute_weights(&stats, WeightScheme::Cdw, false).unwrap()
}

fn tiny(arch: Architecture, variant: AppVariant, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model = SegModelConfig::new(arch, EncoderKind::Tiny, 3);
    c.app.variant = variant;
    c.epochs = epochs;
    c.batch_size = 4;
    c
}

#[test]
fn same_seed_gives_identical_results() {
    let data = split(10, 16);
    let cfg = tiny(Architecture::Unet, AppVariant::Gelu, 2);
    let w = cdw(&data);
    let ctx = RunContext::detached(&cfg);
    let a = train_run(&cfg, &data, &w, 3, &ctx).unwrap();
    let b = train_run(&cfg, &data, &w, 3, &ctx).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.epochs_completed, 2);
    assert!((0.0..=1.0).contains(&a.test_iou) && (0.0..=1.0).contains(&a.test_pixel_accuracy));
}

#[test]
fn zero_epochs_evaluates_the_untrained_model() {
    let data = split(10, 16);
    let cfg = tiny(Architecture::Unetpp, AppVariant::Relu, 0);
    let r = train_run(&cfg, &data, &cdw(&data), 0, &RunContext::detached(&cfg)).unwrap();
    assert_eq!(r.epochs_completed, 0);
    assert!(r.best_val_iou.is_nan());
    assert!((0.0..=1.0).contains(&r.test_iou));
}

#[test]
fn duplicate_seeds_give_duplicate_results_and_one_seed_has_no_interval() {
    let data = split(10, 16);
    let mut cfg = tiny(Architecture::Unet, AppVariant::None, 1);
    cfg.seeds = vec![0, 0];
    let out = run_seeds(&cfg, &data, &cdw(&data), None, "");
    let results: Vec<_> = out.iter().map(|o| o.result.as_ref().unwrap()).collect();
    assert_eq!(results[0], results[1]);

    cfg.seeds = vec![5];
    let out = run_seeds(&cfg, &data, &cdw(&data), None, "");
    assert_eq!(out.len(), 1);
    let iou = out[0].result.as_ref().unwrap().test_iou;
    assert!(mean_ci(&[iou], 0.95).is_err());
    let key = seglab::metrics::GroupKey {
        dataset: seglab::dataset::DatasetKind::Synthetic,
        architecture: Architecture::Unet,
        encoder: EncoderKind::Tiny,
        weight_scheme: WeightScheme::Cdw,
        app_variant: AppVariant::None,
    };
    assert_eq!(MetricReport::from_seeds(key, vec![(5, iou)]).unwrap().ci_half_width, None);
}

#[test]
fn a_failing_seed_is_reported_in_place() {
    let mut data = split(10, 16);
    data.train[0].image.data[0] = f32::NAN;
    let mut cfg = tiny(Architecture::Unet, AppVariant::None, 1);
    cfg.augment = vec![];
    cfg.seeds = vec![1, 2];
    let out = run_seeds(&cfg, &data, &cdw(&data), None, "");
    assert_eq!(out.iter().map(|o| o.seed).collect::<Vec<_>>(), vec![1, 2]);
    for o in &out {
        match &o.result {
            Err(Error::NonFiniteLoss { epoch: 0, lr, .. }) => assert_eq!(*lr, cfg.lr_max),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }
}

#[test]
fn loss_falls_over_the_first_ten_steps() {
    let samples: Vec<ImageSample> = blobs(32, 64)
        .into_iter()
        .map(|s| preprocess(s, &[AugmentStep::Rnorm]))
        .collect();
    let stats = compute_pixel_stats(samples.iter().map(|s| &s.mask)).unwrap();
    let w = compute_weights(&stats, WeightScheme::Cdw, false).unwrap();
    let batch: Vec<&ImageSample> = samples.iter().take(8).collect();
    for arch in Architecture::ALL {
        for variant in AppVariant::ALL {
            let cfg = tiny(*arch, *variant, 1);
            let mut t = Trainer::new(&cfg, w, 0, 64, 64).unwrap();
            let losses: Vec<f64> = (0..11).map(|i| t.train_step(&batch, cfg.lr_max, 0, i).unwrap()).collect();
            assert!(losses[10] < losses[0], "{arch}/{variant}: {losses:?}");
        }
    }
}

#[test]
fn training_checkpoint_restores_optimizer_state() {
    let data = split(10, 16);
    let w = cdw(&data);
    let cfg = tiny(Architecture::Unetpp, AppVariant::Relu, 1);
    let batch: Vec<&ImageSample> = data.train.iter().collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.ckpt");

    let mut a = Trainer::new(&cfg, w, 4, 16, 16).unwrap();
    for i in 0..3 {
        a.train_step(&batch, 1e-3, 0, i).unwrap();
    }
    a.save_training_checkpoint(&path, BTreeMap::new()).unwrap();
    let mut b = Trainer::new(&cfg, w, 99, 16, 16).unwrap();
    b.load_training_checkpoint(&path).unwrap();

    let la = a.train_step(&batch, 1e-3, 0, 3).unwrap();
    let lb = b.train_step(&batch, 1e-3, 0, 3).unwrap();
    assert_eq!(la, lb);
    for ((_, ea), (_, eb)) in a.store.entries().zip(b.store.entries()) {
        assert_eq!(ea.value.data(), eb.value.data(), "{}", ea.name);
    }
}

#[test]
fn run_artifacts_exclude_the_app_and_log_every_epoch() {
    let data = split(10, 16);
    let mut cfg = tiny(Architecture::Unet, AppVariant::Gelu, 3);
    cfg.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let ctx = RunContext {
        dir: Some(dir.path().to_path_buf()),
        run_id: "r".into(),
        config_hash: "abc".into(),
    };
    train_run(&cfg, &data, &cdw(&data), 0, &ctx).unwrap();

    let (tensors, meta) = load_tensors::<f32>(&dir.path().join("r.ckpt")).unwrap();
    assert!(!tensors.keys().any(|k| k.starts_with("app.")));
    assert!(tensors.keys().any(|k| k.starts_with("encoder.")));
    assert_eq!(meta["config_hash"], "abc");
    assert_eq!(meta["epoch"], "3");
    assert!(!dir.path().join("r.train.ckpt").exists());

    let log = std::fs::read_to_string(dir.path().join("r.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,val_iou");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,3.6e-4,"));
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let data = split(10, 16);
    let w = cdw(&data);
    let mut cfg = tiny(Architecture::Unet, AppVariant::Relu, 3);
    cfg.checkpoint_every = 1;
    let reference = train_run(&cfg, &data, &w, 2, &RunContext::detached(&cfg)).unwrap();

    // A training checkpoint written after epoch 2 by an identical run.
    let dir = tempfile::tempdir().unwrap();
    let ctx = RunContext {
        dir: Some(dir.path().to_path_buf()),
        run_id: "r".into(),
        config_hash: reference.config_hash.clone(),
    };
    let mut partial = cfg.clone();
    partial.epochs = 2;
    partial.checkpoint_every = 0;
    let mut trainer = Trainer::new(&partial, w, 2, 16, 16).unwrap();
    let mut rng = {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        r.set_stream(1);
        r
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..2 {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        order.shuffle(&mut rng);
        let lr = seglab::train::cosine_lr(epoch as f64, cfg.lr_max, cfg.lr_min, cfg.t_max as f64);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ImageSample> = idx
                .iter()
                .map(|&i| {
                    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2 ^ i as u64);
                    r.set_stream(epoch as u64);
                    seglab::dataset::augment(data.train[i].clone(), &cfg.augment, &mut r)
                })
                .collect();
            let refs: Vec<&ImageSample> = batch.iter().collect();
            trainer.train_step(&refs, lr, epoch, bi).unwrap();
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), reference.config_hash.clone());
    meta.insert("epoch".to_string(), "2".to_string());
    meta.insert("rng_word_pos".to_string(), rng.get_word_pos().to_string());
    trainer.save_training_checkpoint(&dir.path().join("r.train.ckpt"), meta).unwrap();

    let resumed = train_run(&cfg, &data, &w, 2, &ctx).unwrap();
    assert_eq!(resumed.test_iou, reference.test_iou);
    assert_eq!(resumed.test_pixel_accuracy, reference.test_pixel_accuracy);
}

#[test]
fn channel_mismatch_is_rejected_before_training() {
    let data = split(10, 16);
    let mut cfg = tiny(Architecture::Unet, AppVariant::None, 1);
    cfg.model.in_channels = 1;
    let err = train_run(&cfg, &data, &cdw(&data), 0, &RunContext::detached(&cfg)).unwrap_err();
    assert!(err.to_string().contains("model.in_channels"), "{err}");
}
