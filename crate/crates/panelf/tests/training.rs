use std::collections::BTreeSet;
use std::fs;

use panelf::data::{shape_panel, DatasetManifest, ManifestRecord, PageImage, ShapeKind};
use panelf::lora::{LoraSet, DEFAULT_TARGETS};
use panelf::model::{AutoencoderConfig, UNet, UNetConfig};
use panelf::text::{tokenize, Vocab, KEYWORD};
use panelf::train::{
    train_autoencoder, train_base, train_lora, Autoencoder, Checkpoint, Dataset, DiffusionModel, LogRecord,
    ModelBundle, ScheduleConfig, TrainConfig, TrainOutputs,
};
use panelf::Error;
use panelf_core::Rng;

fn small_unet() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        base_channels: 8,
        depth: 1,
        time_embed_dim: 8,
        cond_dim: 8,
        attn_resolutions: BTreeSet::from([1]),
        image_size: 8,
        groups: 2,
    }
}

fn small_model(seed: u64) -> DiffusionModel {
    let schedule = ScheduleConfig {
        steps: 20,
        ..Default::default()
    };
    DiffusionModel::new(small_unet(), schedule, Vocab::default(), None, seed).unwrap()
}

fn panels(n: usize, caption: &str, seed: u64) -> Vec<(PageImage, String)> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| (shape_panel(ShapeKind::ALL[i % 4], 8, &mut rng).unwrap(), caption.to_string()))
        .collect()
}

fn quick(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr0: 1e-2,
        seed,
        ..TrainConfig::with_steps(steps)
    }
}

/// A base trained briefly so its output layer is no longer zero.
fn warm_base() -> DiffusionModel {
    let model = small_model(1);
    let data = Dataset::from_images(&model, &panels(8, "a circle", 2)).unwrap();
    train_base(&model, &data, &quick(30, 3), &TrainOutputs::default()).unwrap();
    model
}

#[test]
fn lora_run_leaves_base_untouched_and_is_deterministic() {
    let model = warm_base();
    let before = model.unet.deep_clone();
    let table_before = model.text.deep_clone();
    let data = Dataset::from_images(&model, &panels(6, "CNH3000", 4)).unwrap();
    let run = |seed| {
        let lora = LoraSet::attach(&model.unet, 4, DEFAULT_TARGETS, seed).unwrap();
        train_lora(&model, &lora, &data, &quick(25, seed), &TrainOutputs::default(), None).unwrap()
    };
    let (a, b) = (run(9), run(9));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.report.losses, b.report.losses);
    assert!(model.unet.bit_equal(&before));
    assert!(model.text.bit_equal(&table_before));

    // Only the keyword row of the text table moves.
    let key = model.vocab.id(KEYWORD);
    let dim = small_unet().cond_dim;
    let old = table_before.get("text.embed.weight").unwrap().to_vec();
    let new = a.text.get("text.embed.weight").unwrap().to_vec();
    for (r, (o, n)) in old.chunks(dim).zip(new.chunks(dim)).enumerate() {
        assert_eq!(o != n, r == key, "row {r}");
    }
}

#[test]
fn removing_adapters_restores_base_outputs() {
    let model = warm_base();
    let data = Dataset::from_images(&model, &panels(4, "CNH3000", 5)).unwrap();
    let lora = LoraSet::attach(&model.unet, 2, DEFAULT_TARGETS, 1).unwrap();
    let run = train_lora(&model, &lora, &data, &quick(20, 1), &TrainOutputs::default(), None).unwrap();
    let tuned = ModelBundle::with_adapters(model.clone(), &run.checkpoint).unwrap();
    let base = tuned.without_adapters();
    let mut rng = Rng::new(2);
    let x = rng.normal_tensor(&[1, 8, 8]).unwrap();
    let cond = base.encode_prompt("a circle").unwrap();
    let plain = UNet::new(&model.unet_config, &model.unet, None).forward(&x, 7, &cond).unwrap();
    let restored = base.predictor().forward(&x, 7, &cond).unwrap();
    let adapted = tuned.predictor().forward(&x, 7, &cond).unwrap();
    assert_eq!(plain.to_vec(), restored.to_vec());
    assert_ne!(plain.to_vec(), adapted.to_vec());
}

#[test]
fn logs_and_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(2);
    let data = Dataset::from_images(&model, &panels(4, "a square", 6)).unwrap();
    let cfg = TrainConfig {
        log_every: 5,
        checkpoint_every: 10,
        ..quick(20, 0)
    };
    let outputs = TrainOutputs {
        log_path: Some(dir.path().join("log.jsonl")),
        checkpoint_dir: Some(dir.path().join("ckpt")),
    };
    let report = train_base(&model, &data, &cfg, &outputs).unwrap();
    let log = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let records: Vec<LogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 5, 10, 15, 19]);
    for r in &records {
        // The log goes through decimal JSON, so allow for its last-digit rounding.
        let want = report.losses[r.step];
        assert!((r.loss - want).abs() <= 1e-12 * want.abs(), "{} vs {want}", r.loss);
        assert!((1..=20).contains(&r.t_sampled));
    }
    let step10 = Checkpoint::load(&dir.path().join("ckpt/step-000010.pnlf")).unwrap();
    assert_eq!(step10.info.step, 10);
    assert!(dir.path().join("ckpt/step-000020.pnlf").exists());
    let final_model = DiffusionModel::from_checkpoint(&model.to_checkpoint(20).unwrap()).unwrap();
    let last = DiffusionModel::load(&dir.path().join("ckpt/step-000020.pnlf")).unwrap();
    assert!(final_model.unet.bit_equal(&last.unet));
}

#[test]
fn divergence_aborts_with_step_and_lr() {
    let model = small_model(3);
    let data = Dataset::from_images(&model, &panels(4, "a cross", 7)).unwrap();
    let cfg = TrainConfig {
        lr0: 1e30,
        ..quick(50, 0)
    };
    match train_base(&model, &data, &cfg, &TrainOutputs::default()) {
        Err(Error::NonFiniteLoss { step, lr }) => {
            assert!(step < 50);
            assert!(lr > 0.0 && lr <= 1e30);
        }
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn empty_inputs_are_config_errors() {
    let model = small_model(4);
    let empty = DatasetManifest { records: vec![] };
    assert!(matches!(Dataset::from_manifest(&model, &empty, ".".as_ref()), Err(Error::Config(_))));
    let data = Dataset { x0: vec![], ids: vec![] };
    assert!(matches!(
        train_base(&model, &data, &quick(5, 0), &TrainOutputs::default()),
        Err(Error::Config(_))
    ));
    let bad = TrainConfig { lr_period: 0, ..quick(5, 0) };
    let data = Dataset::from_images(&model, &panels(1, "a", 0)).unwrap();
    assert!(matches!(train_base(&model, &data, &bad, &TrainOutputs::default()), Err(Error::Config(_))));
}

#[test]
fn wrong_image_size_is_geometry_error() {
    let model = small_model(5);
    let big = vec![(PageImage::gray(16, 16, vec![0; 256]).unwrap(), "a".to_string())];
    assert!(matches!(Dataset::from_images(&model, &big), Err(Error::Geometry(_))));
}

#[test]
fn adapter_file_finds_its_base() {
    let dir = tempfile::tempdir().unwrap();
    let model = warm_base();
    let base_path = dir.path().join("base.pnlf");
    model.save(&base_path, 30).unwrap();

    let mut manifest = DatasetManifest { records: vec![] };
    for (i, (img, caption)) in panels(4, "CNH3000", 8).into_iter().enumerate() {
        let name = format!("p{i}.png");
        img.save_png(&dir.path().join(&name)).unwrap();
        manifest.records.push(ManifestRecord { image: name, caption });
    }
    let data = Dataset::from_manifest(&model, &manifest, dir.path()).unwrap();
    assert_eq!(data.ids[0], tokenize("cnh3000", &model.vocab));
    let lora = LoraSet::attach(&model.unet, 4, DEFAULT_TARGETS, 0).unwrap();
    let run = train_lora(&model, &lora, &data, &quick(10, 0), &TrainOutputs::default(), Some(&base_path)).unwrap();
    let adapter_path = dir.path().join("style.pnlf");
    run.checkpoint.save(&adapter_path).unwrap();

    let loaded = ModelBundle::load(&adapter_path).unwrap();
    assert!(loaded.model.unet.bit_equal(&model.unet));
    let again = loaded.lora.as_ref().unwrap().to_tensors();
    assert!(again.bit_equal(&lora.to_tensors()));

    // An adapter trained on a different architecture is refused with the offending path.
    let other = DiffusionModel::new(
        UNetConfig {
            base_channels: 4,
            ..small_unet()
        },
        ScheduleConfig::default(),
        Vocab::default(),
        None,
        0,
    )
    .unwrap();
    match ModelBundle::with_adapters(other, &run.checkpoint) {
        Err(Error::Compatibility { path, .. }) => assert!(path.contains(".attn."), "{path}"),
        other => panic!("expected a compatibility error, got {other:?}"),
    }
}

#[test]
fn autoencoder_reconstructs_held_out_panels() {
    let mut rng = Rng::new(21);
    let images: Vec<_> = (0..60)
        .map(|i| {
            let p = shape_panel(ShapeKind::ALL[i % 4], 16, &mut rng).unwrap();
            panelf::data::image_to_tensor(&p).unwrap()
        })
        .collect();
    let (train, held) = images.split_at(50);
    let cfg = AutoencoderConfig {
        hidden: 16,
        m: 1,
        ..Default::default()
    };
    let run = train_autoencoder(Autoencoder::new(cfg, 0).unwrap(), train, held, 400, 4, 3e-3, 0).unwrap();
    assert!(run.held_out_mse < 0.05, "held-out mse {}", run.held_out_mse);
    let ckpt = run.autoencoder.to_checkpoint(400).unwrap();
    let back = Autoencoder::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.config, run.autoencoder.config);
    assert!(back.params.bit_equal(&run.autoencoder.params));
}

#[test]
fn latent_mode_trains_on_encoded_panels() {
    let ae = Autoencoder::new(
        AutoencoderConfig {
            hidden: 8,
            m: 1,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let unet = UNetConfig {
        in_channels: 4,
        image_size: 8,
        ..small_unet()
    };
    let model = DiffusionModel::new(unet, ScheduleConfig::default(), Vocab::default(), Some(ae), 0).unwrap();
    let mut rng = Rng::new(1);
    let pairs: Vec<_> = (0..4)
        .map(|i| (shape_panel(ShapeKind::ALL[i], 16, &mut rng).unwrap(), "a".to_string()))
        .collect();
    let data = Dataset::from_images(&model, &pairs).unwrap();
    assert_eq!(data.x0[0].shape(), &[4, 8, 8]);
    train_base(&model, &data, &quick(5, 0), &TrainOutputs::default()).unwrap();
    let back = DiffusionModel::from_checkpoint(&model.to_checkpoint(5).unwrap()).unwrap();
    assert!(back.latent_mode());
    assert!(back.autoencoder.unwrap().params.bit_equal(&model.autoencoder.as_ref().unwrap().params));
}
