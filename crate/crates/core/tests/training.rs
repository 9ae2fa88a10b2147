use std::fs;
use std::path::Path;

use dfen_core::checkpoint::{self, MANIFEST};
use dfen_core::config::TrainConfig;
use dfen_core::data::{gen_synthetic, select, Split};
use dfen_core::parallel::Execution;
use dfen_core::train::{evaluate, run_eval, run_train, train_model, CHECKPOINT_DIR, STEP_LOG, TIMING_LOG, TRAIN_LOG};
use dfen_core::{Binder, Tape};

fn tiny(extra: &[&str]) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_overrides(&[
        "image_size=16",
        "base_channels=8",
        "heads=2",
        "synthetic_n=8",
        "batch_size=3",
        "epochs=2",
        "execution=sequential",
    ])
    .unwrap();
    c.apply_overrides(extra).unwrap();
    c
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = tiny(&[]);
    run_train(&config, a.path()).unwrap();
    run_train(&config, b.path()).unwrap();
    for log in [TRAIN_LOG, STEP_LOG] {
        assert_eq!(fs::read(a.path().join(log)).unwrap(), fs::read(b.path().join(log)).unwrap(), "{log}");
    }
    assert_eq!(files(&a.path().join(CHECKPOINT_DIR)), files(&b.path().join(CHECKPOINT_DIR)));
    assert!(a.path().join(TIMING_LOG).exists());
}

#[test]
fn sequential_and_parallel_training_agree() {
    let samples = gen_synthetic(&tiny(&[]).synthetic, Execution::Sequential).unwrap();
    let seq = train_model(&tiny(&[]), &samples, None).unwrap();
    let par = train_model(&tiny(&["execution=parallel"]), &samples, None).unwrap();
    for ((_, name, x), (_, _, y)) in seq.store.iter().zip(par.store.iter()) {
        assert_eq!(x, y, "{name}");
    }
    assert_eq!(seq.steps, par.steps);
}

#[test]
fn different_seeds_diverge() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_train(&tiny(&[]), a.path()).unwrap();
    run_train(&tiny(&["seed=1"]), b.path()).unwrap();
    let manifest = |d: &Path| fs::read_to_string(d.join(CHECKPOINT_DIR).join(MANIFEST)).unwrap();
    assert_ne!(manifest(a.path()), manifest(b.path()));
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(&["concat_set=f23", "clfem=off"]);
    let outcome = run_train(&config, dir.path()).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_DIR);
    let (saved, model, store) = checkpoint::load(&ckpt).unwrap();
    assert_eq!(saved, config);
    for ((_, name, x), (_, _, y)) in outcome.store.iter().zip(store.iter()) {
        assert_eq!(x, y, "{name}");
    }

    let samples = gen_synthetic(&config.synthetic, Execution::Sequential).unwrap();
    let image = samples[0].image.clone();
    let logits = |m: &dfen_core::model::Dfen, s: &dfen_core::ParamStore| {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, s);
        m.forward(&b, tape.constant(image.clone())).unwrap().value().as_ref().clone()
    };
    assert_eq!(logits(&outcome.model, &outcome.store), logits(&model, &store));

    let test = select(&samples, Split::Test);
    let direct = evaluate(&model, &store, &test, config.loss, config.execution).unwrap();
    assert_eq!(run_eval(&config, &ckpt).unwrap(), direct);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    run_train(&tiny(&["epochs=1"]), dir.path()).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_DIR);
    let manifest = fs::read_to_string(ckpt.join(MANIFEST)).unwrap();

    let mut lines: Vec<&str> = manifest.lines().collect();
    let dropped = lines.remove(3);
    fs::write(ckpt.join(MANIFEST), lines.join("\n")).unwrap();
    let err = checkpoint::load(&ckpt).unwrap_err().to_string();
    assert!(err.contains("missing"), "{err}");

    lines.insert(3, lines[2]);
    fs::write(ckpt.join(MANIFEST), lines.join("\n")).unwrap();
    assert!(checkpoint::load(&ckpt).unwrap_err().to_string().contains("twice"));

    lines[3] = dropped;
    fs::write(ckpt.join(MANIFEST), lines.join("\n")).unwrap();
    checkpoint::load(&ckpt).unwrap();

    let name = dropped.split_whitespace().nth(2).unwrap();
    let mut bytes = fs::read(ckpt.join(name)).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    fs::write(ckpt.join(name), bytes).unwrap();
    assert!(checkpoint::load(&ckpt).unwrap_err().to_string().contains(name));

    fs::write(ckpt.join(MANIFEST), manifest.replace("concat_order f1 f2 f3", "concat_order f3")).unwrap();
    assert!(checkpoint::load(&ckpt).is_err());
}

#[test]
fn training_rejects_bad_inputs() {
    let samples = gen_synthetic(&tiny(&[]).synthetic, Execution::Sequential).unwrap();
    assert!(train_model(&tiny(&["image_size=32"]), &samples, None).is_err());
    let no_train = tiny(&["train_frac=0", "val_frac=0.5"]);
    let samples = gen_synthetic(&no_train.synthetic, Execution::Sequential).unwrap();
    assert!(train_model(&no_train, &samples, None).unwrap_err().to_string().contains("no training samples"));
}
