use std::fs;

use vlamd_core::checkpoint::{self, BLOB, MANIFEST};
use vlamd_core::selfcheck::{random_images, tiny_config};
use vlamd_core::trainer::Trainer;
use vlamd_core::{Error, Vlamd};

fn trained() -> Trainer {
    let cfg = tiny_config();
    let mut tr = Trainer::new(Vlamd::new(&cfg, 11).unwrap());
    let images = random_images(12, 2, cfg.data.height, cfg.data.width);
    let words = vec![tr.model.vocab.encode("abc").unwrap(), tr.model.vocab.encode("g").unwrap()];
    for _ in 0..2 {
        tr.train_step(&images, &words).unwrap();
    }
    tr
}

#[test]
fn save_load_save_is_byte_identical() {
    let tr = trained();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    checkpoint::save(a.path(), &tr.model, Some(&tr.optim), tr.step, 11).unwrap();
    let ck = checkpoint::load(a.path()).unwrap();
    assert_eq!(ck.step, 2);
    assert_eq!(ck.seed, 11);
    for ((na, ta), (nb, tb)) in tr.model.store.iter().zip(ck.model.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
    let optim = ck.optim.as_ref().unwrap();
    assert_eq!(optim.t, tr.optim.t);
    assert_eq!(optim.m, tr.optim.m);
    assert_eq!(optim.v, tr.optim.v);
    checkpoint::save(b.path(), &ck.model, ck.optim.as_ref(), ck.step, ck.seed).unwrap();
    for f in [MANIFEST, BLOB] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    assert_eq!(checkpoint::hash(a.path()).unwrap(), checkpoint::hash(b.path()).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = tiny_config();
    let images = random_images(13, 2, cfg.data.height, cfg.data.width);
    let mut straight = Trainer::new(Vlamd::new(&cfg, 14).unwrap());
    let words = vec![straight.model.vocab.encode("fed").unwrap(), straight.model.vocab.encode("ba").unwrap()];
    for _ in 0..3 {
        straight.train_step(&images, &words).unwrap();
    }
    let mut first = Trainer::new(Vlamd::new(&cfg, 14).unwrap());
    first.train_step(&images, &words).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &first.model, Some(&first.optim), first.step, 14).unwrap();
    let ck = checkpoint::load(dir.path()).unwrap();
    let mut resumed = Trainer::new(ck.model);
    resumed.optim = ck.optim.unwrap();
    resumed.step = ck.step;
    for _ in 0..2 {
        resumed.train_step(&images, &words).unwrap();
    }
    for ((_, a), (_, b)) in straight.model.store.iter().zip(resumed.model.store.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn corrupted_blob_is_rejected() {
    let tr = trained();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &tr.model, None, tr.step, 11).unwrap();
    let p = dir.path().join(BLOB);
    let mut bytes = fs::read(&p).unwrap();
    bytes[5] ^= 1;
    fs::write(&p, bytes).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn shape_mismatch_is_rejected() {
    let tr = trained();
    let (manifest, blob) = checkpoint::encode(&tr.model, None, 0, 11);
    let mut cfg = tiny_config();
    cfg.set("vlad.hidden", "8").unwrap();
    let other = Vlamd::new(&cfg, 11).unwrap();
    let (other_manifest, _) = checkpoint::encode(&other, None, 0, 11);
    let config_of = |m: &str| m.split("[tensors]").next().unwrap().split("[config]").nth(1).unwrap().to_string();
    let swapped = manifest.replace(&config_of(&manifest), &config_of(&other_manifest));
    assert!(matches!(checkpoint::decode(&swapped, &blob), Err(Error::Checkpoint(_))));
    assert!(checkpoint::decode(&manifest, &blob).is_ok());
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Io { .. })));
}
