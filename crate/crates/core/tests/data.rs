//! Dataset formats and the synthetic generator's guarantees.

use encnet::data::cifar::{
    encode_records, ingest_cifar10, parse_records, read_records, write_records, CifarRecord, Standardize, PIXELS, RECORD_BYTES,
    TEST_FILE, TRAIN_FILES,
};
use encnet::data::synth::{self, context_accuracy_ceiling, SynthSpec, NO_SHAPE};
use encnet::nn::checkpoint::{load_store, save_store, Container};
use encnet::nn::ParamStore;
use encnet::{Error, Tensor};
use std::collections::BTreeMap;

fn record(label: u8, salt: u8) -> CifarRecord {
    CifarRecord { label, pixels: (0..PIXELS).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect() }
}

#[test]
fn cifar_files_round_trip_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<CifarRecord> = (0..3).map(|i| record(i * 3, i)).collect();
    let path = dir.path().join("one.bin");
    write_records(&path, &recs).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 3 * RECORD_BYTES);
    assert_eq!(read_records(&path).unwrap(), recs);
}

#[test]
fn cifar_two_records_and_standardization() {
    let recs = parse_records(&encode_records(&[record(0, 1), record(9, 2)]).unwrap(), "mem").unwrap();
    assert_eq!(recs.len(), 2);
    let norm = Standardize::default();
    let s = recs[1].to_sample::<f64>(&norm);
    assert_eq!(s.image.shape(), &[3, 32, 32]);
    assert_eq!(s.label, 9);
    // pixel (c=2, y=5, x=7) is byte 2*1024 + 5*32 + 7 of the planes
    let byte = recs[1].pixels[2 * 1024 + 5 * 32 + 7] as f64;
    assert!((s.image.at(&[2, 5, 7]) - (byte / 255.0 - norm.mean[2]) / norm.std[2]).abs() < 1e-12);
}

#[test]
fn truncated_cifar_file_names_lengths_and_offset() {
    let mut bytes = encode_records(&[record(1, 0), record(2, 0)]).unwrap();
    bytes.truncate(RECORD_BYTES + 100);
    let msg = parse_records(&bytes, "batch").unwrap_err().to_string();
    assert!(msg.contains(&(RECORD_BYTES + 100).to_string()), "{msg}");
    assert!(msg.contains(&(2 * RECORD_BYTES).to_string()), "{msg}");
    assert!(msg.contains(&format!("offset {RECORD_BYTES}")), "{msg}");
}

#[test]
fn cifar_directory_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    for (i, f) in TRAIN_FILES.iter().enumerate() {
        write_records(&dir.path().join(f), &[record(i as u8, 0), record(9, 1)]).unwrap();
    }
    write_records(&dir.path().join(TEST_FILE), &[record(4, 2)]).unwrap();
    let (train, test) = ingest_cifar10(dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (2 * TRAIN_FILES.len(), 1));
    std::fs::remove_file(dir.path().join(TEST_FILE)).unwrap();
    assert!(matches!(ingest_cifar10(dir.path()), Err(Error::Io(_))));
}

#[test]
fn synth_same_seed_writes_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { train: 12, val: 4, seed: 9, ..SynthSpec::default() };
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    synth::write_dataset(&synth::generate(&spec).unwrap(), &a).unwrap();
    synth::write_dataset(&synth::generate(&spec).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = SynthSpec { seed: 10, ..spec };
    synth::write_dataset(&synth::generate(&other).unwrap(), &b).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn synth_audit_balance_and_oracle_gap() {
    let data = synth::generate(&SynthSpec { train: 400, val: 100, seed: 1, ..SynthSpec::default() }).unwrap();
    let audit = synth::audit(&data).unwrap();
    assert!(audit.pair_balance.iter().all(|&b| b >= 0.8), "{:?}", audit.pair_balance);
    assert!(audit.oracle_with_context > 0.95);
    assert!(audit.oracle_without_context <= 0.55);
}

/// The documented ceiling is the accuracy of the optimal test on a window of
/// pure background; measure that test on generated images.
#[test]
fn local_window_context_accuracy_matches_ceiling() {
    let spec = SynthSpec { train: 600, val: 0, seed: 2, ..SynthSpec::default() };
    let data = synth::generate(&spec).unwrap();
    let dir = [1.0f64, -1.0, 1.0].map(|v| v / 3f64.sqrt());
    let side = 8;
    let (mut right, mut total) = (0usize, 0usize);
    for it in &data.train {
        let s = spec.size;
        for y0 in (0..s - side).step_by(side) {
            for x0 in (0..s - side).step_by(side) {
                let inside = |y: usize, x: usize| it.shapes[y * s + x] == NO_SHAPE;
                if !(y0..y0 + side).all(|y| (x0..x0 + side).all(|x| inside(y, x))) {
                    continue;
                }
                let mut proj = 0.0;
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        proj += (0..3).map(|c| dir[c] * it.sample.image.at(&[c, y, x]) as f64).sum::<f64>();
                    }
                }
                let guess = if proj > 0.0 { 0 } else { 1 };
                right += usize::from(guess == it.context);
                total += 1;
            }
        }
    }
    let empirical = right as f64 / total as f64;
    let ceiling = context_accuracy_ceiling(&spec, side * side);
    assert!(total > 5000, "{total} windows");
    assert!((empirical - ceiling).abs() < 0.02, "empirical {empirical} vs ceiling {ceiling}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::<f32>::new();
    store.add("a.weight", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]));
    let stats = store.add_stats("a.bn", 2);
    store.stats_mut(stats).mean = vec![0.5, -0.5];
    let meta = BTreeMap::from([("note".to_string(), "x".to_string())]);
    let path = dir.path().join("c.bin");
    save_store(&store, &meta, &path).unwrap();

    let mut fresh = ParamStore::<f32>::new();
    fresh.add("a.weight", Tensor::zeros(&[2, 2]));
    fresh.add_stats("a.bn", 2);
    assert_eq!(load_store(&mut fresh, &path).unwrap(), meta);
    assert_eq!(fresh.params()[0].value, store.params()[0].value);
    assert_eq!(fresh.running_stats()[0].1, store.running_stats()[0].1);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    let good = std::fs::read(&path).unwrap();
    assert!(Container::from_bytes(&good[..good.len() - 1]).is_err());
}
