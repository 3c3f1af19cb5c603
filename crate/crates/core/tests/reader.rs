mod common;

use std::collections::BTreeSet;

use common::Env;
use taskstream::converter::ConverterSpec;
use taskstream::reader::{Batch, Dataset, ReaderOptions};
use taskstream::registry::Registry;
use taskstream::Error;

fn open(env: &Env, name: &str, r: u32, num_readers: u32, b: usize) -> Dataset {
    Dataset::open(&env.registry, &env.cache_root(), name, ReaderOptions::new("train", r, num_readers, b).seed(9))
        .unwrap()
}

fn take(ds: &mut Dataset, steps: usize) -> Vec<Batch> {
    (0..steps).map(|_| ds.next_batch().unwrap()).collect()
}

#[test]
fn seek_matches_fresh_stream() {
    // N=16, F=4, R=2, B=2: 8 examples per reader-epoch, 4 steps per epoch.
    let env = Env::new(16, 4);
    env.build("nums", "train", 3, 4);
    for r in 0..2 {
        let fresh = take(&mut open(&env, "nums", r, 2, 2), 22);
        for t in 0..20u64 {
            let mut ds = open(&env, "nums", r, 2, 2);
            ds.seek_to_step(t);
            assert_eq!(ds.payload_reads(), 0);
            let got = take(&mut ds, 2);
            assert_eq!(got[0].step, t);
            assert_eq!(got[0].to_bytes(), fresh[t as usize].to_bytes(), "reader {r} step {t}");
            assert_eq!(got[1].to_bytes(), fresh[t as usize + 1].to_bytes());
        }
    }
}

#[test]
fn batches_straddle_epochs() {
    let env = Env::new(16, 4);
    env.build("nums", "train", 3, 4);
    let mut ds = open(&env, "nums", 1, 2, 3);
    let items: Vec<_> = take(&mut ds, 8).into_iter().flat_map(|b| b.items).collect();
    for (j, item) in items.iter().enumerate() {
        assert_eq!(item.epoch, j as u64 / 8);
    }
    // Batch 2 holds slots 6, 7 of epoch 0 and slot 0 of epoch 1.
    for epoch in 0..3 {
        let set: BTreeSet<u64> = items[epoch * 8..epoch * 8 + 8].iter().map(|i| i.cache_index).collect();
        let expected: BTreeSet<u64> = (0..16).filter(|i| (i % 4) % 2 == 1).collect();
        assert_eq!(set, expected);
    }
    // Epoch 0 is ascending; later epochs are reshuffled.
    let e0: Vec<u64> = items[..8].iter().map(|i| i.cache_index).collect();
    assert_eq!(e0, vec![1, 3, 5, 7, 9, 11, 13, 15]);
}

#[test]
fn streams_reproducible_across_epochs() {
    let env = Env::new(16, 10);
    env.build("nums", "train", 3, 4);
    env.build("pairs", "train", 3, 2);
    for name in ["nums", "pairs", "mix"] {
        let a: Vec<Vec<u8>> = take(&mut open(&env, name, 0, 2, 2), 12).iter().map(Batch::to_bytes).collect();
        let b: Vec<Vec<u8>> = take(&mut open(&env, name, 0, 2, 2), 12).iter().map(Batch::to_bytes).collect();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn mixture_follows_schedule_and_seeks() {
    let env = Env::new(20, 30);
    env.build("nums", "train", 1, 2);
    env.build("pairs", "train", 2, 3);
    let mut ds = open(&env, "mix", 0, 1, 4);
    let fresh = take(&mut ds, 30);
    let mut counts = [0u64; 2];
    for (p, item) in fresh.iter().flat_map(|b| &b.items).enumerate() {
        counts[(item.task == "pairs") as usize] += 1;
        let p = p as f64 + 1.0;
        assert!((counts[0] as f64 - 0.25 * p).abs() <= 1.0);
        assert!((counts[1] as f64 - 0.75 * p).abs() <= 1.0);
    }
    for t in [0u64, 1, 7, 13, 25] {
        let mut ds = open(&env, "mix", 0, 1, 4);
        ds.seek_to_step(t);
        assert_eq!(ds.payload_reads(), 0);
        assert_eq!(ds.next_batch().unwrap().to_bytes(), fresh[t as usize].to_bytes());
    }
}

#[test]
fn skip_list_drops_steps_without_shifting_others() {
    let env = Env::new(16, 4);
    env.build("nums", "train", 3, 4);
    let fresh = take(&mut open(&env, "nums", 0, 1, 2), 6);
    let mut ds = Dataset::open(
        &env.registry,
        &env.cache_root(),
        "nums",
        ReaderOptions::new("train", 0, 1, 2).seed(9).skip_steps([1, 3]),
    )
    .unwrap();
    let got = take(&mut ds, 3);
    assert_eq!(got.iter().map(|b| b.step).collect::<Vec<_>>(), vec![0, 2, 4]);
    for b in &got {
        assert_eq!(b.to_bytes(), fresh[b.step as usize].to_bytes());
    }
}

#[test]
fn converter_applied_in_stream() {
    let env = Env::new(4, 10);
    env.build("pairs", "train", 3, 2);
    let mut ds = Dataset::open(
        &env.registry,
        &env.cache_root(),
        "pairs",
        ReaderOptions::new("train", 0, 1, 5).converter(ConverterSpec::enc_dec(12, 12)),
    )
    .unwrap();
    for item in ds.next_batch().unwrap().items {
        let names: Vec<&str> = item.features.keys().map(String::as_str).collect();
        assert_eq!(
            names,
            ["decoder_input_tokens", "decoder_loss_weights", "decoder_target_tokens", "encoder_input_tokens"]
        );
        assert!(item.features.values().all(|v| v.len() == 12));
    }
}

#[test]
fn open_errors() {
    let env = Env::new(16, 4);
    env.build("nums", "train", 3, 4);
    let opts = || ReaderOptions::new("train", 0, 3, 1);
    assert!(matches!(
        Dataset::open(&env.registry, &env.cache_root(), "nums", opts()),
        Err(Error::IndivisibleReaders { num_shards: 4, num_readers: 3 })
    ));
    assert!(matches!(
        Dataset::open(&env.registry, &env.cache_root(), "pairs", ReaderOptions::new("train", 0, 1, 1)),
        Err(Error::CacheMissing(_))
    ));
    // The cache was built with append_eos; a spec without it must not read it.
    let changed =
        common::CONFIG.replacen("[[tasks.nums.preprocessors]]\nop = \"append_eos\"\nfeatures = [\"targets\"]\n", "", 1);
    assert_ne!(changed, common::CONFIG);
    let other = Registry::from_config_str(&changed, env.dir.path()).unwrap();
    assert!(matches!(
        Dataset::open(&other, &env.cache_root(), "nums", ReaderOptions::new("train", 0, 1, 1)),
        Err(Error::FingerprintMismatch { .. })
    ));
}
