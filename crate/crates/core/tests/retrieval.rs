mod common;

use common::{brute_force, entry, unit_vector};
use ids_core::library::LibraryError;
use ids_core::{ExperienceLibrary, FlowEmbedding, RetrievalResult};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: [&str; 4] = ["Benign", "DDoS", "DoS", "Reconnaissance"];

fn filled(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (ExperienceLibrary, Vec<FlowEmbedding>) {
    let mut lib = ExperienceLibrary::new(dim, "test");
    let mut keys = Vec::with_capacity(n);
    for i in 0..n {
        let k = unit_vector(rng, dim);
        lib.insert(entry(k.clone(), i as u64, CLASSES[i % 4])).unwrap();
        keys.push(k);
    }
    (lib, keys)
}

#[test]
fn matches_brute_force_with_duplicates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut lib, mut keys) = filled(&mut rng, 200, 32);
    // Exact duplicates force ties; the earliest id must win.
    for i in 0..20 {
        let k = keys[i * 7].clone();
        lib.insert(entry(k.clone(), 200 + i as u64, "DoS")).unwrap();
        keys.push(k);
    }
    for t in 0..100 {
        let q = if t % 3 == 0 { keys[t].clone() } else { unit_vector(&mut rng, 32) };
        let (idx, sim) = brute_force(&keys, &q).unwrap();
        for tau in [-1.0, 0.0, 0.5, 0.9] {
            match lib.retrieve(&q, tau).unwrap() {
                RetrievalResult::Hit { entry, similarity } => {
                    assert!(sim >= tau);
                    assert_eq!(entry.entry_id, idx as u64);
                    assert_eq!(similarity, sim);
                }
                RetrievalResult::NoContext => assert!(sim < tau),
            }
        }
    }
}

#[test]
fn large_library_uses_same_answers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (lib, keys) = filled(&mut rng, 9000, 16);
    for _ in 0..20 {
        let q = unit_vector(&mut rng, 16);
        let (idx, sim) = brute_force(&keys, &q).unwrap();
        let hit = lib.retrieve(&q, -1.0).unwrap();
        assert_eq!(hit.entry().unwrap().entry_id, idx as u64);
        assert_eq!(hit.similarity(), Some(sim));
    }
}

#[test]
fn threshold_flips_at_the_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(1..60);
        let (lib, keys) = filled(&mut rng, n, 24);
        let q = unit_vector(&mut rng, 24);
        let (_, max) = brute_force(&keys, &q).unwrap();
        assert!(lib.retrieve(&q, max).unwrap().is_hit());
        assert!(lib.retrieve(&q, max - 1e-9).unwrap().is_hit());
        if max + 1e-9 <= 1.0 {
            assert!(!lib.retrieve(&q, max + 1e-9).unwrap().is_hit());
        }
    }
}

#[test]
fn empty_and_sentinel_queries() {
    let lib = ExperienceLibrary::new(8, "test");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(lib.retrieve(&unit_vector(&mut rng, 8), -1.0).unwrap(), RetrievalResult::NoContext);
    let (lib, _) = filled(&mut rng, 5, 8);
    assert_eq!(lib.retrieve(&FlowEmbedding::zero(8), -1.0).unwrap(), RetrievalResult::NoContext);
    assert!(matches!(lib.retrieve(&unit_vector(&mut rng, 9), 0.5), Err(LibraryError::DimensionMismatch { .. })));
    assert!(matches!(lib.retrieve(&unit_vector(&mut rng, 8), 1.5), Err(LibraryError::InvalidThreshold(_))));
}

#[derive(Clone, Debug)]
enum Op {
    Insert(u64),
    Retrieve(u64, f64),
    BadInsert,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => any::<u64>().prop_map(Op::Insert),
        4 => (any::<u64>(), -1.0f64..=1.0).prop_map(|(s, t)| Op::Retrieve(s, t)),
        1 => Just(Op::BadInsert),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Size never decreases and entries, once written, never change.
    #[test]
    fn append_only(ops in prop::collection::vec(op(), 1..300)) {
        let dim = 12;
        let mut lib = ExperienceLibrary::new(dim, "test");
        let mut snapshot = Vec::new();
        let mut seq = 0u64;
        for op in ops {
            let before = lib.len();
            match op {
                Op::Insert(s) => {
                    let k = unit_vector(&mut ChaCha8Rng::seed_from_u64(s), dim);
                    lib.insert(entry(k, seq, CLASSES[(s % 4) as usize])).unwrap();
                    seq += 1;
                }
                Op::Retrieve(s, tau) => {
                    let _ = lib.retrieve(&unit_vector(&mut ChaCha8Rng::seed_from_u64(s), dim), tau).unwrap();
                }
                Op::BadInsert => {
                    let wrong_dim = unit_vector(&mut ChaCha8Rng::seed_from_u64(seq), dim + 1);
                    prop_assert!(lib.insert(entry(wrong_dim, seq, "DoS")).is_err());
                }
            }
            prop_assert!(lib.len() >= before);
            for (i, e) in snapshot.iter().enumerate() {
                prop_assert_eq!(&lib.get(i as u64).unwrap(), e);
            }
            while snapshot.len() < lib.len() {
                snapshot.push(lib.get(snapshot.len() as u64).unwrap());
            }
        }
    }
}

#[test]
fn sequence_regression_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut lib = ExperienceLibrary::new(8, "test");
    lib.insert(entry(unit_vector(&mut rng, 8), 10, "DoS")).unwrap();
    assert!(matches!(
        lib.insert(entry(unit_vector(&mut rng, 8), 9, "DoS")),
        Err(LibraryError::SequenceRegression { last: 10, found: 9 })
    ));
    assert_eq!(lib.len(), 1);
}

#[test]
fn persistence_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lib.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (lib, _) = filled(&mut rng, 300, 64);
    lib.save(&path).unwrap();
    let back = ExperienceLibrary::load(&path).unwrap();
    assert_eq!(back.len(), lib.len());
    for i in 0..lib.len() as u64 {
        let (a, b) = (lib.key(i).unwrap(), back.key(i).unwrap());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(lib.get(i), back.get(i));
    }
    for _ in 0..50 {
        let q = unit_vector(&mut rng, 64);
        assert_eq!(lib.retrieve(&q, 0.0).unwrap(), back.retrieve(&q, 0.0).unwrap());
    }
    assert_eq!(lib.checksum(), back.checksum());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(ExperienceLibrary::load(&path), Err(LibraryError::ChecksumFailure)));
}

#[test]
fn read_only_library_rejects_inserts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lib.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (lib, _) = filled(&mut rng, 3, 8);
    lib.save(&path).unwrap();
    let mut ro = ExperienceLibrary::load_read_only(&path).unwrap();
    assert!(matches!(ro.insert(entry(unit_vector(&mut rng, 8), 99, "DoS")), Err(LibraryError::ReadOnlyLibrary)));
}
