use mamcl_core::io_store::{
    bundle_to_examples, examples_to_bundle, parse_sidecar, read_bundle, read_params, read_sidecar,
    read_store, sidecar_to_string, write_bundle, write_params, write_sidecar, write_store, Dtype,
    EmbeddingStore, Role, SidecarRecord,
};
use mamcl_core::{generate, EncoderParams, Error, ModalitySignature, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn hundred_random_embeddings_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.uemb");
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let rows: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            (0..24)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32 as f64)
                .collect()
        })
        .collect();
    let store = EmbeddingStore::from_rows(24, Dtype::F32, &rows).unwrap();
    write_store(&path, &store).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 21 + 100 * 24 * 4);
    let back = read_store(&path).unwrap();
    assert_eq!(back, store);
    let max_diff = back
        .rows()
        .zip(&rows)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    assert_eq!(max_diff, 0.0);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn f64_store_is_bitwise_and_f32_store_rounds() {
    let rows = vec![vec![0.1f64, -1.0 / 3.0, 1e-300]];
    let s64 = EmbeddingStore::from_rows(3, Dtype::F64, &rows).unwrap();
    assert_eq!(
        EmbeddingStore::from_bytes(&s64.to_bytes()).unwrap().row(0),
        rows[0].as_slice()
    );
    let s32 = EmbeddingStore::from_rows(3, Dtype::F32, &rows).unwrap();
    let back = EmbeddingStore::from_bytes(&s32.to_bytes()).unwrap();
    assert_eq!(back.row(0)[0], 0.1f32 as f64);
}

fn record(i: u64, role: Role) -> SidecarRecord {
    SidecarRecord {
        id: format!("item-{i}"),
        row: i,
        signature: if i.is_multiple_of(2) {
            ModalitySignature::TEXT
        } else {
            "text+video".parse().unwrap()
        },
        role,
        positive_id: (role == Role::Query).then(|| format!("item-{}", i + 1)),
        hard_negative_ids: (0..i % 3).map(|k| format!("neg-{i}-{k}")).collect(),
    }
}

#[test]
fn sidecar_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let records: Vec<SidecarRecord> = (0..10)
        .map(|i| {
            record(
                i,
                if i % 2 == 0 {
                    Role::Query
                } else {
                    Role::Candidate
                },
            )
        })
        .collect();
    write_sidecar(&path, &records).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.contains(r#""signature":"text+video""#));
    let back = read_sidecar(&path, 10).unwrap();
    assert_eq!(back, records);
    write_sidecar(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(matches!(
        read_sidecar(&path, 9),
        Err(Error::SidecarRowOutOfRange { .. })
    ));
}

#[test]
fn bundles_carry_training_examples() {
    let data = generate(&SynthConfig {
        n_concepts: 8,
        latent_dim: 4,
        hard_negative_count: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    // f64 so the features come back bitwise.
    let (store, records) = examples_to_bundle(&data.examples, Dtype::F64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("train");
    write_bundle(&base, &store, &records).unwrap();
    let (s2, r2) = read_bundle(&base).unwrap();
    assert_eq!(bundle_to_examples(&s2, &r2).unwrap(), data.examples);
}

#[test]
fn encoder_params_round_trip_bitwise() {
    let sigs = [
        ModalitySignature::TEXT,
        ModalitySignature::IMAGE,
        "image+video".parse().unwrap(),
    ];
    let params = EncoderParams::init(7, 3, &sigs, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("params");
    write_params(&base, &params, 42).unwrap();
    let (back, header) = read_params(&base).unwrap();
    assert_eq!(back, params);
    assert_eq!(header.seed, 42);
    assert_eq!((header.f, header.d), (7, 3));
}

#[test]
fn corrupt_store_files_fail_cleanly() {
    let store = EmbeddingStore::from_rows(2, Dtype::F32, &[vec![1.0, 2.0]]).unwrap();
    let good = store.to_bytes();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(
        EmbeddingStore::from_bytes(&bad),
        Err(Error::BadMagic(_))
    ));
    assert!(matches!(
        EmbeddingStore::from_bytes(&good[..good.len() - 1]),
        Err(Error::TruncatedPayload { .. })
    ));
    let mut long = good.clone();
    long.push(0);
    assert!(EmbeddingStore::from_bytes(&long).is_err());
    assert!(parse_sidecar("{not json}\n", 1).is_err());
}

proptest! {
    #[test]
    fn any_f32_payload_round_trips(dim in 1usize..9, rows in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 8), 0..10)) {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r[..dim].iter().map(|&x| x as f64).collect()).collect();
        let store = EmbeddingStore::from_rows(dim, Dtype::F32, &rows).unwrap();
        let back = EmbeddingStore::from_bytes(&store.to_bytes()).unwrap();
        prop_assert_eq!(back.count(), rows.len());
        for (a, b) in back.rows().zip(&rows) {
            prop_assert_eq!(a, b.as_slice());
        }
    }

    #[test]
    fn sidecar_text_is_stable(n in 0u64..12) {
        let recs: Vec<SidecarRecord> = (0..n).map(|i| record(i, Role::Candidate)).collect();
        let text = sidecar_to_string(&recs).unwrap();
        let back = parse_sidecar(&text, n).unwrap();
        prop_assert_eq!(sidecar_to_string(&back).unwrap(), text);
    }
}
