use bitturbo_core::codec::{freeze_for_edge, Architecture, CodecModel, Interleaver};
use bitturbo_core::config::{parse_config, ExperimentConfig};
use bitturbo_core::container::{assemble, ModelContainer};
use bitturbo_core::quantize::QuantMode;
use bitturbo_core::train::{Phase, TrainLog};
use bitturbo_core::{Error, Tensor};
use proptest::prelude::*;

fn small() -> Architecture {
    Architecture {
        block_len: 12,
        filters: 4,
        iterations: 2,
        ..Architecture::desk()
    }
}

fn mode() -> impl Strategy<Value = QuantMode> {
    prop_oneof![
        Just(QuantMode::Real),
        Just(QuantMode::Binary),
        Just(QuantMode::Ternary),
        Just(QuantMode::PostQuant(1)),
        Just(QuantMode::PostQuant(2)),
        Just(QuantMode::PostQuant(4)),
        Just(QuantMode::PostQuant(8)),
    ]
}

fn build(mode: QuantMode, seed: u64) -> CodecModel {
    match mode {
        QuantMode::PostQuant(q) => CodecModel::new(small(), QuantMode::Real, seed).unwrap().post_quantize(q).unwrap(),
        m => CodecModel::new(small(), m, seed).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interleaver_round_trip(len in 1usize..300, seed: u64, rows in 1usize..4) {
        let pi = Interleaver::random(len, seed);
        let x = Tensor::new(vec![rows, 1, len], (0..rows * len).map(|i| i as f64).collect()).unwrap();
        let y = pi.interleave(&x).unwrap();
        prop_assert_eq!(pi.deinterleave(&y).unwrap(), x.clone());
        let mut sorted = y.data()[..len].to_vec();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(&sorted[..], &x.data()[..len]);
    }

    #[test]
    fn container_round_trip(mode in mode(), seed in 0u64..1000, with_curve: bool) {
        let model = build(mode, seed);
        let mut c = ModelContainer::single(model);
        if mode.is_bitwise() {
            c.packed = vec![freeze_for_edge(c.model()).unwrap()];
        }
        if with_curve {
            let mut log = TrainLog::default();
            log.push(1, Phase::Encoder, 0.69, 1e-3);
            log.push(1, Phase::Validation, 0.5, 1e-3);
            c.curve = Some(log);
            c.config = Some(ExperimentConfig { seed, ..ExperimentConfig::desk() });
        }
        let bytes = c.to_bytes().unwrap();
        let back = ModelContainer::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn any_flipped_payload_byte_is_caught(pos in 0usize..10_000, bit in 0u8..8) {
        let bytes = ModelContainer::single(build(QuantMode::Binary, 3)).to_bytes().unwrap();
        let header = 12 + 24 * 4;
        let i = header + pos % (bytes.len() - header);
        let mut bad = bytes.clone();
        bad[i] ^= 1 << bit;
        let err = ModelContainer::from_bytes(&bad).unwrap_err();
        prop_assert!(matches!(err, Error::Checksum { .. }), "{:?}", err);
    }
}

#[test]
fn unknown_sections_skipped_unknown_version_rejected() {
    let bytes = ModelContainer::single(build(QuantMode::Ternary, 1)).to_bytes().unwrap();
    let parsed = ModelContainer::from_bytes(&bytes).unwrap();

    let sections = bitturbo_core::container::split(&bytes).unwrap();
    let mut with_extra: Vec<(&[u8; 4], Vec<u8>)> = vec![(b"XTRA", b"future data".to_vec())];
    let owned: Vec<([u8; 4], Vec<u8>)> = sections.iter().map(|(t, p)| (*t, p.to_vec())).collect();
    for (t, p) in &owned {
        with_extra.push((t, p.clone()));
    }
    assert_eq!(ModelContainer::from_bytes(&assemble(&with_extra)).unwrap(), parsed);

    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(ModelContainer::from_bytes(&v2).is_err());
    let mut bad_magic = bytes;
    bad_magic[0] = b'X';
    assert!(ModelContainer::from_bytes(&bad_magic).is_err());
}

#[test]
fn config_text_round_trip() {
    let c = parse_config("profile = desk\nmode = binary\nseed = 7\nsnr_start = -1.5\nmembers = 3\n").unwrap();
    assert_eq!(parse_config(&c.serialize()).unwrap(), c);
    assert_eq!(c.serialize(), parse_config(&c.serialize()).unwrap().serialize());
}

#[test]
fn training_csv_round_trip() {
    let mut log = TrainLog::default();
    log.push(1, Phase::Encoder, 0.6931471805599453, 1e-3);
    log.push(1, Phase::Decoder, 0.5, 1e-3);
    log.push(1, Phase::Validation, 0.25, 5e-4);
    let text = log.to_csv();
    assert!(text.starts_with("epoch,phase,loss,lr\n"));
    assert_eq!(TrainLog::parse_csv(&text).unwrap(), log);
}
