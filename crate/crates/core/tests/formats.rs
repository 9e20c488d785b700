use std::fs;

use proptest::prelude::*;
use viblstm::data::{generate_synthetic, read_seqf, read_seqf_bytes, write_seqf, write_seqf_bytes, SynthSpec};
use viblstm::network::{load_model, read_model, save_model, write_model, Dims};
use viblstm::prune::{apply_plan, make_plan, HiddenRule};
use viblstm::{initialize_model, Error, InitConfig, SeededRng};

fn model(seed: u64, d: usize, n: usize) -> viblstm::SequenceClassifier {
    let init = InitConfig {
        mu_jitter: 0.5,
        sigma_init: 0.3,
        ..Default::default()
    };
    initialize_model(Dims::new(d, n, 3, 4).unwrap(), &init, true, true, &mut SeededRng::new(seed))
}

#[test]
fn files_round_trip_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let m = model(1, 7, 5);
    let path = tmp.path().join("m.vibl");
    save_model(&m, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"VIBL");
    assert_eq!(write_model(&load_model(&path).unwrap()).unwrap(), bytes);

    let spec: SynthSpec = "d=7,T=4,a=3,r=2,n=5,seed=2".parse().unwrap();
    let ds = generate_synthetic(&spec, &mut SeededRng::new(2)).unwrap();
    let p = tmp.path().join("d.seqf");
    write_seqf(&ds, &p).unwrap();
    let back = read_seqf(&p).unwrap();
    assert_eq!(write_seqf_bytes(&back).unwrap(), fs::read(&p).unwrap());
    assert_eq!(back.len(), 15);
}

#[test]
fn compact_models_round_trip_with_their_selection() {
    let mut m = model(4, 9, 6);
    m.feature_gate.as_mut().unwrap().mu[2] = 0.0;
    let plan = make_plan(&m, 1e-3, 1e-3, HiddenRule::AnyOfIgo).unwrap();
    let compact = apply_plan(&m, &plan).unwrap();
    assert!(compact.input_select.is_some());
    let bytes = write_model(&compact).unwrap();
    let back = read_model(&bytes).unwrap();
    assert!(back.is_compact());
    assert_eq!(back.input_select, compact.input_select);
    assert_eq!(write_model(&back).unwrap(), bytes);
}

#[test]
fn missing_files_are_io_errors() {
    assert!(matches!(load_model("/definitely/missing.vibl"), Err(Error::Io { .. })));
    assert!(matches!(read_seqf("/definitely/missing.seqf"), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_truncation_of_a_model_is_rejected(seed in 0u64..1000, frac in 0.0f64..1.0) {
        let bytes = write_model(&model(seed, 3, 2)).unwrap();
        let cut = ((bytes.len() as f64) * frac) as usize;
        let r = read_model(&bytes[..cut]);
        prop_assert!(matches!(r, Err(Error::Format { .. })), "{:?}", r.err());
    }

    #[test]
    fn any_truncation_of_a_seqf_is_rejected(seed in 0u64..1000, frac in 0.0f64..1.0) {
        let spec = SynthSpec { d: 3, t: 2, a: 2, r: 1, per_class: 3, seed, ..Default::default() };
        let bytes = write_seqf_bytes(&generate_synthetic(&spec, &mut SeededRng::new(seed)).unwrap()).unwrap();
        let cut = ((bytes.len() as f64) * frac) as usize;
        let r = read_seqf_bytes(&bytes[..cut]);
        prop_assert!(matches!(r, Err(Error::Format { .. })), "{:?}", r.err());
    }

    #[test]
    fn flipped_magic_bytes_are_rejected(pos in 0usize..4, bit in 0u8..8) {
        let mut bytes = write_model(&model(0, 3, 2)).unwrap();
        bytes[pos] ^= 1 << bit;
        let r = read_model(&bytes);
        prop_assert!(matches!(r, Err(Error::Format { offset: 0, .. })), "{:?}", r.err());
    }
}
