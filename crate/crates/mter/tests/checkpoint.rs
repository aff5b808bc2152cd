use mter::checkpoint::{decode, encode, load, save, Provenance};
use mter::MterError;
use mter_nn::{Arch, HeadKind, Model, ModelSpec};
use proptest::prelude::*;

fn small_arch() -> impl Strategy<Value = Arch> {
    prop_oneof![Just(Arch::LeNet5), Just(Arch::ResNet6), Just(Arch::LeNet5Embed2)]
}

fn provenance() -> impl Strategy<Value = Provenance> {
    ("[a-z_]{0,12}", 0.0f32..4.0, any::<u32>(), any::<u64>(), 0u32..100, 1.0f32..64.0).prop_map(
        |(defense, margin, epsilon, seed, epochs, arc_scale)| Provenance {
            defense,
            margin,
            epsilon,
            seed,
            epochs,
            arc_scale,
            ..Provenance::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip_is_exact(
        arch in small_arch(),
        classes in 2usize..12,
        cosine in any::<bool>(),
        seed in any::<u64>(),
        prov in provenance(),
    ) {
        let head = if cosine { HeadKind::Cosine { scale: 16.0 } } else { HeadKind::Linear };
        let model = Model::new(ModelSpec::new(arch, classes).with_head(head), seed).unwrap();
        let bytes = encode(&model, &prov);
        let ck = decode(&bytes).unwrap();
        prop_assert_eq!(ck.model.spec(), model.spec());
        prop_assert_eq!(&ck.provenance, &prov);
        for (a, b) in ck.model.params().entries().iter().zip(model.params().entries()) {
            prop_assert_eq!(&a.name, &b.name);
            let bits = |t: &mter_nn::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn any_flipped_byte_is_detected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let model = Model::new(ModelSpec::new(Arch::LeNet5, 3), 1).unwrap();
        let mut bytes = encode(&model, &Provenance::default());
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode(&bytes).is_err());
    }
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let model = Model::new(ModelSpec::new(Arch::LeNet5, 3), 2).unwrap();
    let bytes = encode(&model, &Provenance::default());
    for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(MterError::CheckpointCorrupt(_))), "cut {cut}");
    }
    assert!(decode(b"not a checkpoint at all, just text").is_err());
}

#[test]
fn save_then_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(ModelSpec::new(Arch::ResNet6, 10), 3).unwrap();
    let prov = Provenance {
        defense: "mter".into(),
        margin: 0.2,
        epsilon: 76,
        ..Provenance::default()
    };
    save(&path, &model, &prov).unwrap();
    let ck = load(&path).unwrap();
    assert_eq!(ck.provenance, prov);
    assert_eq!(ck.model.params(), model.params());
}
