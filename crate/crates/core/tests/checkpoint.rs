use lfs_core::checkpoint::{
    checkpoint_hash, decode_lin_checkpoint, decode_lvm_checkpoint, encode_lin_checkpoint, encode_lvm_checkpoint,
    read_checkpoint, write_checkpoint, MAGIC,
};
use lfs_core::lin::{HistoryBuffer, LatentIntegrator, Lin, LinFamily, LinSpec};
use lfs_core::lvm::{Lvm, LvmSpec, SvdLvm};
use lfs_core::{CheckpointError, ConfigNormalizer, GridFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm() -> ConfigNormalizer {
    ConfigNormalizer::new(0.005, 0.015, 100).unwrap()
}

fn svd(center: bool) -> (Lvm<f32>, LvmSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames: Vec<Vec<f64>> = (0..10).map(|_| (0..64).map(|_| rng.gen()).collect()).collect();
    let spec = LvmSpec {
        svd_center: center,
        ..LvmSpec::svd(5)
    };
    (Lvm::Svd(SvdLvm::fit(&frames, 8, 5, center).unwrap()), spec)
}

fn small_patch() -> LvmSpec {
    LvmSpec {
        patch_size: 4,
        transformer_layers: 1,
        heads: 2,
        ..LvmSpec::patch(8)
    }
}

fn lvm_round_trip(lvm: &Lvm<f32>, spec: &LvmSpec) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lvm.ckpt");
    let bytes = encode_lvm_checkpoint(lvm, spec, &norm(), Some("data"), Some("cfg"));
    let hash = write_checkpoint(&path, &bytes).unwrap();
    assert_eq!(hash, checkpoint_hash(&bytes));
    let (back, header) = decode_lvm_checkpoint::<f32>(&read_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(header.normalization, norm());
    assert_eq!(header.config_hash.as_deref(), Some("cfg"));
    assert_eq!(header.upstream.as_deref(), Some("data"));
    assert_eq!(
        encode_lvm_checkpoint(&back, spec, &norm(), Some("data"), Some("cfg")),
        bytes
    );
    let frame = GridFrame::<f32>::from_fn(lvm.k(), |r, c| ((r + 2 * c) % 5) as f64 / 5.0);
    assert_eq!(back.encode(&frame).unwrap(), lvm.encode(&frame).unwrap());
}

#[test]
fn svd_checkpoints_round_trip() {
    for center in [false, true] {
        let (lvm, spec) = svd(center);
        lvm_round_trip(&lvm, &spec);
    }
}

#[test]
fn conv_and_patch_checkpoints_round_trip() {
    let conv = LvmSpec::conv(8, 16);
    lvm_round_trip(&Lvm::build(&conv, 16).unwrap(), &conv);
    let patch = small_patch();
    lvm_round_trip(&Lvm::build(&patch, 8).unwrap(), &patch);
}

#[test]
fn lin_checkpoints_round_trip_for_every_family() {
    let mut buf = HistoryBuffer::<f32>::new(3, 8);
    buf.push(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
    for family in LinFamily::ALL {
        let spec = LinSpec {
            hidden: vec![16, 16],
            transformer_layers: 2,
            heads: 2,
            ..LinSpec::new(family, 8, 3)
        };
        let lin = Lin::<f32>::build(&spec).unwrap();
        let bytes = encode_lin_checkpoint(&lin, &norm(), "abc123", None);
        let (back, header) = decode_lin_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(header.upstream.as_deref(), Some("abc123"));
        assert_eq!(back.spec, spec);
        assert_eq!(encode_lin_checkpoint(&back, &norm(), "abc123", None), bytes, "{family}");
        assert_eq!(back.predict_delta(&buf).unwrap(), lin.predict_delta(&buf).unwrap());
    }
}

#[test]
fn f64_models_store_single_precision_weights() {
    let lin = Lin::<f64>::build(&LinSpec::new(LinFamily::Mlp, 6, 1)).unwrap();
    let bytes = encode_lin_checkpoint(&lin, &norm(), "x", None);
    let (back, header) = decode_lin_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(header.trained_in, "f64");
    // the second pass is lossless because the weights are already f32-exact
    assert_eq!(encode_lin_checkpoint(&back, &norm(), "x", None), bytes);
}

fn lin_bytes() -> Vec<u8> {
    let lin = Lin::<f32>::build(&LinSpec::new(LinFamily::Linear, 4, 1)).unwrap();
    encode_lin_checkpoint(&lin, &norm(), "up", None)
}

#[test]
fn corrupted_magic() {
    let mut b = lin_bytes();
    b[0] = b'X';
    assert!(matches!(
        decode_lin_checkpoint::<f32>(&b),
        Err(CheckpointError::BadMagic)
    ));
    assert!(matches!(
        decode_lin_checkpoint::<f32>(&[]),
        Err(CheckpointError::BadMagic)
    ));
}

#[test]
fn truncated_prefix_header_and_payload() {
    let b = lin_bytes();
    for cut in [6, 20, b.len() - 3] {
        assert!(
            matches!(
                decode_lin_checkpoint::<f32>(&b[..cut]),
                Err(CheckpointError::Truncated(_))
            ),
            "cut at {cut}"
        );
    }
}

#[test]
fn malformed_header() {
    let mut b = lin_bytes();
    // garble the first JSON byte
    b[12] = b'#';
    assert!(matches!(
        decode_lin_checkpoint::<f32>(&b),
        Err(CheckpointError::Header(_))
    ));

    let mut b = lin_bytes();
    b[4] = 9;
    assert!(matches!(
        decode_lin_checkpoint::<f32>(&b),
        Err(CheckpointError::Header(_))
    ));

    let mut b = lin_bytes();
    b.extend_from_slice(&[0; 4]);
    assert!(matches!(
        decode_lin_checkpoint::<f32>(&b),
        Err(CheckpointError::Header(_))
    ));
}

#[test]
fn kind_mismatch() {
    let b = lin_bytes();
    assert_eq!(b[..4], MAGIC);
    match decode_lvm_checkpoint::<f32>(&b) {
        Err(CheckpointError::Kind { expected, found }) => {
            assert_eq!(expected, "lvm");
            assert_eq!(found, "lin");
        }
        other => panic!("expected a kind error, got {:?}", other.map(|(_, h)| h)),
    }
}

#[test]
fn identical_models_hash_equal() {
    let a = Lin::<f32>::build(&LinSpec::new(LinFamily::Arc, 6, 2)).unwrap();
    let b = Lin::<f32>::build(&LinSpec::new(LinFamily::Arc, 6, 2)).unwrap();
    let hash = |l: &Lin<f32>| checkpoint_hash(&encode_lin_checkpoint(l, &norm(), "u", None));
    assert_eq!(hash(&a), hash(&b));
    let c = Lin::<f32>::build(&LinSpec {
        seed: 1,
        ..LinSpec::new(LinFamily::Arc, 6, 2)
    })
    .unwrap();
    assert_ne!(hash(&a), hash(&c));
}
