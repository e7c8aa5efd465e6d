use spikeformer::checkpoint::{
    encode_checkpoint, load_checkpoint, load_into, save_checkpoint, MAGIC,
};
use spikeformer::model::{build_model, ModelConfig};
use spikeformer::train::blobs;
use spikeformer::Error;

fn trained_like_toy() -> spikeformer::model::Model<f32> {
    let mut m = build_model::<f32>(&ModelConfig::toy()).unwrap();
    let ds = blobs::<f32>(4, 2, [3, 16, 16], 0.3, 3).unwrap();
    m.calibrate_norms(&ds.images, 2).unwrap();
    m
}

#[test]
fn roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    let m = trained_like_toy();
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.cfg, m.cfg);
    for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &spikeformer::DenseTensor<f32>| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let x = blobs::<f32>(2, 2, [3, 16, 16], 0.3, 9).unwrap().images;
    assert_eq!(m.forward(&x, 2).unwrap(), back.forward(&x, 2).unwrap());
    assert_eq!(encode_checkpoint(&back), encode_checkpoint(&m));
}

#[test]
fn load_into_restores_a_fresh_model_with_another_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    let m = trained_like_toy();
    save_checkpoint(&m, &path).unwrap();
    let mut other = build_model::<f32>(&ModelConfig {
        seed: 99,
        ..ModelConfig::toy()
    })
    .unwrap();
    load_into(&mut other, &path).unwrap();
    for ((_, a), (_, b)) in m.store.iter().zip(other.store.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = encode_checkpoint(&trained_like_toy());
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("bad magic", {
            let mut b = bytes.clone();
            b[0] = b'X';
            b
        }),
        ("checksum", {
            let mut b = bytes.clone();
            let mid = b.len() / 2;
            b[mid] ^= 0xff;
            b
        }),
        ("bad magic", bytes[..8].to_vec()),
        ("checksum", bytes[..bytes.len() - 1].to_vec()),
    ];
    for (i, (want, b)) in cases.into_iter().enumerate() {
        let path = dir.path().join(format!("c{i}.ckpt"));
        std::fs::write(&path, b).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains(want), "case {i}: {msg}"),
            other => panic!("case {i}: {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn version_and_dtype_mismatches_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = encode_checkpoint(&trained_like_toy());
    assert_eq!(&b[..4], MAGIC);
    b[4] = 7;
    let n = b.len() - 4;
    let crc = crc32(&b[..n]);
    b[n..].copy_from_slice(&crc.to_le_bytes());
    let path = dir.path().join("v.ckpt");
    std::fs::write(&path, &b).unwrap();
    assert!(
        matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(m)) if m.contains("version"))
    );

    let path = dir.path().join("f32.ckpt");
    save_checkpoint(&trained_like_toy(), &path).unwrap();
    assert!(
        matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(m)) if m.contains("dtype"))
    );
}

#[test]
fn other_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    save_checkpoint(&trained_like_toy(), &path).unwrap();
    let mut wider = build_model::<f32>(&ModelConfig {
        base_channels: 16,
        stage4_dim: 160,
        ..ModelConfig::toy()
    })
    .unwrap();
    assert!(matches!(
        load_into(&mut wider, &path),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        load_checkpoint::<f32>(dir.path().join("missing.ckpt")),
        Err(Error::Io(_))
    ));
}

// Bitwise CRC-32 (IEEE), independent of the library's checksum routine.
fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ 0xedb8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}
