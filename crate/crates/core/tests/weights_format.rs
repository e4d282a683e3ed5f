use lpad_core::netspec::{build_texture_generator, LayerSpec, NetworkSpec};
use lpad_core::network::Network;
use lpad_core::weights::{from_bytes, load_weights, save_weights, to_bytes, WeightStore, HEADER_LEN};
use lpad_core::Error;

fn tiny() -> (NetworkSpec, WeightStore) {
    let spec = NetworkSpec { z_channels: 1, z_spatial: 1, out_channels: 1, layers: vec![LayerSpec::conv1x1(1, 1)] };
    let mut store = WeightStore::new();
    store.push("layers.0.weight", vec![1, 1, 1, 1], &[1.5]).unwrap();
    store.push("layers.0.bias", vec![1], &[-2.0]).unwrap();
    (spec, store)
}

#[test]
fn header_and_blob_bytes() {
    let (spec, store) = tiny();
    let bytes = to_bytes(&spec, &store).unwrap();
    assert_eq!(&bytes[..8], &[0x4c, 0x50, 0x57, 0x54, 0x01, 0x00, 0x00, 0x00]);
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), HEADER_LEN + mlen + 8);
    // 1.5 and -2.0 as little-endian f32
    assert_eq!(&bytes[HEADER_LEN + mlen..], &[0x00, 0x00, 0xc0, 0x3f, 0x00, 0x00, 0x00, 0xc0]);
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + mlen]).unwrap();
    assert_eq!(manifest["blob_bytes"], 8);
    assert_eq!(manifest["params"][1]["offset"], 4);
    assert_eq!(mlen, 0x175);
    assert_eq!(bytes.len(), 397);
    assert_eq!(manifest["blob_sha256"], "252b3318179cc24998f3670913d52d39085cf65b0dfa98fa523ffeab4b6683fe");
}

#[test]
fn generator_file_roundtrips_byte_for_byte() {
    let spec = build_texture_generator(3, 16, 2, 8).unwrap();
    let net = Network::random(&spec, 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.lpwt");
    save_weights(&spec, &net.to_store().unwrap(), &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let (spec2, store2) = load_weights(&path).unwrap();
    assert_eq!(spec2, spec);
    assert_eq!(to_bytes(&spec2, &store2).unwrap(), first);
    assert_eq!(Network::from_store(&spec2, &store2).unwrap(), net);
}

#[test]
fn every_corruption_is_rejected() {
    let spec = build_texture_generator(2, 8, 1, 4).unwrap();
    let store = Network::random(&spec, 1).unwrap().to_store().unwrap();
    let bytes = to_bytes(&spec, &store).unwrap();
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob = HEADER_LEN + mlen;

    let mut probes: Vec<usize> = (0..HEADER_LEN).collect();
    probes.extend([blob, blob + 1, bytes.len() / 2 + blob / 2, bytes.len() - 1]);
    for i in probes {
        let mut bad = bytes.clone();
        bad[i] ^= 0x5a;
        assert!(from_bytes(&bad).is_err(), "flip at byte {i} accepted");
    }
    let mut bad = bytes.clone();
    bad[blob + 3] ^= 0x01;
    assert!(matches!(from_bytes(&bad), Err(Error::Checksum(_))));
    for cut in [0, 3, HEADER_LEN, blob - 1, blob, bytes.len() - 1] {
        assert!(from_bytes(&bytes[..cut]).is_err(), "truncation to {cut} accepted");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(from_bytes(&long).is_err());
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(from_bytes(&v2), Err(Error::UnknownVersion(2))));
}

#[test]
fn manifest_must_match_the_network_layout() {
    let spec = build_texture_generator(2, 8, 1, 4).unwrap();
    let store = Network::random(&spec, 1).unwrap().to_store().unwrap();
    let other = build_texture_generator(2, 16, 1, 4).unwrap();
    assert!(Network::from_store(&other, &store).is_err());
}
