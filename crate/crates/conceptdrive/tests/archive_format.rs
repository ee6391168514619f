// SPDX-License-Identifier: MIT OR Apache-2.0

use conceptdrive::archive::{Archive, Tensor};
use conceptdrive::formats::{encoder_archive, encoder_from_archive, feature_map_archive, feature_map_from_archive};
use conceptdrive_core::masked::{extract_dense, ExtractConfig};
use conceptdrive_core::vit::{EncoderConfig, EncoderWeights, Image};

/// Hand-written reader for the byte layout, independent of the crate's.
fn oracle_parse(bytes: &[u8]) -> (serde_json::Value, Vec<f32>) {
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
    let payload = bytes[8 + n..].chunks(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    (header, payload)
}

#[test]
fn writer_matches_the_byte_layout() {
    let mut a = Archive::new();
    a.push(Tensor::new("T", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let bytes = a.to_bytes();
    let (header, payload) = oracle_parse(&bytes);
    assert_eq!(header["T"]["dtype"], "f32");
    assert_eq!(header["T"]["shape"], serde_json::json!([2, 2]));
    assert_eq!(header["T"]["offset"], 0);
    assert_eq!(payload, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(&bytes[bytes.len() - 4..], &4.0f32.to_le_bytes());
}

#[test]
fn reader_accepts_hand_built_bytes() {
    let header = br#"{"T":{"dtype":"f32","shape":[2,2],"offset":0},"b":{"dtype":"f32","shape":[1],"offset":16},"layer":3}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header);
    for v in [1.0f32, 2.0, 3.0, 4.0, -0.5] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let a = Archive::from_bytes(&bytes).unwrap();
    assert_eq!(a.get("T").unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(a.get("b").unwrap().data, vec![-0.5]);
    assert_eq!(a.meta_usize("layer").unwrap(), 3);
}

#[test]
fn short_payload_error_names_the_tensor() {
    let header = br#"{"weights":{"dtype":"f32","shape":[12],"offset":0}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header);
    bytes.extend(std::iter::repeat_n(0u8, 8 * 4));
    let err = Archive::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("'weights'") && err.contains("12 floats") && err.contains("holds 8"), "{err}");
}

#[test]
fn malformed_headers_are_rejected() {
    for header in [&br#"{"T":{"dtype":"f64","shape":[1],"offset":0}}"#[..], br#"{"T":{"dtype":"f32","offset":0}}"#, b"[1,2]"] {
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&0f32.to_le_bytes());
        assert!(Archive::from_bytes(&bytes).is_err());
    }
    let mut bytes = 1000u64.to_le_bytes().to_vec();
    bytes.extend_from_slice(b"{}");
    assert!(Archive::from_bytes(&bytes).is_err());
}

#[test]
fn seeded_encoder_weights_round_trip_bit_identically() {
    let w = EncoderWeights::seeded(EncoderConfig::default(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.cdt");
    encoder_archive(&w).write(&path).unwrap();
    let back = encoder_from_archive(&Archive::read(&path).unwrap()).unwrap();
    for (a, b) in w.to_named().iter().zip(back.to_named()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
    }
    assert_eq!(back, w);
}

#[test]
fn feature_maps_keep_values_and_provenance() {
    let w = EncoderWeights::seeded(EncoderConfig::default(), 2).unwrap();
    let img = Image::random(8, 8, 4);
    let map = extract_dense(&w, &img, &ExtractConfig::default(), 3, 3).unwrap();
    let bytes = feature_map_archive(&map).to_bytes();
    let (header, payload) = oracle_parse(&bytes);
    assert_eq!(header["features"]["shape"], serde_json::json!([3, 3, 32]));
    assert_eq!(header["layer"], 2);
    assert_eq!(header["mask_kind"], "box");
    assert_eq!(header["r"], -1e4);
    assert_eq!(payload, map.as_slice());
    let back = feature_map_from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, map);
}
