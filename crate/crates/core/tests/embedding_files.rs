mod common;

use coe::cemb::{decode_cemb, decode_index, encode_cemb, encode_index, load_index, read_cemb, save_index, EmbeddingTable};
use coe::index::{build_index, IndexError};
use coe::{EmbeddingVector, FusedIndex, FusionConfig};
use proptest::prelude::*;

/// Independent little-endian writer for the same layout.
fn reference_cemb(dim: u32, entries: &[(&str, Vec<f32>)]) -> Vec<u8> {
    let mut out = b"CEMB".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend(dim.to_le_bytes());
    out.extend((entries.len() as u64).to_le_bytes());
    for (id, v) in entries {
        out.extend((id.len() as u16).to_le_bytes());
        out.extend(id.as_bytes());
        for x in v {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

#[test]
fn cemb_bytes_match_hand_layout() {
    let mut table = EmbeddingTable::new(2);
    table.push("a", EmbeddingVector::new(vec![1.0, -2.0]).unwrap()).unwrap();
    table.push("bc", EmbeddingVector::new(vec![0.5, 0.25]).unwrap()).unwrap();
    let bytes = encode_cemb(&table).unwrap();
    #[rustfmt::skip]
    let expected: Vec<u8> = vec![
        b'C', b'E', b'M', b'B', 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0,
        1, 0, b'a', 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0,
        2, 0, b'b', b'c', 0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x80, 0x3e,
    ];
    assert_eq!(bytes, expected);
    assert_eq!(bytes, reference_cemb(2, &[("a", vec![1.0, -2.0]), ("bc", vec![0.5, 0.25])]));
}

#[test]
fn index_file_carries_fusion_block() {
    let index = FusedIndex::from_rows(
        vec!["x".into()],
        vec![0.6, 0.8],
        2,
        FusionConfig::default(),
    )
    .unwrap();
    let bytes = encode_index(&index).unwrap();
    assert_eq!(&bytes[..4], b"CIDX");
    assert_eq!(&bytes[20..24], &4.0f32.to_le_bytes());
    assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
    assert_eq!(bytes[28], 1);
    assert_eq!(&bytes[29..36], &[0u8; 7]);
    assert_eq!(bytes.len(), 36 + 2 + 1 + 8);
}

fn table_strategy() -> impl Strategy<Value = (usize, Vec<(String, Vec<f32>)>)> {
    (1usize..9).prop_flat_map(|dim| {
        let entry = ("[a-z0-9_./-]{1,12}", prop::collection::vec(-100.0f32..100.0, dim));
        (Just(dim), prop::collection::btree_map(entry.0, entry.1, 0..20).prop_map(|m| m.into_iter().collect()))
    })
}

fn table_of(dim: usize, entries: &[(String, Vec<f32>)]) -> EmbeddingTable {
    let mut t = EmbeddingTable::new(dim);
    for (id, v) in entries {
        t.push(id.clone(), EmbeddingVector::new(v.clone()).unwrap()).unwrap();
    }
    t
}

proptest! {
    #[test]
    fn cemb_round_trip((dim, entries) in table_strategy()) {
        let table = table_of(dim, &entries);
        let bytes = encode_cemb(&table).unwrap();
        let refs: Vec<(&str, Vec<f32>)> = entries.iter().map(|(i, v)| (i.as_str(), v.clone())).collect();
        prop_assert_eq!(&bytes, &reference_cemb(dim as u32, &refs));
        prop_assert_eq!(decode_cemb(&bytes).unwrap(), table);
    }

    #[test]
    fn every_proper_prefix_is_truncated((dim, entries) in table_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_cemb(&table_of(dim, &entries)).unwrap();
        let cut = cut.index(bytes.len());
        let err = decode_cemb(&bytes[..cut]).unwrap_err();
        prop_assert!(matches!(err, IndexError::Truncated { .. }), "prefix {cut}: {err:?}");
    }

    #[test]
    fn index_round_trip_is_bit_identical(rows in prop::collection::vec(prop::collection::vec(0.01f32..1.0, 3), 1..30)) {
        let ids = (0..rows.len()).map(|i| format!("m{i}")).collect();
        let index = FusedIndex::from_rows(ids, rows.concat(), 3, FusionConfig::default()).unwrap();
        let bytes = encode_index(&index).unwrap();
        let back = decode_index(&bytes).unwrap();
        prop_assert_eq!(encode_index(&back).unwrap(), bytes);
        prop_assert_eq!(back, index);
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let index = FusedIndex::from_rows(vec!["a".into(), "b".into()], vec![1.0, 0.0, 0.0, 1.0], 2, FusionConfig::default())
        .unwrap();
    let good = encode_index(&index).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(decode_index(&bad), Err(IndexError::BadMagic));
    assert_eq!(decode_cemb(&good), Err(IndexError::BadMagic));

    let mut bad = good.clone();
    bad[4] = 2;
    assert_eq!(decode_index(&bad), Err(IndexError::UnsupportedVersion(2)));

    assert!(matches!(decode_index(&good[..good.len() - 1]), Err(IndexError::Truncated { .. })));
    assert!(matches!(decode_index(&good[..10]), Err(IndexError::Truncated { .. })));

    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode_index(&long), Err(IndexError::Inconsistent(_))));
}

#[test]
fn files_on_disk_round_trip() {
    let synth = common::Synth::new("FHM", 20, 4, 8, 3);
    let table = read_cemb(&synth.text_path).unwrap();
    assert_eq!(table.dim, 8);
    assert_eq!(table.entries.len(), 24);
    assert_eq!(table.to_map(), synth.text);

    let index = build_index(&synth.corpus, &synth.text, &synth.image, &FusionConfig::default()).unwrap();
    assert_eq!(index.len(), 20);
    let path = synth.dir.path().join("pool.cidx");
    save_index(&index, &path).unwrap();
    let loaded = load_index(&path).unwrap();
    assert_eq!(loaded, index);
    assert_eq!(std::fs::read(&path).unwrap(), encode_index(&loaded).unwrap());

    std::fs::write(&path, b"CIDX").unwrap();
    assert!(matches!(load_index(&path), Err(IndexError::Truncated { offset: 4 })));
}
