use std::path::PathBuf;

use vrdiff::dataio::AminoAcid;
use vrdiff::embeddings::{one_hot_table, EmbeddingError, EmbeddingTable, ONE_HOT_TAG};
use vrdiff::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/embeddings").join(name)
}

fn read_err(name: &str) -> EmbeddingError {
    match EmbeddingTable::read(&fixture(name)) {
        Err(Error::Embedding { source, .. }) => source,
        other => panic!("{name}: expected an embedding error, got {other:?}"),
    }
}

#[test]
fn one_hot_fixture_matches_reader_and_writer() {
    let table = EmbeddingTable::read(&fixture("onehot_acd.vremb")).unwrap();
    assert_eq!(table.model_tag(), ONE_HOT_TAG);
    assert_eq!((table.len(), table.dim()), (3, 20));
    let rows: Vec<_> = table.iter().collect();
    for ((res, row), aa) in rows.iter().zip([AminoAcid::Ala, AminoAcid::Cys, AminoAcid::Asp]) {
        let hot: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(k, _)| k).collect();
        assert_eq!(hot, vec![aa.index()], "residue {res}");
        assert_eq!(row.iter().sum::<f32>(), 1.0);
    }
    let expected = one_hot_table(&[(1, AminoAcid::Ala), (2, AminoAcid::Cys), (3, AminoAcid::Asp)]).unwrap();
    assert_eq!(table, expected);
    assert_eq!(expected.to_bytes(), std::fs::read(fixture("onehot_acd.vremb")).unwrap());
}

#[test]
fn full_alphabet_one_hots_are_distinct() {
    let table = EmbeddingTable::read(&fixture("onehot_all.vremb")).unwrap();
    assert_eq!(table.len(), 20);
    let residues: Vec<i64> = table.iter().map(|(r, _)| r).collect();
    assert_eq!(residues, (-5..15).collect::<Vec<_>>());
    let mut rows: Vec<Vec<u32>> = table.iter().map(|(_, r)| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort();
    rows.dedup();
    assert_eq!(rows.len(), 20);
}

#[test]
fn dense_fixture_values_and_byte_identity() {
    let path = fixture("dense_dim8.vremb");
    let table = EmbeddingTable::read(&path).unwrap();
    assert_eq!(table.dim(), 8);
    for (res, row) in table.iter() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v as f64, (res as f64 * 8.0 + j as f64) * 0.25 - 4.0);
        }
    }
    assert_eq!(table.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn empty_fixture_keeps_its_header() {
    let table = EmbeddingTable::read(&fixture("empty_dim480.vremb")).unwrap();
    assert!(table.is_empty());
    assert_eq!(table.dim(), 480);
    assert_eq!(table.model_tag(), "fixture-empty");
}

#[test]
fn malformed_fixtures_are_rejected_with_the_right_reason() {
    assert!(matches!(read_err("short_row.vremb"), EmbeddingError::Truncated { .. }));
    assert_eq!(read_err("duplicate_index.vremb"), EmbeddingError::DuplicateResidue(3));
    assert_eq!(read_err("bad_magic.vremb"), EmbeddingError::BadMagic);
    assert_eq!(read_err("trailing_bytes.vremb"), EmbeddingError::TrailingBytes(2));
    assert_eq!(read_err("nan_value.vremb"), EmbeddingError::NonFinite(1));
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(EmbeddingTable::read(&fixture("absent.vremb")), Err(Error::Io(_))));
}
