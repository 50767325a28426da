//! Replays the checked-in fuzz corpus through the shared harness on stable.

use std::fs;
use std::path::Path;

use kam_cli::harness;

fn replay(target: &str, check: fn(&[u8]) -> bool) -> (usize, usize) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut entries: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    assert!(!entries.is_empty(), "no seeds for {target}");
    let accepted = entries.iter().filter(|p| check(&fs::read(p).unwrap())).count();
    (accepted, entries.len())
}

#[test]
fn config_seeds() {
    let (ok, all) = replay("config_toml", harness::config_toml);
    assert!(ok >= 1 && ok < all, "{ok}/{all}: want both accepted and rejected seeds");
}

#[test]
fn jet_literal_seeds() {
    let (ok, all) = replay("jet_literal", harness::jet_literal);
    assert!(ok >= 1 && ok < all, "{ok}/{all}");
}

#[test]
fn series_literal_seeds() {
    let (ok, all) = replay("series_literal", harness::series_literal);
    assert!(ok >= 1 && ok < all, "{ok}/{all}");
}

#[test]
fn report_seeds() {
    let (ok, all) = replay("report_json", harness::report_json);
    assert_eq!(ok, all);
}

#[test]
fn atlas_row_seeds() {
    let (ok, all) = replay("atlas_rows", harness::atlas_rows);
    assert!(ok >= 1, "{ok}/{all}");
}

#[test]
fn harness_survives_garbage() {
    let junk: [&[u8]; 6] = [b"", b"\xff\xfe", b"[system", b"1 @ = =", b"{\"schema\": 3}", b"0 1.5 nan 0.1"];
    for j in junk {
        harness::config_toml(j);
        harness::jet_literal(j);
        harness::report_json(j);
        harness::atlas_rows(j);
        harness::series_literal(j);
    }
    for j in &junk[1..] {
        assert!(!harness::config_toml(j) && !harness::report_json(j));
    }
    assert!(!harness::jet_literal(b"1 @ = =") && !harness::atlas_rows(b"0 1.5 nan 0.1"));
}
