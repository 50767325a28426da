//! Round-trip checks for every text or byte decoder, shared by the fuzz
//! targets and the corpus replay test. Each function panics on a violated
//! invariant and returns whether the input was accepted.

use kam_core::atlas::ParameterAtlas;
use kam_core::fourier::FourierSeries;
use kam_core::jet::HamiltonianJet;

use crate::{Report, RunConfig};

/// Accepted configs survive normalized emission and re-parsing unchanged.
pub fn config_toml(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let Ok(cfg) = RunConfig::from_toml(text) else { return false };
    let again = RunConfig::from_toml(&cfg.to_toml()).expect("normalized config re-parses");
    assert_eq!(again, cfg);
    true
}

/// Parsed jets round-trip through `to_literal` exactly.
pub fn jet_literal(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let parse = |t: &str| HamiltonianJet::parse_literal(t, 2, 1, 4, 6, (0.5, 0.4));
    let Ok(jet) = parse(text) else { return false };
    let back = parse(&jet.to_literal()).expect("emitted literal parses");
    assert_eq!(back.max_abs_diff(&jet), 0.0);
    true
}

/// Byte 0 picks the dimension `1 + b % 4`; each following 24-byte record is
/// four `i16` LE mode components (the first `dim` are used) and `re`, `im` as `f64` LE.
pub fn series_literal(data: &[u8]) -> bool {
    let Some((&head, rest)) = data.split_first() else { return false };
    let dim = 1 + usize::from(head % 4);
    let entries: Vec<(Vec<i64>, f64, f64)> = rest
        .chunks_exact(24)
        .map(|c| {
            let k = (0..dim).map(|i| i64::from(i16::from_le_bytes([c[2 * i], c[2 * i + 1]]))).collect();
            let re = f64::from_le_bytes(c[8..16].try_into().unwrap());
            let im = f64::from_le_bytes(c[16..24].try_into().unwrap());
            (k, re, im)
        })
        .collect();
    let Ok(f) = FourierSeries::from_literal(dim, &entries) else { return false };
    assert_eq!(f.dim(), dim);
    for (k, re, im) in &entries {
        let k: Vec<i32> = k.iter().map(|&v| v as i32).collect();
        assert!(f.mode_index(&k).is_some(), "entry {k:?} lost");
        assert!(re.is_finite() && im.is_finite());
    }
    let _ = f.strip_norm(0.1);
    true
}

/// Saved reports re-serialize to the same bytes after one decode.
pub fn report_json(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let Ok(r) = Report::from_json(text) else { return false };
    for c in &r.checks {
        let _ = c.evaluate();
    }
    let _ = r.summary();
    let back = Report::from_json(&r.to_json()).expect("re-serialized report decodes");
    assert_eq!(back.to_json(), r.to_json());
    true
}

/// Accepted atlas rows re-emit identically on the unit square `[1, 2]²`.
pub fn atlas_rows(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let (lo, hi) = ([1.0, 1.0], [2.0, 2.0]);
    let Ok(a) = ParameterAtlas::parse_rows(text, &lo, &hi) else { return false };
    let _ = a.check_structure(None);
    let back = ParameterAtlas::parse_rows(&a.rows(), &lo, &hi).expect("emitted rows parse");
    assert_eq!(back.rows(), a.rows());
    true
}
