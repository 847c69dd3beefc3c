//! Replays the checked-in fuzz seeds through the decoders with the same
//! invariants the fuzz targets assert.

use std::fs;
use std::path::PathBuf;

use moe_restore::checkpoint::Checkpoint;
use moe_restore::config::Config;
use moe_restore::manifest::Manifest;
use moe_restore::pnm::{decode_pnm, encode_pgm, encode_ppm};

fn seeds(kind: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(kind);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let b = fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(out.len() >= 3, "too few seeds in {}", dir.display());
    out
}

/// Returns how many seeds decoded successfully.
fn replay(kind: &str, check: impl Fn(&[u8]) -> bool) -> usize {
    seeds(kind).iter().filter(|(_, b)| check(b)).count()
}

#[test]
fn pnm_seeds() {
    let ok = replay("pnm", |data| match decode_pnm(data) {
        Ok(img) => {
            let encode = |t| if img.shape()[0] == 1 { encode_pgm(t) } else { encode_ppm(t) };
            let bytes = encode(&img).unwrap();
            let back = decode_pnm(&bytes).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert_eq!(encode(&back).unwrap(), bytes);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, 3);
}

#[test]
fn checkpoint_seeds() {
    let ok = replay("checkpoint", |data| match Checkpoint::decode(data) {
        Ok(ck) => {
            assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, 2);
}

#[test]
fn manifest_seeds() {
    let ok = replay("manifest", |data| match std::str::from_utf8(data).map(Manifest::parse) {
        Ok(Ok(m)) => {
            let text = m.to_string();
            assert_eq!(Manifest::parse(&text).unwrap().to_string(), text);
            true
        }
        _ => false,
    });
    assert_eq!(ok, 2);
}

#[test]
fn config_seeds() {
    let ok = replay("config", |data| match std::str::from_utf8(data).map(Config::parse) {
        Ok(Ok(c)) => {
            let text = c.to_string();
            assert_eq!(Config::parse(&text).unwrap(), c);
            true
        }
        _ => false,
    });
    assert_eq!(ok, 2);
}
