use std::collections::BTreeMap;
use std::path::Path;

use bevbeam::data::dataset::{camera_file, write_sequence, Dataset, INDEX_FILE};
use bevbeam::data::synthetic::{
    generate_sequence, generate_synthetic, CodebookSpec, SyntheticConfig,
};
use bevbeam::fusion_model::{InputNeeds, PreparedSample};
use bevbeam::training::SampleSource;
use bevbeam::Error;
use sha2::{Digest, Sha256};

fn small(n: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_sequences: n,
        codebook: CodebookSpec {
            beams: 16,
            fov_deg: 90.0,
        },
        seed,
        camera_size: 32,
        radar_dims: (4, 4, 8),
        ..SyntheticConfig::default()
    }
}

/// Relative path → SHA-256 of every file under `root`.
fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(
                    rel,
                    format!("{:x}", Sha256::digest(std::fs::read(&p).unwrap())),
                );
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    generate_synthetic(&small(8, 3), &a).unwrap();
    generate_synthetic(&small(8, 3), &b).unwrap();
    generate_synthetic(&small(8, 4), &c).unwrap();
    let (ha, hb, hc) = (tree_hashes(&a), tree_hashes(&b), tree_hashes(&c));
    assert_eq!(ha.len(), 1 + 8 * 17);
    assert_eq!(ha, hb);
    assert_ne!(ha[INDEX_FILE], hc[INDEX_FILE]);
}

#[test]
fn load_then_reserialize_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("d");
    let cfg = small(6, 1);
    generate_synthetic(&cfg, &root).unwrap();
    let ds = Dataset::open(&root).unwrap();
    assert_eq!(ds.entries().len(), 6);
    for i in 0..6 {
        let seq = ds.read_sequence(i).unwrap();
        assert_eq!(seq, generate_sequence(&cfg, i).unwrap().0);
        let copy = tmp.path().join("copy").join(&ds.entries()[i].dir);
        write_sequence(&copy, &seq).unwrap();
        assert_eq!(tree_hashes(&copy), tree_hashes(&ds.seq_dir(i)));
    }
}

#[test]
fn tampered_magic_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("d");
    generate_synthetic(&small(3, 0), &root).unwrap();
    let ds = Dataset::open(&root).unwrap();
    let victim = ds.seq_dir(1).join(camera_file(0));
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[1] = 0;
    std::fs::write(&victim, bytes).unwrap();
    match ds.read_sequence(1) {
        Err(Error::Format { path, offset, .. }) => {
            assert_eq!(path, victim);
            assert_eq!(offset, 0);
        }
        other => panic!("expected a format error, got {other:?}"),
    }
    let r: bevbeam::Result<PreparedSample<f32>> = ds.load(1, InputNeeds::ALL, None);
    assert!(r.is_err());
    assert!(ds.read_sequence(0).is_ok());
}

#[test]
fn missing_index_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::open(tmp.path()), Err(Error::Io { .. })));
}
