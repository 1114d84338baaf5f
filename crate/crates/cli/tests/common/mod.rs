#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use pocketalign::synthetic::{hairpin, random_chain};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Writes `n` random synthetic chains plus the hairpin fixture as PDB files.
pub fn write_pdb_corpus(dir: &Path, n: usize, seed: u64) -> Vec<PathBuf> {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::new();
    for i in 0..n {
        let chain = random_chain(&mut rng, 24 + 4 * i, &format!("syn{i:03}"));
        let path = dir.join(format!("syn{i:03}.pdb"));
        fs::write(&path, chain.to_pdb()).unwrap();
        paths.push(path);
    }
    let path = dir.join("hairpin.pdb");
    fs::write(&path, hairpin().to_pdb()).unwrap();
    paths.push(path);
    paths
}

pub fn file_hash(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}
