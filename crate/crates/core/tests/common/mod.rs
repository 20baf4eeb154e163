#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ovqa::pipeline::{load_config, LoadedConfig};

/// A pipeline small enough to run in well under a second.
pub const SMALL: &str = r#"
seed = 7

[embeddings.toy]
n_words = 120
dim = 8
n_clusters = 6
spread = 0.3

[gen]
n_answers = 30
n_train = 400
n_test = 120
feature_dim = 6
noise_sigma = 0.1

[graph]
k_neighbors = 3
hops = 2

[train]
epochs = 3
batch_size = 32

[arms]
closed_top_k = 10
"#;

pub fn small(out: &Path, extra: &[&str]) -> LoadedConfig {
    let mut ov: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    ov.push(format!("out_dir={:?}", out.display().to_string()));
    load_config(Some(SMALL), &ov).unwrap()
}

/// Every regular file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}
