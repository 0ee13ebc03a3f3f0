//! Regenerates the bundled desk-scale corpus under `crates/core/data/desk/`.
//! The output is deterministic, so rerunning it leaves the files unchanged
//! unless the generator itself changed.

use std::fs;
use std::path::Path;

use egru_lm::synth::{generate, CorpusSpec};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/desk");
    fs::create_dir_all(&dir).expect("create data/desk");
    let corpus = generate(&CorpusSpec::default());
    for (name, text) in
        [("train.txt", &corpus.train), ("valid.txt", &corpus.valid), ("test.txt", &corpus.test)]
    {
        let path = dir.join(name);
        fs::write(&path, text).expect("write split");
        let tokens = text.split_whitespace().count() + text.lines().count();
        println!("{}: {} tokens (with sentence markers)", path.display(), tokens);
    }
}
