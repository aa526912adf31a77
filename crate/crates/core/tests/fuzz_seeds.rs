//! Runs the checked-in fuzz corpus, plus seeded mutations of each seed,
//! through the fuzz entry points on the stable toolchain.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflectsql::fuzzing::TARGETS;

fn mutate(rng: &mut ChaCha8Rng, seed: &[u8]) -> Vec<u8> {
    let mut out = seed.to_vec();
    for _ in 0..rng.gen_range(1..=4) {
        let at = if out.is_empty() { 0 } else { rng.gen_range(0..out.len()) };
        match rng.gen_range(0..4) {
            0 => out.truncate(at),
            1 if !out.is_empty() => out[at] = rng.gen(),
            2 => out.insert(at, *b"{}[]\",:;'\\".get(rng.gen_range(0..10)).unwrap()),
            _ => {
                let end = (at + rng.gen_range(0..16)).min(out.len());
                out.drain(at..end);
            }
        }
    }
    out
}

#[test]
fn corpus_seeds_and_mutations_do_not_panic() {
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, run) in TARGETS {
        let dir = corpus.join(name);
        let mut seeds = 0;
        for entry in fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
            let bytes = fs::read(entry.unwrap().path()).unwrap();
            run(&bytes);
            for _ in 0..256 {
                run(&mutate(&mut rng, &bytes));
            }
            seeds += 1;
        }
        assert!(seeds > 0, "{name} has no seeds");
    }
}
