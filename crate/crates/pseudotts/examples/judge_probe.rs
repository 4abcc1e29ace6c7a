//! Scratch probe: supervised judge quality ceiling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pseudotts::decode::DecodeParams;
use pseudotts::evalkit::{self, JudgeConfig};
use pseudotts::phonelm;
use pseudotts::textproc;
use pseudotts::toyworld::{build_world, WorldConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let world = build_world(&WorldConfig { seed, ..WorldConfig::default() }).unwrap();
    let inv = world.inventory();
    let mut sil_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let lm_seqs: Vec<Vec<usize>> = world
        .text_train
        .iter()
        .map(|s| {
            let groups = textproc::phonemize_words(s, &world.lexicon).unwrap();
            textproc::insert_silences(&groups, inv.sil(), world.config.p_sil_between_words, &mut sil_rng)
        })
        .collect();
    let lm = phonelm::train_lm(&lm_seqs, 6, 0.1, None, inv).unwrap();

    let t = std::time::Instant::now();
    let judge = evalkit::train_judge(&world, &JudgeConfig { epochs, seed, ..JudgeConfig::default() }).unwrap();
    println!("judge trained in {:?}", t.elapsed());
    let per = evalkit::test_per(&judge, &world, &lm, &DecodeParams::default(), seed ^ 0xee).unwrap();
    println!("judge test PER {:.4}", per);
}
