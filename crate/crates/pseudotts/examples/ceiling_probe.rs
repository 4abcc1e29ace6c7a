//! Scratch probe: ceiling of window-majority labeling + merge.

use pseudotts::decode::strip_silence;
use pseudotts::evalkit::pooled_per;
use pseudotts::toyworld::{build_world, oracle_alignment, WorldConfig};

fn main() {
    let world = build_world(&WorldConfig::default()).unwrap();
    let sil = world.inventory().sil();
    let mut pairs = Vec::new();
    let mut lens = (0usize, 0usize);
    for utt in &world.test {
        let labels = oracle_alignment(utt);
        let t = labels.len();
        if t < 9 {
            continue;
        }
        let n_windows = (t - 9) / 3 + 1;
        // plurality per window, ties toward smaller id
        let mut targets = Vec::new();
        for w in 0..n_windows {
            let mut counts = std::collections::BTreeMap::new();
            for &l in &labels[w * 3..w * 3 + 9] {
                *counts.entry(l).or_insert(0usize) += 1;
            }
            let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap();
            targets.push(*best.0);
        }
        // merge adjacent duplicates
        let mut merged = Vec::new();
        for &t in &targets {
            if merged.last() != Some(&t) {
                merged.push(t);
            }
        }
        let hyp = strip_silence(&merged, sil);
        let reference = strip_silence(&utt.phones, sil);
        lens.0 += reference.len();
        lens.1 += hyp.len();
        pairs.push((reference, hyp));
    }
    println!("oracle window-majority PER: {:.4}", pooled_per(&pairs).unwrap());
    println!("ref phones {} vs hyp phones {}", lens.0, lens.1);
}
