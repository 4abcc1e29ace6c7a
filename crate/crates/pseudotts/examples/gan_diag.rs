//! Scratch diagnostics for adversarial training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pseudotts::phonelm;
use pseudotts::textproc;
use pseudotts::toyworld::{build_world, WorldConfig};
use pseudotts::uasr::{self, GanConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

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
    println!("true text ppl: {:.2}", lm.perplexity(&lm_seqs).unwrap());

    let gamma: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let config = GanConfig { steps, seed, gamma_sm: gamma, ..GanConfig::default() };
    println!("config: {:?}", config);
    let (net, _) = uasr::gan_train(&world, &lm, &config, None).unwrap();

    // inspect outputs on a few train utterances
    for utt in world.audio_train.iter().take(6) {
        let frames = uasr::pad_frames_min(&utt.frames, 16, 9);
        let e = uasr::recognize(&net, &frames, 16).unwrap();
        let am = e.argmaxes();
        let peak: f64 = (0..e.rows).map(|t| e.row(t)[am[t]]).sum::<f64>() / e.rows as f64;
        let mut merged = Vec::new();
        for &a in &am { if merged.last() != Some(&a) { merged.push(a); } }
        let truth: Vec<usize> = utt.phones.clone();
        println!("true   ({}): {:?}", truth.len(), truth);
        println!("greedy ({}): {:?}  peak {:.3}", merged.len(), merged, peak);
    }
    // length stats
    let mut lens = Vec::new();
    for utt in &world.audio_train {
        let frames = uasr::pad_frames_min(&utt.frames, 16, 9);
        let e = uasr::recognize(&net, &frames, 16).unwrap();
        let am = e.argmaxes();
        let mut l = 1;
        for w in am.windows(2) { if w[0] != w[1] { l += 1; } }
        lens.push(l);
    }
    let mean_len: f64 = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
    let mean_true: f64 = world.audio_train.iter().map(|u| u.phones.len()).sum::<usize>() as f64
        / world.audio_train.len() as f64;
    println!("mean merged len {:.1} vs true phones {:.1}", mean_len, mean_true);
}
