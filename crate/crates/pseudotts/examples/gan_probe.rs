//! Scratch probe for adversarial-training calibration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pseudotts::decode::{self, DecodeGrid};
use pseudotts::evalkit;
use pseudotts::phonelm;
use pseudotts::textproc;
use pseudotts::toyworld::{build_world, WorldConfig};
use pseudotts::uasr::{self, GanConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let t0 = std::time::Instant::now();
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
    println!("world+lm built in {:?}", t0.elapsed());

    let gamma: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let eta: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let config = GanConfig { steps, seed, gamma_sm: gamma, eta_div: eta, ..GanConfig::default() };
    let t1 = std::time::Instant::now();
    let (net, history) = uasr::gan_train(&world, &lm, &config, None).unwrap();
    let train_time = t1.elapsed();
    println!(
        "gan {} steps in {:?} ({:.1} ms/step)",
        steps,
        train_time,
        train_time.as_millis() as f64 / steps as f64
    );
    for rec in history.iter().filter(|r| r.selection.is_some()) {
        println!(
            "  step {:4}  d {:.3}  g {:.3}  adv {:.3}  sm {:.3}  div {:.3}  gp {:.3}  sel {:.2}",
            rec.step, rec.d_loss, rec.g_loss, rec.adv, rec.smooth, rec.div, rec.gp,
            rec.selection.unwrap()
        );
    }

    // decode sweep + test PER
    let t2 = std::time::Instant::now();
    let grid = DecodeGrid::default();
    let dev: Vec<_> = world.audio_train[..grid.dev_subset.min(world.audio_train.len())].to_vec();
    let params = decode::sweep(&grid.points(), &net, &dev, world.config.feature_dim, &lm, inv, seed).unwrap();
    println!("sweep chose lm_weight {} sil_bonus {} in {:?}", params.lm_weight, params.sil_bonus, t2.elapsed());

    let per = evalkit::test_per(&net, &world, &lm, &params, seed ^ 0xee).unwrap();
    let chance = evalkit::chance_per(&world, seed ^ 0xcc).unwrap();
    println!("test PER {:.4}  (chance {:.4})", per, chance);

    // pseudo-label PER on the train side
    let labels = decode::transcribe_corpus(&net, &world.audio_train, world.config.feature_dim, &lm, &params, inv, seed).unwrap();
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = world
        .audio_train
        .iter()
        .zip(&labels)
        .map(|(u, l)| (decode::strip_silence(&u.phones, inv.sil()), l.phones.clone()))
        .collect();
    println!("pseudo-label PER {:.4}", evalkit::pooled_per(&pairs).unwrap());
}
