//! Deterministic synthetic speech world: phone sequences rendered to
//! continuous feature frames, a disjoint text corpus, a lexicon, and
//! hidden ground truth used only by evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::io as nkio;
use crate::textproc::{self, Lexicon};

pub const FORMAT_VERSION: u32 = 1;

/// Sentence lengths in words for both corpora.
const SENTENCE_LEN: (usize, usize) = (3, 8);
/// Phone prototypes are unit Gaussian draws scaled by this factor.
const PROTO_SCALE: f64 = 2.0;
/// Minimum pairwise prototype distance enforced by rejection sampling.
const PROTO_MIN_DIST: f64 = 1.5;
const PROTO_MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_phones: usize,
    pub feature_dim: usize,
    pub n_words: usize,
    pub word_len_range: [usize; 2],
    pub duration_range: [usize; 2],
    pub noise_sigma: f64,
    pub smoothing_window: usize,
    pub n_speakers: usize,
    pub speaker_offset_sigma: f64,
    pub p_sil_between_words: f64,
    pub n_audio_utts: usize,
    pub n_text_sents: usize,
    pub n_test_utts: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> WorldConfig {
        WorldConfig {
            n_phones: 8,
            feature_dim: 16,
            n_words: 40,
            word_len_range: [1, 3],
            duration_range: [2, 5],
            noise_sigma: 0.1,
            smoothing_window: 3,
            n_speakers: 1,
            speaker_offset_sigma: 0.5,
            p_sil_between_words: 0.5,
            n_audio_utts: 300,
            n_text_sents: 400,
            n_test_utts: 40,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let named = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("invalid world config field: {}", field)))
            }
        };
        named("n_phones", self.n_phones >= 2)?;
        named("feature_dim", self.feature_dim >= 1)?;
        named("n_words", self.n_words >= 1)?;
        named(
            "word_len_range",
            self.word_len_range[0] >= 1 && self.word_len_range[0] <= self.word_len_range[1],
        )?;
        named(
            "duration_range",
            self.duration_range[0] >= 1 && self.duration_range[0] <= self.duration_range[1],
        )?;
        named("noise_sigma", self.noise_sigma >= 0.0)?;
        named("smoothing_window", self.smoothing_window >= 1)?;
        named("n_speakers", self.n_speakers >= 1)?;
        named("speaker_offset_sigma", self.speaker_offset_sigma >= 0.0)?;
        named(
            "p_sil_between_words",
            (0.0..=1.0).contains(&self.p_sil_between_words),
        )?;
        named("n_audio_utts", self.n_audio_utts >= 1)?;
        named("n_text_sents", self.n_text_sents >= 1)?;
        named("n_test_utts", self.n_test_utts >= 1)?;
        Ok(())
    }
}

/// Phone inventory bookkeeping. Regular phones are 0..n_phones, silence is
/// the next id; the language model adds an end marker after silence and a
/// start pad after that.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inventory {
    pub n_phones: usize,
}

impl Inventory {
    pub fn sil(&self) -> usize {
        self.n_phones
    }

    /// Symbols a recognizer emits: phones plus silence.
    pub fn n_emit(&self) -> usize {
        self.n_phones + 1
    }

    /// End-of-sequence marker used by the language model.
    pub fn end(&self) -> usize {
        self.n_phones + 1
    }

    /// Start pad; appears only in language-model contexts.
    pub fn start(&self) -> usize {
        self.n_phones + 2
    }

    /// Language-model vocabulary: phones, silence, end marker.
    pub fn lm_vocab(&self) -> usize {
        self.n_phones + 2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    pub offset: Vec<f64>,
    pub gain: f64,
}

/// One spoken item. `phones`/`durations`/`words` are ground truth the
/// training stages must never read for audio_train; evaluation may.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<usize>,
    pub phones: Vec<usize>,
    pub durations: Vec<usize>,
    /// Row-major [n_frames x feature_dim].
    pub frames: Vec<f64>,
    pub speaker_id: usize,
}

impl Utterance {
    pub fn n_frames(&self, feature_dim: usize) -> usize {
        self.frames.len() / feature_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    /// Prototype vector per regular phone; silence is the zero vector.
    pub prototypes: Vec<Vec<f64>>,
    pub lexicon: Lexicon,
    pub speakers: Vec<SpeakerProfile>,
    pub audio_train: Vec<Utterance>,
    pub text_train: Vec<Vec<usize>>,
    pub test: Vec<Utterance>,
    /// Colliding-phonemization pairs in a 1000-sentence probe.
    pub ambiguity_count: usize,
}

impl Dataset {
    pub fn inventory(&self) -> Inventory {
        Inventory { n_phones: self.config.n_phones }
    }

    pub fn prototype(&self, phone: usize) -> Result<Vec<f64>> {
        let inv = self.inventory();
        if phone < self.config.n_phones {
            Ok(self.prototypes[phone].clone())
        } else if phone == inv.sil() {
            Ok(vec![0.0; self.config.feature_dim])
        } else {
            Err(Error::Contract(format!("unknown phone id {}", phone)))
        }
    }

    /// Re-render stored phones/durations without sampling: noiseless, with
    /// a caller-chosen smoothing window. Used for evaluation references.
    pub fn rerender(&self, utt: &Utterance, smoothing_window: usize) -> Result<Vec<f64>> {
        let speaker = &self.speakers[utt.speaker_id];
        render_frames(
            &utt.phones,
            &utt.durations,
            speaker,
            &self.prototypes,
            self.config.feature_dim,
            self.config.n_phones,
            smoothing_window,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }
}

fn sample_normal_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Phone prototypes: scaled unit-Gaussian draws, rejection-sampled so every
/// pair (including the implicit zero silence prototype) is at least
/// PROTO_MIN_DIST apart.
fn sample_prototypes<R: Rng>(config: &WorldConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let zero = vec![0.0; config.feature_dim];
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(config.n_phones);
    let mut attempts = 0;
    while accepted.len() < config.n_phones {
        attempts += 1;
        if attempts > PROTO_MAX_ATTEMPTS {
            return Err(Error::Config("inventory too crowded".into()));
        }
        let cand = sample_normal_vec(rng, config.feature_dim, PROTO_SCALE);
        let ok = accepted
            .iter()
            .chain(std::iter::once(&zero))
            .all(|p| euclid(p, &cand) >= PROTO_MIN_DIST);
        if ok {
            accepted.push(cand);
        }
    }
    Ok(accepted)
}

/// Seeded bigram word model with a uniformly random transition table.
struct SentenceModel {
    initial: Vec<f64>,
    table: Vec<Vec<f64>>,
}

impl SentenceModel {
    fn new<R: Rng>(n_words: usize, rng: &mut R) -> SentenceModel {
        let mut row = |rng: &mut R| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n_words).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        SentenceModel {
            initial: row(rng),
            table: (0..n_words).map(|_| row(rng)).collect(),
        }
    }

    fn sample_from<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        dist.len() - 1
    }

    fn sample_sentence<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.gen_range(SENTENCE_LEN.0..=SENTENCE_LEN.1);
        let mut out = Vec::with_capacity(len);
        let mut w = Self::sample_from(&self.initial, rng);
        out.push(w);
        for _ in 1..len {
            w = Self::sample_from(&self.table[w], rng);
            out.push(w);
        }
        out
    }
}

/// Render a phone sequence with fixed durations: per-phone prototype rows
/// (silence renders the zero vector), speaker transform gain*(proto+offset),
/// a centered moving average over time, then i.i.d. Gaussian noise.
#[allow(clippy::too_many_arguments)]
fn render_frames<R: Rng>(
    phones: &[usize],
    durations: &[usize],
    speaker: &SpeakerProfile,
    prototypes: &[Vec<f64>],
    feature_dim: usize,
    n_phones: usize,
    smoothing_window: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let total: usize = durations.iter().sum();
    let mut raw = vec![0.0; total * feature_dim];
    let mut t = 0;
    for (&p, &d) in phones.iter().zip(durations) {
        if p > n_phones {
            return Err(Error::Contract(format!("unknown phone id {}", p)));
        }
        for _ in 0..d {
            let row = &mut raw[t * feature_dim..(t + 1) * feature_dim];
            if p < n_phones {
                for (i, r) in row.iter_mut().enumerate() {
                    *r = speaker.gain * (prototypes[p][i] + speaker.offset[i]);
                }
            } else {
                for (i, r) in row.iter_mut().enumerate() {
                    *r = speaker.gain * speaker.offset[i];
                }
            }
            t += 1;
        }
    }

    // Centered moving average, truncated at the edges.
    let half = smoothing_window / 2;
    let mut smoothed = vec![0.0; total * feature_dim];
    for t in 0..total {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(total - 1);
        let n = (hi - lo + 1) as f64;
        for i in 0..feature_dim {
            let mut acc = 0.0;
            for s in lo..=hi {
                acc += raw[s * feature_dim + i];
            }
            smoothed[t * feature_dim + i] = acc / n;
        }
    }

    if noise_sigma > 0.0 {
        for v in smoothed.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += n * noise_sigma;
        }
    }
    Ok(smoothed)
}

/// Draw per-phone durations and render. The public single-utterance surface.
pub fn render_utterance<R: Rng>(
    phones: &[usize],
    speaker: &SpeakerProfile,
    prototypes: &[Vec<f64>],
    config: &WorldConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if phones.is_empty() {
        return Err(Error::Contract("render_utterance: empty phone sequence".into()));
    }
    let durations: Vec<usize> = phones
        .iter()
        .map(|_| rng.gen_range(config.duration_range[0]..=config.duration_range[1]))
        .collect();
    let frames = render_frames(
        phones,
        &durations,
        speaker,
        prototypes,
        config.feature_dim,
        config.n_phones,
        config.smoothing_window,
        config.noise_sigma,
        rng,
    )?;
    Ok((frames, durations))
}

/// Per-frame phone labels: frame t is labeled with the phone whose duration
/// interval contains t.
pub fn oracle_alignment(utt: &Utterance) -> Vec<usize> {
    let mut out = Vec::with_capacity(utt.durations.iter().sum());
    for (&p, &d) in utt.phones.iter().zip(&utt.durations) {
        for _ in 0..d {
            out.push(p);
        }
    }
    out
}

pub fn build_world(config: &WorldConfig) -> Result<Dataset> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seeds = [0u64; 8];
    for s in seeds.iter_mut() {
        *s = master.gen();
    }

    let prototypes = sample_prototypes(config, &mut ChaCha8Rng::seed_from_u64(seeds[0]))?;

    // Lexicon: uniform random pronunciations within word_len_range.
    let mut lex_rng = ChaCha8Rng::seed_from_u64(seeds[1]);
    let entries: Vec<Vec<usize>> = (0..config.n_words)
        .map(|_| {
            let len = lex_rng.gen_range(config.word_len_range[0]..=config.word_len_range[1]);
            (0..len).map(|_| lex_rng.gen_range(0..config.n_phones)).collect()
        })
        .collect();
    let lexicon = Lexicon::new(entries)?;

    // Speaker 0 is the canonical identity voice so that noiseless renders
    // equal the prototypes exactly; further speakers are perturbations.
    let mut spk_rng = ChaCha8Rng::seed_from_u64(seeds[2]);
    let speakers: Vec<SpeakerProfile> = (0..config.n_speakers)
        .map(|s| {
            if s == 0 {
                SpeakerProfile {
                    speaker_id: 0,
                    offset: vec![0.0; config.feature_dim],
                    gain: 1.0,
                }
            } else {
                SpeakerProfile {
                    speaker_id: s,
                    offset: sample_normal_vec(
                        &mut spk_rng,
                        config.feature_dim,
                        config.speaker_offset_sigma,
                    ),
                    gain: spk_rng.gen_range(0.5..=2.0),
                }
            }
        })
        .collect();

    let sentence_model = SentenceModel::new(config.n_words, &mut ChaCha8Rng::seed_from_u64(seeds[3]));

    // Text corpus first; spoken sentences are then rejection-sampled away
    // from it so the two sides share no exact sentence.
    let mut text_rng = ChaCha8Rng::seed_from_u64(seeds[4]);
    let mut text_train = Vec::with_capacity(config.n_text_sents);
    let mut text_set: BTreeSet<Vec<usize>> = BTreeSet::new();
    for _ in 0..config.n_text_sents {
        let s = sentence_model.sample_sentence(&mut text_rng);
        text_set.insert(s.clone());
        text_train.push(s);
    }

    let sample_disjoint = |rng: &mut ChaCha8Rng, banned: &BTreeSet<Vec<usize>>| -> Result<Vec<usize>> {
        for _ in 0..10_000 {
            let s = sentence_model.sample_sentence(rng);
            if !banned.contains(&s) {
                return Ok(s);
            }
        }
        Err(Error::Config("could not sample a sentence disjoint from the text corpus".into()))
    };

    let mut audio_rng = ChaCha8Rng::seed_from_u64(seeds[5]);
    let mut audio_train = Vec::with_capacity(config.n_audio_utts);
    let mut audio_set: BTreeSet<Vec<usize>> = BTreeSet::new();
    for i in 0..config.n_audio_utts {
        let words = sample_disjoint(&mut audio_rng, &text_set)?;
        audio_set.insert(words.clone());
        let speaker = &speakers[i % config.n_speakers];
        let groups = textproc::phonemize_words(&words, &lexicon)?;
        let phones = textproc::insert_silences(
            &groups,
            config.n_phones,
            config.p_sil_between_words,
            &mut audio_rng,
        );
        let (frames, durations) =
            render_utterance(&phones, speaker, &prototypes, config, &mut audio_rng)?;
        audio_train.push(Utterance {
            id: format!("{:04}", i),
            words,
            phones,
            durations,
            frames,
            speaker_id: speaker.speaker_id,
        });
    }

    let mut test_rng = ChaCha8Rng::seed_from_u64(seeds[6]);
    let banned: BTreeSet<Vec<usize>> = text_set.union(&audio_set).cloned().collect();
    let mut test = Vec::with_capacity(config.n_test_utts);
    for i in 0..config.n_test_utts {
        let words = sample_disjoint(&mut test_rng, &banned)?;
        let speaker = &speakers[i % config.n_speakers];
        let groups = textproc::phonemize_words(&words, &lexicon)?;
        let phones = textproc::insert_silences(
            &groups,
            config.n_phones,
            config.p_sil_between_words,
            &mut test_rng,
        );
        let (frames, durations) =
            render_utterance(&phones, speaker, &prototypes, config, &mut test_rng)?;
        test.push(Utterance {
            id: format!("test-{:04}", i),
            words,
            phones,
            durations,
            frames,
            speaker_id: speaker.speaker_id,
        });
    }

    let mut probe_rng = ChaCha8Rng::seed_from_u64(seeds[7]);
    let probe: Vec<Vec<usize>> =
        (0..1000).map(|_| sentence_model.sample_sentence(&mut probe_rng)).collect();
    let ambiguity_count = textproc::ambiguity_count(&probe, &lexicon)?;

    Ok(Dataset {
        config: config.clone(),
        prototypes,
        lexicon,
        speakers,
        audio_train,
        text_train,
        test,
        ambiguity_count,
    })
}

// ── persistence ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct WorldFile {
    schema_version: u32,
    config: WorldConfig,
    prototypes: Vec<Vec<f64>>,
    lexicon: Lexicon,
    speakers: Vec<SpeakerProfile>,
    ambiguity_count: usize,
}

#[derive(Serialize, Deserialize)]
struct AudioMeta {
    id: String,
    speaker_id: usize,
    eval_only_words: Vec<usize>,
    eval_only_phones: Vec<usize>,
    eval_only_durations: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TestMeta {
    id: String,
    speaker_id: usize,
    words: Vec<usize>,
    phones: Vec<usize>,
    durations: Vec<usize>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let world = WorldFile {
            schema_version: FORMAT_VERSION,
            config: self.config.clone(),
            prototypes: self.prototypes.clone(),
            lexicon: self.lexicon.clone(),
            speakers: self.speakers.clone(),
            ambiguity_count: self.ambiguity_count,
        };
        fs::write(dir.join("world.json"), serde_json::to_string_pretty(&world)?)?;

        let audio_dir = dir.join("audio");
        fs::create_dir_all(&audio_dir)?;
        let mut meta = fs::File::create(dir.join("audio_meta.jsonl"))?;
        for utt in &self.audio_train {
            let rows = utt.n_frames(self.config.feature_dim);
            nkio::save_tensor_file(
                &audio_dir.join(format!("{}.nkt", utt.id)),
                &[rows, self.config.feature_dim],
                &utt.frames,
            )?;
            let rec = AudioMeta {
                id: utt.id.clone(),
                speaker_id: utt.speaker_id,
                eval_only_words: utt.words.clone(),
                eval_only_phones: utt.phones.clone(),
                eval_only_durations: utt.durations.clone(),
            };
            writeln!(meta, "{}", serde_json::to_string(&rec)?)?;
        }

        let mut text = fs::File::create(dir.join("text.txt"))?;
        for sent in &self.text_train {
            let line: Vec<String> = sent.iter().map(|w| w.to_string()).collect();
            writeln!(text, "{}", line.join(" "))?;
        }

        let test_dir = dir.join("test");
        fs::create_dir_all(&test_dir)?;
        let mut tmeta = fs::File::create(dir.join("test_meta.jsonl"))?;
        for utt in &self.test {
            let rows = utt.n_frames(self.config.feature_dim);
            nkio::save_tensor_file(
                &test_dir.join(format!("{}.nkt", utt.id)),
                &[rows, self.config.feature_dim],
                &utt.frames,
            )?;
            let rec = TestMeta {
                id: utt.id.clone(),
                speaker_id: utt.speaker_id,
                words: utt.words.clone(),
                phones: utt.phones.clone(),
                durations: utt.durations.clone(),
            };
            writeln!(tmeta, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let world: WorldFile = serde_json::from_str(&fs::read_to_string(dir.join("world.json"))?)?;
        if world.schema_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "world schema version {} unsupported (expected {})",
                world.schema_version, FORMAT_VERSION
            )));
        }

        let read_side = |meta_path: &Path, frames_dir: &Path, is_test: bool| -> Result<Vec<Utterance>> {
            let mut out = Vec::new();
            let reader = BufReader::new(fs::File::open(meta_path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let (id, speaker_id, words, phones, durations) = if is_test {
                    let m: TestMeta = serde_json::from_str(&line)?;
                    (m.id, m.speaker_id, m.words, m.phones, m.durations)
                } else {
                    let m: AudioMeta = serde_json::from_str(&line)?;
                    (m.id, m.speaker_id, m.eval_only_words, m.eval_only_phones, m.eval_only_durations)
                };
                let (shape, frames) = nkio::load_tensor_file(&frames_dir.join(format!("{}.nkt", id)))?;
                if shape.len() != 2 || shape[1] != world.config.feature_dim {
                    return Err(Error::Format(format!("frame tensor {} has shape {:?}", id, shape)));
                }
                out.push(Utterance { id, words, phones, durations, frames, speaker_id });
            }
            Ok(out)
        };

        let audio_train = read_side(&dir.join("audio_meta.jsonl"), &dir.join("audio"), false)?;
        let test = read_side(&dir.join("test_meta.jsonl"), &dir.join("test"), true)?;

        let mut text_train = Vec::new();
        for line in BufReader::new(fs::File::open(dir.join("text.txt"))?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sent: Vec<usize> = line
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| Error::Format(format!("bad text line: {}", line))))
                .collect::<Result<_>>()?;
            text_train.push(sent);
        }

        Ok(Dataset {
            config: world.config,
            prototypes: world.prototypes,
            lexicon: world.lexicon,
            speakers: world.speakers,
            audio_train,
            text_train,
            test,
            ambiguity_count: world.ambiguity_count,
        })
    }
}
