//! Interpolated additive-smoothed phone n-gram model. Scores decoding
//! hypotheses, drives unsupervised checkpoint/parameter selection, and is
//! trained on the silence-inserted phonemized text corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyworld::Inventory;

#[derive(Debug, Clone, Default, PartialEq)]
struct Counts {
    total: u64,
    by_sym: BTreeMap<usize, u64>,
}

/// Phone n-gram model over phones + SIL + an explicit end-of-sequence
/// symbol. Conditionals interpolate maximum-likelihood estimates of all
/// orders, with add-k smoothing at the unigram level; a context unseen at
/// some order contributes the uniform distribution at that order.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub order: usize,
    pub add_k: f64,
    pub lambda: Vec<f64>,
    pub inventory: Inventory,
    /// tables[i] holds order-(i+1) context counts.
    tables: Vec<BTreeMap<Vec<usize>, Counts>>,
}

/// Default interpolation weights: proportional to 2^(order-1), so higher
/// orders dominate when their contexts have been seen.
pub fn default_lambda(order: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..order).map(|i| (1u64 << i) as f64).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn train_lm(
    sequences: &[Vec<usize>],
    order: usize,
    add_k: f64,
    lambda: Option<Vec<f64>>,
    inventory: Inventory,
) -> Result<NGramModel> {
    if order < 1 {
        return Err(Error::Contract("train_lm: order must be >= 1".into()));
    }
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::Contract("train_lm: empty corpus".into()));
    }
    if add_k < 0.0 {
        return Err(Error::Contract("train_lm: add_k must be >= 0".into()));
    }
    let lambda = match lambda {
        Some(l) => {
            if l.len() != order {
                return Err(Error::Contract(format!(
                    "train_lm: {} lambda weights for order {}",
                    l.len(),
                    order
                )));
            }
            if l.iter().any(|&v| v < 0.0) {
                return Err(Error::Contract("train_lm: lambda weights must be >= 0".into()));
            }
            let s: f64 = l.iter().sum();
            if s <= 0.0 {
                return Err(Error::Contract("train_lm: lambda weights sum to zero".into()));
            }
            l.into_iter().map(|v| v / s).collect()
        }
        None => default_lambda(order),
    };

    let end = inventory.end();
    let start = inventory.start();
    let mut tables: Vec<BTreeMap<Vec<usize>, Counts>> = vec![BTreeMap::new(); order];
    for seq in sequences {
        for &sym in seq {
            if sym >= end {
                return Err(Error::Contract(format!("train_lm: unknown symbol {}", sym)));
            }
        }
        let mut padded = vec![start; order - 1];
        padded.extend_from_slice(seq);
        padded.push(end);
        for j in (order - 1)..padded.len() {
            let sym = padded[j];
            for i in 1..=order {
                let ctx = padded[j - (i - 1)..j].to_vec();
                let entry = tables[i - 1].entry(ctx).or_default();
                entry.total += 1;
                *entry.by_sym.entry(sym).or_insert(0) += 1;
            }
        }
    }

    Ok(NGramModel { order, add_k, lambda, inventory, tables })
}

/// Rolling language-model context for incremental scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmState {
    ctx: Vec<usize>,
}

impl NGramModel {
    fn vocab(&self) -> usize {
        self.inventory.lm_vocab()
    }

    /// P(sym | ctx) where ctx is the most recent order-1 symbols
    /// (start-padded). Always positive when add_k > 0.
    pub fn conditional(&self, ctx: &[usize], sym: usize) -> f64 {
        debug_assert_eq!(ctx.len(), self.order - 1);
        let v = self.vocab() as f64;
        let mut p = 0.0;
        for i in 1..=self.order {
            let sub = &ctx[ctx.len() - (i - 1)..];
            let pi = match self.tables[i - 1].get(sub) {
                Some(c) => {
                    if i == 1 {
                        let n = c.by_sym.get(&sym).copied().unwrap_or(0) as f64;
                        (n + self.add_k) / (c.total as f64 + self.add_k * v)
                    } else {
                        c.by_sym.get(&sym).copied().unwrap_or(0) as f64 / c.total as f64
                    }
                }
                // Unseen context (or untrained unigram table): uniform.
                None => 1.0 / v,
            };
            p += self.lambda[i - 1] * pi;
        }
        p
    }

    pub fn start_state(&self) -> LmState {
        LmState { ctx: vec![self.inventory.start(); self.order - 1] }
    }

    /// Incremental score: ln P(sym | state), plus the advanced state.
    pub fn step(&self, state: &LmState, sym: usize) -> Result<(f64, LmState)> {
        if sym >= self.inventory.end() {
            return Err(Error::Contract(format!("lm: unknown symbol {}", sym)));
        }
        let lp = self.conditional(&state.ctx, sym).ln();
        let mut ctx = state.ctx.clone();
        if !ctx.is_empty() {
            ctx.remove(0);
            ctx.push(sym);
        }
        Ok((lp, LmState { ctx }))
    }

    /// ln P(end marker | state); terminates every scored sequence.
    pub fn end_logprob(&self, state: &LmState) -> f64 {
        self.conditional(&state.ctx, self.inventory.end()).ln()
    }

    /// Sum of conditional log-probabilities including the end marker.
    pub fn logprob(&self, sequence: &[usize]) -> Result<f64> {
        let mut state = self.start_state();
        let mut total = 0.0;
        for &sym in sequence {
            let (lp, next) = self.step(&state, sym)?;
            total += lp;
            state = next;
        }
        Ok(total + self.end_logprob(&state))
    }

    /// exp(-total logprob / total predicted symbols); predictions include
    /// one end marker per sequence.
    pub fn perplexity(&self, sequences: &[Vec<usize>]) -> Result<f64> {
        if sequences.is_empty() {
            return Err(Error::Contract("perplexity: empty evaluation set".into()));
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for seq in sequences {
            total += self.logprob(seq)?;
            n += seq.len() + 1;
        }
        Ok((-total / n as f64).exp())
    }

    /// Contexts observed at the highest order; used by tests.
    pub fn observed_contexts(&self, order: usize) -> Vec<Vec<usize>> {
        self.tables[order - 1].keys().cloned().collect()
    }
}

// ── persistence ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct LmFile {
    schema_version: u32,
    order: usize,
    add_k: f64,
    lambda: Vec<f64>,
    n_phones: usize,
    /// counts[i] maps "p1,p2,..." context strings to per-symbol counts.
    counts: Vec<BTreeMap<String, BTreeMap<String, u64>>>,
}

fn ctx_key(ctx: &[usize]) -> String {
    ctx.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_ctx(key: &str) -> Result<Vec<usize>> {
    if key.is_empty() {
        return Ok(Vec::new());
    }
    key.split(',')
        .map(|p| p.parse().map_err(|_| Error::Format(format!("bad context key '{}'", key))))
        .collect()
}

impl NGramModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let counts = self
            .tables
            .iter()
            .map(|table| {
                table
                    .iter()
                    .map(|(ctx, c)| {
                        let by: BTreeMap<String, u64> =
                            c.by_sym.iter().map(|(s, n)| (s.to_string(), *n)).collect();
                        (ctx_key(ctx), by)
                    })
                    .collect()
            })
            .collect();
        let file = LmFile {
            schema_version: crate::toyworld::FORMAT_VERSION,
            order: self.order,
            add_k: self.add_k,
            lambda: self.lambda.clone(),
            n_phones: self.inventory.n_phones,
            counts,
        };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NGramModel> {
        let file: LmFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut tables = Vec::with_capacity(file.order);
        for table in &file.counts {
            let mut t: BTreeMap<Vec<usize>, Counts> = BTreeMap::new();
            for (key, by) in table {
                let ctx = parse_ctx(key)?;
                let mut counts = Counts::default();
                for (sym, n) in by {
                    let sym: usize = sym
                        .parse()
                        .map_err(|_| Error::Format(format!("bad symbol key '{}'", sym)))?;
                    counts.total += n;
                    counts.by_sym.insert(sym, *n);
                }
                t.insert(ctx, counts);
            }
            tables.push(t);
        }
        Ok(NGramModel {
            order: file.order,
            add_k: file.add_k,
            lambda: file.lambda,
            inventory: Inventory { n_phones: file.n_phones },
            tables,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inv(n: usize) -> Inventory {
        Inventory { n_phones: n }
    }

    #[test]
    fn hand_counted_bigram_example() {
        // corpus { [a,b,a,b] } with a=0, b=1; bigram, add_k=0, lambda=(0,1)
        let model = train_lm(&[vec![0, 1, 0, 1]], 2, 0.0, Some(vec![0.0, 1.0]), inv(2)).unwrap();
        let end = model.inventory.end();
        assert_eq!(model.conditional(&[0], 1), 1.0); // P(b|a)
        assert_eq!(model.conditional(&[1], 0), 0.5); // P(a|b)
        assert_eq!(model.conditional(&[1], end), 0.5); // P(end|b)
    }

    #[test]
    fn empty_counts_with_smoothing_are_uniform() {
        // Smoothing limit: a unigram table with no counts backs off to 1/V.
        let model = NGramModel {
            order: 1,
            add_k: 0.1,
            lambda: vec![1.0],
            inventory: inv(3),
            tables: vec![BTreeMap::new()],
        };
        let v = model.inventory.lm_vocab() as f64;
        for sym in 0..model.inventory.lm_vocab() {
            assert!((model.conditional(&[], sym) - 1.0 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn conditionals_normalize_for_random_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<Vec<usize>> = (0..30)
            .map(|_| (0..rng.gen_range(3..12)).map(|_| rng.gen_range(0..5)).collect())
            .collect();
        let model = train_lm(&seqs, 4, 0.1, None, inv(4)).unwrap();
        let v = model.inventory.lm_vocab();
        // 100 random contexts per order-ish position: mix of seen and unseen.
        for _ in 0..100 {
            let ctx: Vec<usize> = (0..3)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        model.inventory.start()
                    } else {
                        rng.gen_range(0..5)
                    }
                })
                .collect();
            let sum: f64 = (0..v).map(|s| model.conditional(&ctx, s)).sum();
            assert!((sum - 1.0).abs() < 1e-9, "ctx {:?} sums to {}", ctx, sum);
            for s in 0..v {
                assert!(model.conditional(&ctx, s) > 0.0);
            }
        }
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(train_lm(&[], 2, 0.1, None, inv(2)).is_err());
        assert!(train_lm(&[vec![], vec![]], 2, 0.1, None, inv(2)).is_err());
    }

    #[test]
    fn logprob_of_empty_sequence_scores_end_only() {
        let model = train_lm(&[vec![0, 1]], 2, 0.1, None, inv(2)).unwrap();
        let lp = model.logprob(&[]).unwrap();
        let state = model.start_state();
        assert_eq!(lp, model.end_logprob(&state));
    }

    #[test]
    fn unknown_symbol_is_error() {
        let model = train_lm(&[vec![0, 1]], 2, 0.1, None, inv(2)).unwrap();
        assert!(model.logprob(&[model.inventory.end()]).is_err());
    }

    #[test]
    fn training_sequence_beats_corrupted_variants() {
        // Unsmoothed bigram: the corpus sequence scores at least as high as
        // any single-symbol corruption.
        let corpus = vec![vec![0, 1, 0, 1]];
        let model = train_lm(&corpus, 2, 0.0, Some(vec![0.0, 1.0]), inv(2)).unwrap();
        let base = model.logprob(&[0, 1, 0, 1]).unwrap();
        for pos in 0..4 {
            for sym in 0..2 {
                let mut seq = vec![0, 1, 0, 1];
                if seq[pos] == sym {
                    continue;
                }
                seq[pos] = sym;
                let lp = model.logprob(&seq).unwrap();
                assert!(base >= lp, "corruption at {} to {} scored {} vs {}", pos, sym, lp, base);
            }
        }
    }

    #[test]
    fn chain_rule_exponentiates_to_conditionals() {
        let model = train_lm(&[vec![0, 1, 0, 1]], 2, 0.0, Some(vec![0.0, 1.0]), inv(2)).unwrap();
        let state = model.start_state();
        let (lp0, state) = model.step(&state, 0).unwrap();
        let (lp1, _) = model.step(&state, 1).unwrap();
        assert!((lp0.exp() - model.conditional(&[model.inventory.start()], 0)).abs() < 1e-12);
        assert!((lp1.exp() - 1.0).abs() < 1e-12); // P(b|a) = 1
    }

    #[test]
    fn score_partial_matches_logprob() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seqs: Vec<Vec<usize>> = (0..20)
            .map(|_| (0..rng.gen_range(2..10)).map(|_| rng.gen_range(0..4)).collect())
            .collect();
        let model = train_lm(&seqs, 3, 0.2, None, inv(4)).unwrap();
        for _ in 0..50 {
            let seq: Vec<usize> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..4)).collect();
            let mut state = model.start_state();
            let mut total = 0.0;
            for &s in &seq {
                let (lp, next) = model.step(&state, s).unwrap();
                total += lp;
                state = next;
            }
            total += model.end_logprob(&state);
            let full = model.logprob(&seq).unwrap();
            assert!((total - full).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let model = NGramModel {
            order: 1,
            add_k: 1.0,
            lambda: vec![1.0],
            inventory: inv(4),
            tables: vec![BTreeMap::new()],
        };
        let v = model.inventory.lm_vocab() as f64;
        let ppl = model.perplexity(&[vec![0, 1, 2], vec![3]]).unwrap();
        assert!((ppl - v).abs() < 1e-9, "ppl {} vs V {}", ppl, v);
    }

    #[test]
    fn hand_computed_bigram_perplexity() {
        // P(a|start)=1, P(b|a)=1, P(a|b)=.5, P(end|b)=.5 over predictions
        // [a, b, a, b, end]: product = 1*1*.5*1*.5 = 0.25.
        let model = train_lm(&[vec![0, 1, 0, 1]], 2, 0.0, Some(vec![0.0, 1.0]), inv(2)).unwrap();
        let ppl = model.perplexity(&[vec![0, 1, 0, 1]]).unwrap();
        let expected = (0.25f64).powf(-1.0 / 5.0);
        assert!((ppl - expected).abs() < 1e-12, "{} vs {}", ppl, expected);
    }

    #[test]
    fn more_smoothing_moves_unigram_toward_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seqs: Vec<Vec<usize>> = (0..10)
            .map(|_| (0..rng.gen_range(3..9)).map(|_| rng.gen_range(0..5)).collect())
            .collect();
        let v = inv(5).lm_vocab();
        let uniform = 1.0 / v as f64;
        let mut prev_dist = f64::INFINITY;
        for add_k in [0.0, 0.1, 0.5, 2.0, 10.0, 100.0] {
            let model = train_lm(&seqs, 1, add_k, Some(vec![1.0]), inv(5)).unwrap();
            let dist = (0..v)
                .map(|s| (model.conditional(&[], s) - uniform).abs())
                .fold(0.0, f64::max);
            assert!(dist <= prev_dist + 1e-12, "add_k {}: {} > {}", add_k, dist, prev_dist);
            prev_dist = dist;
        }
    }

    #[test]
    fn train_perplexity_at_most_heldout_statistically() {
        let mut wins = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            // A stationary source with structure: biased bigram chains.
            let gen_seq = |rng: &mut ChaCha8Rng| -> Vec<usize> {
                let n = rng.gen_range(4..12);
                let mut cur = rng.gen_range(0..5);
                let mut out = vec![cur];
                for _ in 1..n {
                    cur = if rng.gen_bool(0.7) { (cur + 1) % 5 } else { rng.gen_range(0..5) };
                    out.push(cur);
                }
                out
            };
            let train: Vec<Vec<usize>> = (0..40).map(|_| gen_seq(&mut rng)).collect();
            let held: Vec<Vec<usize>> = (0..20).map(|_| gen_seq(&mut rng)).collect();
            let model = train_lm(&train, 6, 0.1, None, inv(5)).unwrap();
            if model.perplexity(&train).unwrap() <= model.perplexity(&held).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 17, "train <= heldout in only {}/20 seeds", wins);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let seqs: Vec<Vec<usize>> = (0..15)
            .map(|_| (0..rng.gen_range(2..9)).map(|_| rng.gen_range(0..6)).collect())
            .collect();
        let model = train_lm(&seqs, 6, 0.1, None, inv(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        model.save(&path).unwrap();
        let loaded = NGramModel::load(&path).unwrap();
        assert_eq!(model, loaded);
    }
}
