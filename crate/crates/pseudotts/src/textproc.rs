//! Text-side preprocessing: lexicon lookup, sentence phonemization, and
//! silence insertion. Feeds both the discriminator's real sequences and
//! the acoustic model input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word-id to phone-id mapping, total over the world's vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<Vec<usize>>,
}

impl Lexicon {
    pub fn new(entries: Vec<Vec<usize>>) -> Result<Lexicon> {
        if entries.iter().any(|e| e.is_empty()) {
            return Err(Error::Contract("lexicon: every word needs at least one phone".into()));
        }
        Ok(Lexicon { entries })
    }

    pub fn get(&self, word: usize) -> Option<&[usize]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.entries.iter().enumerate().map(|(i, v)| (i, v.as_slice()))
    }
}

/// Concatenated per-word phone sequences, no separators.
pub fn phonemize(sentence: &[usize], lexicon: &Lexicon) -> Result<Vec<usize>> {
    let groups = phonemize_words(sentence, lexicon)?;
    Ok(groups.into_iter().flatten().collect())
}

/// Per-word phone groups; the word-boundary view used for silence insertion.
pub fn phonemize_words(sentence: &[usize], lexicon: &Lexicon) -> Result<Vec<Vec<usize>>> {
    sentence
        .iter()
        .map(|&w| {
            lexicon
                .get(w)
                .map(|p| p.to_vec())
                .ok_or_else(|| Error::Contract(format!("out-of-vocabulary word {}", w)))
        })
        .collect()
}

/// SIL always pads both ends; each interior word boundary gets SIL
/// independently with probability `p_sil`.
pub fn insert_silences<R: Rng>(
    word_groups: &[Vec<usize>],
    sil: usize,
    p_sil: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = vec![sil];
    for (i, group) in word_groups.iter().enumerate() {
        if i > 0 && rng.gen_range(0.0..1.0) < p_sil {
            out.push(sil);
        }
        out.extend_from_slice(group);
    }
    out.push(sil);
    out
}

/// Number of unordered sentence pairs with different words but identical
/// phonemizations, over the given probe sentences.
pub fn ambiguity_count(sentences: &[Vec<usize>], lexicon: &Lexicon) -> Result<usize> {
    let phonemized: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| phonemize(s, lexicon))
        .collect::<Result<_>>()?;
    let mut count = 0;
    for i in 0..sentences.len() {
        for j in i + 1..sentences.len() {
            if sentences[i] != sentences[j] && phonemized[i] == phonemized[j] {
                count += 1;
            }
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lex() -> Lexicon {
        Lexicon::new(vec![vec![0, 1], vec![2], vec![1, 0]]).unwrap()
    }

    #[test]
    fn phonemize_concatenates() {
        assert_eq!(phonemize(&[0, 1], &lex()).unwrap(), vec![0, 1, 2]);
        assert_eq!(phonemize(&[], &lex()).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn phonemize_rejects_oov_naming_word() {
        let err = phonemize(&[0, 9], &lex()).unwrap_err().to_string();
        assert!(err.contains('9'), "{}", err);
    }

    #[test]
    fn silence_insertion_extremes() {
        let sil = 7;
        let groups = vec![vec![0, 1], vec![2]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(insert_silences(&groups, sil, 0.0, &mut rng), vec![7, 0, 1, 2, 7]);
        assert_eq!(insert_silences(&groups, sil, 1.0, &mut rng), vec![7, 0, 1, 7, 2, 7]);
    }

    #[test]
    fn silence_insertion_is_seed_deterministic() {
        let groups = vec![vec![0], vec![1], vec![2], vec![0, 2]];
        let a = insert_silences(&groups, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(42));
        let b = insert_silences(&groups, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn stripping_sil_recovers_phonemization() {
        let lexicon = lex();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let sentence: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let groups = phonemize_words(&sentence, &lexicon).unwrap();
            let with_sil = insert_silences(&groups, 99, 0.5, &mut rng);
            let stripped: Vec<usize> = with_sil.into_iter().filter(|&p| p != 99).collect();
            assert_eq!(stripped, phonemize(&sentence, &lexicon).unwrap());
        }
    }

    #[test]
    fn ambiguity_counts_distinct_sentences_with_equal_phones() {
        let lexicon = Lexicon::new(vec![vec![0], vec![0], vec![1]]).unwrap();
        // words 0 and 1 collide
        let sentences = vec![vec![0], vec![1], vec![2], vec![0]];
        assert_eq!(ambiguity_count(&sentences, &lexicon).unwrap(), 2);
    }
}
