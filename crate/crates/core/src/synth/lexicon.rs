use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of distinct words over `k` characters with lengths in `range`,
/// saturating at `usize::MAX`.
pub fn word_space(k: usize, (min_len, max_len): (usize, usize)) -> usize {
    (min_len..=max_len).fold(0usize, |acc, l| {
        let n = (0..l).try_fold(1usize, |p, _| p.checked_mul(k)).unwrap_or(usize::MAX);
        acc.saturating_add(n)
    })
}

/// Two disjoint word lists; each nonempty list uses every character of
/// `charset` at least once.
pub fn build_lexicons(
    charset: &[char],
    n_iv: usize,
    n_oov: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let (min_len, max_len) = len_range;
    if charset.is_empty() {
        return Err(Error::Capacity("empty charset".into()));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Capacity(format!("bad word length range {min_len}..={max_len}")));
    }
    let space = word_space(charset.len(), len_range);
    if n_iv.saturating_add(n_oov) > space {
        return Err(Error::Capacity(format!(
            "{} words requested but only {space} distinct words exist",
            n_iv + n_oov
        )));
    }
    let cover = charset.len().div_ceil(max_len);
    for (name, n) in [("IV", n_iv), ("OOV", n_oov)] {
        if n > 0 && n < cover {
            return Err(Error::Capacity(format!(
                "{name} list of {n} words cannot cover {} characters at length <= {max_len}",
                charset.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let budget = 1000 * (n_iv + n_oov + 1);
    let mut attempts = 0usize;
    let mut lists = [Vec::with_capacity(n_iv), Vec::with_capacity(n_oov)];

    // coverage seeds: a shuffled charset cut into word-sized chunks
    for (k, n) in [n_iv, n_oov].into_iter().enumerate() {
        if n == 0 {
            continue;
        }
        'seed: loop {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Capacity("could not find disjoint coverage words".into()));
            }
            let mut order = charset.to_vec();
            order.shuffle(&mut rng);
            let mut words = Vec::with_capacity(cover);
            for chunk in order.chunks(max_len) {
                let mut w: Vec<char> = chunk.to_vec();
                while w.len() < min_len {
                    w.push(charset[rng.gen_range(0..charset.len())]);
                }
                w.shuffle(&mut rng);
                let w: String = w.into_iter().collect();
                if used.contains(&w) || words.contains(&w) {
                    continue 'seed;
                }
                words.push(w);
            }
            used.extend(words.iter().cloned());
            lists[k].extend(words);
            break;
        }
    }
    for (k, n) in [n_iv, n_oov].into_iter().enumerate() {
        while lists[k].len() < n {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Capacity("word space too crowded for rejection sampling".into()));
            }
            let len = rng.gen_range(min_len..=max_len);
            let w: String = (0..len).map(|_| charset[rng.gen_range(0..charset.len())]).collect();
            if used.insert(w.clone()) {
                lists[k].push(w);
            }
        }
        lists[k].shuffle(&mut rng);
    }
    let [iv, oov] = lists;
    Ok((iv, oov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn charset() -> Vec<char> {
        "abcdefghijklmnopqrstuvwxyz0123456789".chars().collect()
    }

    #[test]
    fn disjoint_and_covering_for_many_seeds() {
        let cs = charset();
        for seed in 0..100 {
            let (iv, oov) = build_lexicons(&cs, 40, 12, (3, 7), seed).unwrap();
            assert_eq!((iv.len(), oov.len()), (40, 12));
            let ivs: HashSet<_> = iv.iter().collect();
            assert_eq!(ivs.len(), iv.len());
            assert!(oov.iter().all(|w| !ivs.contains(w)));
            for list in [&iv, &oov] {
                let seen: HashSet<char> = list.iter().flat_map(|w| w.chars()).collect();
                assert!(cs.iter().all(|c| seen.contains(c)), "seed {seed}");
                assert!(list.iter().all(|w| (3..=7).contains(&w.len())));
            }
        }
    }

    #[test]
    fn zero_oov_is_empty() {
        let (iv, oov) = build_lexicons(&charset(), 10, 0, (3, 7), 1).unwrap();
        assert_eq!(iv.len(), 10);
        assert!(oov.is_empty());
    }

    #[test]
    fn infeasible_counts() {
        let ab = ['a', 'b'];
        assert_eq!(word_space(2, (1, 2)), 6);
        assert!(matches!(build_lexicons(&ab, 5, 2, (1, 2), 0), Err(Error::Capacity(_))));
        assert!(build_lexicons(&ab, 4, 2, (1, 2), 0).is_ok());
        assert!(matches!(build_lexicons(&charset(), 3, 3, (3, 7), 0), Err(Error::Capacity(_))));
    }
}
