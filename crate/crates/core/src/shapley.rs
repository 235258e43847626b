//! Shapley values of a cooperative game given as a value function over
//! coalitions (`coalition[i] == true` means player `i` is present).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Largest game solved by full coalition enumeration (2^15 evaluations).
pub const MAX_EXACT_PLAYERS: usize = 15;

fn coalition_of(mask: u64, n: usize, buf: &mut [bool]) {
    for (i, slot) in buf.iter_mut().enumerate().take(n) {
        *slot = mask >> i & 1 == 1;
    }
}

/// `φ_i = Σ_{S ⊆ N∖{i}} |S|!(n−|S|−1)!/n! · [v(S∪{i}) − v(S)]`, evaluating
/// `value` once per coalition.
pub fn exact_shapley(n: usize, mut value: impl FnMut(&[bool]) -> f64) -> Result<Vec<f64>> {
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::Capacity {
            groups: n,
            cap: MAX_EXACT_PLAYERS,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let size = 1usize << n;
    let mut table = Vec::with_capacity(size);
    let mut buf = vec![false; n];
    for mask in 0..size as u64 {
        coalition_of(mask, n, &mut buf);
        table.push(value(&buf));
    }

    let mut factorial = vec![1.0f64; n + 1];
    for k in 1..=n {
        factorial[k] = factorial[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..n)
        .map(|s| factorial[s] * factorial[n - s - 1] / factorial[n])
        .collect();

    let mut phi = vec![0.0; n];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for mask in 0..size {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                acc += weight[s] * (table[mask | bit] - table[mask]);
            }
        }
        *phi_i = acc;
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledShapley {
    pub phi: Vec<f64>,
    /// Monte-Carlo standard error of each `phi`; zero when every permutation
    /// was enumerated, NaN with a single permutation.
    pub stderr: Vec<f64>,
    pub permutations: usize,
    pub exhaustive: bool,
}

fn factorial_at_most(n: usize, limit: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|v| *v <= limit))
}

/// Advances `perm` to the next lexicographic permutation; false when done.
fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = (1..perm.len()).rev().find(|&i| perm[i - 1] < perm[i]) else {
        return false;
    };
    let j = (i..perm.len()).rev().find(|&j| perm[j] > perm[i - 1]).expect("pivot exists");
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Permutation-sampling estimate: averages each player's marginal
/// contribution along random orderings. When `n_permutations >= n!`, every
/// ordering is enumerated once instead and the result is exact.
pub fn sampled_shapley(
    n: usize,
    mut value: impl FnMut(&[bool]) -> f64,
    n_permutations: usize,
    seed: u64,
) -> Result<SampledShapley> {
    if n_permutations == 0 {
        return Err(Error::invalid("n_permutations must be at least 1"));
    }
    let exhaustive = factorial_at_most(n, n_permutations).is_some();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut count = 0usize;
    let mut coalition = vec![false; n];
    let empty_value = value(&coalition);
    let mut perm: Vec<usize> = (0..n).collect();

    loop {
        if !exhaustive {
            if count == n_permutations {
                break;
            }
            perm.shuffle(&mut rng);
        }
        coalition.iter_mut().for_each(|c| *c = false);
        let mut prev = empty_value;
        count += 1;
        for &player in &perm {
            coalition[player] = true;
            let v = value(&coalition);
            let marginal = v - prev;
            prev = v;
            let delta = marginal - mean[player];
            mean[player] += delta / count as f64;
            m2[player] += delta * (marginal - mean[player]);
        }
        if exhaustive && !next_permutation(&mut perm) {
            break;
        }
    }

    let stderr = m2
        .iter()
        .map(|m| {
            if exhaustive {
                0.0
            } else if count < 2 {
                f64::NAN
            } else {
                (m / (count - 1) as f64 / count as f64).sqrt()
            }
        })
        .collect();
    Ok(SampledShapley {
        phi: mean,
        stderr,
        permutations: count,
        exhaustive,
    })
}
