use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskfuse_core::shapley::{exact_shapley, sampled_shapley};

fn index(coalition: &[bool]) -> usize {
    coalition.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum()
}

fn random_table(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1usize << n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Average marginal contribution over every ordering, written independently
/// of the library's enumeration.
fn permutation_average(n: usize, table: &[f64]) -> Vec<f64> {
    fn orderings(rest: Vec<usize>, prefix: Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix);
            return;
        }
        for (i, &p) in rest.iter().enumerate() {
            let mut r = rest.clone();
            r.remove(i);
            let mut pre = prefix.clone();
            pre.push(p);
            orderings(r, pre, out);
        }
    }
    let mut all = Vec::new();
    orderings((0..n).collect(), Vec::new(), &mut all);
    let mut phi = vec![0.0; n];
    for order in &all {
        let mut mask = 0usize;
        for &p in order {
            let before = table[mask];
            mask |= 1 << p;
            phi[p] += table[mask] - before;
        }
    }
    phi.iter().map(|v| v / all.len() as f64).collect()
}

#[test]
fn four_player_game_matches_permutation_oracle() {
    for seed in 0..5 {
        let table = random_table(4, seed);
        let phi = exact_shapley(4, |c| table[index(c)]).unwrap();
        let oracle = permutation_average(4, &table);
        for (a, b) in phi.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {phi:?} vs {oracle:?}");
        }
    }
}

#[test]
fn ten_groups_two_thousand_permutations_within_tolerance() {
    // A smooth non-additive game: weighted sum plus pairwise interactions
    // and a saturating term, like a model output over masked inputs.
    let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin() * 0.2).collect();
    let game = |c: &[bool]| {
        let on: Vec<f64> = c.iter().map(|&b| b as u8 as f64).collect();
        let lin: f64 = on.iter().zip(&w).map(|(x, w)| x * w).sum();
        let pair = 0.15 * on[0] * on[1] - 0.1 * on[2] * on[7] + 0.05 * on[3] * on[4] * on[5];
        (lin + pair).tanh()
    };
    let exact = exact_shapley(10, game).unwrap();
    let sampled = sampled_shapley(10, game, 2000, 7).unwrap();
    let max_diff = exact
        .iter()
        .zip(&sampled.phi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 0.05, "max |dphi| = {max_diff}");
}

#[test]
fn three_player_exhaustive_sampling_is_exact() {
    let table = random_table(3, 99);
    let exact = exact_shapley(3, |c| table[index(c)]).unwrap();
    let s = sampled_shapley(3, |c| table[index(c)], 6, 1).unwrap();
    assert!(s.exhaustive);
    for (a, b) in exact.iter().zip(&s.phi) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sampled_stderr_shrinks_like_inverse_sqrt() {
    let table = random_table(9, 4);
    let game = |c: &[bool]| table[index(c)];
    for seed in 0..3 {
        let small = sampled_shapley(9, game, 200, seed).unwrap();
        let large = sampled_shapley(9, game, 3200, seed).unwrap();
        for (s, l) in small.stderr.iter().zip(&large.stderr) {
            // Sixteen times the permutations: expect a ratio near 4.
            let ratio = s / l;
            assert!((2.0..=8.0).contains(&ratio), "seed {seed}: ratio {ratio}");
        }
    }
}

fn game_table(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1usize << n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn efficiency(n in 1usize..=8, seed in any::<u64>()) {
        let table = random_table(n, seed);
        let phi = exact_shapley(n, |c| table[index(c)]).unwrap();
        let total: f64 = phi.iter().sum();
        prop_assert!((total - (table[(1 << n) - 1] - table[0])).abs() < 1e-9);
    }

    #[test]
    fn symmetry(mut table in game_table(5)) {
        // Make players 1 and 3 interchangeable: v(S) = v(swap13(S)).
        let swap = |m: usize| {
            let b1 = m >> 1 & 1;
            let b3 = m >> 3 & 1;
            (m & !0b1010) | b1 << 3 | b3 << 1
        };
        for m in 0..table.len() {
            let s = swap(m);
            if s > m {
                table[s] = table[m];
            }
        }
        let phi = exact_shapley(5, |c| table[index(c)]).unwrap();
        prop_assert!((phi[1] - phi[3]).abs() < 1e-9);
    }

    #[test]
    fn dummy(mut table in game_table(5), dummy in 0usize..5) {
        for m in 0..table.len() {
            if m >> dummy & 1 == 1 {
                table[m] = table[m & !(1 << dummy)];
            }
        }
        let phi = exact_shapley(5, |c| table[index(c)]).unwrap();
        prop_assert!(phi[dummy].abs() < 1e-9);
    }

    #[test]
    fn linearity(g in game_table(5), h in game_table(5), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let phi_g = exact_shapley(5, |c| g[index(c)]).unwrap();
        let phi_h = exact_shapley(5, |c| h[index(c)]).unwrap();
        let phi = exact_shapley(5, |c| a * g[index(c)] + b * h[index(c)]).unwrap();
        for i in 0..5 {
            prop_assert!((phi[i] - (a * phi_g[i] + b * phi_h[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_efficient(n in 2usize..=9, perms in 1usize..60, seed in any::<u64>()) {
        let table = random_table(n, seed ^ 0x5eed);
        let a = sampled_shapley(n, |c| table[index(c)], perms, seed).unwrap();
        let b = sampled_shapley(n, |c| table[index(c)], perms, seed).unwrap();
        prop_assert_eq!(&a.phi, &b.phi);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.stderr), bits(&b.stderr));
        let total: f64 = a.phi.iter().sum();
        prop_assert!((total - (table[(1 << n) - 1] - table[0])).abs() < 1e-9);
    }
}
