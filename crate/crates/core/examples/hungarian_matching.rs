//! Matches predictions to ground truth with the Hungarian solver and checks
//! the result against every permutation.
//!
//! `cargo run --example hungarian_matching -- [seed]`

use iaunet::matching::hungarian;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(cost: &[Vec<f64>], gt: usize, used: &mut Vec<bool>) -> f64 {
    if gt == cost[0].len() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for p in 0..cost.len() {
        if !used[p] {
            used[p] = true;
            best = best.min(cost[p][gt] + brute_force(cost, gt + 1, used));
            used[p] = false;
        }
    }
    best
}

fn main() -> iaunet::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 5 predictions, 3 ground truths
    let cost: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
    for (p, row) in cost.iter().enumerate() {
        println!("pred {p}: {}", row.iter().map(|c| format!("{c:6.3}")).collect::<Vec<_>>().join(" "));
    }
    let a = hungarian(&cost)?;
    for &(p, g) in &a.pairs {
        println!("pred {p} -> gt {g}  cost {:.3}", cost[p][g]);
    }
    println!("unmatched predictions {:?}", a.unmatched_predictions);
    let exhaustive = brute_force(&cost, 0, &mut vec![false; cost.len()]);
    println!("total {:.6}  exhaustive minimum {:.6}", a.total(&cost), exhaustive);
    Ok(())
}
