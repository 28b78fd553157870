//! Reference data and seeded random graph generators for tests and sweeps.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Laplacian, WeightedDigraph};

/// Seven-agent reference Laplacian: agents 1-4 form one strongly connected
/// component that listens to the closed component formed by agents 5-7.
pub fn reference_laplacian() -> DMatrix<f64> {
    #[rustfmt::skip]
    let rows = [
        12.2, -3.2,  0.0, -4.1, -4.9,  0.0,  0.0,
        -1.5,  9.5,  0.0, -2.6,  0.0,  0.0, -5.4,
         0.0, -2.7, 10.1, -5.8,  0.0, -1.6,  0.0,
         0.0,  0.0, -4.4, 10.7, -6.3,  0.0,  0.0,
         0.0,  0.0,  0.0,  0.0,  2.6,  0.0, -2.6,
         0.0,  0.0,  0.0,  0.0, -5.3,  5.3,  0.0,
         0.0,  0.0,  0.0,  0.0, -8.7, -7.0, 15.7,
    ];
    DMatrix::from_row_slice(7, 7, &rows)
}

pub const REFERENCE_INITIAL_STATE: [f64; 7] =
    [6.2945, 8.1158, -7.4603, 8.2675, 2.6472, -8.0492, -4.4300];

pub const REFERENCE_SATURATION: f64 = 10.0;
pub const REFERENCE_ALPHA: f64 = 10.0;
pub const REFERENCE_BETA: f64 = 1.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random strongly connected digraph on `n` agents: a directed ring through
/// a shuffled agent order plus extra edges with probability `density`,
/// weights uniform in `[0.5, 5]`.
pub fn random_strongly_connected<R: Rng>(rng: &mut R, n: usize, density: f64) -> WeightedDigraph {
    let mut a = DMatrix::zeros(n, n);
    fill_strongly_connected(rng, &mut a, &(0..n).collect::<Vec<_>>(), density);
    WeightedDigraph::from_adjacency(a).expect("generator produced invalid weights")
}

fn fill_strongly_connected<R: Rng>(
    rng: &mut R,
    a: &mut DMatrix<f64>,
    agents: &[usize],
    density: f64,
) {
    let k = agents.len();
    if k < 2 {
        return;
    }
    let mut order = agents.to_vec();
    order.shuffle(rng);
    for w in 0..k {
        let (from, to) = (order[w], order[(w + 1) % k]);
        a[(to, from)] = rng.gen_range(0.5..5.0);
    }
    for &i in agents {
        for &j in agents {
            if i != j && a[(i, j)] == 0.0 && rng.gen_bool(density) {
                a[(i, j)] = rng.gen_range(0.5..5.0);
            }
        }
    }
}

/// Random digraph with a directed spanning tree and exactly `blocks`
/// strongly connected components (when `n >= blocks`). Agents are shuffled
/// so the component structure is not aligned with the index order.
pub fn random_spanning_tree<R: Rng>(
    rng: &mut R,
    n: usize,
    blocks: usize,
    density: f64,
) -> WeightedDigraph {
    assert!(blocks >= 1 && blocks <= n);
    let mut sizes = vec![1usize; blocks];
    for _ in blocks..n {
        let b = rng.gen_range(0..blocks);
        sizes[b] += 1;
    }
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(rng);
    let mut groups = Vec::with_capacity(blocks);
    let mut start = 0;
    for s in &sizes {
        groups.push(labels[start..start + s].to_vec());
        start += s;
    }
    let mut a = DMatrix::zeros(n, n);
    for g in &groups {
        fill_strongly_connected(rng, &mut a, g, density);
    }
    // group m listens to at least one later group; the last group is closed
    for m in 0..blocks.saturating_sub(1) {
        let q = rng.gen_range(m + 1..blocks);
        let i = *groups[m].choose(rng).unwrap();
        let j = *groups[q].choose(rng).unwrap();
        a[(i, j)] = rng.gen_range(0.5..5.0);
        for &i in &groups[m] {
            for later in &groups[m + 1..] {
                for &j in later {
                    if a[(i, j)] == 0.0 && rng.gen_bool(density / 2.0) {
                        a[(i, j)] = rng.gen_range(0.5..5.0);
                    }
                }
            }
        }
    }
    WeightedDigraph::from_adjacency(a).expect("generator produced invalid weights")
}

pub fn random_irreducible_laplacian<R: Rng>(rng: &mut R, n: usize) -> Laplacian {
    let density = rng.gen_range(0.1..0.6);
    random_strongly_connected(rng, n, density).laplacian()
}

/// Uniform initial states in `[-range, range]`, `n` rows by `p` columns.
pub fn random_states<R: Rng>(rng: &mut R, n: usize, p: usize, range: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.gen_range(-range..range))
}
