//! Seeded random test grids.
//!
//! Networks are generated backwards from a solution: draw target angles
//! with spread well inside ±π/2, wire a random connected topology, and
//! set each injection to the flow the target angles induce. Power then
//! balances to rounding error and the Newton solve is guaranteed a
//! reachable fixed point on the stable branch, for every seed.

use std::collections::BTreeSet;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{uniform53, Grid, Line, Node, NodeKind, VsgParams};

const ANGLE_SPREAD: f64 = 0.35;
const B_MIN: f64 = 1.0;
const B_MAX: f64 = 3.0;
const LOAD_DAMPING_MIN: f64 = 0.05;
const LOAD_DAMPING_MAX: f64 = 0.2;
const DAMPING_PER_INERTIA: f64 = 0.3;

/// Grid-level stream, distinct from the per-node streams used for
/// machine resampling (those use the node id, this offsets well past any
/// realistic node count).
fn grid_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    rng
}

fn span(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform53(rng)
}

/// Random connected topology on `n` nodes: a uniform random spanning tree
/// (each node attaches to an earlier one) plus extra edges at rate ~2/n,
/// so the expected degree stays small as grids grow.
fn random_lines(rng: &mut ChaCha8Rng, n: usize) -> Vec<Line> {
    let mut lines = Vec::new();
    let mut present = BTreeSet::new();
    for to in 1..n {
        let from = ((uniform53(rng) * to as f64) as usize).min(to - 1);
        present.insert((from, to));
        lines.push(Line {
            from,
            to,
            b: span(rng, B_MIN, B_MAX),
        });
    }
    let extra_rate = 2.0 / n as f64;
    for from in 0..n {
        for to in (from + 2)..n {
            // Draw unconditionally so the stream stays aligned whether or
            // not the tree already took this pair.
            let roll = uniform53(rng);
            if roll < extra_rate && present.insert((from, to)) {
                lines.push(Line {
                    from,
                    to,
                    b: span(rng, B_MIN, B_MAX),
                });
            }
        }
    }
    lines
}

/// Injections induced by target angles: each edge flow is added to one end
/// and subtracted from the other, so the total cancels to rounding error.
fn induced_powers(theta: &[f64], lines: &[Line]) -> Vec<f64> {
    let mut power = vec![0.0; theta.len()];
    for line in lines {
        let flow = line.b * (theta[line.from] - theta[line.to]).sin();
        power[line.from] += flow;
        power[line.to] -= flow;
    }
    power
}

fn vsg_kind(rng: &mut ChaCha8Rng) -> NodeKind {
    NodeKind::Vsg(VsgParams {
        m_min: span(rng, 0.2, 0.6),
        alpha: span(rng, 1.0, 10.0),
        beta: span(rng, 1.0, 10.0),
    })
}

fn damping_for(kind: &NodeKind, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        NodeKind::Generator { inertia } => DAMPING_PER_INERTIA * inertia,
        NodeKind::Vsg(v) => DAMPING_PER_INERTIA * v.m_min,
        NodeKind::Load => span(rng, LOAD_DAMPING_MIN, LOAD_DAMPING_MAX),
    }
}

/// Area label in up to three contiguous blocks, enough to exercise the
/// coherency metric on any size.
fn area_label(i: usize, n: usize) -> String {
    format!("z{}", (3 * i / n).min(2))
}

/// Random connected grid with a mix of synchronous generators, VSGs and
/// passive loads, one of each kind guaranteed. Deterministic in
/// `(seed, n)`; requires `n >= 4`.
pub fn random_mixed_grid(seed: u64, n: usize) -> Grid {
    assert!(n >= 4, "mixed grids need at least 4 nodes, got {n}");
    let mut rng = grid_rng(seed);
    let theta: Vec<f64> = (0..n)
        .map(|_| span(&mut rng, -ANGLE_SPREAD, ANGLE_SPREAD))
        .collect();
    let lines = random_lines(&mut rng, n);
    let power = induced_powers(&theta, &lines);

    let mut kinds: Vec<NodeKind> = (0..n)
        .map(|_| match (uniform53(&mut rng) * 3.0) as usize {
            0 => NodeKind::Generator {
                inertia: span(&mut rng, 0.3, 1.3),
            },
            1 => vsg_kind(&mut rng),
            _ => NodeKind::Load,
        })
        .collect();
    if !kinds.iter().any(|k| matches!(k, NodeKind::Generator { .. })) {
        kinds[0] = NodeKind::Generator {
            inertia: span(&mut rng, 0.3, 1.3),
        };
    }
    if !kinds.iter().any(|k| k.is_vsg()) {
        kinds[1] = vsg_kind(&mut rng);
    }
    if !kinds.iter().any(|k| matches!(k, NodeKind::Load)) {
        kinds[2] = NodeKind::Load;
    }

    let nodes = kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let damping = damping_for(&kind, &mut rng);
            Node {
                id: i,
                kind,
                power: power[i],
                damping,
                area: area_label(i, n),
            }
        })
        .collect();
    Grid::new(50.0, nodes, lines).expect("synthetic grid is valid by construction")
}

/// Random connected grid where every node is a VSG, for spectrum checks.
/// Deterministic in `(seed, n)`; requires `n >= 2`.
pub fn random_all_vsg_grid(seed: u64, n: usize) -> Grid {
    assert!(n >= 2, "need at least 2 nodes, got {n}");
    let mut rng = grid_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let theta: Vec<f64> = (0..n)
        .map(|_| span(&mut rng, -ANGLE_SPREAD, ANGLE_SPREAD))
        .collect();
    let lines = random_lines(&mut rng, n);
    let power = induced_powers(&theta, &lines);
    let nodes = (0..n)
        .map(|i| {
            let kind = vsg_kind(&mut rng);
            let damping = damping_for(&kind, &mut rng);
            Node {
                id: i,
                kind,
                power: power[i],
                damping,
                area: area_label(i, n),
            }
        })
        .collect();
    Grid::new(50.0, nodes, lines).expect("synthetic grid is valid by construction")
}

/// Size in `[lo, hi]` drawn from its own stream so that changing a grid's
/// node count never shifts the draws that shape the grid itself.
pub fn random_size(seed: u64, lo: usize, hi: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 2);
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}
