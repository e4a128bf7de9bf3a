//! Graphon priors over module connectivity and the graph-structure
//! regularizer.
//!
//! A prior is a graphon evaluated on the grid `r_u = u / (U - 1)`. The
//! regularizer matches learned modules to prior nodes with a linear
//! assignment and penalizes the off-diagonal squared error.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphonFamily {
    ErdosRenyi,
    ScaleFree,
    PlantedPartition,
    RingOfCliques,
}

impl GraphonFamily {
    pub const ALL: [GraphonFamily; 4] = [
        GraphonFamily::ErdosRenyi,
        GraphonFamily::ScaleFree,
        GraphonFamily::PlantedPartition,
        GraphonFamily::RingOfCliques,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraphonFamily::ErdosRenyi => "erdos_renyi",
            GraphonFamily::ScaleFree => "scale_free",
            GraphonFamily::PlantedPartition => "planted_partition",
            GraphonFamily::RingOfCliques => "ring_of_cliques",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Graphon {
    ErdosRenyi { p: f64 },
    /// `min(1, (U^beta / 16) (r_i + 1)^-beta (r_j + 1)^-beta)`.
    ScaleFree { beta: f64 },
    PlantedPartition { blocks: usize, p_in: f64, p_out: f64 },
    /// Blocks on a ring: `p_in` inside a block, `p_bridge` between
    /// neighbouring blocks, 0 otherwise.
    RingOfCliques { blocks: usize, p_in: f64, p_bridge: f64 },
}

impl Graphon {
    /// Family defaults.
    pub fn default_for(family: GraphonFamily) -> Self {
        match family {
            GraphonFamily::ErdosRenyi => Graphon::ErdosRenyi { p: 0.1 },
            GraphonFamily::ScaleFree => Graphon::ScaleFree { beta: 0.5 },
            GraphonFamily::PlantedPartition => Graphon::PlantedPartition {
                blocks: 8,
                p_in: 0.9,
                p_out: 0.05,
            },
            GraphonFamily::RingOfCliques => Graphon::RingOfCliques {
                blocks: 8,
                p_in: 0.9,
                p_bridge: 0.3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs: &[f64] = match self {
            Graphon::ErdosRenyi { p } => &[*p],
            Graphon::ScaleFree { beta } => {
                if !(*beta > 0.0 && beta.is_finite()) {
                    return Err(contract(format!("scale-free beta {beta} must be positive")));
                }
                &[]
            }
            Graphon::PlantedPartition { blocks, p_in, p_out } => {
                if *blocks == 0 {
                    return Err(contract("planted partition needs at least one block"));
                }
                &[*p_in, *p_out]
            }
            Graphon::RingOfCliques { blocks, p_in, p_bridge } => {
                if *blocks == 0 {
                    return Err(contract("ring of cliques needs at least one block"));
                }
                &[*p_in, *p_bridge]
            }
        };
        match probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            Some(p) => Err(contract(format!("graphon probability {p} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn family(&self) -> GraphonFamily {
        match self {
            Graphon::ErdosRenyi { .. } => GraphonFamily::ErdosRenyi,
            Graphon::ScaleFree { .. } => GraphonFamily::ScaleFree,
            Graphon::PlantedPartition { .. } => GraphonFamily::PlantedPartition,
            Graphon::RingOfCliques { .. } => GraphonFamily::RingOfCliques,
        }
    }

    /// Value at `(r_i, r_j)`. `modules` is the graph size, which only the
    /// scale-free family depends on.
    pub fn eval(&self, modules: usize, ri: f64, rj: f64) -> Result<f64> {
        for r in [ri, rj] {
            if !(0.0..=1.0).contains(&r) {
                return Err(contract(format!("graphon argument {r} outside [0, 1]")));
            }
        }
        let v = match *self {
            Graphon::ErdosRenyi { p } => p,
            Graphon::ScaleFree { beta } => {
                (modules as f64).powf(beta) / 16.0 * (ri + 1.0).powf(-beta) * (rj + 1.0).powf(-beta)
            }
            Graphon::PlantedPartition { blocks, p_in, p_out } => {
                if block_of(ri, blocks) == block_of(rj, blocks) {
                    p_in
                } else {
                    p_out
                }
            }
            Graphon::RingOfCliques { blocks, p_in, p_bridge } => {
                let (a, b) = (block_of(ri, blocks), block_of(rj, blocks));
                let gap = a.abs_diff(b);
                if gap == 0 {
                    p_in
                } else if gap == 1 || gap + 1 == blocks {
                    p_bridge
                } else {
                    0.0
                }
            }
        };
        Ok(v.clamp(0.0, 1.0))
    }
}

/// Block index `floor(r * k)`, with `r = 1` in the last block.
fn block_of(r: f64, blocks: usize) -> usize {
    ((r * blocks as f64).floor() as usize).min(blocks.saturating_sub(1))
}

/// Canonical node positions `r_u = u / (U - 1)`.
pub fn canonical_grid(modules: usize) -> Vec<f64> {
    (0..modules).map(|u| u as f64 / (modules - 1) as f64).collect()
}

/// A graphon sampled on the canonical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    pub graphon: Graphon,
    pub grid: Vec<f64>,
    /// `[U, U]`.
    pub p0: Tensor,
}

pub fn sample_prior(graphon: Graphon, modules: usize) -> Result<PriorMatrix> {
    if modules < 2 {
        return Err(contract(format!("a prior needs at least 2 modules, got {modules}")));
    }
    let grid = canonical_grid(modules);
    let mut p0 = Tensor::zeros(&[modules, modules]);
    for (i, &ri) in grid.iter().enumerate() {
        for (j, &rj) in grid.iter().enumerate().skip(i) {
            let v = graphon.eval(modules, ri, rj)?;
            p0.set(&[i, j], v);
            p0.set(&[j, i], v);
        }
    }
    Ok(PriorMatrix { graphon, grid, p0 })
}

fn square_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(TensorError::InvalidShape {
            op,
            detail: format!("expected a square matrix, got {s:?}"),
        }
        .into()),
    }
}

/// `C_vw = sum_i (P_vi - P0_wi)^2`: cost of mapping learned module `v` onto
/// prior node `w`.
pub fn assignment_cost(p: &Tensor, p0: &Tensor) -> Result<Tensor> {
    if p.shape() != p0.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "assignment_cost",
            lhs: p.shape().to_vec(),
            rhs: p0.shape().to_vec(),
        }
        .into());
    }
    let u = square_dim("assignment_cost", p)?;
    let mut c = Tensor::zeros(&[u, u]);
    for v in 0..u {
        for w in 0..u {
            let cost = p.row(v).iter().zip(p0.row(w)).map(|(a, b)| (a - b) * (a - b)).sum();
            c.set(&[v, w], cost);
        }
    }
    Ok(c)
}

/// Minimum-cost perfect matching of rows to columns (Hungarian method with
/// potentials, O(U^3)). Returns `sigma` with row `v` assigned column
/// `sigma[v]`.
pub fn solve_assignment(cost: &Tensor) -> Result<Vec<usize>> {
    let n = square_dim("solve_assignment", cost)?;
    if cost.data().iter().any(|v| v.is_nan()) {
        return Err(contract("assignment cost contains NaN"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is a virtual start column.
    let a = |i: usize, j: usize| cost.data()[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == 0 {
                return Err(contract("assignment cost is not finite"));
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[matched_row[j] - 1] = j - 1;
    }
    Ok(sigma)
}

/// Total cost of an assignment.
pub fn assignment_total(cost: &Tensor, sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(v, &w)| cost.at(&[v, w])).sum()
}

/// `P0` permuted by `sigma`: entry `(i, j)` is `P0[sigma(i), sigma(j)]`.
pub fn permuted_prior(p0: &Tensor, sigma: &[usize]) -> Tensor {
    let u = sigma.len();
    let mut out = Tensor::zeros(&[u, u]);
    for i in 0..u {
        for j in 0..u {
            out.set(&[i, j], p0.at(&[sigma[i], sigma[j]]));
        }
    }
    out
}

/// `sum_{i != j} (P_ij - P0[sigma(i), sigma(j)])^2` for a given matching,
/// which is treated as a constant. `p` is `[U, U]` or `[1, U, U]`.
pub fn graph_regularizer_with(tape: &mut Tape, p: Var, prior: &PriorMatrix, sigma: &[usize]) -> Result<Var> {
    let u = prior.grid.len();
    let shape = tape.shape(p).to_vec();
    if shape != [u, u] && shape != [1, u, u] {
        return Err(TensorError::ShapeMismatch {
            op: "graph_regularizer",
            lhs: shape,
            rhs: vec![u, u],
        }
        .into());
    }
    let target = permuted_prior(&prior.p0, sigma).reshape(&shape)?;
    let mut off_diag = Tensor::ones(&shape);
    for i in 0..u {
        off_diag.data_mut()[i * u + i] = 0.0;
    }
    let target = tape.constant(target);
    let mask = tape.constant(off_diag);
    let diff = tape.sub(p, target)?;
    let diff = tape.mul(diff, mask)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// Solves the matching on the current value of `p`, then builds the
/// regularizer with the matching held fixed.
pub fn graph_regularizer(tape: &mut Tape, p: Var, prior: &PriorMatrix) -> Result<(Var, Vec<usize>)> {
    let u = prior.grid.len();
    let current = tape.tensor(p).reshape(&[u, u])?;
    let sigma = solve_assignment(&assignment_cost(&current, &prior.p0)?)?;
    let loss = graph_regularizer_with(tape, p, prior, &sigma)?;
    Ok((loss, sigma))
}

/// Plain-value regularizer.
pub fn graph_regularizer_value(p: &Tensor, prior: &PriorMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let (loss, _) = graph_regularizer(&mut tape, pv, prior)?;
    Ok(tape.item(loss))
}

/// Writes a matrix as CSV, one row per line.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let cols = m.shape().last().copied().unwrap_or(1).max(1);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `P`, `P0` and the matching to `dir` as `p.csv`, `p0.csv` and
/// `sigma.csv` (columns `module,prior_node`).
pub fn export_matching(dir: &Path, p: &Tensor, prior: &PriorMatrix, sigma: &[usize]) -> Result<()> {
    write_matrix_csv(&dir.join("p.csv"), p)?;
    write_matrix_csv(&dir.join("p0.csv"), &prior.p0)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("sigma.csv"))?);
    writeln!(out, "module,prior_node")?;
    for (v, w) in sigma.iter().enumerate() {
        writeln!(out, "{v},{w}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn erdos_renyi_is_constant() {
        let g = Graphon::ErdosRenyi { p: 0.1 };
        for (a, b) in [(0.0, 0.0), (0.3, 0.9), (1.0, 0.5)] {
            assert_eq!(g.eval(10, a, b).unwrap(), 0.1);
        }
    }

    #[test]
    fn scale_free_reference_values() {
        let g = Graphon::ScaleFree { beta: 0.5 };
        let corner = g.eval(320, 1.0, 1.0).unwrap();
        assert!((corner - 0.559_017).abs() < 1e-6, "{corner}");
        assert_eq!(g.eval(320, 0.0, 0.0).unwrap(), 1.0);
        let raw: f64 = 320f64.sqrt() / 16.0;
        assert!((raw - 1.118_034).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_arguments_are_rejected() {
        let g = Graphon::ErdosRenyi { p: 0.1 };
        assert!(g.eval(4, -0.1, 0.5).is_err());
        assert!(g.eval(4, 0.5, 1.5).is_err());
    }

    #[test]
    fn grid_for_four_modules() {
        let g = canonical_grid(4);
        assert_eq!(g, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn planted_partition_two_blocks() {
        let g = Graphon::PlantedPartition {
            blocks: 2,
            p_in: 0.9,
            p_out: 0.05,
        };
        let p = sample_prior(g, 4).unwrap();
        let expect = m(&[
            &[0.9, 0.9, 0.05, 0.05],
            &[0.9, 0.9, 0.05, 0.05],
            &[0.05, 0.05, 0.9, 0.9],
            &[0.05, 0.05, 0.9, 0.9],
        ]);
        assert_eq!(p.p0, expect);
    }

    #[test]
    fn ring_of_cliques_links_neighbouring_blocks_only() {
        let g = Graphon::RingOfCliques {
            blocks: 4,
            p_in: 0.9,
            p_bridge: 0.3,
        };
        assert_eq!(g.eval(8, 0.1, 0.2).unwrap(), 0.9);
        assert_eq!(g.eval(8, 0.1, 0.3).unwrap(), 0.3);
        assert_eq!(g.eval(8, 0.1, 0.6).unwrap(), 0.0);
        assert_eq!(g.eval(8, 0.1, 1.0).unwrap(), 0.3);
    }

    #[test]
    fn priors_are_symmetric_and_bounded() {
        for family in GraphonFamily::ALL {
            for u in [2, 8, 33] {
                let p = sample_prior(Graphon::default_for(family), u).unwrap();
                assert_eq!(p.p0.max_abs_diff(&p.p0.transpose()), 0.0);
                assert!(p.p0.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(sample_prior(Graphon::default_for(GraphonFamily::ScaleFree), 1).is_err());
    }

    #[test]
    fn cost_examples() {
        let c = assignment_cost(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &m(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert_eq!(c, m(&[&[1.0, 1.0], &[1.0, 1.0]]));
        let p = m(&[&[0.2, 0.7], &[0.4, 0.1]]);
        let c = assignment_cost(&p, &p).unwrap();
        assert_eq!((c.at(&[0, 0]), c.at(&[1, 1])), (0.0, 0.0));
        assert!(c.data().iter().all(|&v| v >= 0.0));
        assert!(assignment_cost(&p, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn assignment_examples() {
        assert_eq!(solve_assignment(&m(&[&[0.0, 5.0], &[5.0, 0.0]])).unwrap(), vec![0, 1]);
        let c = m(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let s = solve_assignment(&c).unwrap();
        assert_eq!(s, vec![0, 1]);
        assert_eq!(assignment_total(&c, &s), 2.0);
        let c = m(&[&[9.0, 1.0, 9.0], &[1.0, 9.0, 9.0], &[9.0, 9.0, 1.0]]);
        assert_eq!(solve_assignment(&c).unwrap(), vec![1, 0, 2]);
        assert!(solve_assignment(&m(&[&[f64::NAN]])).is_err());
    }

    fn brute_force(c: &Tensor) -> f64 {
        fn go(c: &Tensor, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = used.len();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    go(c, row + 1, used, acc + c.at(&[row, j]), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(c, 0, &mut vec![false; c.shape()[0]], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_matches_enumeration_for_small_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for u in 1..=7 {
            for _ in 0..100 {
                let c = Tensor::new(vec![u, u], (0..u * u).map(|_| rng.random::<f64>() * 10.0).collect()).unwrap();
                let s = solve_assignment(&c).unwrap();
                let mut seen = s.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..u).collect::<Vec<_>>());
                assert!((assignment_total(&c, &s) - brute_force(&c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn regularizer_examples() {
        for family in GraphonFamily::ALL {
            let prior = sample_prior(Graphon::default_for(family), 8).unwrap();
            assert_eq!(graph_regularizer_value(&prior.p0, &prior).unwrap(), 0.0);
        }
        let (a, b) = (0.3, 0.8);
        let prior = PriorMatrix {
            graphon: Graphon::ErdosRenyi { p: b },
            grid: canonical_grid(2),
            p0: m(&[&[1.0, b], &[b, 1.0]]),
        };
        let v = graph_regularizer_value(&m(&[&[1.0, a], &[a, 1.0]]), &prior).unwrap();
        assert!((v - 2.0 * (a - b) * (a - b)).abs() < 1e-15);
    }

    #[test]
    fn matrix_export_round_trips_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let prior = sample_prior(Graphon::default_for(GraphonFamily::PlantedPartition), 4).unwrap();
        export_matching(dir.path(), &prior.p0, &prior, &[0, 1, 2, 3]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("p0.csv")).unwrap();
        let parsed: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(parsed, prior.p0.data());
        let sigma = std::fs::read_to_string(dir.path().join("sigma.csv")).unwrap();
        assert_eq!(sigma.lines().count(), 5);
    }
}
