//! Weighted communication digraphs and their Laplacians.
//!
//! Convention: `a_ij > 0` means agent `j` sends its state to agent `i`, so
//! row `i` of the adjacency (and of the Laplacian) lists what agent `i`
//! listens to. All agent indices are zero-based.
//!
//! Besides construction and validation this module computes strongly
//! connected components and the block upper-triangular ordering of `L`
//! in which the closed (leader) component is the last block and every
//! block only reads from blocks after it.

use nalgebra::DMatrix;
use thiserror::Error;

/// Weights with magnitude below this are treated as absent edges.
pub const EDGE_EPSILON: f64 = 1e-15;

/// Relative tolerance on Laplacian row sums for ingested matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
/// Indices are stored 0-based and displayed 1-based.
pub enum GraphError {
    #[error("matrix has no rows")]
    Empty,
    #[error("matrix is not square: row {} has {len} entries, expected {expected}", row + 1)]
    NonSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("entry ({}, {}) is not finite", row + 1, col + 1)]
    NonFinite { row: usize, col: usize },
    #[error("negative weight {value} at ({}, {})", row + 1, col + 1)]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("nonzero diagonal weight {value} at agent {}", agent + 1)]
    NonzeroDiagonal { agent: usize, value: f64 },
    #[error("laplacian row {} sums to {sum}, expected 0", row + 1)]
    NonzeroRowSum { row: usize, sum: f64 },
    #[error("graph has no directed spanning tree")]
    NoSpanningTree,
    #[error("malformed block decomposition: {0}")]
    MalformedDecomposition(String),
}

/// A validated weighted digraph on `n` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDigraph {
    adjacency: DMatrix<f64>,
}

impl WeightedDigraph {
    /// Validates an adjacency matrix. Weights below [`EDGE_EPSILON`] in
    /// magnitude are zeroed; anything else negative, or on the diagonal, is
    /// rejected.
    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self, GraphError> {
        let n = adjacency.nrows();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if adjacency.ncols() != n {
            return Err(GraphError::NonSquare {
                row: 0,
                len: adjacency.ncols(),
                expected: n,
            });
        }
        let mut adjacency = adjacency;
        for i in 0..n {
            for j in 0..n {
                let a = adjacency[(i, j)];
                if !a.is_finite() {
                    return Err(GraphError::NonFinite { row: i, col: j });
                }
                if a.abs() < EDGE_EPSILON {
                    adjacency[(i, j)] = 0.0;
                } else if i == j {
                    return Err(GraphError::NonzeroDiagonal { agent: i, value: a });
                } else if a < 0.0 {
                    return Err(GraphError::NegativeWeight {
                        row: i,
                        col: j,
                        value: a,
                    });
                }
            }
        }
        Ok(Self { adjacency })
    }

    /// Builds a graph from nested rows as read from a scenario file.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GraphError> {
        Self::from_adjacency(square_from_rows(rows)?)
    }

    /// Recovers `a_ij = -L_ij` (i != j) from a Laplacian, checking that every
    /// row sums to zero relative to the row's magnitude.
    pub fn from_laplacian(laplacian: &DMatrix<f64>) -> Result<Self, GraphError> {
        let n = laplacian.nrows();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if laplacian.ncols() != n {
            return Err(GraphError::NonSquare {
                row: 0,
                len: laplacian.ncols(),
                expected: n,
            });
        }
        for i in 0..n {
            let mut sum = 0.0;
            let mut scale: f64 = 1.0;
            for j in 0..n {
                let v = laplacian[(i, j)];
                if !v.is_finite() {
                    return Err(GraphError::NonFinite { row: i, col: j });
                }
                sum += v;
                scale = scale.max(v.abs());
            }
            if sum.abs() > ROW_SUM_TOLERANCE * scale {
                return Err(GraphError::NonzeroRowSum { row: i, sum });
            }
        }
        let adjacency =
            DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { -laplacian[(i, j)] });
        Self::from_adjacency(adjacency)
    }

    pub fn laplacian_from_rows(rows: &[Vec<f64>]) -> Result<Self, GraphError> {
        Self::from_laplacian(&square_from_rows(rows)?)
    }

    pub fn agent_count(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// True when agent `i` receives from agent `j`.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[(i, j)] > 0.0
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a > 0.0).count()
    }

    /// Agents that `i` listens to.
    pub fn in_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.agent_count()).filter(move |&j| self.has_edge(i, j))
    }

    /// Agents that listen to `j`.
    pub fn out_neighbors(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.agent_count()).filter(move |&i| self.has_edge(i, j))
    }

    /// `L = D - A` with `D` the in-degree matrix.
    pub fn laplacian(&self) -> Laplacian {
        let n = self.agent_count();
        let in_degrees: Vec<f64> = (0..n).map(|i| self.adjacency.row(i).sum()).collect();
        let matrix = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                in_degrees[i]
            } else {
                -self.adjacency[(i, j)]
            }
        });
        Laplacian { matrix, in_degrees }
    }

    /// Strongly connected components, members sorted ascending, listed so
    /// that a component only receives from components listed after it.
    pub fn strongly_connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.agent_count();
        // successors follow the direction information flows: j -> i when a_ij > 0
        let successors: Vec<Vec<usize>> = (0..n).map(|j| self.out_neighbors(j).collect()).collect();
        let mut comps = tarjan(&successors);
        for c in &mut comps {
            c.sort_unstable();
        }
        comps
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.strongly_connected_components().len() == 1
    }

    /// True iff some agent reaches every other agent along directed paths,
    /// i.e. the condensation has exactly one component without incoming
    /// edges.
    pub fn has_directed_spanning_tree(&self) -> bool {
        let comps = self.strongly_connected_components();
        let mut owner = vec![0usize; self.agent_count()];
        for (c, members) in comps.iter().enumerate() {
            for &v in members {
                owner[v] = c;
            }
        }
        let sources = comps
            .iter()
            .enumerate()
            .filter(|(c, members)| {
                members
                    .iter()
                    .all(|&i| self.in_neighbors(i).all(|j| owner[j] == *c))
            })
            .count();
        sources == 1
    }
}

fn square_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, GraphError> {
    let n = rows.len();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    for (row, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(GraphError::NonSquare {
                row,
                len: r.len(),
                expected: n,
            });
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

struct Tarjan<'a> {
    successors: &'a [Vec<usize>],
    next_index: usize,
    index: Vec<Option<usize>>,
    lowlink: Vec<usize>,
    on_stack: Vec<bool>,
    stack: Vec<usize>,
    components: Vec<Vec<usize>>,
}

/// Tarjan's algorithm. Components come out in reverse topological order of
/// the successor relation (everything reachable from a component is emitted
/// before it).
fn tarjan(successors: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = successors.len();
    let mut state = Tarjan {
        successors,
        next_index: 0,
        index: vec![None; n],
        lowlink: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::with_capacity(n),
        components: Vec::new(),
    };
    for v in 0..n {
        if state.index[v].is_none() {
            state.visit(v);
        }
    }
    state.components
}

impl Tarjan<'_> {
    fn visit(&mut self, v: usize) {
        self.index[v] = Some(self.next_index);
        self.lowlink[v] = self.next_index;
        self.next_index += 1;
        self.stack.push(v);
        self.on_stack[v] = true;

        for k in 0..self.successors[v].len() {
            let w = self.successors[v][k];
            match self.index[w] {
                None => {
                    self.visit(w);
                    self.lowlink[v] = self.lowlink[v].min(self.lowlink[w]);
                }
                Some(iw) if self.on_stack[w] => {
                    self.lowlink[v] = self.lowlink[v].min(iw);
                }
                Some(_) => {}
            }
        }

        if Some(self.lowlink[v]) == self.index[v] {
            let mut component = Vec::new();
            loop {
                let w = self.stack.pop().expect("tarjan stack underflow");
                self.on_stack[w] = false;
                component.push(w);
                if w == v {
                    break;
                }
            }
            self.components.push(component);
        }
    }
}

/// Graph Laplacian `L = D - A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    matrix: DMatrix<f64>,
    in_degrees: Vec<f64>,
}

impl Laplacian {
    /// Validates a raw Laplacian (zero row sums, nonpositive off-diagonal)
    /// and normalizes the diagonal to the exact in-degree.
    pub fn from_matrix(matrix: &DMatrix<f64>) -> Result<Self, GraphError> {
        Ok(WeightedDigraph::from_laplacian(matrix)?.laplacian())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn in_degrees(&self) -> &[f64] {
        &self.in_degrees
    }

    pub fn agent_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn graph(&self) -> WeightedDigraph {
        let n = self.agent_count();
        WeightedDigraph {
            adjacency: DMatrix::from_fn(
                n,
                n,
                |i, j| if i == j { 0.0 } else { -self.matrix[(i, j)] },
            ),
        }
    }
}

/// The Laplacian permuted into block upper-triangular form.
///
/// Block `m` (zero-based) holds one strongly connected component; the last
/// block is the closed component that every other agent can be reached
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct PfDecomposition {
    /// `permutation[k]` is the original agent placed at position `k`.
    permutation: Vec<usize>,
    /// `offsets[m]..offsets[m + 1]` are the positions of block `m`.
    offsets: Vec<usize>,
    permuted: DMatrix<f64>,
    diagonal_blocks: Vec<DMatrix<f64>>,
    auxiliary_blocks: Vec<DMatrix<f64>>,
}

impl PfDecomposition {
    pub fn block_count(&self) -> usize {
        self.diagonal_blocks.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn block_size(&self, m: usize) -> usize {
        self.offsets[m + 1] - self.offsets[m]
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        (0..self.block_count())
            .map(|m| self.block_size(m))
            .collect()
    }

    /// Original agent indices belonging to block `m`.
    pub fn block_agents(&self, m: usize) -> &[usize] {
        &self.permutation[self.offsets[m]..self.offsets[m + 1]]
    }

    pub fn permuted(&self) -> &DMatrix<f64> {
        &self.permuted
    }

    /// `L^{m,q}`.
    pub fn block(&self, m: usize, q: usize) -> DMatrix<f64> {
        let (r0, r1) = (self.offsets[m], self.offsets[m + 1]);
        let (c0, c1) = (self.offsets[q], self.offsets[q + 1]);
        self.permuted
            .view((r0, c0), (r1 - r0, c1 - c0))
            .into_owned()
    }

    /// Rows of block `m` against every later block, i.e. `[L^{m,m+1} .. L^{m,M}]`.
    pub fn coupling_to_later(&self, m: usize) -> DMatrix<f64> {
        let (r0, r1) = (self.offsets[m], self.offsets[m + 1]);
        let c0 = r1;
        let n = self.permuted.ncols();
        self.permuted.view((r0, c0), (r1 - r0, n - c0)).into_owned()
    }

    pub fn diagonal_block(&self, m: usize) -> &DMatrix<f64> {
        &self.diagonal_blocks[m]
    }

    /// `L~^{m,m}`: off-diagonal entries of `L^{m,m}` with the diagonal reset so
    /// every row sums to zero.
    pub fn auxiliary_block(&self, m: usize) -> &DMatrix<f64> {
        &self.auxiliary_blocks[m]
    }

    /// Undoes the permutation, reproducing the original Laplacian.
    pub fn unpermute(&self) -> DMatrix<f64> {
        let n = self.permutation.len();
        let mut out = DMatrix::zeros(n, n);
        for (a, &i) in self.permutation.iter().enumerate() {
            for (b, &j) in self.permutation.iter().enumerate() {
                out[(i, j)] = self.permuted[(a, b)];
            }
        }
        out
    }
}

/// Permutes `L` into block upper-triangular form following the component
/// order of [`WeightedDigraph::strongly_connected_components`].
pub fn pf_decompose(laplacian: &Laplacian) -> Result<PfDecomposition, GraphError> {
    let graph = laplacian.graph();
    if !graph.has_directed_spanning_tree() {
        return Err(GraphError::NoSpanningTree);
    }
    let comps = graph.strongly_connected_components();
    let mut permutation = Vec::with_capacity(graph.agent_count());
    let mut offsets = vec![0];
    for c in &comps {
        permutation.extend_from_slice(c);
        offsets.push(permutation.len());
    }
    let n = permutation.len();
    let l = laplacian.matrix();
    let permuted = DMatrix::from_fn(n, n, |a, b| l[(permutation[a], permutation[b])]);

    let block_count = comps.len();
    let mut diagonal_blocks = Vec::with_capacity(block_count);
    let mut auxiliary_blocks = Vec::with_capacity(block_count);
    for m in 0..block_count {
        let (r0, r1) = (offsets[m], offsets[m + 1]);
        let size = r1 - r0;
        let block = permuted.view((r0, r0), (size, size)).into_owned();
        let mut aux = block.clone();
        for i in 0..size {
            let off: f64 = (0..size).filter(|&r| r != i).map(|r| block[(i, r)]).sum();
            aux[(i, i)] = -off;
        }
        diagonal_blocks.push(block);
        auxiliary_blocks.push(aux);
    }

    let pf = PfDecomposition {
        permutation,
        offsets,
        permuted,
        diagonal_blocks,
        auxiliary_blocks,
    };
    check_decomposition(&pf)?;
    Ok(pf)
}

fn check_decomposition(pf: &PfDecomposition) -> Result<(), GraphError> {
    let m_count = pf.block_count();
    for m in 0..m_count {
        for q in 0..m {
            if pf.block(m, q).iter().any(|&v| v != 0.0) {
                return Err(GraphError::MalformedDecomposition(format!(
                    "block ({m}, {q}) below the diagonal is nonzero"
                )));
            }
        }
        let size = pf.block_size(m);
        if size >= 2 {
            let g = WeightedDigraph::from_laplacian(pf.auxiliary_block(m))?;
            if !g.is_strongly_connected() {
                return Err(GraphError::MalformedDecomposition(format!(
                    "diagonal block {m} is not irreducible"
                )));
            }
        }
        if m + 1 < m_count && pf.coupling_to_later(m).iter().all(|&v| v == 0.0) {
            return Err(GraphError::MalformedDecomposition(format!(
                "block {m} receives from no later block"
            )));
        }
    }
    Ok(())
}
