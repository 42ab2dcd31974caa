//! Mesh graphs, compressed-row boolean masks and node feature matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u32)]
pub enum NodeType {
    Normal = 0,
    Inflow = 1,
    Outflow = 2,
    Wall = 3,
    Obstacle = 4,
}

impl NodeType {
    pub const COUNT: usize = 5;
    pub const ALL: [NodeType; 5] = [
        NodeType::Normal,
        NodeType::Inflow,
        NodeType::Outflow,
        NodeType::Wall,
        NodeType::Obstacle,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<NodeType> {
        Self::ALL.get(code as usize).copied()
    }
}

/// An undirected mesh graph. Edges are stored as a sorted, deduplicated list of
/// directed pairs in which every `(s, r)` has its mirror `(r, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    dim: usize,
    coords: Vec<f64>,
    node_type: Vec<NodeType>,
    edges: Vec<(usize, usize)>,
}

/// Builds a graph from per-node coordinates, node types and an arbitrary list
/// of (sender, receiver) pairs. Pairs are symmetrized and deduplicated and
/// self-loops are dropped.
pub fn build_graph(
    coords: &[Vec<f64>],
    node_types: &[NodeType],
    edge_pairs: &[(usize, usize)],
) -> Result<Graph> {
    let n = coords.len();
    let dim = coords.first().map_or(0, Vec::len);
    for (row, c) in coords.iter().enumerate() {
        if c.len() != dim {
            return Err(Error::RaggedCoords { row, expected: dim, found: c.len() });
        }
    }
    if node_types.len() != n {
        return Err(Error::shape(
            "build_graph",
            format!("{} node types for {} nodes", node_types.len(), n),
        ));
    }
    let flat: Vec<f64> = coords.iter().flatten().copied().collect();
    Graph::from_flat(dim, flat, node_types.to_vec(), edge_pairs)
}

impl Graph {
    /// Same as [`build_graph`] with coordinates given as a row-major `N x dim` buffer.
    pub fn from_flat(
        dim: usize,
        coords: Vec<f64>,
        node_type: Vec<NodeType>,
        edge_pairs: &[(usize, usize)],
    ) -> Result<Graph> {
        let n = node_type.len();
        if coords.len() != n * dim {
            return Err(Error::RaggedCoords {
                row: coords.len() / dim.max(1),
                expected: dim,
                found: coords.len() % dim.max(1),
            });
        }
        let mut edges = Vec::with_capacity(edge_pairs.len() * 2);
        for &(s, r) in edge_pairs {
            for index in [s, r] {
                if index >= n {
                    return Err(Error::IndexOutOfRange { index, num_nodes: n });
                }
            }
            if s != r {
                edges.push((s, r));
                edges.push((r, s));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Graph { num_nodes: n, dim, coords, node_type, edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Spatial dimension of the coordinates.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of directed edges (`N^e`); twice the number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_type
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Inverse of [`build_graph`]: coordinates as rows, node types, directed edges.
    pub fn decompose(&self) -> (Vec<Vec<f64>>, Vec<NodeType>, Vec<(usize, usize)>) {
        let rows = (0..self.num_nodes).map(|i| self.coord(i).to_vec()).collect();
        (rows, self.node_type.clone(), self.edges.clone())
    }

    /// Applies a node relabelling: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes;
        if perm.len() != n {
            return Err(Error::shape("permuted", "permutation length differs from N"));
        }
        let mut coords = vec![0.0; self.coords.len()];
        let mut types = vec![NodeType::Normal; n];
        for (i, &p) in perm.iter().enumerate() {
            if p >= n {
                return Err(Error::IndexOutOfRange { index: p, num_nodes: n });
            }
            coords[p * self.dim..(p + 1) * self.dim].copy_from_slice(self.coord(i));
            types[p] = self.node_type[i];
        }
        let edges: Vec<_> = self.edges.iter().map(|&(s, r)| (perm[s], perm[r])).collect();
        Graph::from_flat(self.dim, coords, types, &edges)
    }

    /// Breadth-first hop distances from `source`; unreachable nodes get `usize::MAX`.
    pub fn hop_distances(&self, source: usize) -> Vec<usize> {
        let mask = adjacency_mask(self, false);
        let mut dist = vec![usize::MAX; self.num_nodes];
        let mut queue = std::collections::VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &v in mask.row(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.num_nodes == 0 || self.hop_distances(0).iter().all(|&d| d != usize::MAX)
    }
}

/// Boolean sparse matrix in compressed-row form, used as an attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    num_rows: usize,
    num_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl SparseMask {
    /// Builds a mask from per-row column lists (sorted and deduplicated here).
    pub fn from_rows(num_cols: usize, mut rows: Vec<Vec<usize>>) -> Result<SparseMask> {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            if let Some(&last) = row.last() {
                if last >= num_cols {
                    return Err(Error::IndexOutOfRange { index: last, num_nodes: num_cols });
                }
            }
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        Ok(SparseMask { num_rows: rows.len(), num_cols, row_offsets, col_indices })
    }

    /// Builds an `n x n` mask from (row, col) pairs.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<SparseMask> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j) in pairs {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, num_nodes: n });
            }
            rows[i].push(j);
        }
        SparseMask::from_rows(n, rows)
    }

    pub fn from_dense(dense: &[Vec<bool>]) -> SparseMask {
        let n_cols = dense.first().map_or(0, Vec::len);
        let rows = dense
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect())
            .collect();
        SparseMask::from_rows(n_cols, rows).expect("dense rows are in range")
    }

    pub fn identity(n: usize) -> SparseMask {
        SparseMask {
            num_rows: n,
            num_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
        }
    }

    pub fn empty(n: usize) -> SparseMask {
        SparseMask {
            num_rows: n,
            num_cols: n,
            row_offsets: vec![0; n + 1],
            col_indices: Vec::new(),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_cols(&self) -> usize {
        self.num_cols
    }

    pub fn is_square(&self) -> bool {
        self.num_rows == self.num_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.num_rows && self.row(i).binary_search(&j).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_rows).flat_map(move |i| self.row(i).iter().map(move |&j| (i, j)))
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let mut dense = vec![vec![false; self.num_cols]; self.num_rows];
        for (i, j) in self.iter() {
            dense[i][j] = true;
        }
        dense
    }

    pub fn transpose(&self) -> SparseMask {
        let mut rows = vec![Vec::new(); self.num_cols];
        for (i, j) in self.iter() {
            rows[j].push(i);
        }
        SparseMask::from_rows(self.num_rows, rows).expect("transpose indices are in range")
    }

    /// For each stored entry `(i, j)` in row-major order, the position of `(j, i)`
    /// in the transpose's entry list, grouped by transpose row. Returns
    /// `(transpose_offsets, source_positions)` where `source_positions[p]` is the
    /// index into `col_indices` of the entry `(i, j)` listed at transpose slot `p`.
    pub(crate) fn transpose_index(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut counts = vec![0usize; self.num_cols + 1];
        for &j in &self.col_indices {
            counts[j + 1] += 1;
        }
        for j in 0..self.num_cols {
            counts[j + 1] += counts[j];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut source = vec![0usize; self.nnz()];
        let mut rows = vec![0usize; self.nnz()];
        for i in 0..self.num_rows {
            for p in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[p];
                let slot = cursor[j];
                source[slot] = p;
                rows[slot] = i;
                cursor[j] += 1;
            }
        }
        (offsets, source, rows)
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_square() && self.iter().all(|(i, j)| self.contains(j, i))
    }

    /// Entry-wise boolean OR.
    pub fn union(&self, other: &SparseMask) -> Result<SparseMask> {
        if self.num_rows != other.num_rows || self.num_cols != other.num_cols {
            return Err(Error::shape(
                "union",
                format!(
                    "{}x{} vs {}x{}",
                    self.num_rows, self.num_cols, other.num_rows, other.num_cols
                ),
            ));
        }
        let rows = (0..self.num_rows)
            .map(|i| {
                let mut r = self.row(i).to_vec();
                r.extend_from_slice(other.row(i));
                r
            })
            .collect();
        SparseMask::from_rows(self.num_cols, rows)
    }

    pub fn with_self_loops(&self) -> SparseMask {
        let rows = (0..self.num_rows)
            .map(|i| {
                let mut r = self.row(i).to_vec();
                if i < self.num_cols {
                    r.push(i);
                }
                r
            })
            .collect();
        SparseMask::from_rows(self.num_cols, rows).expect("diagonal is in range")
    }

    /// Number of unordered off-diagonal pairs `{i, j}` present in the mask.
    /// Assumes the mask is symmetric.
    pub fn undirected_edge_count(&self) -> usize {
        self.iter().filter(|&(i, j)| i < j).count()
    }

    /// Checks the structural invariants: monotone offsets, in-range and
    /// strictly increasing column indices within each row.
    pub fn check_invariants(&self) -> bool {
        self.row_offsets.len() == self.num_rows + 1
            && self.row_offsets[0] == 0
            && *self.row_offsets.last().unwrap() == self.col_indices.len()
            && self.row_offsets.windows(2).all(|w| w[0] <= w[1])
            && (0..self.num_rows).all(|i| {
                let r = self.row(i);
                r.windows(2).all(|w| w[0] < w[1]) && r.iter().all(|&j| j < self.num_cols)
            })
    }
}

/// The graph adjacency as a mask, optionally with the diagonal set.
pub fn adjacency_mask(g: &Graph, self_loops: bool) -> SparseMask {
    let n = g.num_nodes();
    let mut row_offsets = vec![0usize; n + 1];
    for &(s, _) in g.edges() {
        row_offsets[s + 1] += 1;
    }
    if self_loops {
        for i in 0..n {
            row_offsets[i + 1] += 1;
        }
    }
    for i in 0..n {
        row_offsets[i + 1] += row_offsets[i];
    }
    let mut col_indices = vec![0usize; row_offsets[n]];
    let mut cursor = row_offsets.clone();
    // Edges are sorted by (sender, receiver), so each row fills in order apart
    // from the diagonal, which is merged in afterwards.
    for &(s, r) in g.edges() {
        col_indices[cursor[s]] = r;
        cursor[s] += 1;
    }
    if self_loops {
        for i in 0..n {
            col_indices[cursor[i]] = i;
            col_indices[row_offsets[i]..row_offsets[i + 1]].sort_unstable();
        }
    }
    SparseMask { num_rows: n, num_cols: n, row_offsets, col_indices }
}

/// Maximum and mean number of entries per row.
pub fn degree_stats(m: &SparseMask) -> Result<(usize, f64)> {
    if m.num_rows() == 0 {
        return Err(Error::EmptyGraph);
    }
    let deg_max = (0..m.num_rows()).map(|i| m.row_len(i)).max().unwrap_or(0);
    Ok((deg_max, m.nnz() as f64 / m.num_rows() as f64))
}

/// Per-node input matrix with column labels. Columns flagged in
/// `dynamic_mask` receive training noise and are advanced during rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub values: Tensor,
    pub field_names: Vec<String>,
    pub dynamic_mask: Vec<bool>,
}

impl NodeFeatures {
    pub fn new(values: Tensor, field_names: Vec<String>, dynamic_mask: Vec<bool>) -> Result<Self> {
        let p = values.cols();
        if field_names.len() != p || dynamic_mask.len() != p {
            return Err(Error::shape(
                "NodeFeatures",
                format!(
                    "{} columns, {} names, {} dynamic flags",
                    p,
                    field_names.len(),
                    dynamic_mask.len()
                ),
            ));
        }
        if let Some(bad) = values.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite node feature {bad}")));
        }
        Ok(NodeFeatures { values, field_names, dynamic_mask })
    }

    pub fn num_nodes(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn dynamic_columns(&self) -> Vec<usize> {
        self.dynamic_mask
            .iter()
            .enumerate()
            .filter(|(_, &d)| d)
            .map(|(c, _)| c)
            .collect()
    }
}
