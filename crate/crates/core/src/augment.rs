//! Adjacency augmentations, per-head mask plans and positional encodings.

use std::collections::HashSet;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{adjacency_mask, Graph, NodeType, SparseMask};
use crate::ndiff::Tensor;
use crate::par;
use crate::rng::{stream_rng, Stream};

fn require_square(m: &SparseMask) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::NonSquare { rows: m.num_rows(), cols: m.num_cols() })
    }
}

/// Boolean product `a * b`: entry `(i, j)` is set when some `k` has `a[i,k]` and `b[k,j]`.
fn bool_product(a: &SparseMask, b: &SparseMask) -> SparseMask {
    let n_cols = b.num_cols();
    let rows = par::map_range(a.num_rows(), |i| {
        let mut seen = vec![false; n_cols];
        let mut row = Vec::new();
        for &k in a.row(i) {
            for &j in b.row(k) {
                if !seen[j] {
                    seen[j] = true;
                    row.push(j);
                }
            }
        }
        row
    });
    SparseMask::from_rows(n_cols, rows).expect("product indices are in range")
}

/// Boolean `k`-th power: `(i, j)` is set iff a walk of exactly `k` steps joins them.
pub fn dilate(m: &SparseMask, k: usize) -> Result<SparseMask> {
    require_square(m)?;
    if k == 0 {
        return Ok(SparseMask::identity(m.num_rows()));
    }
    let mut out = m.clone();
    for _ in 1..k {
        out = bool_product(&out, m);
    }
    Ok(out)
}

/// Union of the boolean powers `m, m^2, ..., m^hops`.
pub fn khop_union(m: &SparseMask, hops: usize) -> Result<SparseMask> {
    require_square(m)?;
    let mut power = m.clone();
    let mut union = m.clone();
    for _ in 1..hops.max(1) {
        power = bool_product(&power, m);
        union = union.union(&power)?;
    }
    Ok(union)
}

/// How many random pairs to insert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RandomEdgeCount {
    Pairs(usize),
    /// Fraction of the mask's current undirected off-diagonal pair count.
    Fraction(f64),
}

/// Adds exactly `j` new symmetric off-diagonal pairs chosen uniformly among the
/// pairs absent from `m`. The input is not modified.
pub fn add_random_edges(m: &SparseMask, count: RandomEdgeCount, seed: u64) -> Result<SparseMask> {
    require_square(m)?;
    let n = m.num_rows();
    let existing = m.undirected_edge_count();
    let requested = match count {
        RandomEdgeCount::Pairs(j) => j,
        RandomEdgeCount::Fraction(f) => (f * existing as f64).round() as usize,
    };
    if requested == 0 {
        return Ok(m.clone());
    }
    let total_pairs = n * n.saturating_sub(1) / 2;
    let available = total_pairs - existing.min(total_pairs);
    if requested > available {
        return Err(Error::TooManyRequested { requested, available });
    }
    let mut rng = stream_rng(seed, Stream::RandomEdges, 0);
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(requested);
    if requested * 2 <= available {
        let mut taken = HashSet::with_capacity(requested);
        while chosen.len() < requested {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let pair = (i.min(j), i.max(j));
            if !m.contains(pair.0, pair.1) && taken.insert(pair) {
                chosen.push(pair);
            }
        }
    } else {
        let free: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !m.contains(i, j))
            .collect();
        chosen = sample(&mut rng, free.len(), requested).into_iter().map(|p| free[p]).collect();
    }
    let mut rows: Vec<Vec<usize>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for (i, j) in chosen {
        rows[i].push(j);
        rows[j].push(i);
    }
    SparseMask::from_rows(n, rows)
}

/// Which nodes are eligible as global attention nodes and how many to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalSelector {
    pub node_types: Vec<NodeType>,
    /// Fraction of eligible nodes sampled; any positive fraction keeps at least one.
    pub fraction: f64,
}

impl Default for GlobalSelector {
    fn default() -> Self {
        GlobalSelector {
            node_types: vec![NodeType::Inflow, NodeType::Wall, NodeType::Obstacle],
            fraction: 0.01,
        }
    }
}

/// Samples global nodes among those whose type matches the selector.
pub fn select_global_nodes(g: &Graph, selector: &GlobalSelector, seed: u64) -> Vec<usize> {
    if selector.fraction <= 0.0 {
        return Vec::new();
    }
    let eligible: Vec<usize> = g
        .node_types()
        .iter()
        .enumerate()
        .filter(|(_, t)| selector.node_types.contains(t))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Vec::new();
    }
    let count = ((selector.fraction * eligible.len() as f64).ceil() as usize).clamp(1, eligible.len());
    let mut rng = stream_rng(seed, Stream::GlobalNodes, 0);
    let mut picked: Vec<usize> =
        sample(&mut rng, eligible.len(), count).into_iter().map(|p| eligible[p]).collect();
    picked.sort_unstable();
    picked
}

/// Connects each listed node to every node, symmetrically. The diagonal entry
/// of a global node is only added when `self_loops` is set.
pub fn connect_global(m: &SparseMask, nodes: &[usize], self_loops: bool) -> Result<SparseMask> {
    require_square(m)?;
    let n = m.num_rows();
    if nodes.is_empty() {
        return Ok(m.clone());
    }
    if let Some(&bad) = nodes.iter().find(|&&u| u >= n) {
        return Err(Error::IndexOutOfRange { index: bad, num_nodes: n });
    }
    let is_global: Vec<bool> = {
        let mut v = vec![false; n];
        nodes.iter().for_each(|&u| v[u] = true);
        v
    };
    let rows = (0..n)
        .map(|i| {
            let mut row = m.row(i).to_vec();
            if is_global[i] {
                row.extend((0..n).filter(|&j| j != i || self_loops));
            } else {
                row.extend_from_slice(nodes);
            }
            row
        })
        .collect();
    SparseMask::from_rows(n, rows)
}

/// Samples global nodes from `g` and connects them.
pub fn add_global(
    m: &SparseMask,
    g: &Graph,
    selector: &GlobalSelector,
    seed: u64,
    self_loops: bool,
) -> Result<SparseMask> {
    connect_global(m, &select_global_nodes(g, selector, seed), self_loops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationPlan {
    #[default]
    None,
    /// `A^2` on half of the heads in the last five layers.
    Dilation2,
    /// `A^3` on half of the heads in the last five layers.
    Dilation3,
    /// `A^2` on half of the heads in the middle third of the layers and `A^3`
    /// on half of the heads in the last five layers.
    #[serde(rename = "dilation2_3")]
    Dilation2_3,
}

/// Adjacency augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub dilation: DilationPlan,
    /// Dilated heads attend over `A^k ∪ A` instead of `A^k` alone.
    pub dilation_union: bool,
    /// Random symmetric pairs as a fraction of the mesh's undirected edge count.
    pub random_edge_fraction: f64,
    pub global: GlobalSelector,
    /// Redraw random pairs on every step; otherwise they are drawn once.
    pub reseed_per_step: bool,
    /// Base mask is the union of adjacency powers `1..=khop`.
    pub khop: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            dilation: DilationPlan::None,
            dilation_union: false,
            random_edge_fraction: 0.20,
            global: GlobalSelector::default(),
            reseed_per_step: true,
            khop: 1,
        }
    }
}

impl AugmentSpec {
    /// Plain adjacency: no dilation, random pairs or global nodes.
    pub fn none() -> AugmentSpec {
        AugmentSpec {
            random_edge_fraction: 0.0,
            global: GlobalSelector { fraction: 0.0, ..GlobalSelector::default() },
            ..AugmentSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.random_edge_fraction) {
            return Err(Error::InvalidConfig(format!(
                "random_edge_fraction {} outside [0, 1]",
                self.random_edge_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.global.fraction) {
            return Err(Error::InvalidConfig(format!(
                "global fraction {} outside [0, 1]",
                self.global.fraction
            )));
        }
        if self.khop == 0 {
            return Err(Error::InvalidConfig("khop must be at least 1".into()));
        }
        Ok(())
    }
}

/// Assignment of a mask to every (layer, head) slot. Indices are zero-based.
#[derive(Debug, Clone)]
pub struct HeadMaskPlan {
    layers: usize,
    heads: usize,
    registry: Vec<Arc<SparseMask>>,
    slots: Vec<usize>,
}

impl HeadMaskPlan {
    /// Every slot uses the same mask.
    pub fn uniform(layers: usize, heads: usize, mask: Arc<SparseMask>) -> HeadMaskPlan {
        HeadMaskPlan { layers, heads, registry: vec![mask], slots: vec![0; layers * heads] }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn mask(&self, layer: usize, head: usize) -> &Arc<SparseMask> {
        &self.registry[self.slots[layer * self.heads + head]]
    }

    /// Registry index of the mask for a slot (0 is always the base mask).
    pub fn slot(&self, layer: usize, head: usize) -> usize {
        self.slots[layer * self.heads + head]
    }

    pub fn num_nodes(&self) -> usize {
        self.registry[0].num_rows()
    }
}

/// Lays out which heads use the base mask and which use a dilated mask.
///
/// Registry index 0 is `base`, 1 is `power2`, 2 is `power3` (when supplied).
/// Dilated heads are the last `ceil(H/2)` heads of their layers.
pub fn head_mask_plan(
    layers: usize,
    heads: usize,
    plan: DilationPlan,
    base: Arc<SparseMask>,
    power2: Option<Arc<SparseMask>>,
    power3: Option<Arc<SparseMask>>,
) -> Result<HeadMaskPlan> {
    if layers == 0 || heads == 0 {
        return Err(Error::InvalidConfig("plan needs at least one layer and one head".into()));
    }
    let n = base.num_rows();
    let mut out = HeadMaskPlan::uniform(layers, heads, base);
    if plan == DilationPlan::None {
        return Ok(out);
    }
    if heads < 2 {
        return Err(Error::PlanRequiresMoreHeads { heads });
    }
    const TAIL: usize = 5;
    if layers < TAIL {
        return Err(Error::PlanRequiresMoreLayers { required: TAIL, layers });
    }
    let mut register = |m: Option<Arc<SparseMask>>, power: usize| -> Result<usize> {
        let m = m.ok_or_else(|| Error::InvalidConfig(format!("plan needs the A^{power} mask")))?;
        if m.num_rows() != n {
            return Err(Error::shape("head_mask_plan", "dilated mask size differs from base"));
        }
        out.registry.push(m);
        Ok(out.registry.len() - 1)
    };
    let (middle, tail) = match plan {
        DilationPlan::None => unreachable!(),
        DilationPlan::Dilation2 => (None, register(power2, 2)?),
        DilationPlan::Dilation3 => (None, register(power3, 3)?),
        DilationPlan::Dilation2_3 => {
            let p2 = register(power2, 2)?;
            (Some(p2), register(power3, 3)?)
        }
    };
    let dilated_heads = heads - heads.div_ceil(2)..heads;
    if let Some(id) = middle {
        for layer in layers / 3..2 * layers / 3 {
            for h in dilated_heads.clone() {
                out.slots[layer * heads + h] = id;
            }
        }
    }
    for layer in layers - TAIL..layers {
        for h in dilated_heads.clone() {
            out.slots[layer * heads + h] = tail;
        }
    }
    Ok(out)
}

/// Static masks for one graph under one model configuration. Random pairs are
/// layered on top per call to [`MaskBank::plan`].
#[derive(Debug, Clone)]
pub struct MaskBank {
    layers: usize,
    heads: usize,
    spec: AugmentSpec,
    static_base: Arc<SparseMask>,
    power2: Option<Arc<SparseMask>>,
    power3: Option<Arc<SparseMask>>,
    random_pairs: usize,
    fixed_plan: Option<HeadMaskPlan>,
    global_nodes: Vec<usize>,
}

impl MaskBank {
    /// `seed` fixes the global-node sample (and the random pairs when
    /// `reseed_per_step` is off).
    pub fn new(
        g: &Graph,
        spec: &AugmentSpec,
        layers: usize,
        heads: usize,
        self_loops: bool,
        seed: u64,
    ) -> Result<MaskBank> {
        spec.validate()?;
        let adjacency = adjacency_mask(g, false);
        let mut base = khop_union(&adjacency, spec.khop)?;
        if self_loops {
            base = base.with_self_loops();
        }
        let global_nodes = select_global_nodes(g, &spec.global, seed);
        let base = connect_global(&base, &global_nodes, self_loops)?;
        let dilated = |k: usize| -> Result<Arc<SparseMask>> {
            let mut m = dilate(&adjacency, k)?;
            if spec.dilation_union {
                m = m.union(&adjacency)?;
            }
            Ok(Arc::new(m))
        };
        let (power2, power3) = match spec.dilation {
            DilationPlan::None => (None, None),
            DilationPlan::Dilation2 => (Some(dilated(2)?), None),
            DilationPlan::Dilation3 => (None, Some(dilated(3)?)),
            DilationPlan::Dilation2_3 => (Some(dilated(2)?), Some(dilated(3)?)),
        };
        let random_pairs =
            (spec.random_edge_fraction * adjacency.undirected_edge_count() as f64).round() as usize;
        let mut bank = MaskBank {
            layers,
            heads,
            spec: spec.clone(),
            static_base: Arc::new(base),
            power2,
            power3,
            random_pairs,
            fixed_plan: None,
            global_nodes,
        };
        // validates the layout once, up front
        let plan = bank.build_plan(if spec.reseed_per_step { None } else { Some(seed) })?;
        if !spec.reseed_per_step || random_pairs == 0 {
            bank.fixed_plan = Some(plan);
        }
        Ok(bank)
    }

    fn build_plan(&self, random_seed: Option<u64>) -> Result<HeadMaskPlan> {
        let base = match random_seed {
            Some(seed) if self.random_pairs > 0 => Arc::new(add_random_edges(
                &self.static_base,
                RandomEdgeCount::Pairs(self.random_pairs),
                seed,
            )?),
            _ => self.static_base.clone(),
        };
        head_mask_plan(
            self.layers,
            self.heads,
            self.spec.dilation,
            base,
            self.power2.clone(),
            self.power3.clone(),
        )
    }

    /// Plan for one forward pass. `step_seed` drives the random pairs when
    /// they are redrawn per step.
    pub fn plan(&self, step_seed: u64) -> Result<HeadMaskPlan> {
        match &self.fixed_plan {
            Some(p) => Ok(p.clone()),
            None => self.build_plan(Some(step_seed)),
        }
    }

    pub fn static_base(&self) -> &Arc<SparseMask> {
        &self.static_base
    }

    pub fn global_nodes(&self) -> &[usize] {
        &self.global_nodes
    }

    pub fn random_pairs(&self) -> usize {
        self.random_pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "m", rename_all = "snake_case")]
pub enum PeMode {
    #[default]
    None,
    Coords,
    LaplacianEig(usize),
    RandomWalk(usize),
}

impl PeMode {
    /// Number of encoding columns for a graph of spatial dimension `dim`.
    pub fn width(self, dim: usize) -> usize {
        match self {
            PeMode::None => 0,
            PeMode::Coords => dim,
            PeMode::LaplacianEig(m) | PeMode::RandomWalk(m) => m,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    pub values: Tensor,
    /// Set when the Laplacian has more than one zero eigenvalue.
    pub disconnected: bool,
}

pub fn positional_encoding(g: &Graph, mode: PeMode) -> Result<PositionalEncoding> {
    let n = g.num_nodes();
    let values = match mode {
        PeMode::None => Tensor::zeros(&[n, 0]),
        PeMode::Coords => Tensor::new(&[n, g.dim()], g.coords().to_vec())?,
        PeMode::RandomWalk(m) => random_walk_encoding(g, m),
        PeMode::LaplacianEig(m) => return laplacian_encoding(g, m),
    };
    Ok(PositionalEncoding { values, disconnected: false })
}

/// Column `k-1` holds the return probability of a `k`-step random walk.
fn random_walk_encoding(g: &Graph, m: usize) -> Tensor {
    let n = g.num_nodes();
    let adj = adjacency_mask(g, false);
    let rows = par::map_range(n, |i| {
        let mut dist = vec![0.0; n];
        dist[i] = 1.0;
        let mut out = Vec::with_capacity(m);
        for _ in 0..m {
            let mut next = vec![0.0; n];
            for (u, &p) in dist.iter().enumerate() {
                let deg = adj.row_len(u);
                if p == 0.0 || deg == 0 {
                    continue;
                }
                let share = p / deg as f64;
                for &v in adj.row(u) {
                    next[v] += share;
                }
            }
            dist = next;
            out.push(dist[i]);
        }
        out
    });
    Tensor::new(&[n, m], rows.into_iter().flatten().collect()).expect("n x m rows")
}

fn laplacian_encoding(g: &Graph, m: usize) -> Result<PositionalEncoding> {
    let n = g.num_nodes();
    if m >= n {
        return Err(Error::InvalidConfig(format!("{m} eigenvectors requested for {n} nodes")));
    }
    let adj = adjacency_mask(g, false);
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| match adj.row_len(i) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        if adj.row_len(i) > 0 {
            lap[(i, i)] = 1.0;
        }
        for &j in adj.row(i) {
            lap[(i, j)] -= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    let eig = lap
        .try_symmetric_eigen(1e-12, 10_000)
        .ok_or_else(|| Error::EigenFailure(format!("no convergence for {n} nodes")))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    const ZERO_TOL: f64 = 1e-8;
    let zeros = order.iter().filter(|&&k| eig.eigenvalues[k].abs() < ZERO_TOL).count();
    let mut values = Tensor::zeros(&[n, m]);
    for (col, &k) in order.iter().skip(zeros).take(m).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = (0..n).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            values.set(i, col, sign * v[i]);
        }
    }
    Ok(PositionalEncoding { values, disconnected: zeros > 1 })
}
