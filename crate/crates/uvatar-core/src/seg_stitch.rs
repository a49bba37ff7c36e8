//! Multi-view segmentation stitching: visibility-weighted vote unaries over
//! a Potts smoothness graph, minimized by alpha-expansion with exact
//! max-flow subproblems.

use thiserror::Error;

use crate::uv_atlas::{LabelPalette, SegmentationMap, TexelTable};

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("view {view} has resolution {got}, expected {expected}")]
    ResolutionMismatch { view: usize, got: usize, expected: usize },
    #[error("view {view} weight map has {got} entries, expected {expected}")]
    WeightSizeMismatch { view: usize, got: usize, expected: usize },
    #[error("label count must be positive")]
    NoLabels,
    #[error("unary cost table has {got} entries, expected {expected}")]
    UnarySizeMismatch { got: usize, expected: usize },
    #[error("negative weight {weight} in view {view}")]
    NegativeWeight { view: usize, weight: f64 },
}

/// Discrete multi-label MRF over the valid texels of a table: per-node
/// per-label unary costs plus a Potts smoothness term on the texel
/// adjacency graph (4-neighborhood within charts, plus seam links).
#[derive(Debug, Clone)]
pub struct MrfProblem {
    /// Node id per texel, usize::MAX for invalid texels.
    node_of_texel: Vec<usize>,
    /// Texel per node.
    texel_of_node: Vec<usize>,
    /// Dense unary costs, node-major.
    unary: Vec<f64>,
    /// Undirected adjacency over node ids.
    edges: Vec<(usize, usize)>,
    pub label_count: usize,
    pub potts_weight: f64,
}

impl MrfProblem {
    /// Build from per-texel unary costs (texel-major, length R*R*L).
    pub fn new(
        table: &TexelTable,
        unary_per_texel: &[f64],
        label_count: usize,
        potts_weight: f64,
    ) -> Result<Self, StitchError> {
        if label_count == 0 {
            return Err(StitchError::NoLabels);
        }
        let r = table.resolution();
        if unary_per_texel.len() != r * r * label_count {
            return Err(StitchError::UnarySizeMismatch {
                got: unary_per_texel.len(),
                expected: r * r * label_count,
            });
        }
        let mut node_of_texel = vec![usize::MAX; r * r];
        let mut texel_of_node = Vec::with_capacity(table.valid_count());
        for &t in table.valid_indices() {
            node_of_texel[t] = texel_of_node.len();
            texel_of_node.push(t);
        }
        let mut unary = Vec::with_capacity(texel_of_node.len() * label_count);
        for &t in &texel_of_node {
            unary.extend_from_slice(&unary_per_texel[t * label_count..(t + 1) * label_count]);
        }
        let mut edges: Vec<(usize, usize)> = table
            .valid_adjacency()
            .iter()
            .map(|&(a, b)| {
                let (na, nb) = (node_of_texel[a], node_of_texel[b]);
                (na.min(nb), na.max(nb))
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        Ok(Self { node_of_texel, texel_of_node, unary, edges, label_count, potts_weight })
    }

    pub fn node_count(&self) -> usize {
        self.texel_of_node.len()
    }

    pub fn unary_cost(&self, node: usize, label: usize) -> f64 {
        self.unary[node * self.label_count + label]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Total energy of a labeling (node-indexed).
    pub fn energy(&self, labels: &[u8]) -> f64 {
        let mut e = 0.0;
        for n in 0..self.node_count() {
            e += self.unary_cost(n, labels[n] as usize);
        }
        for &(a, b) in &self.edges {
            if labels[a] != labels[b] {
                e += self.potts_weight;
            }
        }
        e
    }

    /// Per-node argmin of the unaries; the expansion starting point.
    pub fn unary_argmin(&self) -> Vec<u8> {
        (0..self.node_count())
            .map(|n| {
                let mut best = 0usize;
                for l in 1..self.label_count {
                    if self.unary_cost(n, l) < self.unary_cost(n, best) {
                        best = l;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Write a node labeling back into a segmentation map over the table's
    /// valid texels.
    pub fn to_segmentation(&self, labels: &[u8], resolution: usize, palette: LabelPalette) -> SegmentationMap {
        let mut seg = SegmentationMap::new(resolution, palette);
        for (n, &t) in self.texel_of_node.iter().enumerate() {
            seg.labels[t] = labels[n];
            seg.valid[t] = true;
        }
        seg
    }

    pub fn node_of_texel(&self, texel: usize) -> Option<usize> {
        let n = self.node_of_texel[texel];
        if n == usize::MAX {
            None
        } else {
            Some(n)
        }
    }
}

/// Vote unaries from weighted per-view observations:
/// unary(t, l) = W(t) - sum_v weight_v(t) * [label_v(t) = l], which is
/// non-negative and zero exactly for unanimous labels. Unobserved texels get
/// all-zero rows and are settled by smoothness alone.
pub fn build_unary(
    observations: &[(SegmentationMap, Vec<f64>)],
    resolution: usize,
    label_count: usize,
) -> Result<Vec<f64>, StitchError> {
    if label_count == 0 {
        return Err(StitchError::NoLabels);
    }
    let texels = resolution * resolution;
    let mut votes = vec![0.0; texels * label_count];
    let mut total = vec![0.0; texels];
    for (view, (seg, weights)) in observations.iter().enumerate() {
        if seg.resolution != resolution {
            return Err(StitchError::ResolutionMismatch { view, got: seg.resolution, expected: resolution });
        }
        if weights.len() != texels {
            return Err(StitchError::WeightSizeMismatch { view, got: weights.len(), expected: texels });
        }
        for t in 0..texels {
            if !seg.valid[t] {
                continue;
            }
            let w = weights[t];
            if w < 0.0 {
                return Err(StitchError::NegativeWeight { view, weight: w });
            }
            votes[t * label_count + seg.labels[t] as usize] += w;
            total[t] += w;
        }
    }
    let mut unary = vec![0.0; texels * label_count];
    for t in 0..texels {
        for l in 0..label_count {
            unary[t * label_count + l] = total[t] - votes[t * label_count + l];
        }
    }
    Ok(unary)
}

/// Directed flow network with non-negative capacities.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    // Paired edge representation: edge i and i^1 are a forward/reverse pair.
    to: Vec<usize>,
    cap: Vec<f64>,
    adjacency: Vec<Vec<usize>>,
    pub source: usize,
    pub sink: usize,
}

impl FlowNetwork {
    pub fn new(nodes: usize, source: usize, sink: usize) -> Self {
        Self { to: Vec::new(), cap: Vec::new(), adjacency: vec![Vec::new(); nodes], source, sink }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn add_node(&mut self) -> usize {
        self.adjacency.push(Vec::new());
        self.adjacency.len() - 1
    }

    /// Add a directed arc with the given capacity (reverse capacity zero).
    pub fn add_arc(&mut self, from: usize, to: usize, capacity: f64) {
        debug_assert!(capacity >= 0.0);
        if capacity == 0.0 {
            return;
        }
        self.adjacency[from].push(self.to.len());
        self.to.push(to);
        self.cap.push(capacity);
        self.adjacency[to].push(self.to.len());
        self.to.push(from);
        self.cap.push(0.0);
    }
}

/// Max-flow result: the flow value and the source-side min-cut partition.
#[derive(Debug, Clone)]
pub struct MaxFlow {
    pub value: f64,
    /// true = node reachable from the source in the residual graph.
    pub source_side: Vec<bool>,
}

/// Dinic's algorithm. The returned cut is verified against the flow value;
/// both sides of the max-flow = min-cut identity are computed.
pub fn max_flow(network: &mut FlowNetwork) -> MaxFlow {
    let n = network.node_count();
    let (s, t) = (network.source, network.sink);
    let mut flow = 0.0;
    let mut level = vec![-1i32; n];
    let mut iter = vec![0usize; n];

    loop {
        // BFS levels on the residual graph.
        for l in &mut level {
            *l = -1;
        }
        level[s] = 0;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &e in &network.adjacency[u] {
                if network.cap[e] > 1e-12 && level[network.to[e]] < 0 {
                    level[network.to[e]] = level[u] + 1;
                    queue.push_back(network.to[e]);
                }
            }
        }
        if level[t] < 0 {
            break;
        }
        for it in &mut iter {
            *it = 0;
        }
        loop {
            let pushed = dfs(network, s, t, f64::INFINITY, &level, &mut iter);
            if pushed <= 0.0 {
                break;
            }
            flow += pushed;
        }
    }

    // Residual reachability gives the min cut.
    let mut source_side = vec![false; n];
    source_side[s] = true;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(s);
    while let Some(u) = queue.pop_front() {
        for &e in &network.adjacency[u] {
            let v = network.to[e];
            if network.cap[e] > 1e-12 && !source_side[v] {
                source_side[v] = true;
                queue.push_back(v);
            }
        }
    }
    MaxFlow { value: flow, source_side }
}

fn dfs(
    network: &mut FlowNetwork,
    u: usize,
    t: usize,
    limit: f64,
    level: &[i32],
    iter: &mut [usize],
) -> f64 {
    if u == t {
        return limit;
    }
    while iter[u] < network.adjacency[u].len() {
        let e = network.adjacency[u][iter[u]];
        let v = network.to[e];
        if network.cap[e] > 1e-12 && level[v] == level[u] + 1 {
            let pushed = dfs(network, v, t, limit.min(network.cap[e]), level, iter);
            if pushed > 0.0 {
                network.cap[e] -= pushed;
                network.cap[e ^ 1] += pushed;
                return pushed;
            }
        }
        iter[u] += 1;
    }
    0.0
}

/// One alpha-expansion move솔ved exactly by min-cut. Binary variable per
/// node: keep the current label (source side) or switch to alpha (sink
/// side). The pairwise reduction follows the standard submodular
/// construction, valid because Potts is a metric.
fn expansion_move(problem: &MrfProblem, labels: &[u8], alpha: u8) -> Vec<u8> {
    let n = problem.node_count();
    let mut network = FlowNetwork::new(n + 2, n, n + 1);
    let (s, t) = (n, n + 1);
    // unary1[v] accumulated as net sink-side (switch-to-alpha) cost.
    let mut unary1 = vec![0.0; n];
    let mut unary0 = vec![0.0; n];
    for v in 0..n {
        unary0[v] = problem.unary_cost(v, labels[v] as usize);
        unary1[v] = problem.unary_cost(v, alpha as usize);
    }
    let lam = problem.potts_weight;
    for &(p, q) in problem.edges() {
        let (fp, fq) = (labels[p], labels[q]);
        let t00 = if fp != fq { lam } else { 0.0 };
        let t01 = if fp != alpha { lam } else { 0.0 };
        let t10 = if alpha != fq { lam } else { 0.0 };
        // t11 = 0 for Potts.
        // E(xp, xq) = t00 + (t10 - t00) xp + (t11 - t10) xq
        //           + (t01 + t10 - t00 - t11) xq (1 - xp)
        unary1[p] += t10 - t00;
        unary0[p] += 0.0;
        unary1[q] += -t10;
        let beta = t01 + t10 - t00;
        debug_assert!(beta >= -1e-12);
        if beta > 0.0 {
            network.add_arc(p, q, beta);
        }
        // Constant t00 dropped; argmin unchanged.
    }
    for v in 0..n {
        let diff = unary1[v] - unary0[v];
        if diff > 0.0 {
            network.add_arc(s, v, diff);
        } else if diff < 0.0 {
            network.add_arc(v, t, -diff);
        }
    }
    let cut = max_flow(&mut network);
    let mut out = labels.to_vec();
    for v in 0..n {
        if !cut.source_side[v] {
            out[v] = alpha;
        }
    }
    out
}

/// Cycle expansion moves over every label until a full cycle brings no
/// energy decrease. Moves are accepted only when they strictly lower the
/// exact energy, so the result never exceeds the initial energy.
pub fn alpha_expansion(problem: &MrfProblem, init: &[u8]) -> Result<(Vec<u8>, f64), StitchError> {
    alpha_expansion_capped(problem, init, usize::MAX)
}

/// Alpha expansion with a cap on the number of full label cycles.
pub fn alpha_expansion_capped(
    problem: &MrfProblem,
    init: &[u8],
    max_cycles: usize,
) -> Result<(Vec<u8>, f64), StitchError> {
    if problem.label_count == 0 {
        return Err(StitchError::NoLabels);
    }
    let mut labels = init.to_vec();
    let mut energy = problem.energy(&labels);
    let mut cycles = 0usize;
    loop {
        let mut improved = false;
        for alpha in 0..problem.label_count as u8 {
            let candidate = expansion_move(problem, &labels, alpha);
            let e = problem.energy(&candidate);
            if e < energy - 1e-12 {
                labels = candidate;
                energy = e;
                improved = true;
            }
        }
        cycles += 1;
        if !improved || cycles >= max_cycles {
            break;
        }
    }
    Ok((labels, energy))
}

/// Per-texel argmax of soft label scores; ties resolve to the lowest label.
pub fn discretize(
    scores: &[f64],
    resolution: usize,
    label_count: usize,
    palette: LabelPalette,
) -> Result<SegmentationMap, StitchError> {
    if label_count == 0 {
        return Err(StitchError::NoLabels);
    }
    let texels = resolution * resolution;
    if scores.len() != texels * label_count {
        return Err(StitchError::UnarySizeMismatch { got: scores.len(), expected: texels * label_count });
    }
    let mut seg = SegmentationMap::new(resolution, palette);
    for t in 0..texels {
        let row = &scores[t * label_count..(t + 1) * label_count];
        let mut best = 0usize;
        for (l, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = l;
            }
        }
        seg.labels[t] = best as u8;
        seg.valid[t] = true;
    }
    Ok(seg)
}

/// Stitch weighted multi-view partial segmentations into one complete
/// labeling over the table's valid texels.
pub fn stitch_views(
    observations: &[(SegmentationMap, Vec<f64>)],
    table: &TexelTable,
    palette: &LabelPalette,
    potts_weight: f64,
) -> Result<SegmentationMap, StitchError> {
    stitch_views_capped(observations, table, palette, potts_weight, usize::MAX)
}

/// [`stitch_views`] with a cap on expansion cycles.
pub fn stitch_views_capped(
    observations: &[(SegmentationMap, Vec<f64>)],
    table: &TexelTable,
    palette: &LabelPalette,
    potts_weight: f64,
    max_cycles: usize,
) -> Result<SegmentationMap, StitchError> {
    let label_count = palette.len();
    let unary = build_unary(observations, table.resolution(), label_count)?;
    let problem = MrfProblem::new(table, &unary, label_count, potts_weight)?;
    let init = problem.unary_argmin();
    let (labels, _) = alpha_expansion_capped(&problem, &init, max_cycles)?;
    Ok(problem.to_segmentation(&labels, table.resolution(), palette.clone()))
}
