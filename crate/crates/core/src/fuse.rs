//! Cross-scale fusion over a grid of nodes `(level, depth)`.
//!
//! Depth 0 projects each level's pooled block to `internal_channels`. Every
//! later node concatenates its predecessors (same-level nodes at earlier
//! depths, plus the two neighboring levels at the previous depth, resampled
//! onto its own grid points), applies a linear layer and ReLU. The last depth
//! goes through an output projection and a channelwise max over grid points;
//! the per-level maxima are concatenated.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NeighborMode, SpatialHashGrid};
use crate::nn::{Activation, Layer, Matrix, Parameters};
use crate::pool::idw_weights;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionMode {
    /// Every earlier node on the same level.
    Dense,
    /// Same-level predecessors at depth offsets 1, 2, 4, 8, ...
    Log2n,
}

impl FromStr for ConnectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "log2n" => Ok(Self::Log2n),
            other => Err(Error::Config(format!(
                "unknown connection mode '{other}' (expected dense or log2n)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub levels: usize,
    pub depth: usize,
    pub mode: ConnectionMode,
    pub internal_channels: usize,
    pub output_channels: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            depth: 14,
            mode: ConnectionMode::Log2n,
            internal_channels: 256,
            output_channels: 60,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.depth == 0 {
            return Err(Error::Config(format!(
                "fusion needs levels >= 1 and depth >= 1, got {} and {}",
                self.levels, self.depth
            )));
        }
        if self.internal_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config("fusion channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub level: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    SameLevel,
    /// From the next finer level (`level - 1`).
    FromFiner,
    /// From the next coarser level (`level + 1`).
    FromCoarser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: NodeId,
    pub kind: EdgeKind,
}

/// Topology plus channel bookkeeping. Levels and depths are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGraph {
    config: FusionConfig,
    input_channels: Vec<usize>,
    /// Indexed by `node_index`; empty for depth 0.
    edges: Vec<Vec<Edge>>,
}

fn same_level_sources(depth: usize, mode: ConnectionMode) -> Vec<usize> {
    match mode {
        ConnectionMode::Dense => (0..depth).rev().collect(),
        ConnectionMode::Log2n => {
            let mut out = Vec::new();
            let mut step = 1;
            while step <= depth {
                out.push(depth - step);
                step *= 2;
            }
            out
        }
    }
}

impl FusionGraph {
    pub fn new(config: FusionConfig, input_channels: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if input_channels.len() != config.levels {
            return Err(Error::DimensionMismatch {
                context: "fusion input levels".into(),
                expected: config.levels,
                got: input_channels.len(),
            });
        }
        if let Some(l) = input_channels.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("level {l} has zero input channels")));
        }
        let (nl, nd) = (config.levels, config.depth);
        let mut edges = vec![Vec::new(); nl * (nd + 1)];
        for d in 1..=nd {
            for l in 0..nl {
                let e = &mut edges[d * nl + l];
                for src in same_level_sources(d, config.mode) {
                    e.push(Edge {
                        from: NodeId { level: l, depth: src },
                        kind: EdgeKind::SameLevel,
                    });
                }
                if l > 0 {
                    e.push(Edge {
                        from: NodeId { level: l - 1, depth: d - 1 },
                        kind: EdgeKind::FromFiner,
                    });
                }
                if l + 1 < nl {
                    e.push(Edge {
                        from: NodeId { level: l + 1, depth: d - 1 },
                        kind: EdgeKind::FromCoarser,
                    });
                }
            }
        }
        Ok(Self {
            config,
            input_channels,
            edges,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn input_channels(&self) -> &[usize] {
        &self.input_channels
    }

    pub fn output_dim(&self) -> usize {
        self.config.levels * self.config.output_channels
    }

    pub fn num_nodes(&self) -> usize {
        self.edges.len()
    }

    pub fn node_index(&self, n: NodeId) -> usize {
        n.depth * self.config.levels + n.level
    }

    /// Incoming edges: same-level by descending depth, then finer, then
    /// coarser. This is also the channel order of the concatenation.
    pub fn incoming(&self, n: NodeId) -> &[Edge] {
        &self.edges[self.node_index(n)]
    }

    /// Width of the concatenated input of node `n` (depth >= 1).
    pub fn fan_in(&self, n: NodeId) -> usize {
        self.incoming(n).len() * self.config.internal_channels
    }

    /// Every node whose value depends on `start`, including `start`.
    pub fn reachable_from(&self, start: NodeId) -> Vec<NodeId> {
        let nl = self.config.levels;
        let mut hit = vec![false; self.num_nodes()];
        hit[self.node_index(start)] = true;
        for d in start.depth + 1..=self.config.depth {
            for l in 0..nl {
                let n = NodeId { level: l, depth: d };
                if self.incoming(n).iter().any(|e| hit[self.node_index(e.from)]) {
                    hit[self.node_index(n)] = true;
                }
            }
        }
        (0..self.num_nodes())
            .filter(|&i| hit[i])
            .map(|i| NodeId {
                level: i % nl,
                depth: i / nl,
            })
            .collect()
    }
}

/// Per-node weights. Nothing is shared across nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    /// Per level, `in_l -> Ci`, ReLU.
    pub input_proj: Vec<Layer<T>>,
    /// Indexed `(depth - 1) * L + level`, `fan_in -> Ci`, ReLU.
    pub nodes: Vec<Layer<T>>,
    /// Per level, `Ci -> Co`, identity.
    pub output_proj: Vec<Layer<T>>,
}

impl<T: Real> FusionParams<T> {
    /// Fan-in uniform init from one ChaCha8 stream, consumed input
    /// projections first, then nodes in index order, then output projections.
    pub fn init(graph: &FusionGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = graph.config();
        let (ci, co) = (cfg.internal_channels, cfg.output_channels);
        let input_proj = graph
            .input_channels()
            .iter()
            .map(|&c| Layer::random(c, ci, Activation::Relu, &mut rng))
            .collect();
        let mut nodes = Vec::with_capacity(cfg.levels * cfg.depth);
        for d in 1..=cfg.depth {
            for l in 0..cfg.levels {
                let fan = graph.fan_in(NodeId { level: l, depth: d });
                nodes.push(Layer::random(fan, ci, Activation::Relu, &mut rng));
            }
        }
        let output_proj = (0..cfg.levels)
            .map(|_| Layer::random(ci, co, Activation::Identity, &mut rng))
            .collect();
        Self {
            input_proj,
            nodes,
            output_proj,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_proj: self.input_proj.iter().map(Layer::zeros_like).collect(),
            nodes: self.nodes.iter().map(Layer::zeros_like).collect(),
            output_proj: self.output_proj.iter().map(Layer::zeros_like).collect(),
        }
    }

    /// Checks layer shapes against the graph.
    pub fn check(&self, graph: &FusionGraph) -> Result<()> {
        let cfg = graph.config();
        let mismatch = |context: String, expected, got| Error::DimensionMismatch { context, expected, got };
        if self.input_proj.len() != cfg.levels
            || self.output_proj.len() != cfg.levels
            || self.nodes.len() != cfg.levels * cfg.depth
        {
            return Err(mismatch("fusion layer count".into(), graph.num_nodes(), self.nodes.len() + 2 * self.input_proj.len()));
        }
        for (l, layer) in self.input_proj.iter().enumerate() {
            if layer.input_dim() != graph.input_channels()[l] || layer.output_dim() != cfg.internal_channels {
                return Err(mismatch(format!("node ({l},0) input projection"), graph.input_channels()[l], layer.input_dim()));
            }
        }
        for d in 1..=cfg.depth {
            for l in 0..cfg.levels {
                let layer = &self.nodes[(d - 1) * cfg.levels + l];
                let fan = graph.fan_in(NodeId { level: l, depth: d });
                if layer.input_dim() != fan || layer.output_dim() != cfg.internal_channels {
                    return Err(mismatch(format!("node ({l},{d}) weights"), fan, layer.input_dim()));
                }
            }
        }
        for (l, layer) in self.output_proj.iter().enumerate() {
            if layer.input_dim() != cfg.internal_channels || layer.output_dim() != cfg.output_channels {
                return Err(mismatch(format!("level {l} output projection"), cfg.output_channels, layer.output_dim()));
            }
        }
        Ok(())
    }
}

impl<T: Real> Parameters<T> for FusionParams<T> {
    fn layers(&self) -> Vec<&Layer<T>> {
        self.input_proj.iter().chain(&self.nodes).chain(&self.output_proj).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        self.input_proj
            .iter_mut()
            .chain(self.nodes.iter_mut())
            .chain(self.output_proj.iter_mut())
            .collect()
    }
}

/// Sparse linear map carrying features from one point set to another by
/// inverse-distance weighting over the 3 nearest sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler<T> {
    src_len: usize,
    taps: Vec<Vec<(usize, T)>>,
}

impl<T: Real> Resampler<T> {
    pub fn new(src: &[[T; 3]], dst: &[[T; 3]]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::InvalidInput("resampling from an empty point set".into()));
        }
        let mode = NeighborMode::Knn { k: 3 };
        let grid = SpatialHashGrid::for_mode(src.to_vec(), mode)?;
        let taps = dst
            .iter()
            .map(|&q| {
                let nb = grid.query(q, mode);
                let d: Vec<T> = nb.iter().map(|x| x.1).collect();
                nb.iter().map(|x| x.0).zip(idw_weights(&d)).collect()
            })
            .collect();
        Ok(Self {
            src_len: src.len(),
            taps,
        })
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn dst_len(&self) -> usize {
        self.taps.len()
    }

    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.taps.len(), x.cols());
        for (r, taps) in self.taps.iter().enumerate() {
            let row = out.row_mut(r);
            for &(i, w) in taps {
                for (o, &v) in row.iter_mut().zip(x.row(i)) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply).
    pub fn apply_transpose(&self, dy: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.src_len, dy.cols());
        for (r, taps) in self.taps.iter().enumerate() {
            for &(i, w) in taps {
                for (o, &g) in out.row_mut(i).iter_mut().zip(dy.row(r)) {
                    *o += w * g;
                }
            }
        }
        out
    }
}

/// Convenience wrapper: resample `features` living on `src` onto `dst`.
pub fn resample_3nn<T: Real>(src: &[[T; 3]], features: &Matrix<T>, dst: &[[T; 3]]) -> Result<Matrix<T>> {
    if features.rows() != src.len() {
        return Err(Error::DimensionMismatch {
            context: "resample source rows".into(),
            expected: src.len(),
            got: features.rows(),
        });
    }
    Ok(Resampler::new(src, dst)?.apply(features))
}

/// Pooled blocks of one RoI plus the precomputed cross-level resamplers.
#[derive(Debug, Clone)]
pub struct FusionInput<T> {
    pub levels: Vec<Matrix<T>>,
    /// `from_finer[l]` maps level `l-1` onto level `l` (None for l = 0).
    from_finer: Vec<Option<Resampler<T>>>,
    /// `from_coarser[l]` maps level `l+1` onto level `l`.
    from_coarser: Vec<Option<Resampler<T>>>,
}

impl<T: Real> FusionInput<T> {
    /// `points[l]` are level `l`'s grid points in the RoI-canonical frame.
    pub fn new(levels: Vec<Matrix<T>>, points: &[Vec<[T; 3]>]) -> Result<Self> {
        if levels.len() != points.len() {
            return Err(Error::DimensionMismatch {
                context: "fusion input levels".into(),
                expected: points.len(),
                got: levels.len(),
            });
        }
        for (l, (m, p)) in levels.iter().zip(points).enumerate() {
            if m.rows() != p.len() || p.is_empty() {
                return Err(Error::DimensionMismatch {
                    context: format!("level {l} grid points"),
                    expected: p.len(),
                    got: m.rows(),
                });
            }
        }
        let n = levels.len();
        let mut from_finer = Vec::with_capacity(n);
        let mut from_coarser = Vec::with_capacity(n);
        for l in 0..n {
            from_finer.push(if l > 0 { Some(Resampler::new(&points[l - 1], &points[l])?) } else { None });
            from_coarser.push(if l + 1 < n { Some(Resampler::new(&points[l + 1], &points[l])?) } else { None });
        }
        Ok(Self {
            levels,
            from_finer,
            from_coarser,
        })
    }

    /// Same resamplers, new feature blocks.
    pub fn with_levels(&self, levels: Vec<Matrix<T>>) -> Result<Self> {
        for (l, (a, b)) in levels.iter().zip(&self.levels).enumerate() {
            if a.rows() != b.rows() {
                return Err(Error::DimensionMismatch {
                    context: format!("level {l} grid points"),
                    expected: b.rows(),
                    got: a.rows(),
                });
            }
        }
        Ok(Self {
            levels,
            from_finer: self.from_finer.clone(),
            from_coarser: self.from_coarser.clone(),
        })
    }

    fn resampler(&self, level: usize, kind: EdgeKind) -> &Resampler<T> {
        match kind {
            EdgeKind::FromFiner => self.from_finer[level].as_ref(),
            EdgeKind::FromCoarser => self.from_coarser[level].as_ref(),
            EdgeKind::SameLevel => None,
        }
        .expect("cross-level edge without resampler")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures<T> {
    /// `L * Co`, level-major.
    pub fused: Vec<T>,
    /// Per level, `n_l x Co` before the max.
    pub terminals: Vec<Matrix<T>>,
}

/// Node activations kept for the backward pass.
#[derive(Debug)]
pub struct FuseTape<T> {
    /// Post-ReLU output of every node, indexed by `node_index`.
    hidden: Option<Vec<Matrix<T>>>,
    /// Row index of the max, per level and channel.
    argmax: Vec<Vec<usize>>,
    terminals: Vec<Matrix<T>>,
}

impl<T> FuseTape<T> {
    pub fn is_consumed(&self) -> bool {
        self.hidden.is_none()
    }

    pub fn node_output(&self, index: usize) -> Option<&Matrix<T>> {
        self.hidden.as_ref().and_then(|h| h.get(index))
    }

    pub fn argmax(&self) -> &[Vec<usize>] {
        &self.argmax
    }
}

fn gather<T: Real>(graph: &FusionGraph, input: &FusionInput<T>, hidden: &[Matrix<T>], n: NodeId) -> Result<Matrix<T>> {
    let parts: Vec<Matrix<T>> = graph
        .incoming(n)
        .iter()
        .map(|e| {
            let h = &hidden[graph.node_index(e.from)];
            match e.kind {
                EdgeKind::SameLevel => h.clone(),
                k => input.resampler(n.level, k).apply(h),
            }
        })
        .collect();
    let refs: Vec<&Matrix<T>> = parts.iter().collect();
    Matrix::hconcat(&refs)
}

fn column_max<T: Real>(y: &Matrix<T>) -> (Vec<T>, Vec<usize>) {
    let mut best = y.row(0).to_vec();
    let mut arg = vec![0; y.cols()];
    for r in 1..y.rows() {
        for (c, &v) in y.row(r).iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = r;
            }
        }
    }
    (best, arg)
}

fn run<T: Real>(
    graph: &FusionGraph,
    params: &FusionParams<T>,
    input: &FusionInput<T>,
) -> Result<(FusedFeatures<T>, Vec<Matrix<T>>, Vec<Vec<usize>>)> {
    params.check(graph)?;
    let nl = graph.levels();
    if input.levels.len() != nl {
        return Err(Error::DimensionMismatch {
            context: "fusion input levels".into(),
            expected: nl,
            got: input.levels.len(),
        });
    }
    let mut hidden = Vec::with_capacity(graph.num_nodes());
    for (l, x) in input.levels.iter().enumerate() {
        let layer = &params.input_proj[l];
        if x.cols() != layer.input_dim() {
            return Err(Error::DimensionMismatch {
                context: format!("node ({l},0) input"),
                expected: layer.input_dim(),
                got: x.cols(),
            });
        }
        hidden.push(layer.forward(x)?.1);
    }
    for d in 1..=graph.depth() {
        for l in 0..nl {
            let z = gather(graph, input, &hidden, NodeId { level: l, depth: d })?;
            hidden.push(params.nodes[(d - 1) * nl + l].forward(&z)?.1);
        }
    }
    let mut fused = Vec::with_capacity(graph.output_dim());
    let mut terminals = Vec::with_capacity(nl);
    let mut argmax = Vec::with_capacity(nl);
    for l in 0..nl {
        let h = &hidden[graph.node_index(NodeId { level: l, depth: graph.depth() })];
        let y = params.output_proj[l].forward(h)?.1;
        let (m, a) = column_max(&y);
        fused.extend(m);
        argmax.push(a);
        terminals.push(y);
    }
    Ok((FusedFeatures { fused, terminals }, hidden, argmax))
}

/// Forward pass without keeping activations.
pub fn fuse_infer<T: Real>(graph: &FusionGraph, params: &FusionParams<T>, input: &FusionInput<T>) -> Result<FusedFeatures<T>> {
    Ok(run(graph, params, input)?.0)
}

pub fn fuse_forward<T: Real>(
    graph: &FusionGraph,
    params: &FusionParams<T>,
    input: &FusionInput<T>,
) -> Result<(FusedFeatures<T>, FuseTape<T>)> {
    let (out, hidden, argmax) = run(graph, params, input)?;
    let tape = FuseTape {
        hidden: Some(hidden),
        argmax,
        terminals: out.terminals.clone(),
    };
    Ok((out, tape))
}

/// Returns parameter gradients and `dL/d(pooled block)` per level. The max
/// routes each channel's gradient to its recorded argmax row.
pub fn fuse_backward<T: Real>(
    graph: &FusionGraph,
    params: &FusionParams<T>,
    input: &FusionInput<T>,
    tape: &mut FuseTape<T>,
    d_fused: &[T],
) -> Result<(FusionParams<T>, Vec<Matrix<T>>)> {
    let hidden = tape.hidden.take().ok_or(Error::TapeConsumed)?;
    if d_fused.len() != graph.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "fused feature gradient".into(),
            expected: graph.output_dim(),
            got: d_fused.len(),
        });
    }
    let nl = graph.levels();
    let (ci, co) = (graph.config().internal_channels, graph.config().output_channels);
    let mut grads = params.zeros_like();
    let mut dh: Vec<Matrix<T>> = hidden.iter().map(|h| Matrix::zeros(h.rows(), h.cols())).collect();

    // A ReLU output is positive exactly where its pre-activation is, so the
    // stored outputs stand in for pre-activations below.
    for l in 0..nl {
        let idx = graph.node_index(NodeId { level: l, depth: graph.depth() });
        let y = &tape.terminals[l];
        let mut dy = Matrix::zeros(y.rows(), co);
        for c in 0..co {
            dy[(tape.argmax[l][c], c)] = d_fused[l * co + c];
        }
        let dx = params.output_proj[l].backward(&hidden[idx], y, &dy, &mut grads.output_proj[l]);
        dh[idx].add_assign(&dx);
    }
    for d in (1..=graph.depth()).rev() {
        for l in (0..nl).rev() {
            let n = NodeId { level: l, depth: d };
            let idx = graph.node_index(n);
            let k = (d - 1) * nl + l;
            let z = gather(graph, input, &hidden, n)?;
            let dz = params.nodes[k].backward(&z, &hidden[idx], &dh[idx], &mut grads.nodes[k]);
            for (j, e) in graph.incoming(n).iter().enumerate() {
                let block = dz.column_block(j * ci, ci);
                let back = match e.kind {
                    EdgeKind::SameLevel => block,
                    kind => input.resampler(l, kind).apply_transpose(&block),
                };
                dh[graph.node_index(e.from)].add_assign(&back);
            }
        }
    }
    let dx = (0..nl)
        .map(|l| params.input_proj[l].backward(&input.levels[l], &hidden[l], &dh[l], &mut grads.input_proj[l]))
        .collect();
    Ok((grads, dx))
}
