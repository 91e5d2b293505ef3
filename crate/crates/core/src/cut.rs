//! Cut stage: thresholded cosine graph over class-aware tokens, two-way
//! normalized cut from the second generalized eigenvector, and rendering.

use crate::error::{Error, Result};
use crate::image::{Image, Overlay};
use crate::numerics::{cosine, generalized_second_eigvec, upsample_nearest, SymMatrix};
use crate::rout::ClassAwareTokens;
use crate::types::{GridMap, Heatmap, TokenMatrix};

/// Similarity threshold used when none is given.
pub const DEFAULT_PHI: f64 = 0.05;

/// Binary affinity graph restricted to non-isolated tokens.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    /// Includes self-edges.
    pub adjacency: SymMatrix,
    pub degrees: Vec<f64>,
    /// Node `i` is token `node_index[i]`.
    pub node_index: Vec<usize>,
    pub isolated: Vec<usize>,
    /// Token count before isolated nodes were removed.
    pub tokens: usize,
    /// L2 norm of each node's token, used to orient the split.
    pub node_norms: Vec<f64>,
}

impl AffinityGraph {
    /// Graph over all `n` nodes of a 0/1 adjacency; nodes get equal norms.
    pub fn from_adjacency(adjacency: SymMatrix) -> Result<Self> {
        let n = adjacency.order();
        for i in 0..n {
            for j in 0..n {
                let v = adjacency.get(i, j);
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Domain(format!("adjacency entry ({i},{j}) = {v} is not 0/1")));
                }
            }
        }
        let degrees = (0..n).map(|i| adjacency.row(i).iter().sum()).collect();
        Ok(AffinityGraph {
            adjacency,
            degrees,
            node_index: (0..n).collect(),
            isolated: Vec::new(),
            tokens: n,
            node_norms: vec![1.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.node_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_index.is_empty()
    }

    /// Every pair of nodes is linked: the split carries no information.
    pub fn is_complete(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..n).all(|j| i == j || self.adjacency.get(i, j) == 1.0))
    }
}

/// `e_ij = [cos(t_i, t_j) ≥ φ]`, then drops tokens linked to nothing but
/// themselves.
pub fn build_graph(tc: &ClassAwareTokens, phi: f64) -> Result<AffinityGraph> {
    let t = tc.tokens();
    let s = t.rows();
    if s < 2 {
        return Err(Error::DegenerateGraph(format!("{s} token(s), need at least 2")));
    }
    let norms = tc.row_norms();
    let mut full = vec![false; s * s];
    for i in 0..s {
        for j in i..s {
            let linked = cosine(t.row(i), t.row(j)) >= phi;
            full[i * s + j] = linked;
            full[j * s + i] = linked;
        }
    }
    let (kept, isolated): (Vec<usize>, Vec<usize>) =
        (0..s).partition(|&i| (0..s).any(|j| j != i && full[i * s + j]));
    if kept.len() < 2 {
        return Err(Error::DegenerateGraph(format!(
            "{} of {s} tokens have a neighbour at threshold {phi}",
            kept.len()
        )));
    }
    let n = kept.len();
    let mut adjacency = SymMatrix::zeros(n);
    for a in 0..n {
        for b in a..n {
            if full[kept[a] * s + kept[b]] {
                adjacency.set(a, b, 1.0);
            }
        }
    }
    let degrees = (0..n).map(|i| adjacency.row(i).iter().sum()).collect();
    let node_norms = kept.iter().map(|&i| norms[i]).collect();
    Ok(AffinityGraph {
        adjacency,
        degrees,
        node_index: kept,
        isolated,
        tokens: s,
        node_norms,
    })
}

/// `cut(I,J)/assoc(I,V) + cut(I,J)/assoc(J,V)` for `I = {i : in_i[i]}`.
pub fn ncut_value(graph: &AffinityGraph, in_i: &[bool]) -> Result<f64> {
    let n = graph.len();
    if in_i.len() != n {
        return Err(Error::Shape(format!("membership of length {} for {n} nodes", in_i.len())));
    }
    let size = in_i.iter().filter(|&&b| b).count();
    if size == 0 || size == n {
        return Err(Error::Domain("Ncut needs a nonempty proper subset".into()));
    }
    let (mut cut, mut assoc_i, mut assoc_j) = (0.0, 0.0, 0.0);
    for a in 0..n {
        for b in 0..n {
            let e = graph.adjacency.get(a, b);
            if in_i[a] {
                assoc_i += e;
                if !in_i[b] {
                    cut += e;
                }
            } else {
                assoc_j += e;
            }
        }
    }
    Ok(cut / assoc_i + cut / assoc_j)
}

/// Mean split of the second generalized eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub y1: Vec<f64>,
    pub lambda1: f64,
    pub mean: f64,
    /// Node indices (into the graph) with `y1 ≥ mean`.
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
    /// `y1` scattered back to token positions; zero off the foreground.
    pub y1c: Vec<f32>,
}

impl Partition {
    fn split(y1: Vec<f64>, lambda1: f64, graph: &AffinityGraph) -> Self {
        let mean = y1.iter().sum::<f64>() / y1.len() as f64;
        let (foreground, background): (Vec<usize>, Vec<usize>) =
            (0..y1.len()).partition(|&i| y1[i] >= mean);
        let mut y1c = vec![0.0f32; graph.tokens];
        for &i in &foreground {
            y1c[graph.node_index[i]] = y1[i] as f32;
        }
        Partition {
            y1,
            lambda1,
            mean,
            foreground,
            background,
            y1c,
        }
    }

    /// Membership vector over graph nodes.
    pub fn membership(&self) -> Vec<bool> {
        let mut m = vec![false; self.y1.len()];
        for &i in &self.foreground {
            m[i] = true;
        }
        m
    }

    /// Foreground as token positions.
    pub fn foreground_tokens(&self, graph: &AffinityGraph) -> Vec<usize> {
        self.foreground.iter().map(|&i| graph.node_index[i]).collect()
    }
}

/// Solves, mean-splits and orients.
pub fn ncut_partition(graph: &AffinityGraph) -> Result<Partition> {
    let (lambda1, y1) = generalized_second_eigvec(&graph.degrees, &graph.adjacency)?;
    Ok(orient_foreground(Partition::split(y1, lambda1, graph), graph))
}

fn mean_over(values: &[f64], set: &[usize]) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    set.iter().map(|&i| values[i]).sum::<f64>() / set.len() as f64
}

/// Flips the eigenvector sign when the background has the larger mean token
/// norm. Ties keep the incoming sign.
pub fn orient_foreground(partition: Partition, graph: &AffinityGraph) -> Partition {
    let mf = mean_over(&graph.node_norms, &partition.foreground);
    let mb = mean_over(&graph.node_norms, &partition.background);
    if mb <= mf {
        return partition;
    }
    let flipped = Partition::split(partition.y1.iter().map(|v| -v).collect(), partition.lambda1, graph);
    let mf2 = mean_over(&graph.node_norms, &flipped.foreground);
    let mb2 = mean_over(&graph.node_norms, &flipped.background);
    // values tied at the mean land on the foreground both ways
    if mb2 <= mf2 {
        flipped
    } else {
        partition
    }
}

/// Full-resolution heat map and overlay `0.5·255·heat + 0.5·255·X`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub heatmap: Heatmap,
    pub overlay: Overlay,
}

/// Normalizes `y1c` over its nonzero entries (a single nonzero entry maps to
/// 1), lays it on the grid and renders it.
pub fn render_map(y1c: &[f32], image: &Image, patch: usize) -> Result<Rendering> {
    let grid = check_grid(y1c.len(), image, patch)?;
    let support: Vec<f32> = y1c.iter().copied().filter(|&v| v != 0.0).collect();
    let lo = support.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = support.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let data = y1c
        .iter()
        .map(|&v| match v {
            0.0 => 0.0,
            _ if hi > lo => ((f64::from(v) - f64::from(lo)) / (f64::from(hi) - f64::from(lo))) as f32,
            _ => 1.0,
        })
        .collect();
    render_grid(&GridMap::new(grid.0, grid.1, data)?, image, patch)
}

/// Renders a grid map already in [0,1].
pub fn render_grid(map: &GridMap, image: &Image, patch: usize) -> Result<Rendering> {
    if map.grid_h * patch != image.height() || map.grid_w * patch != image.width() {
        return Err(Error::Shape(format!(
            "{}x{} map with patch {patch} does not cover a {}x{} image",
            map.grid_h,
            map.grid_w,
            image.height(),
            image.width()
        )));
    }
    let heatmap = upsample_nearest(map, patch);
    let data = image
        .data()
        .chunks_exact(Image::CHANNELS)
        .zip(&heatmap.data)
        .flat_map(|(px, &h)| px.iter().map(move |&x| 0.5 * 255.0 * h + 0.5 * 255.0 * x))
        .collect();
    Ok(Rendering {
        overlay: Overlay {
            height: image.height(),
            width: image.width(),
            data,
        },
        heatmap,
    })
}

fn check_grid(tokens: usize, image: &Image, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || image.height() % patch != 0 || image.width() % patch != 0 {
        return Err(Error::Shape(format!(
            "patch {patch} does not tile a {}x{} image",
            image.height(),
            image.width()
        )));
    }
    let grid = (image.height() / patch, image.width() / patch);
    if grid.0 * grid.1 != tokens {
        return Err(Error::Shape(format!("{tokens} values for a {}x{} grid", grid.0, grid.1)));
    }
    Ok(grid)
}

/// Everything the cut stage produced for one image.
#[derive(Debug, Clone)]
pub struct CutOutput {
    pub graph: AffinityGraph,
    pub partition: Partition,
    pub rendering: Rendering,
}

/// Graph, partition and rendering over class-aware tokens. A graph that is
/// complete or has fewer than two usable nodes is reported as degenerate.
pub fn cut_map(tc: &ClassAwareTokens, phi: f64, image: &Image, patch: usize) -> Result<CutOutput> {
    check_grid(tc.rows(), image, patch)?;
    let graph = build_graph(tc, phi)?;
    if graph.is_complete() {
        return Err(Error::DegenerateGraph(format!(
            "all {} usable tokens are mutually similar at threshold {phi}",
            graph.len()
        )));
    }
    let partition = ncut_partition(&graph)?;
    let rendering = render_map(&partition.y1c, image, patch)?;
    Ok(CutOutput {
        graph,
        partition,
        rendering,
    })
}

/// The cut stage on raw patch tokens (all channel weights one).
pub fn cut_only_map(tokens: &TokenMatrix, phi: f64, image: &Image, patch: usize) -> Result<CutOutput> {
    cut_map(&ClassAwareTokens::unweighted(tokens)?, phi, image, patch)
}
