//! Two-layer graph convolution over radiology-concept nodes.
//!
//! Node features are initialised from a report's token embeddings by a bank
//! of 1-D convolutions (one output channel per node) followed by mean
//! pooling over positions. Propagation uses the symmetrically normalised
//! adjacency with self-loops, `Â = D^{-1/2}(A + I)D^{-1/2}`:
//!
//! ```text
//! H1 = ReLU(Â·H0·W0 + b0)
//! Z  = softmax_rows(Â·H1·W1 + b1)
//! ```
//!
//! The flattened `H1` is the feature handed to the fusion network; `Z` is
//! available for inspection.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Session, Tape, TensorMap};
use crate::error::{Error, Result};
use crate::fusion::glorot;
use crate::tensor::Tensor;

pub const DEFAULT_KERNEL_SIZE: usize = 3;
pub const DEFAULT_HIDDEN: usize = 16;
pub const DEFAULT_EMBED_DIM: usize = 768;

/// Placeholder concept graph: the 13 thorax findings plus "No Finding",
/// with hand-picked clinically plausible edges. It is not an
/// expert-curated graph.
pub const SAMPLE_GRAPH: &str = include_str!("../../../data/concept_graph_placeholder.txt");

/// `D^{-1/2}(A + I)D^{-1/2}` for a symmetric nonnegative adjacency matrix.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || a.rows() != a.cols() {
        return Err(Error::Input(format!("adjacency must be square, got {:?}", a.shape())));
    }
    let n = a.rows();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v < 0.0 {
                return Err(Error::Input(format!("negative adjacency entry at ({i}, {j})")));
            }
            if v != a.get(j, i) {
                return Err(Error::Input(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut tilde = a.data().to_vec();
    for i in 0..n {
        tilde[i * n + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / tilde[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    let data = (0..n * n)
        .map(|idx| tilde[idx] * inv_sqrt[idx / n] * inv_sqrt[idx % n])
        .collect();
    Tensor::matrix(n, n, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    node_names: Vec<String>,
    adjacency: Tensor,
    normalized: Tensor,
}

impl GraphSpec {
    pub fn new(node_names: Vec<String>, adjacency: Tensor) -> Result<Self> {
        if adjacency.rows() != node_names.len() {
            return Err(Error::dim(
                "graph",
                format!("{} names for a {:?} adjacency", node_names.len(), adjacency.shape()),
            ));
        }
        if adjacency.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("adjacency entries must be 0 or 1".into()));
        }
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(GraphSpec {
            node_names,
            adjacency,
            normalized,
        })
    }

    /// Parses the edge-list format: a header `N name_1 … name_N`, then one
    /// `name_a name_b` pair per line. Blank lines and `#` comments are
    /// ignored; edges are undirected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::Input("graph file has no header".into()))?;
        let mut fields = header.split_whitespace();
        let count: usize = fields
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Input(format!("line {hline}: header must start with the node count")))?;
        let names: Vec<String> = fields.map(str::to_string).collect();
        if names.len() != count || count == 0 {
            return Err(Error::Input(format!(
                "line {hline}: header declares {count} nodes but names {}",
                names.len()
            )));
        }
        let index = |name: &str, line: usize| {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Input(format!("line {line}: unknown node '{name}'")))
        };
        let mut adj = vec![0.0; count * count];
        for (line, l) in lines {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Input(format!("line {line}: expected 'name_a name_b'")));
            }
            let (a, b) = (index(parts[0], line)?, index(parts[1], line)?);
            if a == b {
                return Err(Error::Input(format!("line {line}: self-loop on '{}'", parts[0])));
            }
            adj[a * count + b] = 1.0;
            adj[b * count + a] = 1.0;
        }
        GraphSpec::new(names, Tensor::matrix(count, count, adj)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GraphSpec::parse(&text)
    }

    pub fn sample() -> Self {
        GraphSpec::parse(SAMPLE_GRAPH).expect("bundled graph is valid")
    }

    pub fn to_text(&self) -> String {
        let n = self.len();
        let mut out = format!("{n} {}\n", self.node_names.join(" "));
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency.get(i, j) != 0.0 {
                    out.push_str(&format!("{} {}\n", self.node_names[i], self.node_names[j]));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.node_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_names.is_empty()
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    /// `N×k` convolution kernels, one row per graph node.
    pub kernel: Tensor,
    /// `N` per-channel convolution biases.
    pub kernel_bias: Tensor,
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
}

impl GcnParams {
    /// Glorot-uniform weights and zero biases.
    pub fn init(
        n_nodes: usize,
        kernel_size: usize,
        embed_dim: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GcnParams {
            kernel: glorot(&mut rng, n_nodes, kernel_size),
            kernel_bias: Tensor::zeros(vec![n_nodes]),
            w0: glorot(&mut rng, embed_dim, hidden),
            b0: Tensor::zeros(vec![hidden]),
            w1: glorot(&mut rng, hidden, classes),
            b1: Tensor::zeros(vec![classes]),
        }
    }

    /// Defaults for a graph: `k = 3`, `d = 768`, `h = 16`, one output class
    /// per node.
    pub fn for_graph(graph: &GraphSpec, seed: u64) -> Self {
        GcnParams::init(
            graph.len(),
            DEFAULT_KERNEL_SIZE,
            DEFAULT_EMBED_DIM,
            DEFAULT_HIDDEN,
            graph.len(),
            seed,
        )
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        GcnParams {
            kernel: z(&self.kernel),
            kernel_bias: z(&self.kernel_bias),
            w0: z(&self.w0),
            b0: z(&self.b0),
            w1: z(&self.w1),
            b1: z(&self.b1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w0.cols()
    }

    pub fn to_map(&self) -> TensorMap {
        [
            ("gcn.kernel", &self.kernel),
            ("gcn.kernel_bias", &self.kernel_bias),
            ("gcn.w0", &self.w0),
            ("gcn.b0", &self.b0),
            ("gcn.w1", &self.w1),
            ("gcn.b1", &self.b1),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
    }
}

/// Handles into a tape holding the graph convolution.
#[derive(Clone, Debug)]
pub struct GcnGraph {
    pub h0: NodeId,
    pub h1: NodeId,
    pub z: NodeId,
}

/// Records the two propagation layers on `tape`, reading `Â` from input
/// `adjacency` and node features from `h0`. Parameters are trainable inputs
/// named as in [`GcnParams::to_map`].
pub fn record_layers(tape: &mut Tape, adjacency: NodeId, h0: NodeId) -> GcnGraph {
    let w0 = tape.param("gcn.w0");
    let b0 = tape.param("gcn.b0");
    let w1 = tape.param("gcn.w1");
    let b1 = tape.param("gcn.b1");
    let ah0 = tape.matmul(adjacency, h0);
    let pre1 = tape.matmul(ah0, w0);
    let pre1 = tape.add(pre1, b0);
    let h1 = tape.relu(pre1);
    let ah1 = tape.matmul(adjacency, h1);
    let pre2 = tape.matmul(ah1, w1);
    let pre2 = tape.add(pre2, b1);
    let z = tape.softmax(pre2);
    GcnGraph { h0, h1, z }
}

/// Records node initialisation from the `tokens` input followed by the two
/// layers.
pub fn record_from_tokens(tape: &mut Tape) -> GcnGraph {
    let adjacency = tape.input("adjacency");
    let tokens = tape.input("tokens");
    let kernel = tape.param("gcn.kernel");
    let kernel_bias = tape.param("gcn.kernel_bias");
    let h0 = tape.conv1d_mean_pool(tokens, kernel, kernel_bias);
    record_layers(tape, adjacency, h0)
}

/// `N×d` node features from an `m×d` token matrix.
pub fn init_nodes(tokens: &Tensor, kernel: &Tensor, kernel_bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.input("tokens");
    let k = tape.input("kernel");
    let b = tape.input("bias");
    let h0 = tape.conv1d_mean_pool(t, k, b);
    tape.output("h0", h0);
    let inputs: TensorMap = [
        ("tokens".to_string(), tokens.clone()),
        ("kernel".to_string(), kernel.clone()),
        ("bias".to_string(), kernel_bias.clone()),
    ]
    .into_iter()
    .collect();
    let mut out = Session::new(&tape).forward(&inputs)?;
    Ok(out.remove("h0").expect("declared output"))
}

/// Returns `(H1, Z)`.
pub fn gcn_forward(adjacency: &Tensor, h0: &Tensor, params: &GcnParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let a = tape.input("adjacency");
    let h = tape.input("h0");
    let g = record_layers(&mut tape, a, h);
    tape.output("h1", g.h1);
    tape.output("z", g.z);
    let mut inputs = params.to_map();
    inputs.insert("adjacency".into(), adjacency.clone());
    inputs.insert("h0".into(), h0.clone());
    let mut out = Session::new(&tape).forward(&inputs)?;
    Ok((
        out.remove("h1").expect("declared output"),
        out.remove("z").expect("declared output"),
    ))
}

/// Reusable feature extractor: one tape, many reports.
pub struct GcnFeaturizer {
    tape: Tape,
    bound: TensorMap,
}

impl GcnFeaturizer {
    pub fn new(adjacency: &Tensor, params: &GcnParams) -> Self {
        let mut tape = Tape::new();
        let g = record_from_tokens(&mut tape);
        tape.output("h1", g.h1);
        let mut bound = params.to_map();
        bound.insert("adjacency".into(), adjacency.clone());
        GcnFeaturizer { tape, bound }
    }

    /// Row-major flattening of `H1` (`N·h` values).
    pub fn features(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let mut extra = TensorMap::new();
        extra.insert("tokens".into(), tokens.clone());
        let out = Session::new(&self.tape).forward(&(&extra, &self.bound))?;
        Ok(out["h1"].data().to_vec())
    }
}

pub fn gcn_features(adjacency: &Tensor, tokens: &Tensor, params: &GcnParams) -> Result<Vec<f64>> {
    GcnFeaturizer::new(adjacency, params).features(tokens)
}
