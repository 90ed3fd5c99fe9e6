//! Heterogeneous fusion graph over series, image and text nodes, and the
//! relation-specific graph convolution that refines node features.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Series,
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Series => "series",
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub modality: Modality,
    pub index: usize,
}

impl NodeId {
    pub fn series(index: usize) -> Self {
        Self { modality: Modality::Series, index }
    }
    pub fn image(index: usize) -> Self {
        Self { modality: Modality::Image, index }
    }
    pub fn text(index: usize) -> Self {
        Self { modality: Modality::Text, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    CrossTi,
    TextSeries,
    TextImage,
    PastSeries,
    PastImage,
    FutureSeries,
    FutureImage,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::CrossTi,
        Relation::TextSeries,
        Relation::TextImage,
        Relation::PastSeries,
        Relation::PastImage,
        Relation::FutureSeries,
        Relation::FutureImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::CrossTi => "cross_ti",
            Relation::TextSeries => "text_series",
            Relation::TextImage => "text_image",
            Relation::PastSeries => "past_series",
            Relation::PastImage => "past_image",
            Relation::FutureSeries => "future_series",
            Relation::FutureImage => "future_image",
        }
    }

    fn slot(self) -> usize {
        Relation::ALL.iter().position(|&r| r == self).expect("listed")
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOptions {
    /// Store series<->image pairs in both directions.
    pub cross_symmetric: bool,
    /// Also send series/image messages to text nodes.
    pub text_bidirectional: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            cross_symmetric: true,
            text_bidirectional: false,
        }
    }
}

/// Directed edge lists per relation over `T` series, `T` image and `N` text
/// nodes. An edge `(src, dst)` carries `src`'s features into `dst`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeteroGraph {
    pub patches: usize,
    pub texts: usize,
    pub options: GraphOptions,
    edges: [Vec<(NodeId, NodeId)>; 7],
}

pub fn build_graph(patches: usize, texts: usize, past: usize, future: usize) -> HeteroGraph {
    build_graph_with(patches, texts, past, future, GraphOptions::default())
}

pub fn build_graph_with(
    patches: usize,
    texts: usize,
    past: usize,
    future: usize,
    options: GraphOptions,
) -> HeteroGraph {
    let mut edges: [Vec<(NodeId, NodeId)>; 7] = Default::default();
    let t = patches;

    let cross = &mut edges[Relation::CrossTi.slot()];
    for i in 0..t {
        cross.push((NodeId::series(i), NodeId::image(i)));
        if options.cross_symmetric {
            cross.push((NodeId::image(i), NodeId::series(i)));
        }
    }

    for (rel, target) in [
        (Relation::TextSeries, NodeId::series as fn(usize) -> NodeId),
        (Relation::TextImage, NodeId::image),
    ] {
        let list = &mut edges[rel.slot()];
        for j in 0..texts {
            for i in 0..t {
                list.push((NodeId::text(j), target(i)));
                if options.text_bidirectional {
                    list.push((target(i), NodeId::text(j)));
                }
            }
        }
    }

    // Past: node i hears from j in [i - w_p, i - 1]; future: from j in [i + 1, i + w_f].
    for (past_rel, future_rel, node) in [
        (Relation::PastSeries, Relation::FutureSeries, NodeId::series as fn(usize) -> NodeId),
        (Relation::PastImage, Relation::FutureImage, NodeId::image),
    ] {
        for i in 0..t {
            for j in i.saturating_sub(past)..i {
                edges[past_rel.slot()].push((node(j), node(i)));
            }
            for j in i + 1..=(i + future).min(t.saturating_sub(1)) {
                edges[future_rel.slot()].push((node(j), node(i)));
            }
        }
    }

    HeteroGraph {
        patches,
        texts,
        options,
        edges,
    }
}

impl HeteroGraph {
    pub fn edges(&self, rel: Relation) -> &[(NodeId, NodeId)] {
        &self.edges[rel.slot()]
    }

    pub fn num_nodes(&self) -> usize {
        2 * self.patches + self.texts
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Row of `node` in the stacked `[series; image; text]` feature matrix.
    pub fn position(&self, node: NodeId) -> usize {
        match node.modality {
            Modality::Series => node.index,
            Modality::Image => self.patches + node.index,
            Modality::Text => 2 * self.patches + node.index,
        }
    }

    /// Row-normalized adjacency for `rel`: entry `[dst, src] = 1 / |N_r(dst)|`.
    pub fn normalized_adjacency(&self, rel: Relation) -> Option<Tensor> {
        let list = self.edges(rel);
        if list.is_empty() {
            return None;
        }
        let n = self.num_nodes();
        let mut degree = vec![0usize; n];
        for &(_, dst) in list {
            degree[self.position(dst)] += 1;
        }
        let mut m = vec![0.0; n * n];
        for &(src, dst) in list {
            let d = self.position(dst);
            m[d * n + self.position(src)] += 1.0 / degree[d] as f64;
        }
        Some(Tensor::new(vec![n, n], m).expect("square adjacency"))
    }

    /// Edge list as CSV: `relation,src_modality,src_idx,dst_modality,dst_idx`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("relation,src_modality,src_idx,dst_modality,dst_idx\n");
        for rel in Relation::ALL {
            for (s, d) in self.edges(rel) {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    rel,
                    s.modality.as_str(),
                    s.index,
                    d.modality.as_str(),
                    d.index
                ));
            }
        }
        out
    }
}

/// Self-connection and per-relation weights of one convolution layer.
#[derive(Debug, Clone)]
pub struct RelationLayer {
    pub self_weight: Linear,
    pub relation_weights: Vec<Linear>,
}

impl RelationLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            self_weight: Linear::no_bias(pb, &format!("{name}.self"), width, width)?,
            relation_weights: Relation::ALL
                .iter()
                .map(|r| Linear::no_bias(pb, &format!("{name}.{r}"), width, width))
                .collect::<Result<_>>()?,
        })
    }

    pub fn weight(&self, rel: Relation) -> &Linear {
        &self.relation_weights[rel.slot()]
    }

    /// `ReLU(sum_r sum_{j in N_r(i)} W_r h_j / |N_r(i)| + W_0 h_i)` for every
    /// node. Text rows pass through unchanged unless text nodes receive edges.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, graph: &HeteroGraph, feats: Var) -> Result<Var> {
        let n = graph.num_nodes();
        if tape.shape(feats)[0] != n {
            return Err(Error::Alignment(format!(
                "feature matrix has {} rows, graph has {n} nodes",
                tape.shape(feats)[0]
            )));
        }
        let mut total = self.self_weight.forward(tape, store, feats)?;
        for rel in Relation::ALL {
            let Some(adj) = graph.normalized_adjacency(rel) else { continue };
            let adj = tape.constant(adj);
            let gathered = tape.matmul(adj, feats)?;
            let msg = self.weight(rel).forward(tape, store, gathered)?;
            total = tape.add(total, msg)?;
        }
        let updated = tape.relu(total);
        if graph.options.text_bidirectional || graph.texts == 0 {
            return Ok(updated);
        }
        let temporal = tape.narrow(updated, 0, 0, 2 * graph.patches)?;
        let text = tape.narrow(feats, 0, 2 * graph.patches, graph.texts)?;
        tape.concat(&[temporal, text], 0)
    }
}

#[derive(Debug, Clone)]
pub struct GraphFusion {
    pub layers: Vec<RelationLayer>,
}

impl GraphFusion {
    pub fn new(pb: &mut ParamBuilder, width: usize, layers: usize) -> Result<Self> {
        Ok(Self {
            layers: (0..layers)
                .map(|k| RelationLayer::new(pb, &format!("fusion.layer{k}"), width))
                .collect::<Result<_>>()?,
        })
    }

    /// Final features of every node, stacked `[series; image; text]`.
    pub fn propagate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &HeteroGraph,
        temporal: Var,
        image: Var,
        text: Var,
    ) -> Result<Var> {
        let (ts, is) = (tape.shape(temporal).to_vec(), tape.shape(image).to_vec());
        if ts != is || ts[0] != graph.patches {
            return Err(Error::Alignment(format!(
                "temporal features {ts:?}, image features {is:?}, graph expects {} patches",
                graph.patches
            )));
        }
        if tape.shape(text)[0] != graph.texts {
            return Err(Error::Alignment(format!(
                "{} text rows for {} text nodes",
                tape.shape(text)[0],
                graph.texts
            )));
        }
        let mut h = tape.concat(&[temporal, image, text], 0)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, graph, h)?;
        }
        Ok(h)
    }

    /// Series-node features in patch order: `[T x d]`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &HeteroGraph,
        temporal: Var,
        image: Var,
        text: Var,
    ) -> Result<Var> {
        let h = self.propagate(tape, store, graph, temporal, image, text)?;
        tape.narrow(h, 0, 0, graph.patches)
    }
}
