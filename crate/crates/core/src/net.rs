//! Cell-to-CNN stacking and cost accounting.
//!
//! A [`StackPlan`] stacks one cell type into three stages of `N` stride-1
//! cells separated by stride-2 cells, then global average pooling and a
//! softmax classifier. With a `conv3x3_stride2` stem the network first runs
//! a stride-2 convolution with `F/4` filters, then two stride-2 cells with
//! `F/2` and `F` filters.
//!
//! Construction rules:
//!
//! * the output of a cell concatenates every block output no other block
//!   reads and projects it back to the cell's filter count with a 1x1 conv
//!   (skipped when a single block is unused);
//! * cell inputs are aligned to the shape of `H[c-1]` and the cell's filter
//!   count with a 1x1 conv when they differ; when there is no previous-previous
//!   cell, `H[c-2]` aliases `H[c-1]`;
//! * in a stride-2 cell only the operators reading cell inputs are strided;
//!   a strided identity becomes a strided 1x1 projection;
//! * a separable convolution is two ReLU-SepConv-BN repetitions, the first
//!   carrying the stride.
//!
//! Cost model per node, with output `H x W x C'` and input channels `C`:
//!
//! | node              | params                 | mult-adds            |
//! |-------------------|------------------------|----------------------|
//! | sep conv k (rep)  | `k²C + CC' + 2C'`      | `HW(k²C + CC')`      |
//! | conv 1x7          | `7CC'`                 | `7HWCC'`             |
//! | conv 7x1          | `7CC' + 2C'`           | `7HWCC'`             |
//! | dilated conv 3x3  | `9CC' + 2C'`           | `9HWCC'`             |
//! | conv 1x1          | `CC' + 2C'`            | `HWCC'`              |
//! | stem conv 3x3     | `9CC' + 2C'`           | `9HWCC'`             |
//! | dense             | `C·classes + classes`  | `C·classes`          |
//! | everything else   | 0                      | 0                    |
//!
//! Batch norm contributes `2C'` parameters and no mult-adds. Auxiliary heads
//! are not part of the graph.
use serde::{Deserialize, Serialize};

use crate::cell::{CellSpec, InputIndex, Operator};

/// Version of the JSON layout written by [`export_graph`].
pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("invalid stack plan: {0}")]
    InvalidPlan(String),
    #[error("spatial size underflow at {context}: {size} cannot be halved")]
    SpatialUnderflow { context: String, size: usize },
    #[error("node {0} has no shape annotation")]
    Unannotated(usize),
    #[error("node {node} references missing input {input}")]
    DanglingInput { node: usize, input: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stem {
    None,
    Conv3x3Stride2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackPlan {
    /// Stride-1 cells per stage.
    pub repeats: usize,
    /// Filters of the first stage.
    pub filters: usize,
    pub input_hw: usize,
    pub input_channels: usize,
    pub stem: Stem,
    pub num_classes: usize,
}

impl StackPlan {
    /// 32x32 RGB input, no stem, 10 classes.
    pub fn cifar(repeats: usize, filters: usize) -> StackPlan {
        StackPlan {
            repeats,
            filters,
            input_hw: 32,
            input_channels: 3,
            stem: Stem::None,
            num_classes: 10,
        }
    }

    /// Large-image plan with the strided stem and 1000 classes.
    pub fn imagenet(repeats: usize, filters: usize, input_hw: usize) -> StackPlan {
        StackPlan {
            repeats,
            filters,
            input_hw,
            input_channels: 3,
            stem: Stem::Conv3x3Stride2,
            num_classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.repeats == 0 || self.filters == 0 {
            return Err(NetError::InvalidPlan("N and F must be at least 1".into()));
        }
        if self.input_hw == 0 || self.input_channels == 0 || self.num_classes == 0 {
            return Err(NetError::InvalidPlan(
                "input size, input channels and classes must be positive".into(),
            ));
        }
        if self.stem == Stem::Conv3x3Stride2 && self.filters % 4 != 0 {
            return Err(NetError::InvalidPlan(format!(
                "F = {} must be divisible by 4 with a strided stem",
                self.filters
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(h: usize, w: usize, c: usize) -> Shape {
        Shape { h, w, c }
    }

    fn area(&self) -> u64 {
        (self.h * self.w) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOp {
    Input,
    StemConv3x3,
    Conv1x1,
    SepConv3x3,
    SepConv5x5,
    SepConv7x7,
    Conv1x7,
    Conv7x1,
    DilatedConv3x3,
    Identity,
    AvgPool3x3,
    MaxPool3x3,
    Add,
    Concat,
    GlobalAvgPool,
    Dense,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    pub stride: usize,
    pub shape: Option<Shape>,
}

/// Summary of one stacked cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellInstance {
    pub stride: usize,
    pub output: usize,
    pub input_shape: Shape,
    pub output_shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub nodes: Vec<Node>,
    pub output_node: usize,
    pub cells: Vec<CellInstance>,
    /// Output shape of each of the three stride-1 stages.
    pub stage_outputs: Vec<Shape>,
}

impl NetworkGraph {
    pub fn node(&self, id: usize) -> Option<&Node> {
        self.nodes.get(id)
    }

    fn shape_of(&self, id: usize) -> Shape {
        self.nodes[id].shape.expect("builder annotates every node")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub mult_adds: u64,
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, op: NodeOp, inputs: Vec<usize>, stride: usize, shape: Shape) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            op,
            inputs,
            stride,
            shape: Some(shape),
        });
        id
    }

    fn shape(&self, id: usize) -> Shape {
        self.nodes[id].shape.expect("builder annotates every node")
    }

    /// 1x1 projection of `src` to `channels`, striding down to `hw`.
    fn align(&mut self, src: usize, hw: (usize, usize), channels: usize) -> Result<usize, NetError> {
        let s = self.shape(src);
        if (s.h, s.w, s.c) == (hw.0, hw.1, channels) {
            return Ok(src);
        }
        if hw.0 == 0 || hw.1 == 0 || s.h % hw.0 != 0 || s.w % hw.1 != 0 || s.h / hw.0 != s.w / hw.1 {
            return Err(NetError::InvalidPlan(format!(
                "cannot align {}x{} to {}x{}",
                s.h, s.w, hw.0, hw.1
            )));
        }
        let stride = s.h / hw.0;
        Ok(self.push(NodeOp::Conv1x1, vec![src], stride, Shape::new(hw.0, hw.1, channels)))
    }

    fn operator(&mut self, op: Operator, src: usize, stride: usize) -> Result<usize, NetError> {
        let s = self.shape(src);
        let out = if stride == 1 {
            s
        } else {
            Shape::new(halve(s.h, "operator")?, halve(s.w, "operator")?, s.c)
        };
        let id = match op {
            Operator::Sep3x3 | Operator::Sep5x5 | Operator::Sep7x7 => {
                let kind = match op {
                    Operator::Sep3x3 => NodeOp::SepConv3x3,
                    Operator::Sep5x5 => NodeOp::SepConv5x5,
                    _ => NodeOp::SepConv7x7,
                };
                let first = self.push(kind, vec![src], stride, out);
                self.push(kind, vec![first], 1, out)
            }
            Operator::Conv1x7_7x1 => {
                let first = self.push(NodeOp::Conv1x7, vec![src], stride, out);
                self.push(NodeOp::Conv7x1, vec![first], 1, out)
            }
            Operator::Dilated3x3 => self.push(NodeOp::DilatedConv3x3, vec![src], stride, out),
            Operator::AvgPool3x3 => self.push(NodeOp::AvgPool3x3, vec![src], stride, out),
            Operator::MaxPool3x3 => self.push(NodeOp::MaxPool3x3, vec![src], stride, out),
            Operator::Identity => {
                let src = if stride == 1 {
                    src
                } else {
                    self.push(NodeOp::Conv1x1, vec![src], stride, out)
                };
                self.push(NodeOp::Identity, vec![src], 1, out)
            }
        };
        Ok(id)
    }

    fn cell(
        &mut self,
        cell: &CellSpec,
        prev_prev: usize,
        prev: usize,
        filters: usize,
        stride: usize,
    ) -> Result<CellInstance, NetError> {
        let prev_shape = self.shape(prev);
        let hw = (prev_shape.h, prev_shape.w);
        let mut aligned: [Option<usize>; 2] = [None, None];
        let mut block_out: Vec<usize> = Vec::with_capacity(cell.num_blocks());
        for block in cell.blocks() {
            let mut branches = [0usize; 2];
            for (slot, (input, op)) in block.inputs().into_iter().zip(block.ops()).enumerate() {
                branches[slot] = match input.as_block() {
                    Some(j) => self.operator(op, block_out[j - 1], 1)?,
                    None => {
                        let which = if input == InputIndex::PREV_PREV { 0 } else { 1 };
                        let src = match aligned[which] {
                            Some(id) => id,
                            None => {
                                let raw = if which == 0 { prev_prev } else { prev };
                                let id = self.align(raw, hw, filters)?;
                                aligned[which] = Some(id);
                                id
                            }
                        };
                        self.operator(op, src, stride)?
                    }
                };
            }
            let shape = self.shape(branches[0]);
            block_out.push(self.push(NodeOp::Add, branches.to_vec(), 1, shape));
        }
        let unused: Vec<usize> = cell.unused_blocks().into_iter().map(|j| block_out[j - 1]).collect();
        let out_shape = self.shape(unused[0]);
        let output = if unused.len() == 1 {
            unused[0]
        } else {
            let concat_shape = Shape::new(out_shape.h, out_shape.w, out_shape.c * unused.len());
            let concat = self.push(NodeOp::Concat, unused, 1, concat_shape);
            self.push(NodeOp::Conv1x1, vec![concat], 1, out_shape)
        };
        Ok(CellInstance {
            stride,
            output,
            input_shape: prev_shape,
            output_shape: out_shape,
        })
    }
}

fn halve(size: usize, context: &str) -> Result<usize, NetError> {
    if size / 2 == 0 {
        Err(NetError::SpatialUnderflow {
            context: context.to_owned(),
            size,
        })
    } else {
        Ok(size / 2)
    }
}

/// Stacks `cell` according to `plan`.
pub fn build_network(cell: &CellSpec, plan: &StackPlan) -> Result<NetworkGraph, NetError> {
    plan.validate()?;
    let mut b = Builder { nodes: Vec::new() };
    let input = b.push(
        NodeOp::Input,
        vec![],
        1,
        Shape::new(plan.input_hw, plan.input_hw, plan.input_channels),
    );
    let mut cells = Vec::new();
    let (mut prev_prev, mut prev) = (input, input);
    let mut filters = plan.filters;

    let mut stack = |b: &mut Builder, prev_prev: &mut usize, prev: &mut usize, filters: usize, stride: usize| {
        let inst = b.cell(cell, *prev_prev, *prev, filters, stride)?;
        *prev_prev = *prev;
        *prev = inst.output;
        cells.push(inst);
        Ok::<(), NetError>(())
    };

    if plan.stem == Stem::Conv3x3Stride2 {
        let hw = halve(plan.input_hw, "stem")?;
        let stem = b.push(NodeOp::StemConv3x3, vec![input], 2, Shape::new(hw, hw, plan.filters / 4));
        prev_prev = stem;
        prev = stem;
        for f in [plan.filters / 2, plan.filters] {
            let s = b.shape(prev);
            halve(s.h, "stem reduction cell")?;
            stack(&mut b, &mut prev_prev, &mut prev, f, 2)?;
        }
    }

    let mut stage_outputs = Vec::with_capacity(3);
    for stage in 0..3 {
        if stage > 0 {
            filters *= 2;
            let s = b.shape(prev);
            halve(s.h, "reduction cell")?;
            stack(&mut b, &mut prev_prev, &mut prev, filters, 2)?;
        }
        for _ in 0..plan.repeats {
            stack(&mut b, &mut prev_prev, &mut prev, filters, 1)?;
        }
        stage_outputs.push(b.shape(prev));
    }

    let last = b.shape(prev);
    let pooled = b.push(NodeOp::GlobalAvgPool, vec![prev], 1, Shape::new(1, 1, last.c));
    let logits = b.push(NodeOp::Dense, vec![pooled], 1, Shape::new(1, 1, plan.num_classes));
    let output_node = b.push(NodeOp::Softmax, vec![logits], 1, Shape::new(1, 1, plan.num_classes));
    Ok(NetworkGraph {
        nodes: b.nodes,
        output_node,
        cells,
        stage_outputs,
    })
}

/// Cost of a single node given its input and output shapes.
pub fn node_cost(op: NodeOp, input: Shape, output: Shape) -> CostReport {
    let (c_in, c_out) = (input.c as u64, output.c as u64);
    let area = output.area();
    let bn = 2 * c_out;
    let (params, mult_adds) = match op {
        NodeOp::SepConv3x3 | NodeOp::SepConv5x5 | NodeOp::SepConv7x7 => {
            let k2 = match op {
                NodeOp::SepConv3x3 => 9,
                NodeOp::SepConv5x5 => 25,
                _ => 49,
            };
            (k2 * c_in + c_in * c_out + bn, area * (k2 * c_in + c_in * c_out))
        }
        NodeOp::Conv1x7 => (7 * c_in * c_out, 7 * area * c_in * c_out),
        NodeOp::Conv7x1 => (7 * c_in * c_out + bn, 7 * area * c_in * c_out),
        NodeOp::DilatedConv3x3 | NodeOp::StemConv3x3 => (9 * c_in * c_out + bn, 9 * area * c_in * c_out),
        NodeOp::Conv1x1 => (c_in * c_out + bn, area * c_in * c_out),
        NodeOp::Dense => (c_in * c_out + c_out, c_in * c_out),
        _ => (0, 0),
    };
    CostReport { params, mult_adds }
}

/// Sums [`node_cost`] over the graph.
pub fn count_costs(graph: &NetworkGraph) -> Result<CostReport, NetError> {
    let mut total = CostReport::default();
    for node in &graph.nodes {
        let output = node.shape.ok_or(NetError::Unannotated(node.id))?;
        let input = match node.inputs.first() {
            Some(&i) => graph
                .nodes
                .get(i)
                .ok_or(NetError::DanglingInput { node: node.id, input: i })?
                .shape
                .ok_or(NetError::Unannotated(i))?,
            None => output,
        };
        let cost = node_cost(node.op, input, output);
        total.params += cost.params;
        total.mult_adds += cost.mult_adds;
    }
    Ok(total)
}

#[derive(Serialize)]
struct GraphDocument<'a> {
    schema_version: u32,
    cell: String,
    plan: &'a StackPlan,
    nodes: Vec<NodeDocument>,
    output_node: usize,
    cost: CostReport,
}

#[derive(Serialize)]
struct NodeDocument {
    id: usize,
    op: NodeOp,
    inputs: Vec<usize>,
    stride: usize,
    shape: [usize; 3],
}

/// JSON document with the node list and cost report.
pub fn export_graph(cell: &CellSpec, plan: &StackPlan, graph: &NetworkGraph) -> Result<String, NetError> {
    let cost = count_costs(graph)?;
    let nodes = graph
        .nodes
        .iter()
        .map(|n| {
            let s = graph.shape_of(n.id);
            NodeDocument {
                id: n.id,
                op: n.op,
                inputs: n.inputs.clone(),
                stride: n.stride,
                shape: [s.h, s.w, s.c],
            }
        })
        .collect();
    let doc = GraphDocument {
        schema_version: GRAPH_SCHEMA_VERSION,
        cell: cell.key(),
        plan,
        nodes,
        output_node: graph.output_node,
        cost,
    };
    Ok(serde_json::to_string_pretty(&doc).expect("graph document serializes"))
}

/// The five-block cell found at the last level of the reference CIFAR-10 search.
pub fn pnasnet5_cell() -> CellSpec {
    use Operator::*;
    use crate::cell::BlockSpec;
    CellSpec::new(vec![
        BlockSpec::new(1, Sep5x5, 1, MaxPool3x3),
        BlockSpec::new(0, Sep7x7, 0, MaxPool3x3),
        BlockSpec::new(0, Sep5x5, 0, Sep3x3),
        BlockSpec::new(4, Sep3x3, 0, MaxPool3x3),
        BlockSpec::new(1, Sep3x3, 0, Identity),
    ])
    .expect("reference cell is valid")
    .canonical()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::BlockSpec;

    fn identity_cell() -> CellSpec {
        CellSpec::single(BlockSpec::new(0, Operator::Identity, 1, Operator::Identity)).unwrap()
    }

    #[test]
    fn stage_shapes_follow_doubling() {
        let g = build_network(&identity_cell(), &StackPlan::cifar(1, 8)).unwrap();
        assert_eq!(
            g.stage_outputs,
            vec![Shape::new(32, 32, 8), Shape::new(16, 16, 16), Shape::new(8, 8, 32)]
        );
        assert_eq!(g.cells.len(), 5);
        assert_eq!(g.nodes[g.output_node].op, NodeOp::Softmax);
    }

    #[test]
    fn strided_stem() {
        let g = build_network(&pnasnet5_cell(), &StackPlan::imagenet(2, 32, 224)).unwrap();
        let first = &g.nodes[1];
        assert_eq!(first.op, NodeOp::StemConv3x3);
        assert_eq!((first.shape.unwrap().h, first.shape.unwrap().w), (112, 112));
        // stem cells at F/4 -> F/2 -> F, then the three stages
        assert_eq!(g.cells[0].output_shape, Shape::new(56, 56, 16));
        assert_eq!(g.cells[1].output_shape, Shape::new(28, 28, 32));
        assert_eq!(g.stage_outputs[2], Shape::new(7, 7, 128));
    }

    #[test]
    fn underflow_is_reported() {
        let mut plan = StackPlan::cifar(1, 8);
        plan.input_hw = 2;
        assert!(matches!(
            build_network(&identity_cell(), &plan),
            Err(NetError::SpatialUnderflow { .. })
        ));
        assert!(build_network(&identity_cell(), &StackPlan::imagenet(1, 6, 224)).is_err());
        assert!(build_network(&identity_cell(), &StackPlan::cifar(0, 8)).is_err());
    }

    #[test]
    fn separable_conv_pair_cost() {
        let s = Shape::new(32, 32, 24);
        let one = node_cost(NodeOp::SepConv3x3, s, s);
        assert_eq!(2 * one.mult_adds, 1_622_016);
        assert_eq!(one.params, 9 * 24 + 24 * 24 + 48);
        assert_eq!(node_cost(NodeOp::Identity, s, s), CostReport::default());
        assert_eq!(node_cost(NodeOp::MaxPool3x3, s, s), CostReport::default());
    }

    #[test]
    fn unannotated_node_is_rejected() {
        let mut g = build_network(&identity_cell(), &StackPlan::cifar(1, 8)).unwrap();
        g.nodes[3].shape = None;
        assert_eq!(count_costs(&g), Err(NetError::Unannotated(3)));
    }

    #[test]
    fn identity_cell_costs_only_projections_and_head() {
        let g = build_network(&identity_cell(), &StackPlan::cifar(1, 8)).unwrap();
        let cost = count_costs(&g).unwrap();
        assert!(cost.params > 0);
        let projections: u64 = g
            .nodes
            .iter()
            .filter(|n| n.op == NodeOp::Conv1x1 || n.op == NodeOp::Dense)
            .map(|n| node_cost(n.op, g.shape_of(n.inputs[0]), g.shape_of(n.id)).params)
            .sum();
        assert_eq!(cost.params, projections);
    }

    #[test]
    fn pnasnet5_reference_cell() {
        let cell = pnasnet5_cell();
        assert_eq!(cell.num_blocks(), 5);
        assert_eq!(cell.unused_blocks(), vec![1, 2, 4, 5]);
        let g = build_network(&cell, &StackPlan::cifar(3, 48)).unwrap();
        assert_eq!(g.cells.len(), 3 * 3 + 2);
    }

    #[test]
    fn export_is_valid_json() {
        let cell = identity_cell();
        let plan = StackPlan::cifar(1, 8);
        let g = build_network(&cell, &plan).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&export_graph(&cell, &plan, &g).unwrap()).unwrap();
        assert_eq!(doc["schema_version"], 1);
        assert_eq!(doc["nodes"].as_array().unwrap().len(), g.nodes.len());
        assert!(doc["cost"]["params"].as_u64().unwrap() > 0);
    }
}
