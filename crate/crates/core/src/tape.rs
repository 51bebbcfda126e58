//! Recorded computation graph and its reverse traversal.
//!
//! A [`Tape`] is built eagerly: every [`Tape::apply`] evaluates the primitive
//! and stores its output plus whatever the backward rule needs. Leaves are
//! tagged as model inputs, parameters or constants. [`Tape::backward_dual`]
//! walks the tape once in reverse and hands back gradients for both the
//! parameters and the inputs, which is what lets free training reuse the
//! descent step's backward pass for the ascent step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::ops::{self, Primitive, Saved};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Input,
    Param(String),
    Constant,
    Op { prim: Primitive, inputs: Vec<Var>, saved: Saved },
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    value: Tensor,
}

/// Gradients from one reverse traversal.
#[derive(Debug, Clone, Default)]
pub struct GradPair {
    /// Gradient of the loss for every parameter leaf.
    pub g_theta: BTreeMap<Var, Tensor>,
    /// Gradient of the loss for every input leaf.
    pub g_adv: BTreeMap<Var, Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    input_ids: Vec<Var>,
    param_ids: Vec<Var>,
    loss_id: Option<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, kind: NodeKind, value: Tensor) -> Var {
        self.nodes.push(Node { kind, value });
        Var(self.nodes.len() - 1)
    }

    /// Adds a model-input leaf; its gradient is reported in `g_adv`.
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = self.push(NodeKind::Input, value);
        self.input_ids.push(v);
        v
    }

    /// Adds a parameter leaf; its gradient is reported in `g_theta`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(NodeKind::Param(name.into()), value);
        self.param_ids.push(v);
        v
    }

    /// Adds a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Constant, value)
    }

    /// Evaluates `prim` on recorded values and appends the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::Tape(format!("unknown node {}", v.0)));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = ops::forward(&prim, &values)?;
        Ok(self.push(
            NodeKind::Op {
                prim,
                inputs: inputs.to_vec(),
                saved,
            },
            value,
        ))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn set_loss(&mut self, v: Var) -> Result<()> {
        let value = self
            .nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Tape(format!("unknown node {}", v.0)))?;
        if !value.is_scalar() {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", value.shape())));
        }
        self.loss_id = Some(v);
        Ok(())
    }

    pub fn loss(&self) -> Option<Var> {
        self.loss_id
    }

    pub fn input_ids(&self) -> &[Var] {
        &self.input_ids
    }

    pub fn param_ids(&self) -> &[Var] {
        &self.param_ids
    }

    pub fn param_name(&self, v: Var) -> Option<&str> {
        match &self.nodes.get(v.0)?.kind {
            NodeKind::Param(name) => Some(name),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// One reverse traversal from the loss, yielding gradients for every
    /// parameter and every input leaf. Records exactly one backward pass.
    pub fn backward_dual(&self, ledger: &CostLedger) -> Result<GradPair> {
        let loss = self.loss_id.ok_or_else(|| Error::Tape("loss node not set".into()))?;
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", loss_value.shape())));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let NodeKind::Op { prim, inputs, saved } = &self.nodes[idx].kind else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = ops::backward(prim, &values, saved, &g)?;
            for (v, ig) in inputs.iter().zip(input_grads) {
                if matches!(self.nodes[v.0].kind, NodeKind::Constant) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut take = |v: Var| {
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
        };
        let g_theta = self.param_ids.iter().map(|&v| (v, take(v))).collect();
        let g_adv = self.input_ids.iter().map(|&v| (v, take(v))).collect();
        ledger.record_backward();
        Ok(GradPair { g_theta, g_adv })
    }
}
