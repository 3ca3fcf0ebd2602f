//! Scalar programs built from the registered primitive set.
//!
//! A [`Program`] is a straight-line list of primitive applications over
//! numbered inputs. It can be evaluated in forward mode (one seeded input)
//! with every intermediate checked for finiteness, or replayed onto a
//! [`Tape`] for reverse mode.

use alloc::string::ToString;
use alloc::vec::Vec;

use super::dual::{Dual, Real};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prim {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Tanh,
}

impl Prim {
    pub fn from_name(name: &str) -> Result<Prim, DiffError> {
        Ok(match name {
            "add" | "+" => Prim::Add,
            "sub" | "-" => Prim::Sub,
            "mul" | "*" => Prim::Mul,
            "div" | "/" => Prim::Div,
            "exp" => Prim::Exp,
            "tanh" => Prim::Tanh,
            other => return Err(DiffError::UnregisteredPrimitive(other.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Div => "div",
            Prim::Exp => "exp",
            Prim::Tanh => "tanh",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Prim::Exp | Prim::Tanh => 1,
            _ => 2,
        }
    }
}

/// Index of a node inside a [`Program`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Node {
    Input(usize),
    Const(f64),
    Apply(Prim, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Program {
    n_inputs: usize,
    nodes: Vec<Node>,
    outputs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ProgramBuilder {
    n_inputs: usize,
    nodes: Vec<Node>,
}

impl ProgramBuilder {
    pub fn new(n_inputs: usize) -> Self {
        Self {
            n_inputs,
            nodes: Vec::new(),
        }
    }

    pub fn input(&mut self, i: usize) -> NodeId {
        assert!(i < self.n_inputs, "input {i} out of range");
        self.nodes.push(Node::Input(i));
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, c: f64) -> NodeId {
        self.nodes.push(Node::Const(c));
        NodeId(self.nodes.len() - 1)
    }

    /// Applies a primitive by name. Unknown names and wrong operand counts
    /// are rejected here, before anything is evaluated.
    pub fn apply(&mut self, name: &str, args: &[NodeId]) -> Result<NodeId, DiffError> {
        let prim = Prim::from_name(name)?;
        self.apply_prim(prim, args)
    }

    pub fn apply_prim(&mut self, prim: Prim, args: &[NodeId]) -> Result<NodeId, DiffError> {
        if args.len() != prim.arity() {
            return Err(DiffError::Arity {
                name: prim.name(),
                expected: prim.arity(),
                got: args.len(),
            });
        }
        let a = args[0].0;
        let b = if prim.arity() == 2 { args[1].0 } else { a };
        self.nodes.push(Node::Apply(prim, a, b));
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn bin(&mut self, prim: Prim, a: NodeId, b: NodeId) -> NodeId {
        self.nodes.push(Node::Apply(prim, a.0, b.0));
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(Prim::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(Prim::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(Prim::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.bin(Prim::Div, a, b)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.bin(Prim::Exp, a, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.bin(Prim::Tanh, a, a)
    }

    /// Softmax components through exp and a shared sum.
    pub fn softmax(&mut self, args: &[NodeId]) -> Vec<NodeId> {
        let exps: Vec<NodeId> = args.iter().map(|&a| self.exp(a)).collect();
        let mut total = exps[0];
        for &e in &exps[1..] {
            total = self.add(total, e);
        }
        exps.into_iter().map(|e| self.div(e, total)).collect()
    }

    pub fn build(self, outputs: &[NodeId]) -> Program {
        Program {
            n_inputs: self.n_inputs,
            nodes: self.nodes,
            outputs: outputs.iter().map(|o| o.0).collect(),
        }
    }
}

impl Program {
    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    fn check_inputs(&self, inputs: usize) -> Result<(), DiffError> {
        if inputs != self.n_inputs {
            return Err(DiffError::InputCount {
                expected: self.n_inputs,
                got: inputs,
            });
        }
        Ok(())
    }

    fn run<T: Real>(&self, inputs: &[T], finite: impl Fn(T) -> bool) -> Result<Vec<T>, DiffError> {
        let mut vals: Vec<T> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = match *node {
                Node::Input(i) => inputs[i],
                Node::Const(c) => T::constant(c),
                Node::Apply(p, a, b) => {
                    let (x, y) = (vals[a], vals[b]);
                    let v = match p {
                        Prim::Add => x + y,
                        Prim::Sub => x - y,
                        Prim::Mul => x * y,
                        Prim::Div => x / y,
                        Prim::Exp => x.exp(),
                        Prim::Tanh => x.tanh(),
                    };
                    if !finite(v) {
                        return Err(DiffError::NonFinite {
                            primitive: p.name(),
                            node: idx,
                        });
                    }
                    v
                }
            };
            vals.push(v);
        }
        Ok(self.outputs.iter().map(|&o| vals[o]).collect())
    }

    pub fn evaluate(&self, inputs: &[f64]) -> Result<Vec<f64>, DiffError> {
        self.check_inputs(inputs.len())?;
        self.run(inputs, f64::is_finite)
    }

    /// Replays the program onto `tape`, one 1x1 node per scalar.
    pub fn record(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Vec<Var>, DiffError> {
        self.check_inputs(inputs.len())?;
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match *node {
                Node::Input(i) => inputs[i],
                Node::Const(c) => tape.constant(Tensor::scalar(c)),
                Node::Apply(p, a, b) => {
                    let (x, y) = (vars[a], vars[b]);
                    match p {
                        Prim::Add => tape.add(x, y),
                        Prim::Sub => tape.sub(x, y),
                        Prim::Mul => tape.mul(x, y),
                        Prim::Div => tape.div(x, y),
                        Prim::Exp => tape.exp(x),
                        Prim::Tanh => tape.tanh(x),
                    }
                }
            };
            vars.push(v);
        }
        Ok(self.outputs.iter().map(|&o| vars[o]).collect())
    }
}

/// Values and tangents of `program` with respect to `inputs[seed]`.
pub fn forward_with_tangent(
    program: &Program,
    inputs: &[f64],
    seed: usize,
) -> Result<(Vec<f64>, Vec<f64>), DiffError> {
    program.check_inputs(inputs.len())?;
    if seed >= inputs.len() {
        return Err(DiffError::SeedOutOfRange {
            seed,
            inputs: inputs.len(),
        });
    }
    let duals: Vec<Dual> = inputs
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == seed { Dual::seed(x) } else { Dual::constant(x) })
        .collect();
    let out = program.run(&duals, Dual::is_finite)?;
    Ok(out.iter().map(|d| (d.value, d.tangent)).unzip())
}

/// Reverse-mode gradient of a scalar-output program with respect to all inputs.
pub fn program_gradient(program: &Program, inputs: &[f64]) -> Result<(f64, Vec<f64>), DiffError> {
    if program.n_outputs() != 1 {
        return Err(DiffError::NonScalarOutput {
            rows: 1,
            cols: program.n_outputs(),
        });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|&x| tape.param(Tensor::scalar(x))).collect();
    let out = program.record(&mut tape, &vars)?[0];
    let value = tape.value(out).item();
    let grad = tape.backward(out)?;
    Ok((value, grad.into_vec()))
}
