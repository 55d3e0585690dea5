//! Flat evaluation tape compiled from an expression DAG.
//!
//! Every node owns a contiguous slot range in a scratch buffer; index nodes
//! alias into their parent's range and need no instruction.

use std::collections::HashMap;

use super::{topo_order, BinaryOp, Expr, Node, UnaryOp};

enum Instr {
    Unary {
        op: UnaryOp,
        src: usize,
        dst: usize,
        len: usize,
    },
    Binary {
        op: BinaryOp,
        a: usize,
        a_len: usize,
        b: usize,
        b_len: usize,
        dst: usize,
        len: usize,
    },
    Copy {
        src: usize,
        dst: usize,
        len: usize,
    },
}

pub(crate) struct Tape {
    template: Vec<f64>,
    instrs: Vec<Instr>,
    inputs: Vec<usize>,
    outputs: Vec<(usize, usize)>,
}

impl Tape {
    pub(crate) fn compile(inputs: &[Expr], outputs: &[Expr]) -> Tape {
        let mut template = Vec::new();
        let mut slot: HashMap<u64, usize> = HashMap::new();
        let alloc = |template: &mut Vec<f64>, len: usize| {
            let at = template.len();
            template.resize(at + len, 0.0);
            at
        };
        let mut input_slots = Vec::with_capacity(inputs.len());
        for input in inputs {
            let at = alloc(&mut template, input.len());
            slot.insert(input.id(), at);
            input_slots.push(at);
        }
        let mut instrs = Vec::new();
        for node in topo_order(outputs) {
            if slot.contains_key(&node.id()) {
                continue;
            }
            let len = node.len();
            let at = match node.node() {
                Node::Const(v) => {
                    let at = alloc(&mut template, len);
                    template[at..at + len].copy_from_slice(v);
                    at
                }
                Node::Symbol(_) => unreachable!("closed functions only reference inputs"),
                Node::Unary(op, a) => {
                    let at = alloc(&mut template, len);
                    instrs.push(Instr::Unary {
                        op: *op,
                        src: slot[&a.id()],
                        dst: at,
                        len,
                    });
                    at
                }
                Node::Binary(op, a, b) => {
                    let at = alloc(&mut template, len);
                    instrs.push(Instr::Binary {
                        op: *op,
                        a: slot[&a.id()],
                        a_len: a.len(),
                        b: slot[&b.id()],
                        b_len: b.len(),
                        dst: at,
                        len,
                    });
                    at
                }
                Node::Concat(parts) => {
                    let at = alloc(&mut template, len);
                    let mut offset = at;
                    for p in parts {
                        instrs.push(Instr::Copy {
                            src: slot[&p.id()],
                            dst: offset,
                            len: p.len(),
                        });
                        offset += p.len();
                    }
                    at
                }
                Node::Index(a, start) => slot[&a.id()] + start,
            };
            slot.insert(node.id(), at);
        }
        let outputs = outputs.iter().map(|o| (slot[&o.id()], o.len())).collect();
        Tape {
            template,
            instrs,
            inputs: input_slots,
            outputs,
        }
    }

    fn execute(&self, inputs: &[&[f64]], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(&self.template);
        for (data, &at) in inputs.iter().zip(&self.inputs) {
            buf[at..at + data.len()].copy_from_slice(data);
        }
        for instr in &self.instrs {
            match *instr {
                Instr::Unary { op, src, dst, len } => {
                    if len == 1 {
                        buf[dst] = op.apply(buf[src]);
                    } else {
                        for i in 0..len {
                            buf[dst + i] = op.apply(buf[src + i]);
                        }
                    }
                }
                Instr::Binary {
                    op,
                    a,
                    a_len,
                    b,
                    b_len,
                    dst,
                    len,
                } => {
                    if len == 1 {
                        buf[dst] = op.apply(buf[a], buf[b]);
                    } else {
                        for i in 0..len {
                            let x = buf[if a_len == 1 { a } else { a + i }];
                            let y = buf[if b_len == 1 { b } else { b + i }];
                            buf[dst + i] = op.apply(x, y);
                        }
                    }
                }
                Instr::Copy { src, dst, len } => {
                    buf.copy_within(src..src + len, dst);
                }
            }
        }
    }

    pub(crate) fn run(&self, inputs: &[&[f64]], buf: &mut Vec<f64>) -> Vec<Vec<f64>> {
        self.execute(inputs, buf);
        self.outputs
            .iter()
            .map(|&(at, len)| buf[at..at + len].to_vec())
            .collect()
    }

    pub(crate) fn run_one(
        &self,
        inputs: &[&[f64]],
        output: usize,
        out: &mut [f64],
        buf: &mut Vec<f64>,
    ) {
        self.execute(inputs, buf);
        let (at, len) = self.outputs[output];
        out.copy_from_slice(&buf[at..at + len]);
    }
}
