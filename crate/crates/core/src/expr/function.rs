use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, OnceLock};

use super::eval::Tape;
use super::{free_symbols, Expr, ExprError};

/// A named, closed function: ordered input symbols mapped to ordered output
/// expressions. Cheap to clone; the compiled evaluation tape is built on
/// first use and shared between clones.
#[derive(Clone)]
pub struct FunctionDef(Arc<FnInner>);

struct FnInner {
    name: String,
    inputs: Vec<Expr>,
    outputs: Vec<Expr>,
    tape: OnceLock<Tape>,
    input_used: Vec<bool>,
}

impl FunctionDef {
    pub fn new(name: &str, inputs: Vec<Expr>, outputs: Vec<Expr>) -> Result<Self, ExprError> {
        let bad = |reason: String| ExprError::BadFunction {
            function: name.to_string(),
            reason,
        };
        let mut names = HashSet::new();
        for input in &inputs {
            let n = input
                .symbol_name()
                .ok_or_else(|| bad("inputs must be symbols".into()))?;
            if !names.insert(n.to_string()) {
                return Err(bad(format!("duplicate input name {n:?}")));
            }
        }
        let input_ids: HashMap<u64, usize> = inputs
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id(), i))
            .collect();
        let mut input_used = vec![false; inputs.len()];
        for s in free_symbols(&outputs) {
            match input_ids.get(&s.id()) {
                Some(&i) => input_used[i] = true,
                None => {
                    return Err(bad(format!(
                        "free symbol {:?} is not an input",
                        s.symbol_name().unwrap_or("?")
                    )))
                }
            }
        }
        Ok(FunctionDef(Arc::new(FnInner {
            name: name.to_string(),
            inputs,
            outputs,
            tape: OnceLock::new(),
            input_used,
        })))
    }

    /// True if both handles share one definition.
    pub fn ptr_eq(&self, other: &FunctionDef) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn inputs(&self) -> &[Expr] {
        &self.0.inputs
    }

    pub fn outputs(&self) -> &[Expr] {
        &self.0.outputs
    }

    pub fn n_in(&self) -> usize {
        self.0.inputs.len()
    }

    pub fn n_out(&self) -> usize {
        self.0.outputs.len()
    }

    pub fn input_len(&self, i: usize) -> usize {
        self.0.inputs[i].len()
    }

    pub fn output_len(&self, i: usize) -> usize {
        self.0.outputs[i].len()
    }

    /// Whether output values can change with input `i`.
    pub fn depends_on_input(&self, i: usize) -> bool {
        self.0.input_used[i]
    }

    fn tape(&self) -> &Tape {
        self.0
            .tape
            .get_or_init(|| Tape::compile(&self.0.inputs, &self.0.outputs))
    }

    fn check_inputs(&self, inputs: &[&[f64]]) -> Result<(), ExprError> {
        if inputs.len() != self.n_in() {
            return Err(ExprError::LengthMismatch(format!(
                "{} expects {} inputs, got {}",
                self.name(),
                self.n_in(),
                inputs.len()
            )));
        }
        for (i, (data, sym)) in inputs.iter().zip(self.inputs()).enumerate() {
            if data.len() != sym.len() {
                return Err(ExprError::LengthMismatch(format!(
                    "{} input {i} ({}) expects length {}, got {}",
                    self.name(),
                    sym.symbol_name().unwrap_or("?"),
                    sym.len(),
                    data.len()
                )));
            }
        }
        Ok(())
    }

    /// Evaluates every output. Domain errors follow IEEE semantics (NaN or
    /// infinities propagate); only arity and length mismatches are errors.
    pub fn eval(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>, ExprError> {
        self.check_inputs(inputs)?;
        let mut scratch = Vec::new();
        Ok(self.tape().run(inputs, &mut scratch))
    }

    /// Evaluates a single output into `out`, reusing `scratch` as workspace.
    pub fn eval_output_into(
        &self,
        inputs: &[&[f64]],
        output: usize,
        out: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<(), ExprError> {
        self.check_inputs(inputs)?;
        if out.len() != self.output_len(output) {
            return Err(ExprError::LengthMismatch(format!(
                "{} output {output} has length {}, buffer has {}",
                self.name(),
                self.output_len(output),
                out.len()
            )));
        }
        self.tape().run_one(inputs, output, out, scratch);
        Ok(())
    }

    /// Convenience for single-output functions.
    pub fn call(&self, inputs: &[&[f64]]) -> Result<Vec<f64>, ExprError> {
        Ok(self.eval(inputs)?.swap_remove(0))
    }
}

impl fmt::Debug for FunctionDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<String> = self
            .inputs()
            .iter()
            .map(|i| format!("{}[{}]", i.symbol_name().unwrap_or("?"), i.len()))
            .collect();
        let outs: Vec<usize> = self.outputs().iter().map(Expr::len).collect();
        write!(
            f,
            "FunctionDef({}: ({}) -> {outs:?})",
            self.name(),
            ins.join(", ")
        )
    }
}
