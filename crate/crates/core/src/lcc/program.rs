//! Adder programs: the executable shift-add form of a decomposition.
//!
//! Values are numbered `0..n_inputs` for the inputs, followed by one value
//! per node. A node adds two shifted operands; shifts of a single value are
//! folded into operand references instead of getting nodes of their own,
//! so the node count is the addition count.

use serde::{Deserialize, Serialize};

use super::{LccDecomposition, PowTerm};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdderNode {
    pub left: PowTerm,
    pub right: Option<PowTerm>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdderProgram {
    pub n_inputs: usize,
    pub nodes: Vec<AdderNode>,
    /// `None` marks an output that is identically zero.
    pub outputs: Vec<Option<PowTerm>>,
}

impl AdderProgram {
    pub fn additions(&self) -> u64 {
        self.nodes.iter().filter(|n| n.right.is_some()).count() as u64
    }

    /// Nonzero shift amounts across node operands and outputs.
    pub fn shifts(&self) -> u64 {
        let ops = self
            .nodes
            .iter()
            .flat_map(|n| std::iter::once(n.left).chain(n.right))
            .chain(self.outputs.iter().flatten().copied());
        ops.filter(|t| t.exponent != 0).count() as u64
    }

    /// Every operand refers to an input or an earlier node.
    pub fn is_well_formed(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| {
            let limit = (self.n_inputs + i) as u32;
            n.left.source < limit && n.right.is_none_or(|r| r.source < limit)
        }) && self
            .outputs
            .iter()
            .flatten()
            .all(|o| (o.source as usize) < self.n_inputs + self.nodes.len())
    }

    fn emit_sum(&mut self, ops: &[PowTerm]) -> Option<PowTerm> {
        match ops {
            [] => None,
            [one] => Some(*one),
            [first, rest @ ..] => {
                let mut acc = *first;
                for op in rest {
                    self.nodes.push(AdderNode {
                        left: acc,
                        right: Some(*op),
                    });
                    acc = PowTerm::new(self.n_inputs + self.nodes.len() - 1, 0, 1);
                }
                Some(acc)
            }
        }
    }

    /// Evaluate a batch of inputs laid out row-major (`n_inputs` per row).
    pub fn execute_batch(&self, xs: &[f64]) -> Result<Vec<f64>> {
        if self.n_inputs == 0 || xs.len() % self.n_inputs != 0 {
            return Err(Error::Shape(format!(
                "batch of {} values for {} inputs",
                xs.len(),
                self.n_inputs
            )));
        }
        let mut out = Vec::with_capacity(xs.len() / self.n_inputs * self.outputs.len());
        let mut vals = vec![0.0; self.n_inputs + self.nodes.len()];
        for x in xs.chunks(self.n_inputs) {
            self.run_into(x, &mut vals);
            out.extend(self.outputs.iter().map(|o| o.map_or(0.0, |t| t.coeff() * vals[t.source as usize])));
        }
        Ok(out)
    }

    fn run_into(&self, x: &[f64], vals: &mut [f64]) {
        vals[..self.n_inputs].copy_from_slice(x);
        for (i, n) in self.nodes.iter().enumerate() {
            let mut v = n.left.coeff() * vals[n.left.source as usize];
            if let Some(r) = n.right {
                v += r.coeff() * vals[r.source as usize];
            }
            vals[self.n_inputs + i] = v;
        }
    }
}

fn compose(base: PowTerm, t: &PowTerm) -> PowTerm {
    PowTerm {
        source: base.source,
        exponent: base.exponent + t.exponent,
        sign: base.sign * t.sign,
    }
}

/// Compile a decomposition. Only live rows get nodes; single-term rows
/// become operand references.
pub fn to_adder_program(d: &LccDecomposition) -> AdderProgram {
    let mut prog = AdderProgram {
        n_inputs: d.cols,
        nodes: Vec::new(),
        outputs: Vec::with_capacity(d.rows),
    };
    let mut per_slice: Vec<Vec<Option<PowTerm>>> = Vec::with_capacity(d.slices.len());
    for s in &d.slices {
        if s.factors.is_empty() {
            per_slice.push(vec![None; d.rows]);
            continue;
        }
        let live = s.liveness();
        let mut refs: Vec<Option<PowTerm>> = s
            .columns()
            .map(|c| Some(PowTerm::new(c, 0, 1)))
            .collect();
        for (p, f) in s.factors.iter().enumerate() {
            let mut next: Vec<Option<PowTerm>> = if f.carry { refs.clone() } else { Vec::new() };
            let off = next.len();
            for (r, terms) in f.rows.iter().enumerate() {
                if !live[p][off + r] {
                    next.push(None);
                    continue;
                }
                let ops: Vec<PowTerm> = terms
                    .iter()
                    .filter_map(|t| refs[t.source as usize].map(|b| compose(b, t)))
                    .collect();
                next.push(prog.emit_sum(&ops));
            }
            refs = next;
        }
        per_slice.push(refs);
    }
    for i in 0..d.rows {
        let ops: Vec<PowTerm> = per_slice.iter().filter_map(|s| s[i]).collect();
        let out = prog.emit_sum(&ops);
        prog.outputs.push(out);
    }
    prog
}

/// Run the program on one input vector.
pub fn execute_program(p: &AdderProgram, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != p.n_inputs {
        return Err(Error::Shape(format!(
            "program takes {} inputs, got {}",
            p.n_inputs,
            x.len()
        )));
    }
    p.execute_batch(x)
}
