//! Named access to parameter tensors.
//!
//! Every learnable structure exposes its tensors in a fixed order with stable
//! dotted names. Serialization, optimizer state and gradient checks are all
//! written against this view.

use crate::tensor::{Conv1x1, Conv3x3};

/// A borrowed parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f32],
}

/// A mutably borrowed parameter tensor.
pub struct ParamMut<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [f32],
}

pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn param_len(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Sets every entry to zero.
    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    /// Scales every entry by `s`.
    fn scale_all(&mut self, s: f32) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Joins a prefix and a field name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Conv1x1 {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            dims: vec![self.weight.rows, self.weight.cols],
            data: &self.weight.data,
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            dims: vec![self.bias.len()],
            data: &self.bias,
        });
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: join(prefix, "weight"),
            dims: vec![self.weight.rows, self.weight.cols],
            data: &mut self.weight.data,
        });
        out.push(ParamMut {
            name: join(prefix, "bias"),
            dims: vec![self.bias.len()],
            data: &mut self.bias,
        });
    }
}

impl Params for Conv3x3 {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        let k = &self.kernel;
        out.push(ParamRef {
            name: join(prefix, "weight"),
            dims: vec![k.cout, k.cin, 3, 3],
            data: &k.data,
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            dims: vec![self.bias.len()],
            data: &self.bias,
        });
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let k = &mut self.kernel;
        out.push(ParamMut {
            name: join(prefix, "weight"),
            dims: vec![k.cout, k.cin, 3, 3],
            data: &mut k.data,
        });
        out.push(ParamMut {
            name: join(prefix, "bias"),
            dims: vec![self.bias.len()],
            data: &mut self.bias,
        });
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}
