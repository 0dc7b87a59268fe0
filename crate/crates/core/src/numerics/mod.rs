//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
pub mod kernels;
mod reduce;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use reduce::{reduce_with_grad, topk_count, Reduce};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

fn eval<const N: usize>(inputs: [&Tensor; N], f: impl FnOnce(&mut Tape, [Var; N]) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(N);
    for t in inputs {
        vars.push(tape.constant(t.clone())?);
    }
    let vars: [Var; N] = vars.try_into().expect("one var per input");
    let out = f(&mut tape, vars)?;
    Ok(tape.value(out).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    eval([a, b], |t, [a, b]| t.matmul(a, b))
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    eval([x], |t, [x]| t.softmax(x))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    eval([x, gamma, beta], |t, [x, g, b]| t.layer_norm(x, g, b, eps))
}

/// Single-head attention: `softmax(q kᵀ / sqrt(d), masked) v`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    eval([q, k, v], |t, [q, k, v]| t.attention(q, k, v, 1, mask))
}

/// Causal mask for a square `[n, n]` attention: row `i` sees `0..=i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|idx| idx % n <= idx / n).collect()
}
