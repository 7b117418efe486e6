//! Dense `f64` tensors, a recorded op graph with reverse-mode gradients, and
//! central-difference gradient checking.

mod graph;
mod kernels;
mod tensor;

pub mod gradcheck;

pub use graph::{BatchMoments, Gradients, Graph, Mode, NormStats, Var};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{Error, Result};

/// Inverted dropout: in train mode each entry is zeroed with probability `p`
/// and survivors are scaled by `1/(1-p)`. Eval mode and `p == 0` are the
/// identity and consume no randomness.
pub fn dropout<R: Rng + ?Sized>(
    graph: &mut Graph,
    x: Var,
    p: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = graph.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
    let m = graph.constant(mask);
    graph.mul(x, m)
}

/// Correctly rounded sum of `values` (Shewchuk's exact partials with a
/// half-way correction on the final rounding). The result does not depend
/// on the order of the inputs. Falls back to naive summation when any input
/// is infinite or NaN.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    let mut naive = 0.0;
    let mut finite = true;
    for v in values {
        naive += v;
        if !v.is_finite() {
            finite = false;
        }
        if !finite {
            continue;
        }
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    if !finite || naive.is_infinite() {
        return naive;
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        n -= 1;
        let x = hi;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}
