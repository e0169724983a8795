//! Minimal dense autodiff: matrices, a define-by-run graph, layers and optimizers.

pub mod gradcheck;
mod graph;
pub mod layers;
mod matrix;
pub mod optim;
mod params;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use matrix::Matrix;
pub use params::{normal, uniform, xavier, ParamId, ParamSet};

/// Sums per-example parameter gradients in order; `None` entries stay `None`
/// only if every example lacked that gradient.
pub fn sum_grads(parts: Vec<Vec<Option<Matrix>>>) -> Vec<Option<Matrix>> {
    let mut iter = parts.into_iter();
    let Some(mut total) = iter.next() else {
        return Vec::new();
    };
    for part in iter {
        for (t, p) in total.iter_mut().zip(part) {
            match (t.as_mut(), p) {
                (Some(t), Some(p)) => t.add_assign(&p),
                (None, Some(p)) => *t = Some(p),
                _ => {}
            }
        }
    }
    total
}

#[cfg(test)]
mod tests;
