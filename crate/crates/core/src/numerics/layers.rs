//! Small helpers for the parameterised layers used across the model.
//!
//! Each layer owns `<prefix>.w` and `<prefix>.b` in a [`ParamStore`].

use rand::Rng;

use super::{Graph, ParamStore, Var};

pub fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) {
    store.insert_uniform(&format!("{prefix}.w"), &[k, k, cin, cout], k * k * cin, rng);
    store.insert_uniform(&format!("{prefix}.b"), &[cout], k * k * cin, rng);
}

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    store.insert_uniform(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, rng);
    store.insert_uniform(&format!("{prefix}.b"), &[fan_out], fan_in, rng);
}

/// Zero weights and bias.
pub fn init_linear_zero(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(
        &format!("{prefix}.w"),
        super::Tensor::zeros(&[fan_in, fan_out]),
    );
    store.insert(&format!("{prefix}.b"), super::Tensor::zeros(&[fan_out]));
}

pub fn conv(g: &Graph, store: &ParamStore, prefix: &str, x: Var, stride: usize) -> Var {
    let w = g.param(store, &format!("{prefix}.w"));
    let b = g.param(store, &format!("{prefix}.b"));
    let k = g.shape(w)[0];
    g.conv2d(x, w, b, stride, k / 2)
}

pub fn linear(g: &Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{prefix}.w"));
    let b = g.param(store, &format!("{prefix}.b"));
    g.linear(x, w, b)
}
