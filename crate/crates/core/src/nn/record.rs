//! Helpers that record parameterised layers into a [`Graph`] under stable
//! parameter names, and bind parameter structs to those names.

use crate::tensor::{Bindings, Element, Graph, NodeId};

use super::{BatchNormParams, ConvParams};

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

/// Records a bias-free convolution reading `{layer}.weight`.
pub fn record_conv<T: Element>(g: &mut Graph<T>, x: NodeId, layer: &str, stride: usize, padding: usize) -> NodeId {
    let w = g.input(&weight_name(layer));
    g.conv2d(x, w, stride, padding)
}

pub const BN_FIELDS: [&str; 4] = ["gamma", "beta", "running_mean", "running_var"];

/// Records a batch norm reading `{layer}.gamma`, `.beta`, `.running_mean`
/// and `.running_var`.
pub fn record_batch_norm<T: Element>(g: &mut Graph<T>, x: NodeId, layer: &str, eps: f64, training: bool) -> NodeId {
    let [gamma, beta, mean, var] = BN_FIELDS.map(|f| g.input(&format!("{layer}.{f}")));
    g.batch_norm(x, gamma, beta, mean, var, T::of(eps), training)
}

impl<T: Element> ConvParams<T> {
    pub fn bind(&self, layer: &str, bindings: &mut Bindings<T>, requires_grad: bool) {
        bindings.insert(weight_name(layer), self.weight.clone().with_grad(requires_grad));
    }
}

impl<T: Element> BatchNormParams<T> {
    pub fn bind(&self, layer: &str, bindings: &mut Bindings<T>, requires_grad: bool) {
        bindings.insert(format!("{layer}.gamma"), self.gamma.clone().with_grad(requires_grad));
        bindings.insert(format!("{layer}.beta"), self.beta.clone().with_grad(requires_grad));
        bindings.insert(format!("{layer}.running_mean"), self.running_mean.clone().with_grad(false));
        bindings.insert(format!("{layer}.running_var"), self.running_var.clone().with_grad(false));
    }
}
