//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type so one definition
//! serves for weights (`Tensor`), tape handles (`Var`) and gradients.

use crate::numerics::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P = $crate::numerics::Tensor> {
            $($(#[$fmeta])* pub $field: P,)*
        }

        impl<P> $name<P> {
            pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $name<Q> {
                $name { $($field: f(&$crate::params::join(prefix, stringify!($field)), &self.$field),)* }
            }

            pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &mut self.$field);)*
            }
        }
    };
}
pub(crate) use param_struct;

param_struct! {
    /// Affine part of a layer norm.
    LayerNormParams { gamma, beta }
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams { gamma: Tensor::full(&[dim], 1.0), beta: Tensor::zeros(&[dim]) }
    }
}
