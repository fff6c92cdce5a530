#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod dastr;
pub mod eval;
pub mod experiment;
pub mod flow;
pub mod latent;
pub mod nets;
pub mod optim;
pub mod potentials;
pub mod rng;
pub mod sde;
pub mod selftest;

#[cfg(test)]
mod test_models;
