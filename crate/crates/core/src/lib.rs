#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod reprlab;
pub mod rl;
pub mod rng;
pub mod selfcorrect;
pub mod trainer;
pub mod synthworld;
pub mod tensor;
