pub mod bounded_lm;
pub mod projected_lbfgs;
