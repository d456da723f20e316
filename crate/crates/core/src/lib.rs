//! Soft actor-critic whose policy is factorized along a Bayesian strategy
//! network (BSN): one Gaussian sub-policy per node, each conditioned on the
//! state and on its parents' sampled actions.
//!
//! Besides the deep agent the crate ships an exact tabular soft policy
//! iteration used to certify evaluation convergence, monotone improvement
//! and optimality on small MDPs, and two desk-scale control tasks, one of
//! which has a Riccati-computed optimum.

pub mod agent;
pub mod bsn;
pub mod checks;
pub mod critic;
pub mod envs;
pub mod ndmath;
pub mod policy;
pub mod rng;
pub mod tabular;
