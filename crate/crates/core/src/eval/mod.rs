//! Offline evaluation harnesses for the predictor and the slot agent.

pub mod interpred_eval;
pub mod rmip_eval;
pub mod trace;
