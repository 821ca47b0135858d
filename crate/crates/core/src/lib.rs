pub mod data;
pub mod error;
pub mod glm;
pub mod glmm;
mod linalg;
pub mod mediation;
pub mod model;
pub mod model_spec;
pub mod multinom;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod simulation;
pub mod uncertainty;
