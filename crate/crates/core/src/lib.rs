pub mod access;
pub mod aggregate;
pub mod audit;
pub mod canonical;
pub mod clock;
pub mod divergence;
pub mod fixtures;
pub mod host;
pub mod perturbation;
pub mod record;
pub mod regulator;
pub mod report;
pub mod session;
