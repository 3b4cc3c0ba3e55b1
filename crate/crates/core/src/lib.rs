pub mod corpus;
pub mod icd;
pub mod ordering;
pub mod metrics;
pub mod ranking;
pub mod model;
pub mod training;
pub mod predict;
