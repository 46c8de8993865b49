pub mod build;
pub mod config;
pub mod ignorelist;
pub mod lock;
pub mod symbolize;
pub mod trace;
pub mod escalation;
pub mod visibility;
pub mod harness;
pub mod census;
pub mod coverage;
pub mod report;
pub mod pipeline;
