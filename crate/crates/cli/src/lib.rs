pub mod config;
pub mod plots;
pub mod run;
