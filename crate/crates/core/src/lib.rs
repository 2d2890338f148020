pub mod answer;
pub mod dedup;
pub mod domain;
pub mod engine;
pub mod error;
pub mod fetch;
pub mod gateway;
pub mod improve;
pub mod kb;
pub mod prompts;
pub mod scope;
