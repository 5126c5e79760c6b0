//! Desk-scale deep-learning data assimilation laboratory.

pub mod config;
pub mod danet;
pub mod dataset;
pub mod diffcore;
pub mod evalx;
pub mod exec;
pub mod formats;
pub mod obsmodel;
pub mod perturbx;
pub mod toyatm;
pub mod training;
pub mod varoracle;
