//! Location-based rate selection for ultra-reliable links.
//!
//! The crate models a UE on a line between two base stations, bounds how well
//! it can be located from pilot pings, maps the outage statistics of its
//! achievable rate over location, and evaluates rate selectors that must stay
//! reliable despite location error.

// `!(a > b)` guards are written that way so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod channel;
pub mod config;
pub mod error;
pub mod localization;
pub mod numerics;
pub mod radiomap;
pub mod rateselect;
pub mod reliability;
pub mod rng;
pub mod runner;

pub use config::SystemConfig;
pub use error::{Error, Result};
