//! Threshold-and-rate throttling plans for a shared monthly capacity.
//!
//! A plan `(T, r)` lets each user run at full rate until their cycle usage
//! reaches `T`, then caps them at rate `r`. The modules here size such plans
//! for streaming and download populations, pick the plan with the least
//! aggregate regret, let users choose among priced tiers, and replay a
//! billing cycle hour by hour.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod download;
pub mod error;
pub mod population;
pub mod regret;
pub mod sim;
pub mod stream;
pub mod tiers;

pub use allocation::{Mode, Plan, Policy, Solve};
pub use error::{Error, Result};
pub use population::{Population, UserProfile};
pub use regret::RegretParams;
