//! Unbalance-aware three-phase optimal power flow and distribution locational
//! marginal prices.
//!
//! The crate is organised bottom-up:
//!
//! * [`netmodel`] – network description, per-unit system, JSON ingestion;
//! * [`sequence`] – symmetrical components, VUF and its derivatives;
//! * [`powerflow`] – unbalanced Newton power flow and perturbation oracle;
//! * [`opf`] – NLP assembly for the none / hard / soft unbalance treatments;
//! * [`ipsolver`] – primal-dual interior-point solver;
//! * [`dlmp`] – price extraction, decomposition and VUF sensitivities.

pub mod dlmp;
pub mod ipsolver;
pub mod netmodel;
pub mod network;
pub mod opf;
pub mod powerflow;
pub mod sequence;

pub use netmodel::{load_network, NetworkSpec, Phase, UnbalanceConfig, UnbalanceMode};
