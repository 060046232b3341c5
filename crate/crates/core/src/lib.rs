//! Throughput-equalizing batch planning and straggler control for
//! synchronous data-parallel training on heterogeneous nodes.
//!
//! The control path is the same in every execution mode:
//! [`planner`] sizes batches from [`speedmodel`] curves, [`monitor`] scores
//! per-step reports, and [`retuner`] shrinks or regrows batches when a node
//! loses capacity. [`simengine`] drives that loop against modeled nodes;
//! [`livenet`] drives it against real worker processes.

pub mod control;
pub mod livenet;
pub mod monitor;
pub mod planner;
pub mod replay;
pub mod report;
pub mod retuner;
pub mod scenario;
pub mod simengine;
pub mod speedmodel;
pub mod trace;
