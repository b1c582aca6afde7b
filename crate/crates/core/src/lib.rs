//! Unstructured multi-source multicast: flood-and-prune dissemination trees
//! over a self-optimizing overlay, with a deterministic discrete-event
//! simulator and an evaluation suite.

pub mod config;
pub mod connectivity;
pub mod delivery;
pub mod ids;
pub mod membership;
pub mod metrics;
pub mod overlay;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod soft_state;
pub mod time;
pub mod topology;
pub mod tree;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/overlay.md")]
    mod overlay {}
    #[doc = include_str!("../../../book/src/trees.md")]
    mod trees {}
    #[doc = include_str!("../../../book/src/soft-state.md")]
    mod soft_state {}
    #[doc = include_str!("../../../book/src/membership.md")]
    mod membership {}
    #[doc = include_str!("../../../book/src/failures.md")]
    mod failures {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
