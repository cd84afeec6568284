//! Racing-line synthesis on occupancy-grid tracks.
//!
//! A neuroevolved MLP drives a kinematic bicycle model; its short rollouts
//! are compressed into Bezier-based trajectory embeddings, which a PID and
//! Stanley tracker follow around held-out tracks. The guide in `book/`
//! walks through each module.

pub mod control;
pub mod evolve;
pub mod geometry;
pub mod harness;
pub mod policy;
pub mod seed;
pub mod track;
pub mod trajectory;
pub mod vehicle;

// Compiles and runs the guide's snippets as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tracks.md")]
    mod tracks {}
    #[doc = include_str!("../../../book/src/vehicle.md")]
    mod vehicle {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
