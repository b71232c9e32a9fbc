pub mod adam;
pub mod attention;
pub mod checkpoint;
pub(crate) mod codec;
pub mod error;
pub mod gradcheck;
pub mod handshake;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod scenario;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/handshake.md")]
    mod handshake {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
