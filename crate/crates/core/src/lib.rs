// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod filter;
pub mod matrix;
pub mod refine;
pub mod scaling;
pub mod spectrum;
pub mod svd;
pub mod tensor_store;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/svd.md")]
    mod svd {}
    #[doc = include_str!("../../../book/src/scaling.md")]
    mod scaling {}
    #[doc = include_str!("../../../book/src/bias.md")]
    mod bias {}
    #[doc = include_str!("../../../book/src/spectra.md")]
    mod spectra {}
    #[doc = include_str!("../../../book/src/pipeline-cli.md")]
    mod pipeline_cli {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
}
