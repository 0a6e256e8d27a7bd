pub mod corpus;
pub mod correct;
pub mod decode;
pub mod eval;
pub mod lineproc;
pub mod lm;
pub mod nn;
pub mod pipeline;
pub mod synth;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/pages.md")]
    mod pages {}
    #[doc = include_str!("../../../book/src/lines.md")]
    mod lines {}
    #[doc = include_str!("../../../book/src/recognizer.md")]
    mod recognizer {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/correction.md")]
    mod correction {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
