//! Joint autoregressive + flow-matching text-to-speech training at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: tensors and a reverse-mode tape.
//! * [`fsq`]: finite scalar quantisation and the toy tokenizer objective.
//! * [`sequence`]: the unified `[P; T; S]` multi-speaker input sequence.
//! * [`ar_model`]: causal transformer acoustic model over that sequence.
//! * [`flowmatch`]: chunk-masked conditional flow matching on AM hidden states.
//! * [`trainer`]: joint loss, schedules, AdamW, curriculum.
//! * [`preference`]: DPO loss and CER-based preference pair harvesting.
//! * [`evalkit`]: CER / WER / cpWER.
//! * [`toytask`]: the procedural toy speech world used for every experiment.
//! * [`pipeline`]: run-directory orchestration behind the command line.

pub mod ar_model;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod flowmatch;
pub mod fsq;
pub mod nn;
pub mod pipeline;
pub mod preference;
pub mod sequence;
pub mod toytask;
pub mod trainer;

pub use error::{Error, Result};
