//! Fairness-aware LoRA fine-tuning for a two-party setting.
//!
//! A solution developer (SD) holds task labels and a compliance officer (CO)
//! holds sensitive-attribute labels. Both share one frozen backbone and only
//! ever exchange LoRA adapter bundles. Four strategies are provided:
//!
//! * `Erm`: plain downstream fine-tuning,
//! * `Unl`: subtract a sensitive adapter from the base, then fine-tune,
//! * `Adv`: alternate adversarial sensitive updates (through a gradient
//!   reversal layer) with downstream updates,
//! * `Orth`: downstream fine-tuning with a penalty on the cross-Gram matrices
//!   between task and sensitive adapter factors.
//!
//! [`metrics`] evaluates utility and group fairness of the resulting models.

pub mod autodiff;
pub mod backbone;
pub mod bundle;
pub mod data;
pub mod error;
pub mod experiment;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
