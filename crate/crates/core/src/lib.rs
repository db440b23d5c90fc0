//! Hybrid CNN and shifted-window transformer encoder with double-level
//! cross-attention fusion, for dense medical image segmentation.
//!
//! ```no_run
//! use hiformer::{build_config, HiFormerF32};
//!
//! let cfg = build_config("hiformer-b").unwrap();
//! let model = HiFormerF32::new(&cfg, 0).unwrap();
//! println!("{}", model.param_report());
//! ```

pub mod audit;
pub mod cnn;
pub mod config;
pub mod decoder;
pub mod dlf;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod swin;
pub mod train;

pub use config::{build_config, tiny_config, CnnBackboneKind, DlfConfig, ModelConfig, ParamReport};
pub use error::{Error, Result};
pub use model::{count_parameters, ForwardTrace, HiFormer};

pub use hiformer_tensor as tensor;

pub type HiFormerF32 = HiFormer<f32>;
pub type HiFormerF64 = HiFormer<f64>;
