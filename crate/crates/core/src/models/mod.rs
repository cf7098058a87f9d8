//! Encoders, fusion head, localizers, optimizer and EMA teacher.

mod localizer;
mod net;
mod optim;
mod params;

pub use localizer::{LearnedLocalizer, LearnedLocalizerConfig, Localizer, LocalizerKind, OracleLocalizer};
pub use net::{audio_patches, Encoded, Forward, Model, ModelConfig};
pub use optim::{cosine_lr, Sgd, SgdConfig};
pub use params::{ema_update, load_params, save_params, Binder, ParamStore};
