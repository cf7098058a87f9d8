//! Visual and audio input pipelines.

mod audio;
mod augment;
mod patch;

pub use audio::{
    hz_to_mel, logmel, mel_centers, mel_filterbank, mel_to_hz, specaugment, LogMelParams, LogMelSpec, SpecAugParams,
    SpecMask,
};
pub use augment::{
    apply_op, strong_augment, twaug, twaug_source_frames, weak_augment, AugKind, AugPlan, AugPolicy, OpKind, VideoOp,
};
pub use patch::{patchify, unpatchify, TokenGrid};
