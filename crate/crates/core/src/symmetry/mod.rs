//! Symmetry generators from the Koopman model and the augmentation engine.

mod augment;
mod generator;
mod lie;
pub mod reference;
mod sidecar;

pub use augment::{
    apply_shift, augment_tuple, AugmentConfig, AugmentMode, AugmentStats, AugmentedPair,
    Augmenter,
};
pub use generator::{
    eigen_generator, kfc_generator, kfc_generator_in, kfcpp_generator, normalize_mean_abs,
    GeneratorCache, GeneratorKind, SymmetryGenerator, COMMUTATION_TOL,
};
pub use lie::{
    composition_scaling, lie_axiom_report, lie_axiom_report_with, loglog_fit, transform,
    LieAxiomReport, TAYLOR_STEP,
};
pub use sidecar::{precompute_sidecar, Sidecar, SidecarHeader, SidecarRecord, SidecarSummary, CHUNK};
