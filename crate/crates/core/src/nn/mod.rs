pub mod classifier;
pub mod generator;
pub mod layers;
pub mod module;
pub mod optim;
pub mod snapshot;

pub use classifier::{build_classifier, ArchKind, ClassifierConfig, ClassifierModel, ClassifierOutput};
pub use generator::{
    gaussian_latent, DataStatsMode, GeneratorConfig, GeneratorModel, GeneratorOutput, GeneratorVariant,
    LearnableDataStats, NoisyLayer,
};
pub use layers::{argmax_rows, log_softmax, softmax, BnTap, ForwardMode};
pub use module::{attach_trainable, detached, load_state_dict, state_dict, state_dict_bytes, Module, ParamKind, StateDict};
pub use optim::{Adam, Sgd};
pub use snapshot::{FrozenClassifier, ModelSnapshot, SnapshotMeta};
