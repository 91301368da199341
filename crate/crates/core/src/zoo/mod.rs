//! Toy dataset and the target networks the inversion pipeline consumes.

mod models;
mod shapes;
mod train;

pub use models::{discriminator, micro_gen, micro_vgg, MicroGenConfig, MicroVggConfig};
pub use shapes::{gen_shapes, shape_at, ShapeParams, ShapesConfig, CLASS_NAMES, N_CLASSES};
pub use train::{
    accuracy, decoder_codes, predict, sample_latent, train_classifier, train_generator, ClassifierReport,
    ClassifierTrainConfig, GeneratorMode, GeneratorReport, GeneratorTrainConfig,
};
