//! Activation steering, sampling and generation.

mod effect;
mod generate;
mod sampler;
mod spec;

pub use effect::{concept_frequency, sign_test_p, steering_effect_score, EffectScore};
pub use generate::{generate, Generation};
pub use sampler::{filtered_distribution, sample_next, FilterOrder, GenerationParams};
pub use spec::{SteeringSite, SteeringSpec};
