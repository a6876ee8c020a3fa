//! Fixtures shared by the criterion benches.

use cda_core::{synthesize_domain_pair, EmbeddingSet, SynthConfig};

/// A labeled source/target pair with a noisy domain shift, sized by the
/// caller. Deterministic, so timings compare across runs.
pub fn domain_pair(classes: usize, per_class: usize, dim: usize) -> (EmbeddingSet, EmbeddingSet) {
    let cfg = SynthConfig {
        num_classes: classes,
        samples_per_class: per_class,
        dim,
        class_spread: 0.12,
        shift_vector_scale: 0.36,
        shift_noise: 0.9,
        seed: 7,
    };
    synthesize_domain_pair(&cfg).expect("valid fixture config")
}
