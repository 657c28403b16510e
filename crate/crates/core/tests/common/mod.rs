//! Miniature models shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use dscm_core::auxiliary::{AuxRole, Regressor, RegressorConfig, Segmentor, SegmentorConfig};
use dscm_core::config::ExperimentConfig;
use dscm_core::dscm::Dscm;
use dscm_core::flow::{fit_statistics, FlowSet};
use dscm_core::graph::{AttributeVector, CausalGraph, Observation};
use dscm_core::hvae::{Hvae, HvaeConfig};
use dscm_core::image::Image;
use dscm_core::synth::SceneSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STRUCTURES: [&str; 3] = ["left", "right", "center"];

pub fn structures() -> Vec<String> {
    STRUCTURES.iter().map(|s| s.to_string()).collect()
}

/// Random 8×8 observations over the three-structure graph (no masks).
pub fn tiny_observations(n: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let size: f64 = rng.gen_range(-1.0..1.0);
            let attributes = AttributeVector::from_pairs([
                ("size", size),
                ("left", 8.0 + 2.0 * size + rng.gen_range(-1.0..1.0)),
                ("right", 7.0 + 2.0 * size + rng.gen_range(-1.0..1.0)),
                ("center", 4.0 + size + rng.gen_range(-0.5..0.5)),
            ]);
            let image = Image::new(8, 8, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect());
            Observation {
                id: format!("{i:03}"),
                image,
                attributes,
                masks: None,
            }
        })
        .collect()
}

pub struct TinyWorld<T: dscm_autograd::Scalar> {
    pub graph: CausalGraph,
    pub model: Dscm<T>,
    pub segmentor: Segmentor<T>,
    pub regressor: Regressor<T>,
    pub data: Vec<Observation>,
}

pub fn tiny_world<T: dscm_autograd::Scalar>(seed: u64) -> TinyWorld<T> {
    let data = tiny_observations(12, seed);
    let graph = fit_statistics(&SceneSpec::three_structures(8, 8).graph(), &data).unwrap();
    let flows = FlowSet::<f64>::identity(&graph, 4, seed).unwrap();
    let config = HvaeConfig {
        height: 8,
        width: 8,
        levels: 3,
        channels: vec![3, 4, 4],
        latent_channels: 1,
        parent_dim: 3,
        sigma_x: 0.1,
    };
    let hvae = Hvae::<T>::new(config, seed).unwrap();
    let model = Dscm::new(graph.clone(), flows, hvae).unwrap();
    let segmentor = Segmentor::<T>::new(
        SegmentorConfig {
            structures: structures(),
            height: 8,
            width: 8,
            channels: 2,
            pixel_area: 1.0,
        },
        AuxRole::Finetune,
        seed + 1,
    )
    .unwrap();
    let regressor = Regressor::<T>::new(
        RegressorConfig::from_graph(&graph, &structures(), 8, 8, 2).unwrap(),
        AuxRole::Finetune,
        seed + 2,
    )
    .unwrap();
    TinyWorld {
        graph,
        model,
        segmentor,
        regressor,
        data,
    }
}

/// 200 images, one-epoch models and three fine-tuning steps.
pub fn smoke_config(out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 1
out = "{}"
[data]
size = 32
n = 200
[flows]
epochs = 5
[hvae]
channels = [4, 4, 4]
epochs = 1
[aux]
segmentor_channels = 4
regressor_channels = 4
segmentor_epochs = 1
regressor_epochs = 1
[cft]
steps = 3
batch_size = 4
snapshot_every = 0
[eval]
n_test = 8
panels = 2
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text, &[]).unwrap()
}

/// Declares a `CHECKS` table of named check functions for the acceptance
/// runner and, under the test harness, one `#[test]` per check.
#[allow(unused_macros)]
macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const CHECKS: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        #[cfg(test)]
        mod tests {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}

/// Proptest config without a regressions file; these suites also run from a harness=false binary.
#[allow(dead_code)]
pub fn cases(n: u32) -> proptest::prelude::ProptestConfig {
    proptest::prelude::ProptestConfig {
        failure_persistence: None,
        ..proptest::prelude::ProptestConfig::with_cases(n)
    }
}
