//! Conversions between in-memory models and their on-disk records.

use siftgan_core::error::Result;
use siftgan_core::gantrain::ModelSnapshot;
use siftgan_core::nets::{load_params, Classifier, ClassifierConfig, DiscriminatorConfig, GeneratorConfig};
use siftgan_core::seeded_rng;

use crate::formats::SnapshotFile;

pub fn snapshot_file(snapshot: &ModelSnapshot) -> SnapshotFile {
    SnapshotFile {
        iteration: snapshot.iteration as u64,
        records: snapshot.to_records(),
    }
}

pub fn snapshot_from_file(
    file: &SnapshotFile,
    g_config: GeneratorConfig,
    d_config: DiscriminatorConfig,
) -> Result<ModelSnapshot> {
    ModelSnapshot::from_records(file.iteration as usize, &file.records, g_config, d_config)
}

/// A trained classifier, stored in the snapshot container at iteration 0.
pub fn classifier_file(classifier: &Classifier) -> SnapshotFile {
    SnapshotFile {
        iteration: 0,
        records: classifier
            .params()
            .map(|p| (p.name().to_string(), p.values().to_vec()))
            .collect(),
    }
}

pub fn classifier_from_file(file: &SnapshotFile, config: ClassifierConfig) -> Result<Classifier> {
    let mut classifier = Classifier::new(config, &mut seeded_rng(0))?;
    let lookup = |name: &str| file.records.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice());
    load_params(classifier.feature_params_mut(), lookup)?;
    load_params(classifier.head_params_mut(), lookup)?;
    Ok(classifier)
}
