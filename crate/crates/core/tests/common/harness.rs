//! Small phantom datasets and run configurations for the training tests.

use std::path::{Path, PathBuf};

use mammoclu::config::RunConfig;
use mammoclu::data::{generate_phantoms, PhantomConfig};
use mammoclu::train::load_split;
use mammoclu::data::LoadedStudy;

/// Writes `n` phantom studies of `size x size` and returns the manifest path.
pub fn phantoms(dir: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    let cfg = PhantomConfig {
        study_count: n,
        image_size: (size, size),
        malignant_fraction: 0.5,
        seed,
        lesion_intensity: 0.6,
        lesion_radius_range: ((size / 10).max(2), (size / 5).max(2)),
    };
    generate_phantoms(&cfg, dir).expect("phantoms are written")
}

pub fn load(manifest: &Path, size: usize) -> Vec<LoadedStudy> {
    load_split(manifest, (size, size)).expect("phantoms load")
}

/// Tiny presets on 32x32 inputs with two 8x8 patches.
pub fn tiny_config(train: &Path, test: Option<&Path>, out: &Path, epochs: usize, lr: f64) -> RunConfig {
    let test_line = test.map_or(String::new(), |t| format!("test_manifest = {:?}\n", t));
    let text = format!(
        r#"seed = 5
output_dir = {out:?}

[data]
train_manifest = {train:?}
{test_line}image_size = [32, 32]

[backbone]
global_preset = "tiny"
local_preset = "tiny"

[roi]
num_patches = 2
patch_size = [8, 8]

[optim]
learning_rate = {lr:e}
epochs = {epochs}
batch_size = 4
"#
    );
    RunConfig::from_toml(&text).expect("valid test config")
}
