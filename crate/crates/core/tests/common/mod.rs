#![allow(dead_code)]

use acs_core::experiment::RunConfig;

/// Small blob task that trains in well under a second.
pub fn small_config() -> RunConfig {
    RunConfig::from_toml(
        r#"
seed = 5

[data]
kind = "synthetic"
classes = 3
dims = 4
per_class = 40
spread = 0.15
seed = 5

[model]
hidden = [8, 8]
bits_w = 2

[teacher]
epochs = 10
lr = 0.3
batch_size = 16

[qat]
epochs = 10
interval = 3
fraction = 0.3
lr = 0.1
batch_size = 16
"#,
    )
    .expect("valid config")
}

pub fn workspace_file(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}
