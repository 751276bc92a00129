#![allow(dead_code)]

use promptseg::config::RunConfig;

/// Small enough to train in well under a second.
pub const TINY_TOML: &str = r#"
[run]
name = "tiny"

[model]
num_classes = 3
embed_dim = 8
global_dim = 8
text_heads = 2
context_len = 2
decoder_dim = 4

[data]
image_size = 32
train_images = 4
val_images = 2

[train]
steps = 4
batch_size = 2
eval_every = 2
"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_toml_str(TINY_TOML).unwrap()
}
