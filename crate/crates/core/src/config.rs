//! TOML run configuration shared by every command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// Both sections are optional; missing keys take their defaults and unknown
/// keys are an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

/// The defaults, with a comment on every key. `dualproto default-config`
/// prints this verbatim.
pub const DEFAULT_CONFIG: &str = r#"# dualproto run configuration. Every key is optional.

[train]
epochs = 30            # passes over the target set (>= 1)
batch_size = 64        # samples per optimizer step; the last batch may be short
beta = 0.5             # weight of aligned text scores in the label mix, [0, 1]
tau_logit = 0.01       # softmax temperature for all class scores
tau_align = 0.05       # temperature of the prototype alignment term
da_momentum = 0.99     # EMA momentum of the running class marginal, (0, 1]
adapter_enabled = true # learn the per-dimension affine adapter
weighting = true       # weight each pseudo-label by prototype agreement
seed = 0               # batch order seed
eval_every = 1         # epochs between label metrics (last epoch always)

[train.lambdas]
st = 1.0               # self-training
reg = 1.0              # fairness regularizer
align = 1.0            # prototype alignment

[train.optimizer]
lr_prototypes = 5e-4   # peak learning rate for textual prototypes
lr_adapter = 5e-4      # peak learning rate for adapter scale and bias
weight_decay = 0.01    # decoupled weight decay
beta1 = 0.9
beta2 = 0.999
eps = 1e-8

[synth]
classes = 10
dim = 64
samples = 2000
prompts_per_class = 7
strong_views = 4
intra_class_noise = 0.25   # per-coordinate std of weak views around their anchor
prompt_noise = 0.05        # per-coordinate std of each prompt embedding
modality_gap = 0.8         # size of the text-side offset
gap_lean = 1.0             # how far the offset tilts toward the next class
strong_view_noise = 0.1    # per-coordinate std of strong views around the weak view
seed = 7
# class_balance = [0.1, 0.1, ...]  # optional, one weight per class, sums to 1
"#;

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }
}
