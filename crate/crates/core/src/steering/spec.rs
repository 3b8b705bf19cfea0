use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TopKPolicy};

/// Where the offset is added inside a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringSite {
    /// Before TopK selection, so the steered coordinate can enter the kept set.
    #[default]
    PreTopk,
    /// On the block output (after TopK, if any).
    Hidden,
}

impl std::str::FromStr for SteeringSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_topk" => Ok(Self::PreTopk),
            "hidden" => Ok(Self::Hidden),
            other => Err(Error::config(format!("unknown steering site '{other}'"))),
        }
    }
}

/// Adds `delta` to neuron `neuron` of layer `layer` at every position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub layer: usize,
    pub neuron: usize,
    pub delta: f32,
    #[serde(default)]
    pub site: SteeringSite,
}

impl SteeringSpec {
    /// Uses `pre_topk` on TopK layers and `hidden` on dense layers.
    pub fn auto(
        layer: usize,
        neuron: usize,
        delta: f32,
        model: &ModelConfig,
        policy: &TopKPolicy,
    ) -> Self {
        let site = if policy.is_topk_layer(layer, model.num_layers) {
            SteeringSite::PreTopk
        } else {
            SteeringSite::Hidden
        };
        Self {
            layer,
            neuron,
            delta,
            site,
        }
    }

    pub fn validate(&self, model: &ModelConfig, policy: &TopKPolicy) -> Result<()> {
        if !self.delta.is_finite() {
            return Err(Error::config("steering delta must be finite"));
        }
        if self.layer >= model.num_layers {
            return Err(Error::Index {
                what: "layer",
                index: self.layer,
                bound: model.num_layers,
            });
        }
        if self.neuron >= model.hidden_dim {
            return Err(Error::Index {
                what: "neuron",
                index: self.neuron,
                bound: model.hidden_dim,
            });
        }
        if self.site == SteeringSite::PreTopk && !policy.is_topk_layer(self.layer, model.num_layers)
        {
            return Err(Error::config(format!(
                "pre_topk steering requested on dense layer {}",
                self.layer
            )));
        }
        Ok(())
    }
}
