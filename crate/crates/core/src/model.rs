//! The full segmentation network: encoder, equalization, decoder.

use crate::autodiff::Var;
use crate::decoder::{ConcatSet, Decoder, DecoderPlan};
use crate::equalization::{Equalization, EqualizationFlags, EqualizationState};
use crate::error::TensorError;
use crate::params::{Binder, ParamStore, WeightInit};
use crate::swin::{StagePlan, SwinEncoder};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub classes: usize,
    pub base_channels: usize,
    pub patch: usize,
    pub window: usize,
    pub heads: usize,
    pub ilfem: bool,
    pub clfem: bool,
    pub additive_up: bool,
    pub concat_set: ConcatSet,
    pub weight_init: WeightInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            classes: 2,
            base_channels: 24,
            patch: 4,
            window: 4,
            heads: 3,
            ilfem: true,
            clfem: true,
            additive_up: true,
            concat_set: ConcatSet::F123,
            weight_init: WeightInit::FanIn,
        }
    }
}

impl ModelConfig {
    pub fn stage_plan(&self) -> StagePlan {
        StagePlan {
            patch: self.patch,
            base_channels: self.base_channels,
            window: self.window,
            heads: self.heads,
        }
    }

    /// Channel width of the deepest map.
    pub fn deep_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.classes < 2 {
            return Err(TensorError::Layout(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(4) {
            return Err(TensorError::Layout(format!(
                "base channel width {} must be a positive multiple of 4",
                self.base_channels
            )));
        }
        self.stage_plan().validate(self.image_size)
    }
}

#[derive(Debug, Clone)]
pub struct Dfen {
    pub config: ModelConfig,
    pub encoder: SwinEncoder,
    pub equalization: Equalization,
    pub decoder: Decoder,
}

impl Dfen {
    /// Registers every parameter in `store`.
    pub fn new(config: ModelConfig, store: &mut ParamStore) -> Result<Self, TensorError> {
        config.validate()?;
        store.set_weight_init(config.weight_init);
        let encoder = SwinEncoder::new(store, IMAGE_CHANNELS, config.stage_plan());
        let equalization = Equalization::new(
            store,
            config.deep_channels(),
            config.classes,
            EqualizationFlags {
                ilfem: config.ilfem,
                clfem: config.clfem,
            },
        );
        let decoder = Decoder::new(
            store,
            DecoderPlan {
                base_channels: config.base_channels,
                concat_channels: config.base_channels,
                classes: config.classes,
                heads: config.heads,
                window: config.window,
                additive_up: config.additive_up,
                concat_set: config.concat_set,
            },
        );
        Ok(Dfen {
            config,
            encoder,
            equalization,
            decoder,
        })
    }

    /// Image `[3×H×W]` to logits `[Z×H×W]`.
    pub fn forward<'t>(&self, b: &Binder<'t>, image: Var<'t>) -> Result<Var<'t>, TensorError> {
        Ok(self.forward_with_state(b, image, false)?.0)
    }

    pub fn forward_with_state<'t>(
        &self,
        b: &Binder<'t>,
        image: Var<'t>,
        keep_state: bool,
    ) -> Result<(Var<'t>, Option<EqualizationState>), TensorError> {
        let feats = self.encoder.encode(b, image)?;
        let (r_aug, state) = self.equalization.forward(b, feats.r, keep_state)?;
        let logits = self.decoder.forward(b, &feats, r_aug)?;
        Ok((logits, state))
    }
}
