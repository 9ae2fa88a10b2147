//! Additive and concatenative upsampling decoder with an expanding head.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::nn::Linear;
use crate::ops::concat;
use crate::params::{Binder, ParamStore};
use crate::swin::{Features, SwinBlockPair};

type OpResult<'t> = Result<Var<'t>, TensorError>;

/// Linear widen to `2C` followed by a factor-2 pixel shuffle: `[C×h×w] -> [C/2×2h×2w]`.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub proj: Linear,
    pub channels: usize,
}

/// Factor-2 pixel shuffle: `out[c, 2i+a, 2j+b] = x[4c + 2a + b, i, j]`.
pub fn pixel_shuffle<'t>(x: Var<'t>) -> OpResult<'t> {
    let shape = x.shape();
    if shape.len() != 3 || !shape[0].is_multiple_of(4) {
        return Err(TensorError::shape("pixel_shuffle", format!("{shape:?}")));
    }
    let (c4, h, w) = (shape[0], shape[1], shape[2]);
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(c4 * h * w);
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let src_ch = 4 * ch + 2 * (oi % 2) + oj % 2;
                index.push((src_ch * h + oi / 2) * w + oj / 2);
            }
        }
    }
    x.gather(&[c, oh, ow], index.into())
}

impl PatchExpand {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        assert!(channels.is_multiple_of(2), "patch expanding needs an even channel count, got {channels}");
        PatchExpand {
            proj: Linear::new(store, &format!("{name}.proj"), channels, 2 * channels),
            channels,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> OpResult<'t> {
        pixel_shuffle(self.proj.forward_map(b, x)?)
    }
}

/// Which additive features feed the concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConcatSet {
    F3,
    F23,
    F123,
}

impl ConcatSet {
    pub const ALL: [ConcatSet; 3] = [ConcatSet::F3, ConcatSet::F23, ConcatSet::F123];

    /// Membership of (F1, F2, F3).
    pub fn members(self) -> [bool; 3] {
        match self {
            ConcatSet::F3 => [false, false, true],
            ConcatSet::F23 => [false, true, true],
            ConcatSet::F123 => [true, true, true],
        }
    }

    pub fn len(self) -> usize {
        self.members().iter().filter(|&&m| m).count()
    }
}

impl fmt::Display for ConcatSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConcatSet::F3 => "f3",
            ConcatSet::F23 => "f23",
            ConcatSet::F123 => "f123",
        })
    }
}

impl FromStr for ConcatSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f3" => Ok(ConcatSet::F3),
            "f23" => Ok(ConcatSet::F23),
            "f123" => Ok(ConcatSet::F123),
            other => Err(format!("unknown concat set {other:?} (expected f3, f23 or f123)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderPlan {
    /// Encoder width at stride 4; strides 8 and 16 carry 2× and 4× this.
    pub base_channels: usize,
    /// Common width of the concatenated features.
    pub concat_channels: usize,
    pub classes: usize,
    pub heads: usize,
    pub window: usize,
    pub additive_up: bool,
    pub concat_set: ConcatSet,
}

/// The additive features, strides 4, 8 and 16. Unneeded levels are skipped.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveFeatures<'t> {
    pub f1: Option<Var<'t>>,
    pub f2: Option<Var<'t>>,
    pub f3: Var<'t>,
}

/// `block(expand(decoder_feat)) + skip`, or without the skip when additive upsampling is off.
pub fn additive_up<'t>(decoder_path: Var<'t>, skip: Option<Var<'t>>) -> OpResult<'t> {
    match skip {
        Some(s) => {
            if s.shape() != decoder_path.shape() {
                return Err(TensorError::shape(
                    "additive_up",
                    format!("decoder path {:?} vs skip {:?}", decoder_path.shape(), s.shape()),
                ));
            }
            decoder_path.add(s)
        }
        None => Ok(decoder_path),
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub plan: DecoderPlan,
    pub expand3: PatchExpand,
    pub block2: SwinBlockPair,
    pub expand2: PatchExpand,
    pub block1: SwinBlockPair,
    /// 1×1 projections of F1, F2, F3 to the common width.
    pub lateral: [Linear; 3],
    pub fusion: Linear,
    pub head_expand: [PatchExpand; 2],
    pub classifier: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, plan: DecoderPlan) -> Self {
        let c0 = plan.base_channels;
        let cu = plan.concat_channels;
        assert!(cu.is_multiple_of(4), "concat width {cu} must be divisible by 4");
        Decoder {
            plan,
            expand3: PatchExpand::new(store, "dec.expand3", 4 * c0),
            block2: SwinBlockPair::new(store, "dec.block2", 2 * c0, plan.heads, plan.window),
            expand2: PatchExpand::new(store, "dec.expand2", 2 * c0),
            block1: SwinBlockPair::new(store, "dec.block1", c0, plan.heads, plan.window),
            lateral: [
                Linear::new(store, "dec.lateral1", c0, cu),
                Linear::new(store, "dec.lateral2", 2 * c0, cu),
                Linear::new(store, "dec.lateral3", 4 * c0, cu),
            ],
            fusion: Linear::new(store, "dec.fusion", plan.concat_set.len() * cu, cu),
            head_expand: [
                PatchExpand::new(store, "dec.head_expand1", cu),
                PatchExpand::new(store, "dec.head_expand2", cu / 2),
            ],
            classifier: Linear::new(store, "dec.classifier", cu / 4, plan.classes),
        }
    }

    pub fn additive<'t>(&self, b: &Binder<'t>, feats: &Features<'t>, r_aug: Var<'t>) -> Result<AdditiveFeatures<'t>, TensorError> {
        let [need1, need2, _] = self.plan.concat_set.members();
        let skip = |s: Var<'t>| self.plan.additive_up.then_some(s);
        let mut out = AdditiveFeatures { f1: None, f2: None, f3: r_aug };
        if need1 || need2 {
            let d2 = self.block2.forward(b, self.expand3.forward(b, r_aug)?)?;
            let f2 = additive_up(d2, skip(feats.r1))?;
            out.f2 = Some(f2);
            if need1 {
                let d1 = self.block1.forward(b, self.expand2.forward(b, f2)?)?;
                out.f1 = Some(additive_up(d1, skip(feats.r0))?);
            }
        }
        Ok(out)
    }

    /// Projects each member to the common width, aligns to stride 4 and
    /// concatenates in F1, F2, F3 order.
    pub fn concat_up<'t>(&self, b: &Binder<'t>, add: &AdditiveFeatures<'t>) -> OpResult<'t> {
        let levels = [(add.f1, 1), (add.f2, 2), (Some(add.f3), 4)];
        let mut parts = Vec::with_capacity(3);
        for ((feat, factor), (member, lateral)) in levels.into_iter().zip(self.plan.concat_set.members().into_iter().zip(&self.lateral)) {
            if !member {
                continue;
            }
            let feat = feat.ok_or_else(|| TensorError::Layout("additive feature missing for concat set".into()))?;
            parts.push(lateral.forward_map(b, feat)?.upsample(factor)?);
        }
        concat(&parts, 0)
    }

    /// Fusion, two patch expansions back to full resolution, then per-pixel class logits.
    pub fn head<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> OpResult<'t> {
        let x = self.fusion.forward_map(b, x)?;
        let x = self.head_expand[0].forward(b, x)?;
        let x = self.head_expand[1].forward(b, x)?;
        self.classifier.forward_map(b, x)
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, feats: &Features<'t>, r_aug: Var<'t>) -> OpResult<'t> {
        let add = self.additive(b, feats, r_aug)?;
        let cat = self.concat_up(b, &add)?;
        self.head(b, cat)
    }
}
