//! Hierarchical windowed-attention encoder.
//!
//! Feature maps are channel-first `[C×H×W]`. Attention runs inside
//! non-overlapping `w×w` windows; the second block of every pair uses windows
//! cyclically shifted by `⌊w/2⌋` with a mask that keeps wrapped-around
//! positions from attending to each other.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::nn::{ChannelNorm, Linear};
use crate::params::{Binder, Init, ParamId, ParamStore};

/// Additive score for position pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;
pub const MLP_RATIO: usize = 4;

/// Token arrangement of one attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    /// Effective window side (the configured window, clamped to the map).
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    /// Maps smaller than the window use one window covering the whole map and no shift.
    pub fn new(height: usize, width: usize, window: usize, shifted: bool) -> Result<Self, TensorError> {
        let win = window.min(height).min(width);
        if win == 0 || !height.is_multiple_of(win) || !width.is_multiple_of(win) {
            return Err(TensorError::Layout(format!(
                "{height}×{width} map is not divisible into {win}×{win} windows"
            )));
        }
        let whole = win == height && win == width;
        let shift = if shifted && !whole { win / 2 } else { 0 };
        Ok(WindowLayout {
            height,
            width,
            window: win,
            shift,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Position in the shifted frame of token `t` of window `win`.
    fn shifted_coord(&self, win: usize, t: usize) -> (usize, usize) {
        let per_row = self.width / self.window;
        let (wr, wc) = (win / per_row, win % per_row);
        (wr * self.window + t / self.window, wc * self.window + t % self.window)
    }

    /// Flat `H×W` index of the source position for token `t` of window `win`.
    pub fn position(&self, win: usize, t: usize) -> usize {
        let (r, c) = self.shifted_coord(win, t);
        let r = (r + self.shift) % self.height;
        let c = (c + self.shift) % self.width;
        r * self.width + c
    }

    fn region(&self, win: usize, t: usize) -> usize {
        let (r, c) = self.shifted_coord(win, t);
        let band = |p: usize, extent: usize| {
            if p < extent - self.window {
                0
            } else if p < extent - self.shift {
                1
            } else {
                2
            }
        };
        band(r, self.height) * 3 + band(c, self.width)
    }

    /// `[num_windows × n × n]` additive mask, or `None` when nothing is shifted.
    pub fn mask(&self) -> Option<Vec<f64>> {
        if self.shift == 0 {
            return None;
        }
        let n = self.tokens();
        let mut mask = Vec::with_capacity(self.num_windows() * n * n);
        for win in 0..self.num_windows() {
            let regions: Vec<usize> = (0..n).map(|t| self.region(win, t)).collect();
            for a in 0..n {
                for b in 0..n {
                    mask.push(if regions[a] == regions[b] { 0.0 } else { MASK_VALUE });
                }
            }
        }
        Some(mask)
    }
}

/// Index into the relative-position table for two in-window tokens.
fn relative_index(table_window: usize, win: usize, a: usize, b: usize) -> usize {
    let (ar, ac) = (a / win, a % win);
    let (br, bc) = (b / win, b % win);
    let side = 2 * table_window - 1;
    let dr = ar + table_window - 1 - br;
    let dc = ac + table_window - 1 - bc;
    dr * side + dc
}

/// Multi-head self-attention inside (optionally shifted) windows.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[heads × (2w−1)²]` relative position bias.
    pub rel_bias: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, window: usize) -> Self {
        assert!(heads > 0 && channels.is_multiple_of(heads), "{channels} channels over {heads} heads");
        let side = 2 * window - 1;
        WindowAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels),
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels),
            rel_bias: store.register(&format!("{name}.rel_bias"), &[heads, side * side], Init::Zeros),
            channels,
            heads,
            window,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>, shifted: bool) -> Result<Var<'t>, TensorError> {
        Ok(self.forward_with_attention(b, x, shifted)?.0)
    }

    /// Returns the output map and the `[windows·heads × n × n]` attention weights.
    pub fn forward_with_attention<'t>(
        &self,
        b: &Binder<'t>,
        x: Var<'t>,
        shifted: bool,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(TensorError::shape(
                "window_attention",
                format!("expected {}×H×W, got {shape:?}", self.channels),
            ));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let layout = WindowLayout::new(h, w, self.window, shifted)?;
        let hw = h * w;
        let (nw, n, d, heads) = (layout.num_windows(), layout.tokens(), self.head_dim(), self.heads);
        let nb = nw * heads;

        let qkv = self.qkv.forward(b, x.reshape(&[c, hw])?)?;
        let mut q_idx = Vec::with_capacity(nb * n * d);
        let mut k_idx = Vec::with_capacity(nb * n * d);
        let mut v_idx = Vec::with_capacity(nb * n * d);
        let mut out_idx = vec![0; c * hw];
        for win in 0..nw {
            let pos: Vec<usize> = (0..n).map(|t| layout.position(win, t)).collect();
            for head in 0..heads {
                let batch = win * heads + head;
                for (t, &p) in pos.iter().enumerate() {
                    for e in 0..d {
                        let ch = head * d + e;
                        q_idx.push(ch * hw + p);
                        v_idx.push((2 * c + ch) * hw + p);
                        out_idx[ch * hw + p] = (batch * n + t) * d + e;
                    }
                }
                for e in 0..d {
                    let ch = head * d + e;
                    k_idx.extend(pos.iter().map(|&p| (c + ch) * hw + p));
                }
            }
        }
        let q = qkv.gather(&[nb, n, d], q_idx.into())?;
        let k_t = qkv.gather(&[nb, d, n], k_idx.into())?;
        let v = qkv.gather(&[nb, n, d], v_idx.into())?;

        let side = 2 * self.window - 1;
        let mut bias_idx = Vec::with_capacity(nb * n * n);
        for _ in 0..nw {
            for head in 0..heads {
                for a in 0..n {
                    for bb in 0..n {
                        bias_idx.push(head * side * side + relative_index(self.window, layout.window, a, bb));
                    }
                }
            }
        }
        let bias = b.param(self.rel_bias).gather(&[nb, n, n], bias_idx.into())?;

        let mut scores = q.bmm(k_t)?.scale(1.0 / (d as f64).sqrt())?.add(bias)?;
        if let Some(mask) = layout.mask() {
            let full: Vec<f64> = (0..nw)
                .flat_map(|win| {
                    let block = &mask[win * n * n..(win + 1) * n * n];
                    std::iter::repeat_n(block, heads).flatten().copied()
                })
                .collect();
            let mask = b.tape().constant(crate::Tensor::new(&[nb, n, n], full)?);
            scores = scores.add(mask)?;
        }
        let attn = scores.softmax(2)?;
        let merged = attn.bmm(v)?.gather(&[c, hw], Rc::from(out_idx))?;
        let out = self.proj.forward(b, merged)?.reshape(&[c, h, w])?;
        Ok((out, attn))
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, MLP_RATIO * channels),
            fc2: Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * channels, channels),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = self.fc1.forward_map(b, x)?.gelu()?;
        self.fc2.forward_map(b, h)
    }
}

/// `x + MSA(LN(x))` followed by `y + MLP(LN(y))`.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: ChannelNorm,
    pub attn: WindowAttention,
    pub norm2: ChannelNorm,
    pub mlp: Mlp,
    pub shifted: bool,
}

impl SwinBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, window: usize, shifted: bool) -> Self {
        SwinBlock {
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), channels),
            attn: WindowAttention::new(store, &format!("{name}.attn"), channels, heads, window),
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), channels),
            mlp: Mlp::new(store, &format!("{name}.mlp"), channels),
            shifted,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let a = self.attn.forward(b, self.norm1.forward(b, x)?, self.shifted)?;
        let x = a.add(x)?;
        let m = self.mlp.forward(b, self.norm2.forward(b, x)?)?;
        m.add(x)
    }
}

/// A regular-window block followed by a shifted-window block.
#[derive(Debug, Clone)]
pub struct SwinBlockPair {
    pub regular: SwinBlock,
    pub shifted: SwinBlock,
}

impl SwinBlockPair {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, window: usize) -> Self {
        SwinBlockPair {
            regular: SwinBlock::new(store, &format!("{name}.0"), channels, heads, window, false),
            shifted: SwinBlock::new(store, &format!("{name}.1"), channels, heads, window, true),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let x = self.regular.forward(b, x)?;
        self.shifted.forward(b, x)
    }
}

/// Splits a `[C×H×W]` image into non-overlapping `p×p` patches, projects
/// each and normalizes the result per position.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: ChannelNorm,
    pub patch: usize,
    pub in_channels: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, patch: usize, out_channels: usize) -> Self {
        PatchEmbed {
            proj: Linear::new(store, &format!("{name}.proj"), in_channels * patch * patch, out_channels),
            norm: ChannelNorm::new(store, &format!("{name}.norm"), out_channels),
            patch,
            in_channels,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, image: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = image.shape();
        let p = self.patch;
        if shape.len() != 3 || shape[0] != self.in_channels || !shape[1].is_multiple_of(p) || !shape[2].is_multiple_of(p) {
            return Err(TensorError::Layout(format!(
                "image {shape:?} cannot be cut into {p}×{p} patches of {} channels",
                self.in_channels
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (gh, gw) = (h / p, w / p);
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for a in 0..p {
                for bb in 0..p {
                    for i in 0..gh {
                        for j in 0..gw {
                            index.push((ch * h + i * p + a) * w + j * p + bb);
                        }
                    }
                }
            }
        }
        let patches = image.gather(&[c * p * p, gh * gw], index.into())?;
        let x = self.proj.forward(b, patches)?;
        self.norm.forward(b, x)?.reshape(&[self.proj.out_dim, gh, gw])
    }
}

/// Concatenates each 2×2 neighbourhood (4C), normalizes and projects to 2C.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: ChannelNorm,
    pub proj: Linear,
    pub channels: usize,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        PatchMerge {
            norm: ChannelNorm::new(store, &format!("{name}.norm"), 4 * channels),
            proj: Linear::new(store, &format!("{name}.proj"), 4 * channels, 2 * channels),
            channels,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.channels || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
            return Err(TensorError::Layout(format!("cannot merge {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut index = Vec::with_capacity(c * h * w);
        for a in 0..2 {
            for bb in 0..2 {
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            index.push((ch * h + 2 * i + a) * w + 2 * j + bb);
                        }
                    }
                }
            }
        }
        let stacked = x.gather(&[4 * c, oh * ow], index.into())?;
        let stacked = self.norm.forward(b, stacked)?;
        self.proj.forward(b, stacked)?.reshape(&[2 * c, oh, ow])
    }
}

/// Stride and width of every encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub patch: usize,
    pub base_channels: usize,
    pub window: usize,
    pub heads: usize,
}

impl StagePlan {
    pub fn strides(&self) -> [usize; 3] {
        [self.patch, self.patch * 2, self.patch * 4]
    }

    pub fn channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn shift(&self) -> usize {
        self.window / 2
    }

    /// Checks an input side against every stage's window tiling.
    pub fn validate(&self, size: usize) -> Result<(), TensorError> {
        if self.patch == 0 || self.window == 0 || self.heads == 0 {
            return Err(TensorError::Layout("patch, window and heads must be positive".into()));
        }
        for (stride, ch) in self.strides().into_iter().zip(self.channels()) {
            if !size.is_multiple_of(stride) {
                return Err(TensorError::Layout(format!("input side {size} not divisible by stride {stride}")));
            }
            WindowLayout::new(size / stride, size / stride, self.window, true)?;
            if ch % self.heads != 0 {
                return Err(TensorError::Layout(format!("{ch} channels not divisible by {} heads", self.heads)));
            }
        }
        Ok(())
    }
}

/// Encoder features at strides 4, 8 and 16.
#[derive(Clone, Copy, Debug)]
pub struct Features<'t> {
    pub r0: Var<'t>,
    pub r1: Var<'t>,
    pub r: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct SwinEncoder {
    pub plan: StagePlan,
    pub embed: PatchEmbed,
    pub stages: [SwinBlockPair; 3],
    pub merges: [PatchMerge; 2],
}

impl SwinEncoder {
    pub fn new(store: &mut ParamStore, in_channels: usize, plan: StagePlan) -> Self {
        let [c0, c1, c2] = plan.channels();
        let (heads, win) = (plan.heads, plan.window);
        SwinEncoder {
            plan,
            embed: PatchEmbed::new(store, "enc.embed", in_channels, plan.patch, c0),
            stages: [
                SwinBlockPair::new(store, "enc.stage0", c0, heads, win),
                SwinBlockPair::new(store, "enc.stage1", c1, heads, win),
                SwinBlockPair::new(store, "enc.stage2", c2, heads, win),
            ],
            merges: [PatchMerge::new(store, "enc.merge1", c0), PatchMerge::new(store, "enc.merge2", c1)],
        }
    }

    pub fn encode<'t>(&self, b: &Binder<'t>, image: Var<'t>) -> Result<Features<'t>, TensorError> {
        let x = self.embed.forward(b, image)?;
        let r0 = self.stages[0].forward(b, x)?;
        let r1 = self.stages[1].forward(b, self.merges[0].forward(b, r0)?)?;
        let r = self.stages[2].forward(b, self.merges[1].forward(b, r1)?)?;
        Ok(Features { r0, r1, r })
    }
}
