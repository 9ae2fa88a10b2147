//! Image-level and class-level feature equalization.
//!
//! Both modules work on the deepest encoder map `R: [C×h×w]`.
//!
//! * Image level: a softmax-weighted global descriptor `G` is broadcast back,
//!   fused with `R` into `R_ci`, and refined by similarity attention between
//!   the pixels of `R` and `R_ci`, giving `R_il`.
//! * Class level: pixels are routed to their most probable class under a
//!   Z-way projection `D` of `R`; each class region is pooled into a prototype
//!   weighted by `softmax(D_c)`, prototypes are scattered back into `R_cc`, and
//!   the same similarity refinement gives `R_cl`.
//!
//! The class routing is an argmax and is not differentiated; gradients reach
//! `R` through the gathered features and through the pooling weights.

use std::path::Path;
use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result, TensorError};
use crate::nn::Linear;
use crate::ops::concat;
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

type OpResult<'t> = std::result::Result<Var<'t>, TensorError>;

fn map_dims(op: &'static str, x: Var<'_>) -> std::result::Result<(usize, usize, usize), TensorError> {
    match x.shape().as_slice() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(TensorError::shape(op, format!("expected C×h×w, got {s:?}"))),
    }
}

/// Softmax-weighted global pooling.
///
/// `score_w: [1×C]` and `score_b: [1]` produce one score per pixel; the softmax of
/// those scores over all pixels weights the pixel features. Returns `G: [C×1×1]`
/// and the `[1×hw]` weights.
pub fn gap_softmax<'t>(r: Var<'t>, score_w: Var<'t>, score_b: Var<'t>) -> std::result::Result<(Var<'t>, Var<'t>), TensorError> {
    let (c, h, w) = map_dims("gap_softmax", r)?;
    let flat = r.reshape(&[c, h * w])?;
    let weights = score_w.matmul(flat)?.add_bias(score_b, 0)?.softmax(1)?;
    let g = flat.matmul(weights.reshape(&[h * w, 1])?)?.reshape(&[c, 1, 1])?;
    Ok((g, weights))
}

/// `R_ci = conv1x1([R ; upsample(G)])` with `weight: [C×2C]`, `bias: [C]`.
pub fn ilfem_coarse<'t>(r: Var<'t>, g: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> OpResult<'t> {
    let (c, h, w) = map_dims("ilfem_coarse", r)?;
    if g.shape() != [c, 1, 1] || h != w {
        return Err(TensorError::shape(
            "ilfem_coarse",
            format!("R {:?} with G {:?}", r.shape(), g.shape()),
        ));
    }
    let stacked = concat(&[r, g.upsample(h)?], 0)?.reshape(&[2 * c, h * w])?;
    weight.matmul(stacked)?.add_bias(bias, 0)?.reshape(&[c, h, w])
}

/// Similarity refinement: `S = softmax(R_tok · X_tokᵀ / √C)` row-wise, then
/// `out = S · X_tok` laid back out as `[C×h×w]`. Returns `(out, S)`.
pub fn equalize_refine<'t>(r: Var<'t>, x: Var<'t>) -> std::result::Result<(Var<'t>, Var<'t>), TensorError> {
    let (c, h, w) = map_dims("equalize_refine", r)?;
    if x.shape() != [c, h, w] {
        return Err(TensorError::shape("equalize_refine", format!("{:?} vs {:?}", r.shape(), x.shape())));
    }
    let hw = h * w;
    let r_tok = r.reshape(&[c, hw])?.transpose()?;
    let x_cf = x.reshape(&[c, hw])?;
    let s = r_tok.matmul(x_cf)?.scale(1.0 / (c as f64).sqrt())?.softmax(1)?;
    let out = s.matmul(x_cf.transpose()?)?.transpose()?.reshape(&[c, h, w])?;
    Ok((out, s))
}

/// Pixels routed to one class.
#[derive(Clone, Debug)]
pub struct ClassRegion<'t> {
    pub class: usize,
    /// Flat `h×w` indices, ascending.
    pub pixels: Vec<usize>,
    /// `F_c: [N_c×C]`.
    pub features: Var<'t>,
    /// `D_c: [N_c]`, the winning probabilities.
    pub probs: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Partition<'t> {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Winning class per pixel.
    pub assignment: Vec<usize>,
    /// Non-empty regions in class order.
    pub regions: Vec<ClassRegion<'t>>,
}

impl Partition<'_> {
    pub fn count(&self, class: usize) -> usize {
        self.assignment.iter().filter(|&&a| a == class).count()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Splits the pixels of `r: [C×h×w]` by the argmax of `d: [Z×h×w]`.
pub fn class_partition<'t>(r: Var<'t>, d: Var<'t>) -> std::result::Result<Partition<'t>, TensorError> {
    let (c, h, w) = map_dims("class_partition", r)?;
    let (z, dh, dw) = map_dims("class_partition", d)?;
    if (dh, dw) != (h, w) {
        return Err(TensorError::shape("class_partition", format!("R {:?} vs D {:?}", r.shape(), d.shape())));
    }
    let hw = h * w;
    let dv = d.value();
    let assignment: Vec<usize> = (0..hw)
        .map(|p| argmax_lowest((0..z).map(|k| dv.data()[k * hw + p])))
        .collect();
    let mut regions = Vec::new();
    for class in 0..z {
        let pixels: Vec<usize> = (0..hw).filter(|&p| assignment[p] == class).collect();
        if pixels.is_empty() {
            continue;
        }
        let n = pixels.len();
        let feat_idx: Rc<[usize]> = pixels.iter().flat_map(|&p| (0..c).map(move |ch| ch * hw + p)).collect();
        let prob_idx: Rc<[usize]> = pixels.iter().map(|&p| class * hw + p).collect();
        regions.push(ClassRegion {
            class,
            features: r.gather(&[n, c], feat_idx)?,
            probs: d.gather(&[n], prob_idx)?,
            pixels,
        });
    }
    Ok(Partition {
        classes: z,
        height: h,
        width: w,
        assignment,
        regions,
    })
}

/// Prototype `R_c = Σ_i softmax(D_c)_i · F_c[i]`, shape `[1×C]`.
pub fn class_aggregate<'t>(features: Var<'t>, probs: Var<'t>) -> OpResult<'t> {
    let fs = features.shape();
    let n = probs.value().len();
    if fs.len() != 2 || fs[0] != n {
        return Err(TensorError::shape("class_aggregate", format!("F {fs:?} with {n} weights")));
    }
    let weights = probs.reshape(&[1, n])?.softmax(1)?;
    weights.matmul(features)
}

/// Writes each region's prototype at every one of its pixels, giving `R_cc: [C×h×w]`.
pub fn class_scatter<'t>(partition: &Partition<'t>, prototypes: &[Var<'t>]) -> OpResult<'t> {
    if prototypes.len() != partition.regions.len() || prototypes.is_empty() {
        return Err(TensorError::shape(
            "class_scatter",
            format!("{} prototypes for {} regions", prototypes.len(), partition.regions.len()),
        ));
    }
    let c = prototypes[0].shape()[1];
    let hw = partition.height * partition.width;
    let stacked = concat(prototypes, 0)?;
    let mut row_of_class = vec![usize::MAX; partition.classes];
    for (row, region) in partition.regions.iter().enumerate() {
        row_of_class[region.class] = row;
    }
    let index: Rc<[usize]> = (0..c)
        .flat_map(|ch| {
            let row_of_class = &row_of_class;
            partition.assignment.iter().map(move |&cls| row_of_class[cls] * c + ch)
        })
        .collect();
    debug_assert_eq!(index.len(), c * hw);
    stacked.gather(&[c, partition.height, partition.width], index)
}

/// Everything the class-level path computes for one map.
pub struct ClassLevel<'t> {
    pub d: Var<'t>,
    pub partition: Partition<'t>,
    pub prototypes: Vec<Var<'t>>,
    pub r_cc: Var<'t>,
    pub s_cl: Var<'t>,
    pub r_cl: Var<'t>,
}

/// Class-level equalization given the class probability map `d = softmax(proj(R))`.
pub fn clfem_with<'t>(r: Var<'t>, d: Var<'t>) -> std::result::Result<ClassLevel<'t>, TensorError> {
    let partition = class_partition(r, d)?;
    let prototypes = partition
        .regions
        .iter()
        .map(|reg| class_aggregate(reg.features, reg.probs))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let r_cc = class_scatter(&partition, &prototypes)?;
    let (r_cl, s_cl) = equalize_refine(r, r_cc)?;
    Ok(ClassLevel {
        d,
        partition,
        prototypes,
        r_cc,
        s_cl,
        r_cl,
    })
}

/// Everything the image-level path computes for one map.
pub struct ImageLevel<'t> {
    pub g: Var<'t>,
    pub r_ci: Var<'t>,
    pub s_il: Var<'t>,
    pub r_il: Var<'t>,
}

/// Image-level equalization with explicit parameters.
pub fn ilfem_with<'t>(
    r: Var<'t>,
    score: (Var<'t>, Var<'t>),
    coarse: (Var<'t>, Var<'t>),
) -> std::result::Result<ImageLevel<'t>, TensorError> {
    let (g, _) = gap_softmax(r, score.0, score.1)?;
    let r_ci = ilfem_coarse(r, g, coarse.0, coarse.1)?;
    let (r_il, s_il) = equalize_refine(r, r_ci)?;
    Ok(ImageLevel { g, r_ci, s_il, r_il })
}

/// `R_aug = conv1x1([R ; R_il ; R_cl])` over whichever branches are present.
pub fn fuse_augment<'t>(branches: &[Var<'t>], weight: Var<'t>, bias: Var<'t>) -> OpResult<'t> {
    let (c, h, w) = map_dims("fuse_augment", branches[0])?;
    let k = branches.len();
    let stacked = concat(branches, 0)?.reshape(&[k * c, h * w])?;
    weight.matmul(stacked)?.add_bias(bias, 0)?.reshape(&[c, h, w])
}

/// Which equalization branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EqualizationFlags {
    pub ilfem: bool,
    pub clfem: bool,
}

/// Learned parts of both equalization modules and the fusion.
#[derive(Debug, Clone)]
pub struct Equalization {
    pub flags: EqualizationFlags,
    pub channels: usize,
    pub classes: usize,
    pub gap_score: Option<Linear>,
    pub coarse: Option<Linear>,
    pub class_proj: Option<Linear>,
    pub fuse: Option<Linear>,
}

/// Intermediate products for one forward pass, as plain tensors.
#[derive(Debug, Clone, Default)]
pub struct EqualizationState {
    pub g: Option<Tensor>,
    pub r_ci: Option<Tensor>,
    pub s_il: Option<Tensor>,
    pub r_il: Option<Tensor>,
    pub d: Option<Tensor>,
    pub classes: Vec<ClassRecord>,
    pub r_cc: Option<Tensor>,
    pub s_cl: Option<Tensor>,
    pub r_cl: Option<Tensor>,
    pub r_aug: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ClassRecord {
    pub class: usize,
    pub count: usize,
    pub features: Tensor,
    pub probs: Tensor,
    pub prototype: Tensor,
}

impl EqualizationState {
    /// Writes every populated tensor as `<name>.dft1` under `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let named = [
            ("G", &self.g),
            ("R_ci", &self.r_ci),
            ("S_il", &self.s_il),
            ("R_il", &self.r_il),
            ("D", &self.d),
            ("R_cc", &self.r_cc),
            ("S_cl", &self.s_cl),
            ("R_cl", &self.r_cl),
            ("R_aug", &self.r_aug),
        ];
        for (name, t) in named {
            if let Some(t) = t {
                crate::dft1::write(&dir.join(format!("{name}.dft1")), t)?;
            }
        }
        for rec in &self.classes {
            crate::dft1::write(&dir.join(format!("F_{}.dft1", rec.class)), &rec.features)?;
            crate::dft1::write(&dir.join(format!("D_{}.dft1", rec.class)), &rec.probs)?;
            crate::dft1::write(&dir.join(format!("R_{}.dft1", rec.class)), &rec.prototype)?;
        }
        Ok(())
    }
}

impl Equalization {
    pub fn new(store: &mut ParamStore, channels: usize, classes: usize, flags: EqualizationFlags) -> Self {
        let c = channels;
        let branches = 1 + flags.ilfem as usize + flags.clfem as usize;
        Equalization {
            flags,
            channels,
            classes,
            gap_score: flags.ilfem.then(|| Linear::new(store, "eq.gap_score", c, 1)),
            coarse: flags.ilfem.then(|| Linear::new(store, "eq.coarse", 2 * c, c)),
            class_proj: flags.clfem.then(|| Linear::new(store, "eq.class_proj", c, classes)),
            fuse: (branches > 1).then(|| Linear::new(store, "eq.fuse", branches * c, c)),
        }
    }

    pub fn ilfem<'t>(&self, b: &Binder<'t>, r: Var<'t>) -> std::result::Result<ImageLevel<'t>, TensorError> {
        let (score, coarse) = self
            .gap_score
            .as_ref()
            .zip(self.coarse.as_ref())
            .ok_or_else(|| TensorError::Layout("image-level module is disabled".into()))?;
        ilfem_with(
            r,
            (b.param(score.weight), b.param(score.bias)),
            (b.param(coarse.weight), b.param(coarse.bias)),
        )
    }

    pub fn clfem<'t>(&self, b: &Binder<'t>, r: Var<'t>) -> std::result::Result<ClassLevel<'t>, TensorError> {
        let proj = self
            .class_proj
            .as_ref()
            .ok_or_else(|| TensorError::Layout("class-level module is disabled".into()))?;
        let d = proj.forward_map(b, r)?.softmax(0)?;
        clfem_with(r, d)
    }

    /// Produces `R_aug`; with both branches off it is `R` itself.
    pub fn forward<'t>(&self, b: &Binder<'t>, r: Var<'t>, keep_state: bool) -> std::result::Result<(Var<'t>, Option<EqualizationState>), TensorError> {
        let mut state = keep_state.then(EqualizationState::default);
        let mut branches = vec![r];
        if self.flags.ilfem {
            let il = self.ilfem(b, r)?;
            if let Some(s) = state.as_mut() {
                s.g = Some(il.g.value().as_ref().clone());
                s.r_ci = Some(il.r_ci.value().as_ref().clone());
                s.s_il = Some(il.s_il.value().as_ref().clone());
                s.r_il = Some(il.r_il.value().as_ref().clone());
            }
            branches.push(il.r_il);
        }
        if self.flags.clfem {
            let cl = self.clfem(b, r)?;
            if let Some(s) = state.as_mut() {
                s.d = Some(cl.d.value().as_ref().clone());
                s.classes = cl
                    .partition
                    .regions
                    .iter()
                    .zip(&cl.prototypes)
                    .map(|(reg, proto)| ClassRecord {
                        class: reg.class,
                        count: reg.pixels.len(),
                        features: reg.features.value().as_ref().clone(),
                        probs: reg.probs.value().as_ref().clone(),
                        prototype: proto.value().as_ref().clone(),
                    })
                    .collect();
                s.r_cc = Some(cl.r_cc.value().as_ref().clone());
                s.s_cl = Some(cl.s_cl.value().as_ref().clone());
                s.r_cl = Some(cl.r_cl.value().as_ref().clone());
            }
            branches.push(cl.r_cl);
        }
        let r_aug = match &self.fuse {
            Some(fuse) => fuse_augment(&branches, b.param(fuse.weight), b.param(fuse.bias))?,
            None => r,
        };
        if let Some(s) = state.as_mut() {
            s.r_aug = Some(r_aug.value().as_ref().clone());
        }
        Ok((r_aug, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn selector(c: usize, blocks: usize, pick: usize) -> Tensor {
        Tensor::from_fn(&[c, blocks * c], |i| {
            let (row, col) = (i / (blocks * c), i % (blocks * c));
            if col == pick * c + row { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn gap_softmax_cases() {
        let tape = Tape::new();
        let constant = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| (i / 4) as f64 + 0.5));
        let w = tape.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let bias = tape.constant(t(&[1], &[0.1]));
        let (g, _) = gap_softmax(constant, w, bias).unwrap();
        assert!(g.value().max_abs_diff(&t(&[3, 1, 1], &[0.5, 1.5, 2.5])) < 1e-15);

        let r = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| (i as f64).sin()));
        let zero_w = tape.constant(Tensor::zeros(&[1, 2]));
        let zero_b = tape.constant(Tensor::zeros(&[1]));
        let (g, weights) = gap_softmax(r, zero_w, zero_b).unwrap();
        assert_eq!(weights.value().data(), &[0.25; 4]);
        assert!(g.value().max_abs_diff(&r.gap_mean().unwrap().value()) < 1e-15);
    }

    #[test]
    fn gap_softmax_saturates_on_dominant_pixel() {
        let tape = Tape::new();
        // channel 0 doubles as the score source; pixel 2 carries a +1000 score
        let r = tape.constant(t(&[2, 2, 2], &[0.0, 0.0, 1000.0, 0.0, 1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let (g, _) = gap_softmax(r, w, tape.constant(Tensor::zeros(&[1]))).unwrap();
        assert!(g.value().max_abs_diff(&t(&[2, 1, 1], &[1000.0, 3.0])) < 1e-12);
    }

    #[test]
    fn ilfem_coarse_selectors() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.1));
        let g = tape.constant(t(&[3, 1, 1], &[7.0, 8.0, 9.0]));
        let zb = tape.constant(Tensor::zeros(&[3]));
        let keep_r = ilfem_coarse(r, g, tape.constant(selector(3, 2, 0)), zb).unwrap();
        assert_eq!(keep_r.value().as_ref(), r.value().as_ref());
        let keep_g = ilfem_coarse(r, g, tape.constant(selector(3, 2, 1)), zb).unwrap().value();
        assert_eq!(keep_g.shape(), &[3, 2, 2]);
        for ch in 0..3 {
            for p in 0..4 {
                assert_eq!(keep_g.data()[ch * 4 + p], 7.0 + ch as f64);
            }
        }
    }

    #[test]
    fn refine_single_pixel_is_identity() {
        let tape = Tape::new();
        let r = tape.constant(t(&[3, 1, 1], &[1.0, -2.0, 0.5]));
        let x = tape.constant(t(&[3, 1, 1], &[4.0, 5.0, 6.0]));
        let (out, s) = equalize_refine(r, x).unwrap();
        assert_eq!(s.value().data(), &[1.0]);
        assert_eq!(out.value().as_ref(), x.value().as_ref());
    }

    #[test]
    fn refine_identical_rows_mix_identically() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| (i * i) as f64));
        let xv = x.value();

        // zero rows: every score is 0, so S is uniform and each pixel is the mean of X
        let (out, s) = equalize_refine(tape.constant(Tensor::zeros(&[2, 2, 2])), x).unwrap();
        assert!(s.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let out = out.value();
        for ch in 0..2 {
            let mean: f64 = xv.data()[ch * 4..ch * 4 + 4].iter().sum::<f64>() / 4.0;
            for p in 0..4 {
                assert!((out.data()[ch * 4 + p] - mean).abs() < 1e-12);
            }
        }

        // identical non-zero rows: rows of S coincide, so all output pixels coincide
        let r = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 0.1 } else { -0.05 }));
        let out = equalize_refine(r, x).unwrap().0.value();
        for ch in 0..2 {
            for p in 0..4 {
                assert!((out.data()[ch * 4 + p] - out.data()[ch * 4]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_cases() {
        let tape = Tape::new();
        let r = tape.constant(t(&[1, 1, 2], &[3.0, 4.0]));
        let d = tape.constant(t(&[2, 1, 2], &[0.9, 0.2, 0.1, 0.8]));
        let p = class_partition(r, d).unwrap();
        assert_eq!((p.count(0), p.count(1)), (1, 1));
        assert_eq!(p.regions[1].probs.value().data(), &[0.8]);

        let uniform = tape.constant(Tensor::full(&[3, 1, 2], 1.0 / 3.0));
        let p = class_partition(r, uniform).unwrap();
        assert_eq!(p.assignment, vec![0, 0]);
        assert_eq!(p.regions.len(), 1);
    }

    #[test]
    fn aggregate_cases() {
        let tape = Tape::new();
        let f = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let proto = class_aggregate(f, tape.constant(t(&[1], &[0.37]))).unwrap();
        assert_eq!(proto.value().data(), &[1.0, 2.0, 3.0]);

        let f = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 6.0]));
        let proto = class_aggregate(f, tape.constant(t(&[2], &[0.6, 0.6]))).unwrap();
        assert!(proto.value().max_abs_diff(&t(&[1, 2], &[2.0, 4.0])) < 1e-15);
    }

    #[test]
    fn scatter_single_class_is_constant() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let d = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 0.7 } else { 0.3 }));
        let cl = clfem_with(r, d).unwrap();
        let rcc = cl.r_cc.value();
        let proto = cl.prototypes[0].value();
        for ch in 0..2 {
            for p in 0..4 {
                assert_eq!(rcc.data()[ch * 4 + p], proto.data()[ch]);
            }
        }
    }

    #[test]
    fn two_class_split_has_two_distinct_vectors() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| (i as f64 * 1.3).cos()));
        let d = tape.constant(t(&[2, 2, 2], &[0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.9, 0.9]));
        let cl = clfem_with(r, d).unwrap();
        let rcc = cl.r_cc.value();
        let mut vectors: Vec<[u64; 2]> = (0..4).map(|p| [rcc.data()[p].to_bits(), rcc.data()[4 + p].to_bits()]).collect();
        vectors.sort_unstable();
        vectors.dedup();
        assert_eq!(vectors.len(), 2);
    }

    #[test]
    fn degenerate_grid() {
        let tape = Tape::new();
        let r = tape.constant(t(&[3, 1, 1], &[0.2, -0.4, 1.1]));
        let d = tape.constant(t(&[2, 1, 1], &[0.3, 0.7]));
        let cl = clfem_with(r, d).unwrap();
        assert_eq!(cl.r_cc.value().as_ref(), r.value().as_ref());
        assert_eq!(cl.r_cl.value().as_ref(), r.value().as_ref());
    }

    #[test]
    fn fuse_selector_and_bias() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let a = tape.constant(Tensor::ones(&[2, 2, 2]));
        let c = tape.constant(Tensor::full(&[2, 2, 2], -3.0));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let out = fuse_augment(&[r, a, c], tape.constant(selector(2, 3, 0)), zb).unwrap();
        assert_eq!(out.value().as_ref(), r.value().as_ref());
        let out = fuse_augment(&[r, a, c], tape.constant(Tensor::zeros(&[2, 6])), tape.constant(t(&[2], &[0.5, -1.0]))).unwrap();
        assert_eq!(out.value().data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
    }
}
