//! The finite-difference suite behind `dfen gradcheck`: every differentiable
//! op, each composed module and the full training loss, over many seeds.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{synthesize, SyntheticSpec};
use crate::decoder::{Decoder, DecoderPlan};
use crate::equalization::{Equalization, EqualizationFlags};
use crate::error::TensorError;
use crate::gradcheck::{GradCheck, GradCheckReport, DEFAULT_STEP};
use crate::losses::{total_loss, LossWeights};
use crate::model::{Dfen, ModelConfig};
use crate::ops::concat;
use crate::params::{Binder, Init, ParamStore};
use crate::parallel::Execution;
use crate::swin::{Features, SwinBlockPair};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Module,
    Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: CaseKind,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub tol: f64,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

type CaseFn = fn(u64, &ModelConfig) -> Result<GradCheckReport, TensorError>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces any output to a scalar with fixed random weights, so every
/// Jacobian entry contributes.
fn contract<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(out.tape().constant(w))?.sum()
}

fn check<F>(seed: u64, inputs: &[Tensor], f: F) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    GradCheck::new().run(inputs, |tape, xs| contract(f(tape, xs)?, seed))
}

fn unary(seed: u64, shape: &[usize], f: for<'t> fn(Var<'t>) -> Result<Var<'t>, TensorError>) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check(seed, &[rand_tensor(&mut rng, shape, -1.5, 1.5)], |_, x| f(x[0]))
}

fn binary(
    seed: u64,
    shapes: [&[usize]; 2],
    f: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>, TensorError>,
) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, shapes[0], -1.5, 1.5);
    let b = rand_tensor(&mut rng, shapes[1], -1.5, 1.5);
    check(seed, &[a, b], |_, x| f(x[0], x[1]))
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let checked = a.checked + b.checked;
    let mut worst = if b.max_rel_error > a.max_rel_error { b } else { a };
    worst.checked = checked;
    worst
}

const OP_CASES: &[(&str, CaseFn)] = &[
    ("add", |s, _| binary(s, [&[3, 4], &[3, 4]], |a, b| a.add(b))),
    ("sub", |s, _| binary(s, [&[3, 4], &[3, 4]], |a, b| a.sub(b))),
    ("mul", |s, _| binary(s, [&[3, 4], &[3, 4]], |a, b| a.mul(b))),
    ("div", |s, _| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let a = rand_tensor(&mut rng, &[3, 4], -1.5, 1.5);
        let b = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        check(s, &[a, b], |_, x| x[0].div(x[1]))
    }),
    ("scale", |s, _| unary(s, &[2, 5], |x| x.scale(-1.7)?.add_scalar(0.3))),
    ("add_bias", |s, _| {
        let r0 = binary(s, [&[3, 4], &[3]], |a, b| a.add_bias(b, 0))?;
        let r1 = binary(s, [&[3, 4], &[4]], |a, b| a.add_bias(b, 1))?;
        Ok(merge(r0, r1))
    }),
    ("matmul", |s, _| binary(s, [&[3, 4], &[4, 5]], |a, b| a.matmul(b))),
    ("bmm", |s, _| binary(s, [&[2, 3, 4], &[2, 4, 2]], |a, b| a.bmm(b))),
    ("gather", |s, _| {
        unary(s, &[2, 3], |x| {
            let index: Rc<[usize]> = Rc::from(vec![5, 0, 0, 3, 1, 5, 2]);
            x.gather(&[7], index)
        })
    }),
    ("reshape", |s, _| unary(s, &[2, 6], |x| x.reshape(&[3, 4])?.mul(x.reshape(&[3, 4])?))),
    ("permute", |s, _| unary(s, &[2, 3, 4], |x| x.permute(&[2, 0, 1]))),
    ("transpose", |s, _| unary(s, &[3, 5], |x| x.transpose())),
    ("softmax", |s, _| Ok(merge(unary(s, &[3, 4], |x| x.softmax(0))?, unary(s, &[3, 4], |x| x.softmax(1))?))),
    ("log_softmax", |s, _| {
        Ok(merge(unary(s, &[3, 4], |x| x.log_softmax(0))?, unary(s, &[3, 4], |x| x.log_softmax(1))?))
    }),
    ("layer_norm", |s, _| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = rand_tensor(&mut rng, &[4, 5], -1.5, 1.5);
        let g = rand_tensor(&mut rng, &[4], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        check(s, &[x, g, b], |_, v| v[0].layer_norm(v[1], v[2], 0, 1e-5))
    }),
    ("gelu", |s, _| unary(s, &[3, 5], |x| x.gelu())),
    ("conv2d", |s, _| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = rand_tensor(&mut rng, &[2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        check(s, &[x, w, b], |_, v| v[0].conv2d(v[1], v[2]))
    }),
    ("sum_axis", |s, _| Ok(merge(unary(s, &[3, 4], |x| x.sum_axis(0))?, unary(s, &[3, 4], |x| x.sum_axis(1))?))),
    ("mean", |s, _| unary(s, &[3, 4], |x| x.mean())),
    ("gap_mean", |s, _| unary(s, &[3, 4, 4], |x| x.gap_mean())),
    ("upsample", |s, _| unary(s, &[2, 2, 3], |x| x.upsample(2))),
    ("concat", |s, _| {
        let r0 = binary(s, [&[2, 3], &[1, 3]], |a, b| concat(&[a, b, a], 0))?;
        let r1 = binary(s, [&[2, 3], &[2, 2]], |a, b| concat(&[b, a], 1))?;
        Ok(merge(r0, r1))
    }),
];

/// Checks parameters and the input of a module whose forward is `f`; the
/// input rides along as one more stored tensor.
fn module_check<F>(seed: u64, store: &ParamStore, input: Tensor, sample: usize, f: F, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&Binder<'t>, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let mut store = store.clone();
    let id = store.register("check.input", input.shape(), Init::Zeros);
    store.set(id, input)?;
    GradCheck::new()
        .step(h)
        .sample(sample, seed)
        .run_params(&store, |b| contract(f(b, b.param(id))?, seed))
}

const PARAM_SCALE: f64 = 0.3;

/// Step for the large composed programs. Their gradients span many
/// magnitudes and at the default step the rounding error of `f` swamps
/// entries near 1e-6. The equalization cases keep the default step: a larger
/// one can move a pixel across the class-routing argmax.
pub const MODULE_STEP: f64 = 3e-4;

const MODULE_CASES: &[(&str, CaseFn)] = &[
    ("swin_block_pair", |s, _| {
        let mut store = ParamStore::new(s);
        let block = SwinBlockPair::new(&mut store, "blk", 6, 3, 4);
        store.randomize(s, PARAM_SCALE);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = rand_tensor(&mut rng, &[6, 8, 8], -1.0, 1.0);
        module_check(s, &store, x, 6, |b, x| block.forward(b, x), MODULE_STEP)
    }),
    ("ilfem", |s, _| {
        let mut store = ParamStore::new(s);
        let eq = Equalization::new(&mut store, 6, 3, EqualizationFlags { ilfem: true, clfem: false });
        store.randomize(s, PARAM_SCALE);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let r = rand_tensor(&mut rng, &[6, 3, 3], -1.0, 1.0);
        module_check(s, &store, r, 12, |b, r| Ok(eq.ilfem(b, r)?.r_il), DEFAULT_STEP)
    }),
    ("clfem", |s, _| {
        let mut store = ParamStore::new(s);
        let eq = Equalization::new(&mut store, 6, 3, EqualizationFlags { ilfem: false, clfem: true });
        store.randomize(s, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let r = rand_tensor(&mut rng, &[6, 3, 3], -1.0, 1.0);
        module_check(s, &store, r, 12, |b, r| Ok(eq.clfem(b, r)?.r_cl), DEFAULT_STEP)
    }),
    ("equalization_fuse", |s, _| {
        let mut store = ParamStore::new(s);
        let eq = Equalization::new(&mut store, 6, 2, EqualizationFlags { ilfem: true, clfem: true });
        store.randomize(s, PARAM_SCALE);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let r = rand_tensor(&mut rng, &[6, 2, 2], -1.0, 1.0);
        module_check(s, &store, r, 8, |b, r| Ok(eq.forward(b, r, false)?.0), DEFAULT_STEP)
    }),
    ("decoder", |s, cfg| decoder_case(s, cfg, MODULE_STEP)),
];

/// Decoder parameters and the augmented input, at finite-difference step `h`.
pub fn decoder_case(s: u64, cfg: &ModelConfig, h: f64) -> Result<GradCheckReport, TensorError> {
    {
        let c0 = 8;
        let side = cfg.image_size / cfg.patch;
        let plan = DecoderPlan {
            base_channels: c0,
            concat_channels: c0,
            classes: cfg.classes,
            heads: 2,
            window: cfg.window,
            additive_up: true,
            concat_set: crate::decoder::ConcatSet::F123,
        };
        let mut store = ParamStore::new(s);
        let dec = Decoder::new(&mut store, plan);
        store.randomize(s, PARAM_SCALE);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let r0 = rand_tensor(&mut rng, &[c0, side, side], -1.0, 1.0);
        let r1 = rand_tensor(&mut rng, &[2 * c0, side / 2, side / 2], -1.0, 1.0);
        let r_aug = rand_tensor(&mut rng, &[4 * c0, side / 4, side / 4], -1.0, 1.0);
        module_check(s, &store, r_aug, 4, move |b, r_aug| {
            let t = b.tape();
            let feats = Features {
                r0: t.constant(r0.clone()),
                r1: t.constant(r1.clone()),
                r: r_aug,
            };
            dec.forward(b, &feats, r_aug)
        }, h)
    }
}

const LOSS_CASES: &[(&str, CaseFn)] = &[("total_loss", |s, cfg| {
    let mut store = ParamStore::new(s);
    let model = Dfen::new(*cfg, &mut store)?;
    store.randomize(s, 0.1);
    let spec = SyntheticSpec {
        n: 1,
        size: cfg.image_size,
        classes: cfg.classes,
        seed: s,
        ..SyntheticSpec::default()
    };
    let (sample, _) = synthesize(&spec, 0);
    GradCheck::new().step(MODULE_STEP).sample(1, s).run_params(&store, |b| {
        let logits = model.forward(b, b.tape().constant(sample.image.clone()))?;
        Ok(total_loss(logits, &sample.mask, LossWeights::default())?.total)
    })
})];

fn run_case(name: &'static str, kind: CaseKind, f: CaseFn, seeds: usize, cfg: &ModelConfig, exec: Execution) -> Result<CaseResult, TensorError> {
    let start = std::time::Instant::now();
    let reports = exec.map(seeds, |i| f(i as u64, cfg));
    let mut out = CaseResult {
        name,
        kind,
        seeds,
        checked: 0,
        max_rel_error: 0.0,
        worst_seed: 0,
        tol: crate::gradcheck::DEFAULT_TOL,
        seconds: start.elapsed().as_secs_f64(),
    };
    for (seed, r) in reports.into_iter().enumerate() {
        let r = r?;
        out.checked += r.checked;
        if r.max_rel_error > out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst_seed = seed as u64;
        }
    }
    Ok(out)
}

/// Runs every case over `seeds` seeds. The loss case uses `model` as given;
/// the module cases use small fixed widths.
pub fn gradcheck_suite(seeds: usize, model: &ModelConfig, exec: Execution) -> Result<Vec<CaseResult>, TensorError> {
    model.validate()?;
    let groups = [(CaseKind::Op, OP_CASES), (CaseKind::Module, MODULE_CASES), (CaseKind::Loss, LOSS_CASES)];
    let mut out = Vec::new();
    for (kind, cases) in groups {
        for &(name, f) in cases {
            out.push(run_case(name, kind, f, seeds, model, exec)?);
        }
    }
    Ok(out)
}
