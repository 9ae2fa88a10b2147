//! Training, evaluation and ablation drivers.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::config::{AblationGrid, DataSource, OptimizerKind, TrainConfig};
use crate::data::{gen_synthetic, load_dataset, select, SegSample, Split};
use crate::decoder::ConcatSet;
use crate::error::{Error, Result, TensorError};
use crate::losses::{total_loss, LossWeights};
use crate::metrics::{predict, Confusion, Scores};
use crate::model::Dfen;
use crate::optim::{Adam, Optimizer, Sgd};
use crate::params::{Binder, GradBuffer, ParamStore};
use crate::parallel::Execution;

pub const TRAIN_LOG: &str = "train.csv";
pub const STEP_LOG: &str = "steps.csv";
pub const TIMING_LOG: &str = "timing.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ABLATION_LOG: &str = "ablation.csv";

/// Forward (and optionally backward) result for one sample.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub pred: Vec<usize>,
    pub grads: Option<GradBuffer>,
}

pub fn sample_pass(
    model: &Dfen,
    store: &ParamStore,
    sample: &SegSample,
    weights: LossWeights,
    with_grad: bool,
) -> Result<SampleOutcome, TensorError> {
    let tape = Tape::new();
    let binder = if with_grad {
        Binder::trainable(&tape, store)
    } else {
        Binder::frozen(&tape, store)
    };
    let logits = model.forward(&binder, tape.constant(sample.image.clone()))?;
    let parts = total_loss(logits, &sample.mask, weights)?;
    let grads = if with_grad {
        let mut g = tape.backward(parts.total)?;
        Some(binder.collect(&mut g))
    } else {
        None
    };
    Ok(SampleOutcome {
        loss: parts.total.item(),
        ce: parts.ce,
        dice: parts.dice,
        pred: predict(&logits.value()),
        grads,
    })
}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// Mean of the per-sample losses.
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    /// Counts of the predictions made during the forward pass.
    pub confusion: Confusion,
}

/// One optimizer update on the mean loss of `batch`. Per-sample gradients are
/// summed in batch order whatever the execution mode.
pub fn train_step(
    model: &Dfen,
    store: &mut ParamStore,
    optimizer: &mut dyn Optimizer,
    batch: &[&SegSample],
    weights: LossWeights,
    exec: Execution,
) -> Result<StepReport, TensorError> {
    if batch.is_empty() {
        return Err(TensorError::Layout("empty batch".into()));
    }
    let frozen: &ParamStore = store;
    let outcomes = exec.map(batch.len(), |i| sample_pass(model, frozen, batch[i], weights, true));
    let n = batch.len() as f64;
    let mut total = GradBuffer::zeros_like(store);
    let mut report = StepReport {
        loss: 0.0,
        ce: 0.0,
        dice: 0.0,
        confusion: Confusion::new(model.config.classes),
    };
    for (outcome, sample) in outcomes.into_iter().zip(batch) {
        let o = outcome?;
        total.accumulate(o.grads.as_ref().expect("training pass keeps gradients"));
        report.loss += o.loss / n;
        report.ce += o.ce / n;
        report.dice += o.dice / n;
        report.confusion.record(&o.pred, &sample.mask)?;
    }
    total.scale(1.0 / n);
    optimizer.step(store, &total);
    if store.iter().any(|(_, _, v)| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "optimizer" });
    }
    Ok(report)
}

pub fn make_optimizer(config: &TrainConfig) -> Box<dyn Optimizer> {
    match config.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(config.lr)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: config.lr }),
    }
}

pub fn build_model(config: &TrainConfig) -> Result<(Dfen, ParamStore)> {
    let mut store = ParamStore::new(config.seed);
    let model = Dfen::new(config.model, &mut store)?;
    Ok((model, store))
}

/// The configured dataset, checked against the model's size and class count.
pub fn load_data(config: &TrainConfig) -> Result<Vec<SegSample>> {
    let samples = match &config.data {
        DataSource::Synthetic => gen_synthetic(&config.synthetic, config.execution)?,
        DataSource::Dir(dir) => load_dataset(dir, config.model.classes)?,
    };
    check_samples(config, &samples)?;
    Ok(samples)
}

/// Every sample must carry the model's image size and only known classes.
pub fn check_samples(config: &TrainConfig, samples: &[SegSample]) -> Result<()> {
    let size = config.model.image_size;
    for s in samples {
        s.validate(config.model.classes).map_err(Error::Config)?;
        if s.height() != size || s.width() != size {
            return Err(Error::Config(format!(
                "{} is {}×{}, the model expects {size}×{size}",
                s.id,
                s.height(),
                s.width()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub per_class: Vec<Scores>,
    pub mean: Scores,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Dfen,
    pub store: ParamStore,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

/// First line of every log: the loss weights and the run identity.
pub fn log_header(kind: &str, config: &TrainConfig) -> String {
    format!(
        "# dfen {kind} alpha={} beta={} seed={} optimizer={} lr={}",
        config.loss.alpha, config.loss.beta, config.seed, config.optimizer, config.lr
    )
}

fn train_columns(classes: usize) -> String {
    let mut cols = String::from("epoch,step,loss,ce,dice");
    for c in 0..classes {
        write!(cols, ",dsc_{c},se_{c},sp_{c},acc_{c}").expect("write to string");
    }
    cols.push_str(",mean_dsc,mean_se,mean_sp,mean_acc");
    cols
}

fn train_row(e: &EpochLog) -> String {
    let mut row = format!("{},{},{},{},{}", e.epoch, e.step, e.loss, e.ce, e.dice);
    for s in e.per_class.iter().chain(std::iter::once(&e.mean)) {
        write!(row, ",{},{},{},{}", s.dsc, s.se, s.sp, s.acc).expect("write to string");
    }
    row
}

struct Logs {
    train: fs::File,
    steps: fs::File,
    timing: fs::File,
    dir: PathBuf,
}

impl Logs {
    fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: String| -> Result<fs::File> {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(header.as_bytes()).map_err(|e| Error::io(&path, e))?;
            Ok(f)
        };
        let head = log_header("train", config);
        Ok(Logs {
            train: open(TRAIN_LOG, format!("{head}\n{}\n", train_columns(config.model.classes)))?,
            steps: open(STEP_LOG, format!("{head}\nstep,epoch,loss,ce,dice\n"))?,
            timing: open(TIMING_LOG, "epoch,seconds\n".to_string())?,
            dir: dir.to_path_buf(),
        })
    }

    fn append(&mut self, which: &str, line: String) -> Result<()> {
        let file = match which {
            TRAIN_LOG => &mut self.train,
            STEP_LOG => &mut self.steps,
            _ => &mut self.timing,
        };
        writeln!(file, "{line}").map_err(|e| Error::io(self.dir.join(which), e))
    }
}

/// Trains on the train split of `samples`. With `out` set, writes logs and
/// checkpoints there.
pub fn train_model(config: &TrainConfig, samples: &[SegSample], out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    check_samples(config, samples)?;
    let train: Vec<&SegSample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("the dataset has no training samples".into()));
    }
    let (model, mut store) = build_model(config)?;
    let mut optimizer = make_optimizer(config);
    let mut logs = out.map(|dir| Logs::create(dir, config)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut confusion = Confusion::new(config.model.classes);
        let (mut loss, mut ce, mut dice) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| train[i]).collect();
            let report = train_step(&model, &mut store, optimizer.as_mut(), &batch, config.loss, config.execution)?;
            let share = batch.len() as f64 / train.len() as f64;
            loss += report.loss * share;
            ce += report.ce * share;
            dice += report.dice * share;
            confusion += &report.confusion;
            let log = StepLog {
                step: steps.len() + 1,
                epoch,
                loss: report.loss,
                ce: report.ce,
                dice: report.dice,
            };
            if let Some(logs) = logs.as_mut() {
                logs.append(STEP_LOG, format!("{},{},{},{},{}", log.step, log.epoch, log.loss, log.ce, log.dice))?;
            }
            steps.push(log);
        }
        let log = EpochLog {
            epoch,
            step: steps.len(),
            loss,
            ce,
            dice,
            per_class: (0..config.model.classes).map(|c| confusion.class_scores(c)).collect(),
            mean: confusion.mean_scores(),
            seconds: start.elapsed().as_secs_f64(),
        };
        if let (Some(logs), Some(dir)) = (logs.as_mut(), out) {
            logs.append(TRAIN_LOG, train_row(&log))?;
            logs.append(TIMING_LOG, format!("{},{}", epoch, log.seconds))?;
            if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
                checkpoint::save(&dir.join(CHECKPOINT_DIR), config, &store)?;
            }
        }
        epochs.push(log);
    }
    Ok(TrainOutcome {
        model,
        store,
        epochs,
        steps,
    })
}

/// Loads the configured data and trains, writing everything under `out`.
pub fn run_train(config: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = load_data(config)?;
    train_model(config, &samples, Some(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub confusion: Confusion,
    pub per_class: Vec<Scores>,
    pub mean: Scores,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:>8} {:>8} {:>8} {:>8}\n", "class", "DSC", "SE", "SP", "ACC");
        let rows = self
            .per_class
            .iter()
            .enumerate()
            .map(|(c, s)| (c.to_string(), s))
            .chain(std::iter::once(("mean".to_string(), &self.mean)));
        for (name, s) in rows {
            writeln!(out, "{name:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", s.dsc, s.se, s.sp, s.acc).expect("write to string");
        }
        out
    }
}

/// Scores pooled over all of `samples`.
pub fn evaluate(model: &Dfen, store: &ParamStore, samples: &[SegSample], weights: LossWeights, exec: Execution) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate: the split is empty".into()));
    }
    let outcomes = exec.map(samples.len(), |i| sample_pass(model, store, &samples[i], weights, false));
    let mut confusion = Confusion::new(model.config.classes);
    let mut loss = 0.0;
    for (o, s) in outcomes.into_iter().zip(samples) {
        let o = o?;
        loss += o.loss / samples.len() as f64;
        confusion.record(&o.pred, &s.mask)?;
    }
    Ok(EvalReport {
        samples: samples.len(),
        loss,
        per_class: (0..model.config.classes).map(|c| confusion.class_scores(c)).collect(),
        mean: confusion.mean_scores(),
        confusion,
    })
}

/// Evaluates a checkpoint on `config`'s data and eval split. The model
/// architecture always comes from the checkpoint.
pub fn run_eval(config: &TrainConfig, checkpoint_dir: &Path) -> Result<EvalReport> {
    let (saved, model, store) = checkpoint::load(checkpoint_dir)?;
    let mut config = config.clone();
    config.model = saved.model;
    config.synthetic.size = saved.model.image_size;
    config.synthetic.classes = saved.model.classes;
    config.validate()?;
    let samples = select(&load_data(&config)?, config.eval_split);
    evaluate(&model, &store, &samples, config.loss, config.execution)
}

/// One cell of an ablation grid, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub ilfem: bool,
    pub clfem: bool,
    pub concat_set: ConcatSet,
    pub loss: LossWeights,
    pub mean: Scores,
    pub per_seed_dsc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub grid: AblationGrid,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str, concat_set: ConcatSet) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.concat_set == concat_set)
    }

    pub fn to_csv(&self, config: &TrainConfig) -> String {
        let mut out = log_header("ablation", config);
        writeln!(out, " grid={} seeds={}", self.grid, config.ablate_seeds).expect("write to string");
        out.push_str("variant,ilfem,clfem,concat_set,alpha,beta,mean_dsc,mean_se,mean_sp,mean_acc");
        for k in 0..config.ablate_seeds {
            write!(out, ",dsc_seed{k}").expect("write to string");
        }
        out.push('\n');
        for r in &self.rows {
            let on = |b: bool| if b { "on" } else { "off" };
            write!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.variant,
                on(r.ilfem),
                on(r.clfem),
                r.concat_set,
                r.loss.alpha,
                r.loss.beta,
                r.mean.dsc,
                r.mean.se,
                r.mean.sp,
                r.mean.acc
            )
            .expect("write to string");
            for d in &r.per_seed_dsc {
                write!(out, ",{d}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

/// Equalization variants in grid order: name, ILFEM, CLFEM.
pub const MODULE_VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("ilfem", true, false),
    ("clfem", false, true),
    ("dfen", true, true),
];

/// The configurations of one grid, with their row labels.
pub fn ablation_cells(config: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut cells = Vec::new();
    match config.ablate_grid {
        AblationGrid::Modules => {
            for (name, ilfem, clfem) in MODULE_VARIANTS {
                for set in ConcatSet::ALL {
                    let mut c = config.clone();
                    c.model.ilfem = ilfem;
                    c.model.clfem = clfem;
                    c.model.concat_set = set;
                    cells.push((name.to_string(), c));
                }
            }
        }
        AblationGrid::LossWeights => {
            for w in LossWeights::sweep() {
                let mut c = config.clone();
                c.loss = w;
                cells.push((format!("alpha{}_beta{}", w.alpha, w.beta), c));
            }
        }
    }
    cells
}

/// Trains each cell for `ablate_seeds` model seeds (`seed`, `seed + 1`, ...)
/// and scores `eval` with the seed-averaged mean metrics.
pub fn ablate_cells(cells: Vec<(String, TrainConfig)>, samples: &[SegSample], eval: &[SegSample]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for (variant, cell) in cells {
        cell.validate()?;
        let mut per_seed_dsc = Vec::with_capacity(cell.ablate_seeds);
        let mut mean = Scores::default();
        for k in 0..cell.ablate_seeds as u64 {
            let mut run = cell.clone();
            run.seed = cell.seed + k;
            let trained = train_model(&run, samples, None)?;
            let report = evaluate(&trained.model, &trained.store, eval, run.loss, run.execution)?;
            per_seed_dsc.push(report.mean.dsc);
            let w = 1.0 / cell.ablate_seeds as f64;
            mean.dsc += report.mean.dsc * w;
            mean.se += report.mean.se * w;
            mean.sp += report.mean.sp * w;
            mean.acc += report.mean.acc * w;
        }
        rows.push(AblationRow {
            variant,
            ilfem: cell.model.ilfem,
            clfem: cell.model.clfem,
            concat_set: cell.model.concat_set,
            loss: cell.loss,
            mean,
            per_seed_dsc,
        });
    }
    Ok(rows)
}

/// Trains every cell of the configured grid on one fixed dataset and scores
/// the eval split. Writes `ablation.csv` under `out` when given.
pub fn run_ablate(config: &TrainConfig, out: Option<&Path>) -> Result<AblationReport> {
    config.validate()?;
    let cells = ablation_cells(config);
    for (_, c) in &cells {
        c.validate()?;
    }
    let samples = load_data(config)?;
    let eval = select(&samples, config.eval_split);
    if eval.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", config.eval_split)));
    }
    let report = AblationReport {
        grid: config.ablate_grid,
        rows: ablate_cells(cells, &samples, &eval)?,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ABLATION_LOG);
        fs::write(&path, report.to_csv(config)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
