use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, TrainConfig};
use crate::augment::{strong_augment, weak_augment, StrongPolicy};
use crate::autograd::{checkpoint, Bound, ParamSet, Tape, Tensor, Var};
use crate::data::{generate_glyph_benchmark, load_benchmark, BatchIterator, Benchmark, Dataset};
use crate::image::GrayImage;
use crate::losses;
use crate::nets::{self, Architecture};
use crate::pseudo;
use crate::rng::SeededRng;

/// Polynomial decay `η0 · (1 − T/T_max)^0.9`.
pub fn lr_schedule(lr0: f64, t: usize, t_max: usize) -> Result<f64, HarnessError> {
    if t_max == 0 {
        return Err(HarnessError::Config(
            "t_max must be positive for the learning-rate schedule".into(),
        ));
    }
    if t > t_max {
        return Err(HarnessError::Config(format!("iteration {t} exceeds t_max {t_max}")));
    }
    Ok(lr0 * libm::pow(1.0 - t as f64 / t_max as f64, 0.9))
}

/// Loss values of one step. `total` is `l_cls + l_adv + l_u + λ·l_d`;
/// disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_cls: f64,
    pub l_adv: f64,
    pub l_u: f64,
    pub l_d: f64,
    pub total: f64,
    /// Fraction of the target batch that received a pseudo label.
    pub batch_mask_rate: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub l_cls: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_u: Option<f64>,
    pub l_d: Option<f64>,
    pub total: Option<f64>,
    /// Over the target-train set, unaugmented.
    pub mask_rate: f64,
    /// `None` when no target-train sample passes the threshold.
    pub purity: Option<f64>,
    pub source_acc: f64,
    pub target_acc: f64,
    pub lr: f64,
}

/// Weak and strong views of a target batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetViews {
    pub weak: Vec<GrayImage>,
    pub strong: Vec<GrayImage>,
}

/// Augments image `i` of the batch at `iteration` from the child stream
/// `aug_rng.fork_path([iteration, i])`: one draw for the flip, then the
/// strong plan. The strong view starts from the raw image.
pub fn augment_target(
    images: &[&GrayImage],
    policy: &StrongPolicy,
    aug_rng: &SeededRng,
    iteration: usize,
    need_strong: bool,
) -> TargetViews {
    let mut weak = Vec::with_capacity(images.len());
    let mut strong = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let mut r = aug_rng.fork_path(&[iteration as u64, i as u64]);
        weak.push(weak_augment(img, &mut r));
        if need_strong {
            strong.push(strong_augment(img, policy, &mut r));
        }
    }
    TargetViews { weak, strong }
}

fn needs_strong(cfg: &TrainConfig) -> bool {
    (cfg.use_lu && cfg.strong_in_lu) || (cfg.use_ld && cfg.strong_in_ld)
}

fn needs_target(cfg: &TrainConfig) -> bool {
    cfg.use_adv || cfg.use_lu || cfg.use_ld
}

/// A recorded forward pass of one training step.
pub struct StepGraph {
    pub tape: Tape,
    pub bound: Bound,
    /// Scalar whose gradient drives the update: `L_cls + L_u + λ·L_d − L_adv`
    /// with the gradient reversal in front of D, so D ascends L_adv while F
    /// descends it.
    pub objective: Var,
    pub losses: StepLosses,
    pub pseudo_labels: Vec<Option<usize>>,
}

fn forward_logits(
    tape: &mut Tape,
    bound: &Bound,
    arch: &Architecture,
    images: &[&GrayImage],
) -> Result<(Var, Var), HarnessError> {
    let x = tape.constant(nets::images_to_tensor(images, arch.height, arch.width)?);
    let f = nets::extract(tape, bound, arch, x)?;
    let z = nets::logits(tape, bound, arch, f)?;
    Ok((f, z))
}

/// Builds the step graph from explicit inputs.
pub fn build_step(
    params: &ParamSet,
    arch: &Architecture,
    cfg: &TrainConfig,
    src: &[&GrayImage],
    src_labels: &[usize],
    views: &TargetViews,
) -> Result<StepGraph, HarnessError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let (src_feat, src_logits) = forward_logits(&mut tape, &bound, arch, src)?;
    let l_cls = losses::cross_entropy(&mut tape, src_logits, src_labels)?;
    let mut objective = l_cls;
    let mut out = StepLosses {
        l_cls: tape.value(l_cls).item(),
        ..StepLosses::default()
    };
    let mut pseudo_labels = Vec::new();

    if needs_target(cfg) {
        let weak: Vec<&GrayImage> = views.weak.iter().collect();
        let (weak_feat, weak_logits) = forward_logits(&mut tape, &bound, arch, &weak)?;
        let weak_prob = tape.row_softmax(weak_logits)?;

        if cfg.use_adv {
            let zs = nets::disc_logits(&mut tape, &bound, arch, src_feat, true)?;
            let zt = nets::disc_logits(&mut tape, &bound, arch, weak_feat, true)?;
            let l_adv = losses::adversarial_loss_from_logits(&mut tape, zs, zt);
            out.l_adv = tape.value(l_adv).item();
            objective = tape.sub(objective, l_adv)?;
        }

        let strong_logits = if needs_strong(cfg) {
            let strong: Vec<&GrayImage> = views.strong.iter().collect();
            Some(forward_logits(&mut tape, &bound, arch, &strong)?.1)
        } else {
            None
        };

        pseudo_labels = pseudo::assign_pseudo_labels(tape.value(weak_prob), cfg.tau)?;
        out.batch_mask_rate =
            pseudo_labels.iter().filter(|p| p.is_some()).count() as f64 / pseudo_labels.len().max(1) as f64;

        if cfg.use_lu {
            let z = if cfg.strong_in_lu {
                strong_logits.expect("strong view computed")
            } else {
                weak_logits
            };
            let l_u = losses::consistency_loss(&mut tape, z, &pseudo_labels)?;
            out.l_u = tape.value(l_u).item();
            objective = tape.add(objective, l_u)?;
        }

        if cfg.use_ld {
            let other = if cfg.strong_in_ld {
                let z = strong_logits.expect("strong view computed");
                tape.row_softmax(z)?
            } else {
                weak_prob
            };
            let l_d = losses::discriminative_loss(&mut tape, weak_prob, other)?;
            out.l_d = tape.value(l_d).item();
            let weighted = tape.scale(l_d, cfg.lambda);
            objective = tape.add(objective, weighted)?;
        }
    }

    out.total = out.l_cls + out.l_adv + out.l_u + cfg.lambda * out.l_d;
    Ok(StepGraph {
        tape,
        bound,
        objective,
        losses: out,
        pseudo_labels,
    })
}

/// Class probabilities for `images`, computed in chunks without recording
/// gradients.
pub fn predict(params: &ParamSet, arch: &Architecture, images: &[GrayImage]) -> Result<Tensor, HarnessError> {
    let mut data = Vec::with_capacity(images.len() * arch.classes);
    for chunk in images.chunks(256) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let refs: Vec<&GrayImage> = chunk.iter().collect();
        let (_, z) = forward_logits(&mut tape, &bound, arch, &refs)?;
        let p = tape.row_softmax(z)?;
        data.extend_from_slice(tape.value(p).data());
    }
    Ok(Tensor::new(vec![images.len(), arch.classes], data)?)
}

/// Fraction of argmax-correct predictions, ties to the lowest class.
pub fn evaluate(params: &ParamSet, arch: &Architecture, data: &Dataset) -> Result<f64, HarnessError> {
    let labels = data.labels()?;
    if data.is_empty() {
        return Err(HarnessError::Config("cannot evaluate on an empty dataset".into()));
    }
    let probs = predict(params, arch, &data.images)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| pseudo::argmax(probs.row(i)).0 == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Generated or loaded data for `cfg`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<Benchmark, HarnessError> {
    Ok(match &cfg.data_dir {
        Some(dir) => load_benchmark(dir, cfg.image_size, cfg.image_size, cfg.classes)?,
        None => generate_glyph_benchmark(&cfg.glyph_spec(), &cfg.glyph_counts(), cfg.data_seed)?,
    })
}

/// Mutable state of a training run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    arch: Architecture,
    policy: StrongPolicy,
    data: &'a Benchmark,
    params: ParamSet,
    src_batches: BatchIterator,
    tgt_batches: BatchIterator,
    aug_rng: SeededRng,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Benchmark) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let arch = cfg.architecture();
        for (name, d) in data.splits() {
            if d.is_empty() {
                return Err(HarnessError::Config(format!("{name} is empty")));
            }
            if d.dims() != Some((arch.height, arch.width)) {
                return Err(HarnessError::Config(format!(
                    "{name} images are {:?}, expected {}×{}",
                    d.dims(),
                    arch.height,
                    arch.width
                )));
            }
        }
        data.source_train.labels()?;
        let root = SeededRng::new(cfg.seed);
        let params = nets::init_params(&arch, &mut root.fork(0));
        let src_batches = BatchIterator::new(data.source_train.len(), cfg.batch_size, root.fork(1).next_u64())?;
        let tgt_batches = BatchIterator::new(data.target_train.len(), cfg.batch_size, root.fork(2).next_u64())?;
        Ok(Self {
            cfg: cfg.clone(),
            arch,
            policy: cfg.policy(),
            data,
            params,
            src_batches,
            tgt_batches,
            aug_rng: root.fork(3),
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One SGD step on a fresh source batch and target batch.
    pub fn step(&mut self) -> Result<StepLosses, HarnessError> {
        let lr = lr_schedule(self.cfg.lr, self.iteration, self.cfg.t_max)?;
        let src_idx = self.src_batches.next_batch();
        let tgt_idx = self.tgt_batches.next_batch();
        let src_labels_all = self.data.source_train.labels()?;
        let src: Vec<&GrayImage> = src_idx.iter().map(|&i| &self.data.source_train.images[i]).collect();
        let src_labels: Vec<usize> = src_idx.iter().map(|&i| src_labels_all[i]).collect();
        let views = if needs_target(&self.cfg) {
            let tgt: Vec<&GrayImage> = tgt_idx.iter().map(|&i| &self.data.target_train.images[i]).collect();
            augment_target(
                &tgt,
                &self.policy,
                &self.aug_rng,
                self.iteration,
                needs_strong(&self.cfg),
            )
        } else {
            TargetViews {
                weak: Vec::new(),
                strong: Vec::new(),
            }
        };
        let graph = build_step(&self.params, &self.arch, &self.cfg, &src, &src_labels, &views)?;
        let l = graph.losses;
        if ![l.l_cls, l.l_adv, l.l_u, l.l_d, l.total].iter().all(|v| v.is_finite()) {
            return Err(HarnessError::NonFinite {
                iteration: self.iteration,
                losses: l,
            });
        }
        let mut grads = graph.tape.backward(graph.objective)?;
        let grads = graph.bound.collect(&mut grads);
        self.params.sgd_momentum_step(&grads, lr, self.cfg.momentum)?;
        self.iteration += 1;
        Ok(l)
    }

    /// Evaluation record at the current iteration. Target-train labels are
    /// read here and nowhere in the training path.
    pub fn record(&self, last: Option<StepLosses>) -> Result<MetricsRecord, HarnessError> {
        let tgt_train = predict(&self.params, &self.arch, &self.data.target_train.images)?;
        let mask_rate = pseudo::mask_rate(&tgt_train, self.cfg.tau)?;
        let purity = match self.data.target_train.labels() {
            Ok(truth) => pseudo::purity(&tgt_train, self.cfg.tau, truth)?,
            Err(_) => None,
        };
        let lr = if self.cfg.t_max == 0 {
            self.cfg.lr
        } else {
            lr_schedule(self.cfg.lr, self.iteration.min(self.cfg.t_max), self.cfg.t_max)?
        };
        Ok(MetricsRecord {
            iteration: self.iteration,
            l_cls: last.map(|l| l.l_cls),
            l_adv: last.map(|l| l.l_adv),
            l_u: last.map(|l| l.l_u),
            l_d: last.map(|l| l.l_d),
            total: last.map(|l| l.total),
            mask_rate,
            purity,
            source_acc: evaluate(&self.params, &self.arch, &self.data.source_test)?,
            target_acc: evaluate(&self.params, &self.arch, &self.data.target_test)?,
            lr,
        })
    }
}

/// Outcome of a single-seed run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub params: ParamSet,
    /// SHA-256 of the encoded final checkpoint.
    pub checkpoint_digest: String,
}

impl RunResult {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("at least the iteration-0 record")
    }
}

/// Trains for `t_max` iterations, recording metrics at iteration 0, every
/// `eval_interval` iterations and at the end. With `out_dir`, writes
/// `metrics.jsonl`, `checkpoint.bin` and `config.toml` there.
pub fn run_experiment(cfg: &TrainConfig, data: &Benchmark, out_dir: Option<&Path>) -> Result<RunResult, HarnessError> {
    let mut trainer = Trainer::new(cfg, data)?;
    let mut sink = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            fs::write(dir.join("config.toml"), cfg.to_toml_string()).map_err(|e| HarnessError::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?, path))
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut emit = |rec: MetricsRecord| -> Result<(), HarnessError> {
        if let Some((file, path)) = sink.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(file, "{line}").map_err(|e| HarnessError::io(path, e))?;
        }
        records.push(rec);
        Ok(())
    };
    emit(trainer.record(None)?)?;
    while trainer.iteration() < cfg.t_max {
        let last = trainer.step()?;
        let it = trainer.iteration();
        if it % cfg.eval_interval == 0 || it == cfg.t_max {
            emit(trainer.record(Some(last))?)?;
        }
    }
    let params = trainer.params().clone();
    if let Some(dir) = out_dir {
        checkpoint::save(&params, &dir.join("checkpoint.bin"))?;
    }
    Ok(RunResult {
        records,
        checkpoint_digest: checkpoint::digest(&params),
        params,
    })
}

/// Mean and sample standard deviation of final accuracies over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub target_acc: Vec<f64>,
    pub source_acc: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub source_mean: f64,
    pub source_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SeedSummary {
    pub fn from_runs(seeds: &[u64], runs: &[RunResult]) -> Self {
        let target_acc: Vec<f64> = runs.iter().map(|r| r.last().target_acc).collect();
        let source_acc: Vec<f64> = runs.iter().map(|r| r.last().source_acc).collect();
        let (target_mean, target_std) = mean_std(&target_acc);
        let (source_mean, source_std) = mean_std(&source_acc);
        Self {
            seeds: seeds.to_vec(),
            target_acc,
            source_acc,
            target_mean,
            target_std,
            source_mean,
            source_std,
        }
    }
}

/// Runs `cfg` once per seed (overriding `cfg.seed`), writing each run under
/// `out_dir/seed-<k>` when given.
pub fn run_seeds(
    cfg: &TrainConfig,
    data: &Benchmark,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<(SeedSummary, Vec<RunResult>), HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Config("no seeds given".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        let dir = out_dir.map(|d| d.join(format!("seed-{seed}")));
        runs.push(run_experiment(&c, data, dir.as_deref())?);
    }
    Ok((SeedSummary::from_runs(seeds, &runs), runs))
}
