//! Stage orchestration: masked-autoencoder pretraining per stage, buffer
//! sampling between stages, replay distillation in later stages, probe
//! fine-tuning, evaluation, and the multi-seed experiment driver.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bke::{self, Role, TokenBatch};
use crate::buffer::{self, MemoryBuffer};
use crate::config::{ExperimentConfig, FinetuneSection, TrainSection};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::mae::{self, MaeModel, ModelConfig};
use crate::metrics::{self, EvalReport};
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::tensor::{Tape, Tensor, Var};

/// One stage of the continual pretraining chain, with resolved paths.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub name: String,
    pub stage_index: u16,
    pub domain: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub fd: bool,
    pub buffer_in: Option<PathBuf>,
    pub buffer_out: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub checkpoint_out: PathBuf,
    pub seed: u64,
}

/// Optimization and loss hyperparameters shared by every stage.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_peak: f32,
    pub warmup_epochs: usize,
    pub adamw: AdamWConfig,
    pub gamma: f32,
    pub omega: f32,
    pub mask_rate: f32,
    pub alpha: f32,
    pub beta: f32,
    pub fd_weight: f32,
}

impl From<&TrainSection> for TrainConfig {
    fn from(t: &TrainSection) -> Self {
        TrainConfig {
            lr_peak: t.lr_peak,
            warmup_epochs: t.warmup_epochs,
            adamw: AdamWConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: 1e-8,
                weight_decay: t.weight_decay,
            },
            gamma: t.gamma,
            omega: t.omega,
            mask_rate: t.mask_rate,
            alpha: t.alpha,
            beta: t.beta,
            fd_weight: t.fd_weight,
        }
    }
}

/// One row of the per-epoch loss log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: String,
    pub epoch: usize,
    pub l_ssl: f64,
    pub l_fd: f64,
    pub lr: f32,
}

fn image_grid(model: &MaeModel, image: &Tensor) -> Result<mae::PatchGrid> {
    let cfg = &model.cfg;
    let volume = image
        .clone()
        .reshape(vec![cfg.image_h, cfg.image_w, cfg.channels])?;
    mae::patchify(&volume, cfg.patch)
}

/// Forward/backward over one mini-batch. Returns per-parameter gradients and
/// the batch-mean component losses. The teacher batch, when present, is
/// consumed as plain constant tensors: its rows are subsampled to each
/// sample's visible indices and never touch the gradient tape.
pub(crate) fn batch_gradients(
    model: &MaeModel,
    images: &[Tensor],
    cfg: &TrainConfig,
    teacher: Option<&TokenBatch>,
    rng: &mut ChaCha8Rng,
) -> Result<(BTreeMap<String, Tensor>, f64, f64)> {
    let tape = Tape::new();
    let vars = model.vars(&tape, true);
    let n = model.cfg.n_patches();

    let mut ssl_sum: Option<Var> = None;
    let mut student_vars = Vec::with_capacity(images.len());
    let mut teacher_views = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let grid = image_grid(model, image)?;
        let mask = mae::sample_mask(n, cfg.mask_rate, rng)?;
        let enc = model.encode(&tape, &vars, &grid, &mask.visible_idx)?;
        let dec = model.decode(&tape, &vars, enc, &mask)?;
        let x_m = grid.patches.gather_rows(&mask.masked_idx)?;
        let l = mae::loss_ssl(&tape, dec, &x_m)?;
        ssl_sum = Some(match ssl_sum {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        if let Some(t) = teacher {
            teacher_views.push(t.samples[i].gather_rows(&mask.visible_idx)?);
            student_vars.push(enc);
        }
    }
    let ssl = tape.scale(ssl_sum.expect("nonempty batch"), 1.0 / images.len() as f32);

    let (total, fd_value) = if teacher.is_some() {
        let teacher_batch = TokenBatch::new(teacher_views, Role::Teacher)?;
        let student_values: Vec<Tensor> =
            student_vars.iter().map(|&v| tape.value(v)).collect();
        let student_batch = TokenBatch::new(student_values, Role::Student)?;
        let affinity = bke::similarity_matrix(&teacher_batch, &student_batch)?;
        let ahat = bke::normalize_affinity(&affinity)?;
        let q = bke::ensemble_closed_form(&ahat, &teacher_batch, cfg.omega)?;
        let fd = bke::loss_fd(&tape, &q, &student_vars, cfg.gamma)?;
        let fd_value = tape.value(fd).item() as f64;
        (tape.add(ssl, tape.scale(fd, cfg.fd_weight))?, fd_value)
    } else {
        (ssl, 0.0)
    };

    let ssl_value = tape.value(ssl).item() as f64;
    let total_value = tape.value(total).item();
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss (l_ssl={ssl_value}, l_fd={fd_value})"
        )));
    }

    let grads = tape.backward(total)?;
    let mut grad_map = BTreeMap::new();
    for (name, &var) in &vars {
        if let Some(g) = grads.wrt(var) {
            grad_map.insert(name.clone(), g.clone());
        }
    }
    Ok((grad_map, ssl_value, fd_value))
}

/// Extract full-sequence (unmasked) token features for every image.
pub fn extract_features(model: &MaeModel, images: &[Tensor]) -> Result<(Vec<Tensor>, Tensor)> {
    let n = model.cfg.n_patches();
    let e = model.cfg.embed_dim;
    let all_visible: Vec<usize> = (0..n).collect();
    let empty_mask = mae::MaskSpec {
        masked_idx: Vec::new(),
        visible_idx: all_visible,
        rate: 0.0,
    };
    let mut per_image = Vec::with_capacity(images.len());
    let mut pooled = Vec::with_capacity(images.len() * e);
    for image in images {
        let grid = image_grid(model, image)?;
        let (_, features) = model.forward(&grid, &empty_mask)?;
        for c in 0..e {
            let mean: f64 = (0..n).map(|t| features.data()[t * e + c] as f64).sum::<f64>()
                / n as f64;
            pooled.push(mean as f32);
        }
        per_image.push(features);
    }
    Ok((per_image, Tensor::new(vec![images.len(), e], pooled)?))
}

fn load_buffer_for(model: &MaeModel, path: &Path) -> Result<MemoryBuffer> {
    let buf = buffer::load(path)?;
    if buf.tokens() != model.cfg.n_patches() || buf.embed_dim() != model.cfg.embed_dim {
        return Err(Error::config(
            "/stages/buffer_in",
            format!(
                "buffer features are {}x{}, model expects {}x{}",
                buf.tokens(),
                buf.embed_dim(),
                model.cfg.n_patches(),
                model.cfg.embed_dim
            ),
        ));
    }
    Ok(buf)
}

/// Train one stage and write its checkpoint (and buffer, when requested).
/// Returns the trained model and the per-epoch loss log.
pub fn run_stage(
    plan: &StagePlan,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
) -> Result<(MaeModel, Vec<LossRow>)> {
    let train = dataset.filter_domain(plan.domain);
    if train.is_empty() {
        return Err(Error::State(format!(
            "stage {}: no images in domain {}",
            plan.name, plan.domain
        )));
    }
    let mut model = match &plan.init_from {
        Some(path) => MaeModel::load(path)?,
        None => MaeModel::init(model_cfg.clone(), plan.seed)?,
    };
    let replay = plan
        .buffer_in
        .as_ref()
        .map(|p| load_buffer_for(&model, p))
        .transpose()?;
    if plan.fd && replay.is_none() {
        return Err(Error::config(
            "/stages/buffer_in",
            format!("stage {} enables distillation without a buffer", plan.name),
        ));
    }

    let mut opt = AdamW::new(cfg.adamw.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(0x5747_u64));
    let mut rows = Vec::with_capacity(plan.epochs);
    let mut step = 0usize;
    for epoch in 0..plan.epochs {
        let lr = lr_schedule(epoch, plan.epochs, cfg.warmup_epochs, cfg.lr_peak);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut ssl_acc, mut fd_acc, mut batches) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(plan.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| train.images[i].clone()).collect();
            let teacher = match (&replay, plan.fd) {
                (Some(buf), true) => Some(buffer::replay_batch(buf, images.len(), rng.gen())?),
                _ => None,
            };
            let (grads, l_ssl, l_fd) =
                batch_gradients(&model, &images, cfg, teacher.as_ref(), &mut rng).map_err(
                    |e| match e {
                        Error::Numeric(msg) => Error::Numeric(format!(
                            "stage {} epoch {epoch} step {step}: {msg}",
                            plan.name
                        )),
                        other => other,
                    },
                )?;
            opt.step(&mut model.params, &grads, lr);
            ssl_acc += l_ssl;
            fd_acc += l_fd;
            batches += 1;
            step += 1;
        }
        let row = LossRow {
            stage: plan.name.clone(),
            epoch,
            l_ssl: ssl_acc / batches as f64,
            l_fd: fd_acc / batches as f64,
            lr,
        };
        info!(
            "stage {} epoch {}/{}: l_ssl={:.6} l_fd={:.6} lr={:.2e}",
            plan.name, epoch, plan.epochs, row.l_ssl, row.l_fd, row.lr
        );
        rows.push(row);
    }

    model.save(&plan.checkpoint_out)?;
    if let Some(out) = &plan.buffer_out {
        let (per_image, pooled) = extract_features(&model, &train.images)?;
        let buf = buffer::sample_buffer(
            &per_image,
            &pooled,
            cfg.alpha,
            cfg.beta,
            plan.stage_index,
            plan.seed,
        )?;
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        buffer::save(&buf, out)?;
    }
    Ok((model, rows))
}

/// Mean masked-reconstruction loss over a fixed image set with masks drawn
/// from a fixed seed, so different models are scored on identical inputs.
pub fn reconstruction_loss(model: &MaeModel, images: &[Tensor], mask_rate: f32, seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::contract("reconstruction_loss: empty image set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.cfg.n_patches();
    let mut total = 0.0f64;
    for image in images {
        let grid = image_grid(model, image)?;
        let mask = mae::sample_mask(n, mask_rate, &mut rng)?;
        let (y_m, _) = model.forward(&grid, &mask)?;
        let y_m = y_m.ok_or_else(|| Error::contract("reconstruction_loss: empty mask"))?;
        let x_m = grid.patches.gather_rows(&mask.masked_idx)?;
        let mse: f64 = y_m
            .data()
            .iter()
            .zip(x_m.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / y_m.numel() as f64;
        total += mse;
    }
    Ok(total / images.len() as f64)
}

/// Encoder plus a one-hidden-layer classification head on mean-pooled
/// features.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub encoder: MaeModel,
    pub head: BTreeMap<String, Tensor>,
    pub n_classes: usize,
}

impl Classifier {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.encoder.save(&dir.join("encoder"))?;
        crate::io::write_param_dir(&dir.join("head"), &self.head)?;
        std::fs::write(
            dir.join("classes.json"),
            serde_json::to_string(&self.n_classes)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let encoder = MaeModel::load(&dir.join("encoder"))?;
        let head = crate::io::read_param_dir(&dir.join("head"))?;
        let n_classes: usize =
            serde_json::from_str(&std::fs::read_to_string(dir.join("classes.json"))?)?;
        for name in ["h1.w", "h1.b", "h2.w", "h2.b"] {
            if !head.contains_key(name) {
                return Err(Error::Format(format!("classifier missing head parameter {name}")));
            }
        }
        Ok(Classifier {
            encoder,
            head,
            n_classes,
        })
    }
}

fn head_logits(
    tape: &Tape,
    encoder: &MaeModel,
    enc_vars: &mae::ParamVars,
    head_vars: &BTreeMap<String, Var>,
    image: &Tensor,
) -> Result<Var> {
    let n = encoder.cfg.n_patches();
    let grid = image_grid(encoder, image)?;
    let all: Vec<usize> = (0..n).collect();
    let features = encoder.encode(tape, enc_vars, &grid, &all)?;
    let pool = tape.constant(Tensor::full(vec![1, n], 1.0 / n as f32));
    let pooled = tape.matmul(pool, features)?;
    let h = tape.matmul(pooled, head_vars["h1.w"])?;
    let h = mae::add_bias(tape, h, head_vars["h1.b"])?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, head_vars["h2.w"])?;
    mae::add_bias(tape, logits, head_vars["h2.b"])
}

/// Fine-tune encoder + head end-to-end with cross-entropy; returns the
/// classifier restored to the best-validation epoch and that epoch's index.
pub fn finetune_probe(
    encoder: &MaeModel,
    train: &Dataset,
    ft: &FinetuneSection,
    seed: u64,
) -> Result<(Classifier, usize)> {
    let n_classes = train.n_classes();
    if n_classes < 2 {
        return Err(Error::config(
            "/finetune",
            format!("labeled set has {n_classes} class(es); need at least 2"),
        ));
    }
    let stride = (1.0 / ft.val_fraction).round().max(2.0) as usize;
    let val_idx: Vec<usize> = (0..train.len()).filter(|i| i % stride == 0).collect();
    let fit_idx: Vec<usize> = (0..train.len()).filter(|i| i % stride != 0).collect();
    if val_idx.is_empty() || fit_idx.is_empty() {
        return Err(Error::config("/finetune/val_fraction", "split left a side empty"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xF1E7));
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    let e = encoder.cfg.embed_dim;
    let mut clf = Classifier {
        encoder: encoder.clone(),
        head: BTreeMap::new(),
        n_classes,
    };
    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::new(vec![r, c], (0..r * c).map(|_| normal.sample(rng)).collect())
            .expect("positive dims")
    };
    clf.head.insert("h1.w".into(), mat(&mut rng, e, ft.hidden_dim));
    clf.head.insert("h1.b".into(), Tensor::zeros(vec![1, ft.hidden_dim]));
    clf.head.insert("h2.w".into(), mat(&mut rng, ft.hidden_dim, n_classes));
    clf.head.insert("h2.b".into(), Tensor::zeros(vec![1, n_classes]));

    let mut opt = AdamW::new(AdamWConfig::default());
    let mut best: Option<(f64, usize, MaeModel, BTreeMap<String, Tensor>)> = None;
    for epoch in 0..ft.epochs {
        let mut order = fit_idx.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(ft.batch_size) {
            let tape = Tape::new();
            let enc_vars = clf.encoder.vars(&tape, true);
            let head_vars: BTreeMap<String, Var> = clf
                .head
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), true)))
                .collect();
            let mut loss_sum: Option<Var> = None;
            for &i in chunk {
                let logits = head_logits(&tape, &clf.encoder, &enc_vars, &head_vars, &train.images[i])?;
                let probs = tape.row_softmax(logits, None)?;
                let logp = tape.ln(probs);
                let mut pick = vec![0.0f32; n_classes];
                pick[train.labels[i]] = -1.0;
                let pick = tape.constant(Tensor::new(vec![1, n_classes], pick)?);
                let nll = tape.sum(tape.mul(logp, pick)?);
                loss_sum = Some(match loss_sum {
                    Some(acc) => tape.add(acc, nll)?,
                    None => nll,
                });
            }
            let loss = tape.scale(loss_sum.expect("nonempty chunk"), 1.0 / chunk.len() as f32);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite fine-tune loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let mut grad_map = BTreeMap::new();
            for (name, &var) in enc_vars.iter().chain(head_vars.iter()) {
                if let Some(g) = grads.wrt(var) {
                    grad_map.insert(name.clone(), g.clone());
                }
            }
            // Encoder and head share one optimizer; head names never collide
            // with encoder parameter names.
            let mut all_params = clf.encoder.params.clone();
            all_params.append(&mut clf.head.clone());
            opt.step(&mut all_params, &grad_map, ft.lr);
            for (name, value) in all_params {
                if clf.head.contains_key(&name) {
                    clf.head.insert(name, value);
                } else {
                    clf.encoder.params.insert(name, value);
                }
            }
        }

        let (preds, _) = predict(&clf, &val_idx.iter().map(|&i| train.images[i].clone()).collect::<Vec<_>>())?;
        let labels: Vec<usize> = val_idx.iter().map(|&i| train.labels[i]).collect();
        let acc = metrics::accuracy(&preds, &labels)?;
        info!("finetune epoch {epoch}: val acc {acc:.4}");
        let better = best.as_ref().map_or(true, |(b, _, _, _)| acc > *b);
        if better {
            best = Some((acc, epoch, clf.encoder.clone(), clf.head.clone()));
        }
    }
    let (_, best_epoch, enc, head) = best.expect("epochs >= 1");
    clf.encoder = enc;
    clf.head = head;
    Ok((clf, best_epoch))
}

/// Class predictions and per-class softmax scores for each image.
pub fn predict(clf: &Classifier, images: &[Tensor]) -> Result<(Vec<usize>, Vec<Vec<f32>>)> {
    let mut preds = Vec::with_capacity(images.len());
    let mut scores = Vec::with_capacity(images.len());
    for image in images {
        let tape = Tape::new();
        let enc_vars = clf.encoder.vars(&tape, false);
        let head_vars: BTreeMap<String, Var> = clf
            .head
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let logits = head_logits(&tape, &clf.encoder, &enc_vars, &head_vars, image)?;
        let probs = tape.value(tape.row_softmax(logits, None)?);
        let row = probs.data().to_vec();
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("n_classes >= 2");
        preds.push(argmax);
        scores.push(row);
    }
    Ok((preds, scores))
}

/// Score a classifier on a labeled test set.
pub fn evaluate(clf: &Classifier, test: &Dataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::contract("evaluate: empty test set"));
    }
    let (preds, scores) = predict(clf, &test.images)?;
    let n_classes = clf.n_classes;
    let acc = metrics::accuracy(&preds, &test.labels)?;
    let auc = if n_classes == 2 {
        let pos: Vec<f32> = scores.iter().map(|s| s[1]).collect();
        let bin: Vec<bool> = test.labels.iter().map(|&l| l == 1).collect();
        metrics::auc_binary(&pos, &bin)?
    } else {
        metrics::auc_macro_ovr(&scores, &test.labels, n_classes)?
    };
    let f1 = metrics::f1_score(&preds, &test.labels, n_classes)?;
    Ok(EvalReport {
        acc,
        auc,
        f1,
        per_class: metrics::per_class_breakdown(&preds, &test.labels, n_classes)?,
        n_test: test.len(),
        seeds: Vec::new(),
    })
}

/// Deterministic split: a fixed-seed permutation assigns round(len *
/// fraction) indices to the second (test) part. Shuffling decorrelates the
/// split from any label or domain ordering in the manifest.
pub fn split_train_test(ds: &Dataset, fraction: f32) -> (Dataset, Dataset) {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5EED));
    let n_test = ((ds.len() as f64) * fraction as f64).round() as usize;
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |keep: &[usize]| Dataset {
        images: keep.iter().map(|&i| ds.images[i].clone()).collect(),
        labels: keep.iter().map(|&i| ds.labels[i]).collect(),
        domains: keep.iter().map(|&i| ds.domains[i]).collect(),
    };
    (pick(&train_idx), pick(&test_idx))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: EvalReport,
    pub best_finetune_epoch: usize,
    /// Stage-1-domain reconstruction loss of the stage-1 model.
    pub stage1_d1_loss: f64,
    /// Same, measured on the final model.
    pub final_d1_loss: f64,
    /// final_d1_loss - stage1_d1_loss; lower is less forgetting.
    pub forgetting: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub std: f64,
}

fn aggregate(values: &[f64]) -> AggregateStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    AggregateStat { mean, std }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub per_seed: Vec<SeedOutcome>,
    pub acc: AggregateStat,
    pub auc: AggregateStat,
    pub f1: AggregateStat,
    pub forgetting: AggregateStat,
    pub seeds: Vec<u64>,
}

/// Mask seed for the forgetting probe: fixed so every model under
/// comparison reconstructs the same masked patches.
const EVAL_MASK_SEED: u64 = 0xE7A1;

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed{seed}"))
}

/// Resolve the i-th configured stage into concrete paths under the per-seed
/// output directory; buffer paths from the config are taken relative to it.
pub fn stage_plan(cfg: &ExperimentConfig, i: usize, seed: u64, out_dir: &Path) -> StagePlan {
    let sdir = seed_dir(out_dir, seed);
    let section = &cfg.stages[i];
    StagePlan {
        name: section.name.clone(),
        stage_index: i as u16 + 1,
        domain: section.domain,
        epochs: section.epochs,
        batch_size: section.batch_size,
        fd: section.fd,
        buffer_in: section.buffer_in.as_ref().map(|p| sdir.join(p)),
        buffer_out: section.buffer_out.as_ref().map(|p| sdir.join(p)),
        init_from: (i > 0).then(|| sdir.join(format!("{}.ckpt", cfg.stages[i - 1].name))),
        checkpoint_out: sdir.join(format!("{}.ckpt", section.name)),
        seed,
    }
}

fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Run the full stage chain, fine-tune, and evaluate for one seed.
pub fn run_seed(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<SeedOutcome> {
    let dataset = data::ingest(
        Path::new(&cfg.data.dir),
        Some((cfg.model.image_h, cfg.model.image_w)),
    )?;
    let (train, test) = split_train_test(&dataset, cfg.eval.test_fraction);
    let tc = TrainConfig::from(&cfg.train);
    let sdir = seed_dir(out_dir, seed);
    std::fs::create_dir_all(&sdir)?;

    let d1 = cfg.stages[0].domain;
    let d1_probe = test.filter_domain(d1);
    let mut rows = Vec::new();
    let mut stage1_d1_loss = 0.0;
    let mut final_model = None;
    for i in 0..cfg.stages.len() {
        let plan = stage_plan(cfg, i, seed, out_dir);
        let (model, stage_rows) = run_stage(&plan, &tc, &cfg.model, &train)?;
        rows.extend(stage_rows);
        if i == 0 {
            stage1_d1_loss =
                reconstruction_loss(&model, &d1_probe.images, tc.mask_rate, EVAL_MASK_SEED)?;
        }
        final_model = Some(model);
    }
    let final_model = final_model.expect("at least one stage");
    let final_d1_loss =
        reconstruction_loss(&final_model, &d1_probe.images, tc.mask_rate, EVAL_MASK_SEED)?;
    write_loss_csv(&sdir.join("losses.csv"), &rows)?;

    let ft_train = match cfg.eval.domain {
        Some(d) => train.filter_domain(d),
        None => train.clone(),
    };
    let (clf, best_epoch) = finetune_probe(&final_model, &ft_train, &cfg.finetune, seed)?;
    clf.save(&sdir.join("classifier"))?;
    let eval_set = match cfg.eval.domain {
        Some(d) => test.filter_domain(d),
        None => test,
    };
    let mut report = evaluate(&clf, &eval_set)?;
    report.seeds = vec![seed];
    Ok(SeedOutcome {
        seed,
        forgetting: final_d1_loss - stage1_d1_loss,
        stage1_d1_loss,
        final_d1_loss,
        best_finetune_epoch: best_epoch,
        report,
    })
}

/// Run every configured seed, aggregate, and write `metrics.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        info!("running seed {seed}");
        per_seed.push(run_seed(cfg, out_dir, seed)?);
    }
    let grab = |f: fn(&SeedOutcome) -> f64| {
        aggregate(&per_seed.iter().map(f).collect::<Vec<_>>())
    };
    let report = ExperimentReport {
        acc: grab(|s| s.report.acc),
        auc: grab(|s| s.report.auc),
        f1: grab(|s| s.report.f1),
        forgetting: grab(|s| s.forgetting),
        seeds: cfg.seeds.clone(),
        per_seed,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch: 4,
            embed_dim: 8,
            depth: 1,
            decoder_depth: 1,
            hidden_mult: 2,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            lr_peak: 1e-3,
            warmup_epochs: 1,
            adamw: AdamWConfig::default(),
            gamma: 2.0,
            omega: 0.5,
            mask_rate: 0.5,
            alpha: 0.1,
            beta: 0.2,
            fd_weight: 1.0,
        }
    }

    fn tiny_dataset(dir: &Path, n: usize, seed: u64) -> Dataset {
        let spec = data::SynthDatasetSpec {
            n_images: n,
            height: 8,
            width: 8,
            n_classes: 2,
            domain1: data::WindowSpec::domain1_default(),
            domain2: data::WindowSpec::domain2_default(),
            seed,
        };
        data::generate_synth(&spec, dir, false).unwrap();
        data::ingest(dir, Some((8, 8))).unwrap()
    }

    fn plan(dir: &Path, name: &str, domain: u32) -> StagePlan {
        StagePlan {
            name: name.to_string(),
            stage_index: 1,
            domain,
            epochs: 2,
            batch_size: 4,
            fd: false,
            buffer_in: None,
            buffer_out: None,
            init_from: None,
            checkpoint_out: dir.join(format!("{name}.ckpt")),
            seed: 3,
        }
    }

    #[test]
    fn stage_smoke_writes_checkpoint_with_finite_losses() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 12, 1);
        let p = plan(dir.path(), "s1", 1);
        let (model, rows) = run_stage(&p, &tiny_train(), &tiny_model(), &ds).unwrap();
        assert!(p.checkpoint_out.join("arch.json").exists());
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.l_ssl.is_finite() && r.l_fd == 0.0));
        assert_eq!(model.cfg, tiny_model());
    }

    #[test]
    fn stage_is_bitwise_deterministic() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 12, 2);
        let mut pa = plan(dir.path(), "a", 1);
        let mut pb = plan(dir.path(), "b", 1);
        pa.buffer_out = Some(dir.path().join("a.rdlb"));
        pb.buffer_out = Some(dir.path().join("b.rdlb"));
        let (ma, _) = run_stage(&pa, &tiny_train(), &tiny_model(), &ds).unwrap();
        let (mb, _) = run_stage(&pb, &tiny_train(), &tiny_model(), &ds).unwrap();
        for (name, ta) in &ma.params {
            let tb = &mb.params[name];
            assert_eq!(
                ta.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                tb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "param {name} differs"
            );
        }
        assert_eq!(
            std::fs::read(dir.path().join("a.rdlb")).unwrap(),
            std::fs::read(dir.path().join("b.rdlb")).unwrap()
        );
    }

    #[test]
    fn checkpoint_chain_preserves_reconstruction_loss() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 12, 3);
        let p1 = plan(dir.path(), "s1", 1);
        let (m1, _) = run_stage(&p1, &tiny_train(), &tiny_model(), &ds).unwrap();
        let d1 = ds.filter_domain(1);
        let before = reconstruction_loss(&m1, &d1.images, 0.5, 99).unwrap();
        // A warm-started stage must begin exactly where the previous ended.
        let m2 = MaeModel::load(&p1.checkpoint_out).unwrap();
        let after = reconstruction_loss(&m2, &d1.images, 0.5, 99).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn fd_stage_trains_against_replay_buffer() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 20, 4);
        let cfg = tiny_train();
        let mut p1 = plan(dir.path(), "s1", 1);
        p1.buffer_out = Some(dir.path().join("buf.rdlb"));
        run_stage(&p1, &cfg, &tiny_model(), &ds).unwrap();

        let mut p2 = plan(dir.path(), "s2", 2);
        p2.fd = true;
        p2.buffer_in = Some(dir.path().join("buf.rdlb"));
        p2.init_from = Some(p1.checkpoint_out.clone());
        let (_, rows) = run_stage(&p2, &cfg, &tiny_model(), &ds).unwrap();
        assert!(rows.iter().all(|r| r.l_fd.is_finite() && r.l_fd > 0.0));
    }

    #[test]
    fn fd_with_mismatched_buffer_is_config_error() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 12, 5);
        // Buffer sampled from a model with a different embedding width.
        let narrow = ModelConfig {
            embed_dim: 4,
            ..tiny_model()
        };
        let other = MaeModel::init(narrow, 0).unwrap();
        let d1 = ds.filter_domain(1);
        let (per_image, pooled) = extract_features(&other, &d1.images).unwrap();
        let buf = buffer::sample_buffer(&per_image, &pooled, 0.2, 0.4, 1, 0).unwrap();
        let path = dir.path().join("bad.rdlb");
        buffer::save(&buf, &path).unwrap();

        let mut p = plan(dir.path(), "s2", 2);
        p.fd = true;
        p.buffer_in = Some(path);
        let err = run_stage(&p, &tiny_train(), &tiny_model(), &ds).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn without_distillation_gradients_are_ssl_only() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 8, 6);
        let model = MaeModel::init(tiny_model(), 0).unwrap();
        let cfg = tiny_train();
        let images = &ds.filter_domain(1).images[..4];

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (grads, _, fd) =
            batch_gradients(&model, images, &cfg, None, &mut rng).unwrap();
        assert_eq!(fd, 0.0);

        // Manual L_SSL-only rebuild with the same mask stream.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tape = Tape::new();
        let vars = model.vars(&tape, true);
        let n = model.cfg.n_patches();
        let mut sum: Option<Var> = None;
        for image in images {
            let grid = image_grid(&model, image).unwrap();
            let mask = mae::sample_mask(n, cfg.mask_rate, &mut rng).unwrap();
            let enc = model.encode(&tape, &vars, &grid, &mask.visible_idx).unwrap();
            let dec = model.decode(&tape, &vars, enc, &mask).unwrap();
            let x_m = grid.patches.gather_rows(&mask.masked_idx).unwrap();
            let l = mae::loss_ssl(&tape, dec, &x_m).unwrap();
            sum = Some(match sum {
                Some(acc) => tape.add(acc, l).unwrap(),
                None => l,
            });
        }
        let loss = tape.scale(sum.unwrap(), 1.0 / images.len() as f32);
        let reference = tape.backward(loss).unwrap();
        for (name, &var) in &vars {
            let a = grads.get(name).unwrap();
            let b = reference.wrt(var).unwrap();
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "gradient for {name} differs"
            );
        }
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 25, 7);
        let (train, test) = split_train_test(&ds, 0.2);
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.len(), 10); // every 5th of 50 rows
        assert!(test.n_classes() == 2 && train.n_classes() == 2);
    }

    #[test]
    fn finetune_and_evaluate_produce_valid_report() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("data"), 16, 8);
        let encoder = MaeModel::init(tiny_model(), 0).unwrap();
        let ft = FinetuneSection {
            epochs: 2,
            lr: 0.001,
            batch_size: 8,
            hidden_dim: 8,
            val_fraction: 0.25,
        };
        let (train, test) = split_train_test(&ds, 0.25);
        let (clf, best_a) = finetune_probe(&encoder, &train, &ft, 5).unwrap();
        let (_, best_b) = finetune_probe(&encoder, &train, &ft, 5).unwrap();
        assert_eq!(best_a, best_b);
        let report = evaluate(&clf, &test).unwrap();
        for v in [report.acc, report.auc, report.f1] {
            assert!((0.0..=1.0).contains(&v), "{report:?}");
        }
        assert_eq!(report.n_test, test.len());

        let cdir = dir.path().join("clf");
        clf.save(&cdir).unwrap();
        let back = Classifier::load(&cdir).unwrap();
        let again = evaluate(&back, &test).unwrap();
        assert_eq!(report.acc, again.acc);
    }

    #[test]
    fn finetune_rejects_single_class() {
        let dir = tempdir().unwrap();
        let mut ds = tiny_dataset(&dir.path().join("data"), 8, 9);
        for l in &mut ds.labels {
            *l = 0;
        }
        let encoder = MaeModel::init(tiny_model(), 0).unwrap();
        let err = finetune_probe(&encoder, &ds, &FinetuneSection::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }
}
