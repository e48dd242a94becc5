use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{head_logits, prompt_logits};
use super::handle::{LinearHead, ModelHandle, ModelKind};
use super::loss::{bce_grad_logits, class_probs_from_logits, ClassProbs, PROB_EPS};
use super::optim::{scheduled_lr, AdamW};
use super::{MethodError, Result};
use crate::backbone::{AnyBackbone, EncoderBackbone, Matrix, PrefixConfig, PrefixParams, Tape, Transformer};
use crate::corpus::{DatasetSplit, RecExample};
use crate::evaluation::{compute_metrics, MetricsReport};
use crate::templates::{bind_verbalizer, render_concat, HardTemplate, Verbalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_len: usize,
    /// Scales `epochs` (few-shot protocol).
    #[serde(default = "one")]
    pub epoch_multiplier: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    /// Stops early after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_warmup() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            learning_rate: if kind == ModelKind::SoftPrefix { 5e-3 } else { 2e-5 },
            epochs: 3,
            batch_size: 16,
            seed: 0,
            max_len: 512,
            epoch_multiplier: 1,
            weight_decay: default_weight_decay(),
            warmup_fraction: default_warmup(),
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MethodError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.epoch_multiplier == 0 {
            return bad("epochs, batch_size and epoch_multiplier must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs * self.epoch_multiplier
    }
}

/// An example turned into token ids once, ahead of training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepared {
    pub ids: Vec<u32>,
    pub mask_position: usize,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub dev: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best dev F1, earliest on ties).
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub handle: ModelHandle,
    pub report: TrainReport,
}

/// Optimizer state and trainable parameters for one method. Full
/// fine-tuning owns a copy of the backbone weights; soft-prefix tuning only
/// reads the shared backbone.
pub struct Trainer {
    handle: ModelHandle,
    base: EncoderBackbone,
    net: Option<Transformer>,
    cfg: TrainConfig,
    optimizer: AdamW,
    decay: Vec<bool>,
    step: usize,
    total_steps: usize,
    frozen_digest: Option<String>,
}

impl Trainer {
    pub fn hard_prompt(
        backbone: &EncoderBackbone,
        template: &HardTemplate,
        verbalizer: &Verbalizer,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let binding = bind_verbalizer(verbalizer, backbone.tokenizer())?;
        let handle = ModelHandle {
            kind: ModelKind::HardPrompt,
            backbone: AnyBackbone::Encoder(backbone.clone()),
            template: Some(template.clone()),
            verbalizer: Some(verbalizer.clone()),
            binding: Some(binding),
            prefix: None,
            head: None,
            train_config: Some(cfg.clone()),
            max_len: cfg.max_len.min(backbone.max_len()),
        };
        Self::build(handle, backbone, cfg)
    }

    pub fn soft_prefix(
        backbone: &EncoderBackbone,
        template: &HardTemplate,
        verbalizer: &Verbalizer,
        prefix_cfg: &PrefixConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if prefix_cfg.length == 0 {
            return Err(MethodError::Config("soft-prefix training needs a prefix length of at least 1".into()));
        }
        let binding = bind_verbalizer(verbalizer, backbone.tokenizer())?;
        let prefix = PrefixParams::new(prefix_cfg, backbone, cfg.seed.wrapping_add(1))?;
        let handle = ModelHandle {
            kind: ModelKind::SoftPrefix,
            backbone: AnyBackbone::Encoder(backbone.clone()),
            template: Some(template.clone()),
            verbalizer: Some(verbalizer.clone()),
            binding: Some(binding),
            prefix: Some(prefix),
            head: None,
            train_config: Some(cfg.clone()),
            max_len: cfg.max_len.min(backbone.max_len()),
        };
        Self::build(handle, backbone, cfg)
    }

    pub fn baseline(backbone: &EncoderBackbone, cfg: &TrainConfig) -> Result<Self> {
        let handle = ModelHandle {
            kind: ModelKind::Baseline,
            backbone: AnyBackbone::Encoder(backbone.clone()),
            template: None,
            verbalizer: None,
            binding: None,
            prefix: None,
            head: Some(LinearHead::zeros(backbone.hidden_size())),
            train_config: Some(cfg.clone()),
            max_len: cfg.max_len.min(backbone.max_len()),
        };
        Self::build(handle, backbone, cfg)
    }

    fn build(handle: ModelHandle, backbone: &EncoderBackbone, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        handle.validate()?;
        let (net, frozen_digest) = match handle.kind {
            ModelKind::SoftPrefix => (None, Some(backbone.net().params.digest())),
            ModelKind::ZeroShot => return Err(MethodError::Config("zero-shot handles are not trained".into())),
            _ => {
                let mut net = backbone.net().clone();
                net.params.set_trainable_all(true);
                (Some(net), None)
            }
        };
        let mut t = Self {
            handle,
            base: backbone.clone(),
            net,
            cfg: cfg.clone(),
            optimizer: AdamW::new(&[], cfg.weight_decay),
            decay: Vec::new(),
            step: 0,
            total_steps: 1,
            frozen_digest,
        };
        let shapes: Vec<(usize, usize)> = t.params_mut().iter().map(|m| m.dim()).collect();
        t.decay = match (&t.net, t.handle.kind) {
            (Some(net), _) => {
                let mut d: Vec<bool> = net.params.ids().map(|id| net.params.decays(id)).collect();
                if t.handle.head.is_some() {
                    d.extend([true, false]);
                }
                d
            }
            // Prompt vectors are not decayed.
            (None, _) => vec![false; shapes.len()],
        };
        t.optimizer = AdamW::new(&shapes, cfg.weight_decay);
        Ok(t)
    }

    pub fn kind(&self) -> ModelKind {
        self.handle.kind
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Sets the horizon used by the warmup/decay schedule.
    pub fn set_total_steps(&mut self, total: usize) {
        self.total_steps = total.max(1);
    }

    fn net(&self) -> &Transformer {
        self.net.as_ref().unwrap_or_else(|| self.base.net())
    }

    /// Trainable tensors in a fixed order: backbone (registration order)
    /// then head, or the prefix matrices.
    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(net) = self.net.as_mut() {
            out.extend(net.params.iter_mut().map(|(_, m)| m));
        }
        if let Some(h) = self.handle.head.as_mut() {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        if let Some(p) = self.handle.prefix.as_mut() {
            out.extend(p.vectors.iter_mut());
        }
        out
    }

    fn snapshot(&mut self) -> Vec<Matrix> {
        self.params_mut().into_iter().map(|m| m.clone()).collect()
    }

    fn restore(&mut self, saved: Vec<Matrix>) {
        for (dst, src) in self.params_mut().into_iter().zip(saved) {
            *dst = src;
        }
    }

    pub fn prepare(&self, examples: &[RecExample]) -> Result<Vec<Prepared>> {
        examples
            .iter()
            .map(|ex| {
                if self.handle.kind == ModelKind::Baseline {
                    let (ids, _) = render_concat(ex, self.base.tokenizer(), self.handle.max_len)?;
                    Ok(Prepared {
                        ids,
                        mask_position: 0,
                        label: ex.label,
                    })
                } else {
                    let r = self.handle.render(ex)?;
                    Ok(Prepared {
                        ids: r.token_ids,
                        mask_position: r.mask_position,
                        label: ex.label,
                    })
                }
            })
            .collect()
    }

    /// Builds the logits graph. Returns the logits and the leaf variables
    /// that stand for trainable tensors outside the parameter store.
    fn logits<'t>(&'t self, tape: &mut Tape<'t>, p: &Prepared, train: bool) -> Result<(crate::backbone::Var, Vec<crate::backbone::Var>)> {
        let net = self.net();
        match self.handle.kind {
            ModelKind::Baseline => {
                let head = self.handle.head.as_ref().expect("baseline head");
                let w = tape.leaf(head.weight.clone(), train);
                let b = tape.leaf(head.bias.clone(), train);
                Ok((head_logits(net, tape, &p.ids, w, b)?, vec![w, b]))
            }
            _ => {
                let binding = self.handle.binding.as_ref().expect("prompt binding");
                let (slots, vars) = match &self.handle.prefix {
                    Some(prefix) => {
                        let (s, v) = prefix.on_tape(tape, net.num_layers(), train);
                        (Some(s), v)
                    }
                    None => (None, Vec::new()),
                };
                let l = prompt_logits(net, tape, &p.ids, p.mask_position, slots.as_deref(), binding)?;
                Ok((l, vars))
            }
        }
    }

    /// Loss and gradients (in [`Self::params_mut`] order) for one example.
    fn example_grad(&self, p: &Prepared) -> Result<(f64, Vec<Option<Matrix>>)> {
        let net = self.net();
        let mut tape = if self.net.is_some() {
            Tape::new(&net.params)
        } else {
            Tape::frozen(&net.params)
        };
        let (logits, leaves) = self.logits(&mut tape, p, true)?;
        let l = tape.value(logits);
        let (l0, l1) = (l[(0, 0)], l[(0, 1)]);
        let probs = class_probs_from_logits(l0, l1)?;
        let loss = -probs.of(p.label).max(PROB_EPS).ln();
        let g = bce_grad_logits(l0, l1, p.label)?;
        let grads = tape.backward_with(logits, Matrix::from_shape_vec((1, 2), g.to_vec()).expect("1x2"));
        let mut out: Vec<Option<Matrix>> = Vec::new();
        if self.net.is_some() {
            out.extend(grads.params.iter().cloned());
        }
        out.extend(leaves.iter().map(|v| grads.leaf(*v).cloned()));
        Ok((loss, out))
    }

    /// One optimizer step on the mean loss over `batch`. Per-example
    /// gradients are computed in parallel and summed in batch order.
    pub fn step(&mut self, batch: &[&Prepared]) -> Result<f64> {
        if batch.is_empty() {
            return Err(MethodError::Contract("empty batch".into()));
        }
        let n_params = self.decay.len();
        let mut acc: Vec<Option<Matrix>> = vec![None; n_params];
        let mut loss = 0.0;
        let chunk = rayon::current_num_threads().max(1);
        for group in batch.chunks(chunk) {
            let results: Vec<Result<(f64, Vec<Option<Matrix>>)>> =
                group.par_iter().map(|p| self.example_grad(p)).collect();
            for r in results {
                let (l, grads) = r.map_err(|e| MethodError::Training {
                    step: self.step,
                    message: e.to_string(),
                })?;
                loss += l;
                for (slot, g) in acc.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        match slot {
                            Some(a) => *a += &g,
                            None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(MethodError::Training {
                step: self.step,
                message: format!("non-finite loss {loss}"),
            });
        }
        for g in acc.iter_mut().flatten() {
            *g *= scale;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(MethodError::Training {
                    step: self.step,
                    message: "non-finite gradient".into(),
                });
            }
        }
        let warmup = (self.cfg.warmup_fraction * self.total_steps as f64).ceil() as usize;
        let lr = scheduled_lr(self.cfg.learning_rate, self.step, warmup, self.total_steps);
        let decay = self.decay.clone();
        let mut opt = std::mem::replace(&mut self.optimizer, AdamW::new(&[], 0.0));
        opt.step(&mut self.params_mut(), &acc, &decay, lr);
        self.optimizer = opt;
        self.step += 1;
        Ok(loss)
    }

    /// Class probabilities under the current parameters, in input order.
    pub fn probs(&self, prepared: &[Prepared]) -> Result<Vec<ClassProbs>> {
        prepared
            .par_iter()
            .map(|p| {
                let net = self.net();
                let mut tape = Tape::frozen(&net.params);
                let (logits, _) = self.logits(&mut tape, p, false)?;
                let l = tape.value(logits);
                class_probs_from_logits(l[(0, 0)], l[(0, 1)])
            })
            .collect()
    }

    pub fn evaluate(&self, prepared: &[Prepared]) -> Result<MetricsReport> {
        let preds: Vec<u8> = self.probs(prepared)?.iter().map(ClassProbs::label).collect();
        let golds: Vec<u8> = prepared.iter().map(|p| p.label).collect();
        compute_metrics(&preds, &golds).map_err(|e| MethodError::Contract(e.to_string()))
    }

    fn check_frozen(&self) -> Result<()> {
        if let Some(d) = &self.frozen_digest {
            if *d != self.base.net().params.digest() {
                return Err(MethodError::Invariant("backbone parameters changed during soft-prefix training".into()));
            }
        }
        Ok(())
    }

    /// Current parameters as a model handle.
    pub fn to_handle(&self) -> Result<ModelHandle> {
        self.check_frozen()?;
        let mut h = self.handle.clone();
        if let Some(net) = &self.net {
            h.backbone = AnyBackbone::Encoder(self.base.with_weights(net.clone())?);
        }
        Ok(h)
    }

    /// Runs the full schedule with per-epoch dev evaluation and keeps the
    /// parameters of the best dev-F1 epoch.
    pub fn fit(&mut self, train: &[Prepared], dev: &[Prepared]) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(MethodError::Contract("training split is empty".into()));
        }
        let bs = self.cfg.batch_size;
        let per_epoch = train.len().div_ceil(bs);
        let mut total = per_epoch * self.cfg.total_epochs();
        if let Some(cap) = self.cfg.max_steps {
            total = total.min(cap);
        }
        self.set_total_steps(total);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, Vec<Matrix>)> = None;
        for epoch in 0..self.cfg.total_epochs() {
            if self.step >= total {
                break;
            }
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            for idx in order.chunks(bs) {
                if self.step >= total {
                    break;
                }
                let batch: Vec<&Prepared> = idx.iter().map(|i| &train[*i]).collect();
                loss_sum += self.step(&batch)?;
                batches += 1;
            }
            let dev_metrics = if dev.is_empty() { None } else { Some(self.evaluate(dev)?) };
            let train_loss = loss_sum / batches.max(1) as f64;
            debug!("epoch {epoch}: loss {train_loss:.6} dev {:?}", dev_metrics.map(|m| m.f1));
            if let Some(m) = &dev_metrics {
                if best.as_ref().is_none_or(|(f1, _, _)| m.f1 > *f1) {
                    best = Some((m.f1, epoch, self.snapshot()));
                }
            }
            history.push(EpochRecord {
                epoch,
                steps: self.step,
                train_loss,
                dev: dev_metrics,
            });
        }
        let best_epoch = best.map(|(f1, epoch, saved)| {
            info!("keeping epoch {epoch} (dev F1 {f1:.4})");
            self.restore(saved);
            epoch
        });
        self.check_frozen()?;
        Ok(TrainReport {
            history,
            best_epoch,
            steps: self.step,
        })
    }
}

fn run(mut trainer: Trainer, train: &DatasetSplit, dev: &DatasetSplit) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(MethodError::Contract("training split is empty".into()));
    }
    let tp = trainer.prepare(&train.examples)?;
    let dp = trainer.prepare(&dev.examples)?;
    let report = trainer.fit(&tp, &dp)?;
    Ok(TrainedModel {
        handle: trainer.to_handle()?,
        report,
    })
}

/// Fine-tunes every backbone parameter through the cloze prompt.
pub fn train_hard_prompt(
    train: &DatasetSplit,
    dev: &DatasetSplit,
    backbone: &EncoderBackbone,
    template: &HardTemplate,
    verbalizer: &Verbalizer,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    run(Trainer::hard_prompt(backbone, template, verbalizer, cfg)?, train, dev)
}

/// Trains only the per-layer prefix vectors; the backbone stays frozen.
pub fn train_soft_prefix(
    train: &DatasetSplit,
    dev: &DatasetSplit,
    backbone: &EncoderBackbone,
    template: &HardTemplate,
    verbalizer: &Verbalizer,
    prefix_cfg: &PrefixConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    run(Trainer::soft_prefix(backbone, template, verbalizer, prefix_cfg, cfg)?, train, dev)
}

/// Linear head over the pooled encoding of the concatenated history, all
/// parameters trainable.
pub fn train_baseline(train: &DatasetSplit, dev: &DatasetSplit, backbone: &EncoderBackbone, cfg: &TrainConfig) -> Result<TrainedModel> {
    run(Trainer::baseline(backbone, cfg)?, train, dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::tiny_backbone;
    use crate::corpus::SplitName;
    use crate::evaluation::sentinel_fixture;
    use crate::templates::TemplateRegistry;

    fn setup() -> (EncoderBackbone, HardTemplate, DatasetSplit, DatasetSplit) {
        let (train, dev) = sentinel_fixture(24, 8, 3);
        let t = TemplateRegistry::default().get("sentinel-en").unwrap().clone();
        (tiny_backbone(7), t, train, dev)
    }

    fn cfg(kind: ModelKind, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs: 2,
            batch_size: 8,
            max_len: 32,
            ..TrainConfig::for_kind(kind)
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bit_identical() {
        let (b, t, train, dev) = setup();
        let m = train_hard_prompt(&train, &dev, &b, &t, &Verbalizer::default(), &cfg(ModelKind::HardPrompt, 0.0)).unwrap();
        assert_eq!(m.handle.backbone.encoder().unwrap().net().params.to_bytes(), b.net().params.to_bytes());
        let m = train_baseline(&train, &dev, &b, &cfg(ModelKind::Baseline, 0.0)).unwrap();
        assert_eq!(m.handle.head.unwrap(), LinearHead::zeros(32));
    }

    #[test]
    fn fixed_seed_reproduces_the_trajectory() {
        let (b, t, train, dev) = setup();
        let v = Verbalizer::default();
        let run = || train_soft_prefix(&train, &dev, &b, &t, &v, &PrefixConfig { length: 2, ..Default::default() }, &cfg(ModelKind::SoftPrefix, 1e-2)).unwrap();
        let (x, y) = (run(), run());
        assert_eq!(x.report, y.report);
        assert_eq!(x.handle.prefix, y.handle.prefix);
        let hp = || train_hard_prompt(&train, &dev, &b, &t, &v, &cfg(ModelKind::HardPrompt, 1e-2)).unwrap().report;
        assert_eq!(hp(), hp());
    }

    #[test]
    fn zero_head_is_uninformative() {
        let (b, _, train, _) = setup();
        let t = Trainer::baseline(&b, &cfg(ModelKind::Baseline, 1e-2)).unwrap();
        let probs = t.probs(&t.prepare(&train.examples).unwrap()).unwrap();
        assert!(probs.iter().all(|p| p.p1 == 0.5 && p.label() == 0));
    }

    #[test]
    fn contract_and_config_errors() {
        let (b, t, _, dev) = setup();
        let v = Verbalizer::default();
        let empty = DatasetSplit::new(SplitName::Train, vec![]);
        assert!(matches!(
            train_hard_prompt(&empty, &dev, &b, &t, &v, &cfg(ModelKind::HardPrompt, 1e-2)),
            Err(MethodError::Contract(_))
        ));
        assert!(matches!(
            Trainer::soft_prefix(&b, &t, &v, &PrefixConfig { length: 0, ..Default::default() }, &cfg(ModelKind::SoftPrefix, 1e-2)),
            Err(MethodError::Config(_))
        ));
        let mut bad = cfg(ModelKind::HardPrompt, 1e-2);
        bad.batch_size = 0;
        assert!(Trainer::hard_prompt(&b, &t, &v, &bad).is_err());
    }

    #[test]
    fn step_cap_and_best_epoch_selection() {
        let (b, t, train, dev) = setup();
        let mut c = cfg(ModelKind::HardPrompt, 1e-2);
        c.max_steps = Some(4);
        c.epochs = 5;
        let m = train_hard_prompt(&train, &dev, &b, &t, &Verbalizer::default(), &c).unwrap();
        assert_eq!(m.report.steps, 4);
        assert_eq!(m.report.history.len(), 2);
        let best = m.report.best_epoch.unwrap();
        let f1s: Vec<f64> = m.report.history.iter().map(|e| e.dev.unwrap().f1).collect();
        assert!(f1s.iter().all(|f| *f <= f1s[best]));
        assert!(f1s[..best].iter().all(|f| *f < f1s[best]));
    }

    #[test]
    fn divergence_reports_the_step() {
        let (b, t, train, dev) = setup();
        let v = Verbalizer::default();
        assert!(matches!(
            Trainer::hard_prompt(&b, &t, &v, &cfg(ModelKind::HardPrompt, f64::INFINITY)),
            Err(MethodError::Config(_))
        ));
        match train_hard_prompt(&train, &dev, &b, &t, &v, &cfg(ModelKind::HardPrompt, 1e300)) {
            Err(MethodError::Training { step, .. }) => assert!(step >= 1),
            other => panic!("{:?}", other.map(|m| m.report)),
        }
    }
}
