use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{window_loss, windows, TaggerModel};
use super::TaggerConfig;
use crate::corpus::{encode_bio, holdout_count, Corpus, Paragraph};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Stops once `patience` consecutive epochs fail to lower the monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience: patience.max(1), best: f64::INFINITY, best_epoch: 0, bad_epochs: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            Verdict { improved: true, stop: false }
        } else {
            self.bad_epochs += 1;
            Verdict { improved: false, stop: self.bad_epochs >= self.patience }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-clause loss over the epoch's batches, with dropout.
    pub train_loss: f64,
    /// Validation loss, or the training-set loss without dropout when no
    /// paragraphs were held out.
    pub monitor_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_paragraphs: usize,
    pub validation_paragraphs: usize,
}

/// One training window: clauses `range` of a paragraph with gold BIO indices.
#[derive(Debug, Clone)]
pub(crate) struct Instance<'a> {
    paragraph: &'a Paragraph,
    range: Range<usize>,
    gold: Vec<usize>,
}

pub(crate) fn instances<'a>(paragraphs: &[&'a Paragraph], model: &TaggerModel) -> Result<Vec<Instance<'a>>> {
    let ls = &model.label_set;
    let mut out = Vec::new();
    for p in paragraphs {
        let labels = p
            .gold_labels()
            .ok_or_else(|| Error::LabelSet(format!("paragraph {} has unlabeled clauses", p.id)))?;
        for range in windows(p.len(), model.config.c) {
            let bio = encode_bio(&labels[range.clone()], ls)?;
            out.push(Instance { paragraph: p, range, gold: bio.into_iter().map(|t| ls.bio_index(t)).collect() });
        }
    }
    Ok(out)
}

/// Mean per-clause CRF loss over `items` in inference mode.
pub(crate) fn mean_loss(model: &TaggerModel, items: &[Instance<'_>], store: &EmbeddingStore) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        let ep = store.embed(it.paragraph, it.range.clone(), model.config.w)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let loss = window_loss(&mut tape, &vars, &model.config, &ep, &it.gold, None)?;
        total += tape.value(loss).item();
    }
    Ok(total / items.len().max(1) as f64)
}

/// Mean per-clause loss of `corpus` under `model` without dropout.
pub fn evaluate_loss(model: &TaggerModel, corpus: &Corpus, store: &EmbeddingStore) -> Result<f64> {
    let ps: Vec<&Paragraph> = corpus.paragraphs.iter().collect();
    mean_loss(model, &instances(&ps, model)?, store)
}

/// Trains a fresh model on `corpus`.
pub fn train(corpus: &Corpus, store: &EmbeddingStore, config: &TaggerConfig) -> Result<(TaggerModel, TrainReport)> {
    let model = TaggerModel::new(config.clone(), corpus.label_set.clone())?;
    fit(model, corpus, store, config)
}

/// Continues training `model` with the optimisation settings of `config`
/// (learning rate, dropouts, batching, epochs, patience, validation ratio,
/// seed). Dimensions always come from the model. Returns the parameters of
/// the epoch with the lowest monitored loss.
pub fn fit(mut model: TaggerModel, corpus: &Corpus, store: &EmbeddingStore, config: &TaggerConfig) -> Result<(TaggerModel, TrainReport)> {
    config.validate()?;
    if corpus.paragraphs.is_empty() {
        return Err(Error::Empty("training corpus has no paragraphs"));
    }
    if corpus.label_set != model.label_set {
        return Err(Error::LabelSet(format!(
            "corpus label set {} does not match model label set {}",
            corpus.label_set.name(),
            model.label_set.name()
        )));
    }
    if store.dim() != model.config.d {
        return Err(Error::Shape(format!("embedding dim {} vs model d {}", store.dim(), model.config.d)));
    }
    for p in &corpus.paragraphs {
        if store.get(&p.id).is_none() {
            return Err(Error::MissingEmbedding(p.id.clone()));
        }
    }
    let dims = &model.config;
    model.config = TaggerConfig {
        c: dims.c,
        w: dims.w,
        d: dims.d,
        p: dims.p,
        h: dims.h,
        d2: dims.d2,
        hidden: dims.hidden,
        ..config.clone()
    };
    let arch = model.config.clone();

    let mut order: Vec<usize> = (0..corpus.paragraphs.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    split_rng.set_stream(1);
    order.shuffle(&mut split_rng);
    let n_val = holdout_count(order.len(), config.validation_ratio);
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let train_ps: Vec<&Paragraph> = train_idx.iter().map(|&i| &corpus.paragraphs[i]).collect();
    let val_ps: Vec<&Paragraph> = val_idx.iter().map(|&i| &corpus.paragraphs[i]).collect();
    let train_items = instances(&train_ps, &model)?;
    let val_items = instances(&val_ps, &model)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(3);

    let mut adam = Adam::new(config.lr);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        train_paragraphs: train_ps.len(),
        validation_paragraphs: val_ps.len(),
    };
    let mut batch_order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=config.max_epochs {
        batch_order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for batch in batch_order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let it = &train_items[i];
                let ep = store.embed(it.paragraph, it.range.clone(), model.config.w)?;
                losses.push(window_loss(&mut tape, &vars, &arch, &ep, &it.gold, Some(&mut dropout_rng))?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            let value = tape.value(mean).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            epoch_total += value * batch.len() as f64;
            let mut grads = tape.backward(mean)?;
            let gs: Vec<Tensor> = vars.all.iter().zip(model.tensors()).map(|(&v, t)| grads.take_or_zeros(v, t)).collect();
            adam.step(model.tensors_mut(), &gs);
        }
        let train_loss = epoch_total / train_items.len() as f64;
        let monitor_loss = if val_items.is_empty() {
            mean_loss(&model, &train_items, store)?
        } else {
            mean_loss(&model, &val_items, store)?
        };
        let verdict = stopper.observe(epoch, monitor_loss);
        report.epochs.push(EpochStats { epoch, train_loss, monitor_loss, improved: verdict.improved });
        if verdict.improved {
            best = model.clone();
        }
        if verdict.stop {
            report.stopped_early = true;
            break;
        }
    }
    report.best_epoch = stopper.best_epoch();
    Ok((best, report))
}
