//! Mini-batch Adam training over the instruction corpus with masked
//! next-token loss, periodic validation (eval loss and HR@5), gradient
//! clipping, and early stopping on stalled validation loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::io;
use crate::sidspace::Vocabulary;

use super::tokenizer::example_to_sequence;
use super::{Batch, Model, Sequence, Tensors};

/// Sequences per fixed gradient-accumulation chunk; chunks are reduced in
/// index order so the result is identical for any worker count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; overrides epochs when smaller.
    pub max_steps: Option<usize>,
    pub eval_every: usize,
    /// Consecutive non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    /// Validation examples used for the eval loss (capped for speed).
    pub eval_max_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 3,
            max_steps: None,
            eval_every: 50,
            patience: 3,
            clip_norm: 1.0,
            eval_max_examples: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub hr5: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    /// Steps the schedule would run without early stopping.
    pub planned_steps: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub best_eval_loss: Option<f64>,
}

impl TrainReport {
    pub fn eval_rows(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows
            .iter()
            .filter_map(|r| r.eval_loss.map(|l| (r.step, l)))
    }

    /// Mean evaluation loss over the earliest `fraction` of the planned
    /// schedule (the step-0 baseline included).
    pub fn early_eval_loss_mean(&self, fraction: f64) -> Option<f64> {
        let cutoff = (self.planned_steps as f64 * fraction).ceil() as usize;
        let losses: Vec<f64> = self
            .eval_rows()
            .filter(|(step, _)| *step <= cutoff)
            .map(|(_, l)| l)
            .collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }

    /// CSV: step,train_loss,eval_loss,hr5 with empty cells where a value
    /// was not recorded.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,eval_loss,hr5\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.step,
                fmt(row.train_loss),
                fmt(row.eval_loss),
                fmt(row.hr5)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        io::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Tracks consecutive evaluations without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    best: f64,
    non_improving: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            non_improving: 0,
        }
    }

    /// Returns true when training should stop.
    pub fn observe(&mut self, eval_loss: f64) -> bool {
        if eval_loss < self.best {
            self.best = eval_loss;
            self.non_improving = 0;
        } else {
            self.non_improving += 1;
        }
        self.non_improving >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

struct Adam {
    m: Tensors<f32>,
    v: Tensors<f32>,
    t: usize,
}

impl Adam {
    fn new(model: &Model<f32>) -> Self {
        Self {
            m: Tensors::zeros_like(&model.config),
            v: Tensors::zeros_like(&model.config),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model<f32>, grads: &Tensors<f32>, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let bias1 = 1.0 - (cfg.beta1).powi(self.t as i32);
        let bias2 = 1.0 - (cfg.beta2).powi(self.t as i32);
        let lr = (cfg.lr * bias2.sqrt() / bias1) as f32;
        let eps = cfg.adam_eps as f32;
        for ((w, g), (m, v)) in model
            .params
            .mats
            .iter_mut()
            .zip(&grads.mats)
            .zip(self.m.mats.iter_mut().zip(&mut self.v.mats))
        {
            for i in 0..w.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                w.data[i] -= lr * m.data[i] / (v.data[i].sqrt() + eps);
            }
        }
    }
}

/// Batch loss and gradients: per-sequence backward runs in parallel over
/// fixed-size chunks, partial gradients merge in chunk order, and the
/// merged gradient is scaled by the batch-wide masked-token count.
pub fn batch_gradients(
    model: &Model<f32>,
    sequences: &[Sequence],
    dropout_seed: Option<u64>,
) -> Result<(f64, Tensors<f32>)> {
    let chunks: Vec<(f64, usize, Tensors<f32>)> = sequences
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut grads = Tensors::zeros_like(&model.config);
            let mut nll = 0.0f64;
            let mut masked = 0usize;
            for (j, seq) in chunk.iter().enumerate() {
                let mut rng = dropout_seed.map(|s| {
                    ChaCha8Rng::seed_from_u64(io::splitmix64(
                        s ^ ((chunk_idx * GRAD_CHUNK + j) as u64).wrapping_mul(0x9e37),
                    ))
                });
                let (l, c) = model.backward_sequence(seq, &mut grads, rng.as_mut())?;
                nll += l;
                masked += c;
            }
            Ok((nll, masked, grads))
        })
        .collect::<Result<_>>()?;

    let mut total_nll = 0.0f64;
    let mut total_masked = 0usize;
    let mut grads = Tensors::zeros_like(&model.config);
    for (nll, masked, g) in chunks {
        total_nll += nll;
        total_masked += masked;
        grads.add_assign(&g);
    }
    if total_masked == 0 {
        return Err(Error::Contract("batch mask is all zero".into()));
    }
    grads.scale(1.0 / total_masked as f32);
    Ok((total_nll / total_masked as f64, grads))
}

/// Ranker callback evaluated at each validation point (HR@5 on held-out
/// targets); kept abstract so training does not depend on the decoder.
pub type ValidRanker<'a> = dyn Fn(&Model<f32>) -> f64 + Sync + 'a;

pub struct TrainOptions<'a> {
    pub config: TrainConfig,
    pub valid_ranker: Option<&'a ValidRanker<'a>>,
}

/// Train on the corpus's weighted example stream. Evaluates at step 0 and
/// every `eval_every` steps; stops early after `patience` non-improving
/// evaluations; aborts on non-finite loss.
pub fn train(
    model: &mut Model<f32>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    options: &TrainOptions,
) -> Result<TrainReport> {
    let cfg = &options.config;
    if corpus.train.is_empty() {
        return Err(Error::Contract("empty training corpus".into()));
    }
    let train_seqs: Vec<Sequence> = corpus
        .train
        .iter()
        .map(|e| example_to_sequence(e, vocab, model.config.max_seq))
        .collect();
    let valid_seqs: Vec<Sequence> = corpus
        .valid
        .iter()
        .take(cfg.eval_max_examples)
        .map(|e| example_to_sequence(e, vocab, model.config.max_seq))
        .collect();

    let steps_per_epoch = corpus.train.len().div_ceil(cfg.batch_size).max(1);
    let mut total_steps = cfg.epochs * steps_per_epoch;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }
    let stream = corpus.sample_indices(total_steps * cfg.batch_size, cfg.seed);

    let mut adam = Adam::new(model);
    let mut report = TrainReport {
        planned_steps: total_steps,
        ..TrainReport::default()
    };
    let mut early = EarlyStop::new(cfg.patience.max(1));

    let evaluate = |model: &Model<f32>, step: usize, report: &mut TrainReport| -> Result<f64> {
        let eval_loss = if valid_seqs.is_empty() {
            f64::NAN
        } else {
            model.sft_loss(&Batch {
                sequences: valid_seqs.clone(),
            })?
        };
        let hr5 = options.valid_ranker.map(|r| r(model));
        log::info!(
            "step {step}: eval_loss {eval_loss:.4}{}",
            hr5.map(|h| format!(" hr5 {h:.4}")).unwrap_or_default()
        );
        report.rows.push(ReportRow {
            step,
            train_loss: None,
            eval_loss: Some(eval_loss),
            hr5,
        });
        Ok(eval_loss)
    };

    // baseline evaluation before the first update
    let initial = evaluate(model, 0, &mut report)?;
    if initial.is_finite() {
        early.observe(initial);
    }

    let dropout_on = model.config.dropout > 0.0;
    for step in 1..=total_steps {
        let lo = (step - 1) * cfg.batch_size;
        let batch: Vec<Sequence> = stream[lo..lo + cfg.batch_size]
            .iter()
            .map(|&i| train_seqs[i].clone())
            .collect();
        let dropout_seed = dropout_on.then(|| io::splitmix64(cfg.seed ^ (step as u64)));
        let (loss, mut grads) = batch_gradients(model, &batch, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss {loss}"),
            });
        }
        if cfg.clip_norm > 0.0 {
            let norm = grads.sq_norm().sqrt();
            if norm > cfg.clip_norm {
                grads.scale((cfg.clip_norm / norm) as f32);
            }
        }
        adam.step(model, &grads, cfg);
        model.step += 1;
        report.rows.push(ReportRow {
            step,
            train_loss: Some(loss),
            eval_loss: None,
            hr5: None,
        });

        if step % cfg.eval_every == 0 {
            let eval_loss = evaluate(model, step, &mut report)?;
            if !eval_loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: "non-finite eval loss".into(),
                });
            }
            if early.observe(eval_loss) {
                log::info!("early stop at step {step}");
                report.stopped_early = true;
                report.steps_run = step;
                report.best_eval_loss = Some(early.best());
                return Ok(report);
            }
        }
    }
    report.steps_run = total_steps;
    report.best_eval_loss = (early.best().is_finite()).then(|| early.best());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assemble_corpus, CorpusWeights, InstructionExample, TaskTag};
    use crate::model::tokenizer::{build_vocabulary, corpus_texts};
    use crate::model::ModelConfig;
    use crate::sidspace::SidLayout;

    #[test]
    fn early_stop_fires_after_exact_patience() {
        let mut es = EarlyStop::new(3);
        assert!(!es.observe(1.0));
        assert!(!es.observe(0.9)); // improves
        assert!(!es.observe(0.95)); // 1
        assert!(!es.observe(0.95)); // 2
        assert!(es.observe(0.92)); // 3 -> stop
    }

    #[test]
    fn early_stop_resets_on_improvement() {
        let mut es = EarlyStop::new(3);
        assert!(!es.observe(1.0));
        assert!(!es.observe(1.1));
        assert!(!es.observe(1.2));
        assert!(!es.observe(0.5));
        assert!(!es.observe(0.6));
        assert!(!es.observe(0.6));
        assert!(es.observe(0.6));
        assert_eq!(es.best(), 0.5);
    }

    fn memorizable_corpus() -> (Corpus, SidLayout) {
        let layout = SidLayout::new(vec![8, 8, 8]).unwrap();
        let mut examples = Vec::new();
        for i in 0..50 {
            let a = i % 8;
            let b = (i / 2) % 8;
            examples.push(InstructionExample {
                instruction: format!("user liked <a_{a}><b_{b}><c_1>, <a_{a}><b_{b}><c_2> what now"),
                response: format!("<a_{a}><b_{b}><c_3>"),
                task: TaskTag::SeqRec,
                user: None,
            });
        }
        let corpus = assemble_corpus(
            vec![examples.clone()],
            examples[..4].to_vec(),
            vec![],
            CorpusWeights::default(),
            &layout,
            5,
        )
        .unwrap();
        (corpus, layout)
    }

    fn small_model(vocab_size: usize, seed: u64) -> Model<f32> {
        Model::<f32>::new(ModelConfig {
            dim: 32,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            max_seq: 48,
            vocab_size,
            tie_embeddings: true,
            dropout: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn overfits_memorizable_corpus() {
        let (corpus, layout) = memorizable_corpus();
        let vocab = build_vocabulary(corpus_texts(&corpus.train), &layout).unwrap();
        let mut model = small_model(vocab.len(), 1);
        let options = TrainOptions {
            config: TrainConfig {
                lr: 3e-3,
                batch_size: 16,
                epochs: 100,
                max_steps: Some(200),
                eval_every: 1000, // no early stop interference
                ..TrainConfig::default()
            },
            valid_ranker: None,
        };
        let report = train(&mut model, &corpus, &vocab, &options).unwrap();
        let first = report
            .rows
            .iter()
            .find_map(|r| r.train_loss)
            .expect("train rows");
        let last = report
            .rows
            .iter()
            .rev()
            .find_map(|r| r.train_loss)
            .expect("train rows");
        assert!(
            last < 0.1 * first,
            "train loss {first} -> {last}, expected 10x drop"
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (corpus, layout) = memorizable_corpus();
        let vocab = build_vocabulary(corpus_texts(&corpus.train), &layout).unwrap();
        let run = || {
            let mut model = small_model(vocab.len(), 2);
            let options = TrainOptions {
                config: TrainConfig {
                    batch_size: 8,
                    epochs: 1,
                    max_steps: Some(12),
                    eval_every: 5,
                    ..TrainConfig::default()
                },
                valid_ranker: None,
            };
            let report = train(&mut model, &corpus, &vocab, &options).unwrap();
            (model, report)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        for (a, b) in m1.params.mats.iter().zip(&m2.params.mats) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let l1: Vec<(usize, Option<u64>)> = r1
            .rows
            .iter()
            .map(|r| (r.step, r.train_loss.map(|l| l.to_bits())))
            .collect();
        let l2: Vec<(usize, Option<u64>)> = r2
            .rows
            .iter()
            .map(|r| (r.step, r.train_loss.map(|l| l.to_bits())))
            .collect();
        assert_eq!(l1, l2);
    }

    #[test]
    fn csv_report_shape() {
        let report = TrainReport {
            rows: vec![
                ReportRow {
                    step: 0,
                    train_loss: None,
                    eval_loss: Some(2.5),
                    hr5: Some(0.1),
                },
                ReportRow {
                    step: 1,
                    train_loss: Some(2.2),
                    eval_loss: None,
                    hr5: None,
                },
            ],
            steps_run: 1,
            stopped_early: false,
            best_eval_loss: Some(2.5),
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,train_loss,eval_loss,hr5"));
        assert_eq!(lines.next(), Some("0,,2.500000,0.100000"));
        assert_eq!(lines.next(), Some("1,2.200000,,"));
    }
}
