//! AdamW, the steering alignment loop and the two backbone pretraining drivers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{collate, lm_sequence, Batch, Utterance};
use crate::decoder::{forward_text, forward_with_prompt, DecoderConfig, DecoderWeights};
use crate::encoder::{encode, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::eval::{corpus_wer, EvalSpec};
use crate::layers::{Linear, Norm};
use crate::numerics::{LrGroup, ParamList, ParamSet, Parameter, Tape, Tensor, Var};
use crate::parallel::Workers;
use crate::steering::Bridge;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub lr_base: f64,
    pub lr_steering_vectors: f64,
    pub lr_router: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            lr_base: 1e-4,
            lr_steering_vectors: 1e-2,
            lr_router: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 4,
            max_steps: 4000,
            eval_interval: 250,
            seed: 0,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("optim.{m}")));
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_steering_vectors", self.lr_steering_vectors),
            ("lr_router", self.lr_router),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(&format!("{name} must be positive, got {lr}"));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return fail("eps and clip_norm must be positive, weight_decay non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be at least 1");
        }
        Ok(())
    }

    pub fn lr(&self, group: LrGroup) -> f64 {
        match group {
            LrGroup::Base => self.lr_base,
            LrGroup::SteeringVectors => self.lr_steering_vectors,
            LrGroup::Router => self.lr_router,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Gradient norms seen by one optimizer step, before clipping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub grad_norm: f64,
    pub group_norms: BTreeMap<LrGroup, f64>,
}

/// Decoupled-weight-decay Adam with per-group learning rates and global-norm
/// clipping. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    spec: OptimSpec,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(spec: &OptimSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its gradient buffer, then clears
    /// all gradients. A parameter without a buffer is treated as having a zero
    /// gradient.
    pub fn step<P: ParamSet + ?Sized>(&mut self, set: &mut P) -> Result<StepStats> {
        let mut stats = StepStats::default();
        let mut total = 0.0;
        for p in set.params().into_iter().filter(|p| p.trainable()) {
            let Some(g) = p.grad() else { continue };
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at index {i} is {}",
                    p.name(),
                    g[i]
                )));
            }
            let sq: f64 = g.iter().map(|v| v * v).sum();
            *stats.group_norms.entry(p.lr_group()).or_insert(0.0) += sq;
            total += sq;
        }
        stats.grad_norm = total.sqrt();
        stats.group_norms.values_mut().for_each(|v| *v = v.sqrt());
        let clip = (self.spec.clip_norm / (stats.grad_norm + 1e-6)).min(1.0);

        self.step += 1;
        let (b1, b2) = self.spec.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for p in set.params_mut() {
            if !p.trainable() {
                continue;
            }
            let lr = self.spec.lr(p.lr_group());
            let decay = if p.decays() { self.spec.weight_decay } else { 0.0 };
            let grad = p.take_grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let st = self.moments.entry(p.name().to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i] * clip;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                *w -= lr * decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + self.spec.eps);
            }
        }
        set.zero_grad();
        Ok(stats)
    }
}

/// Runs `f` over `items` on the workers and sums the returned
/// losses and gradients in item order, so the result does not depend on the
/// thread count.
fn reduce_gradients<T, F>(items: &[T], workers: &Workers, f: F) -> Result<(f64, BTreeMap<String, Vec<f64>>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, BTreeMap<String, Vec<f64>>)> + Sync,
{
    let parts = workers.map(items, f);
    let mut loss = 0.0;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (name, v) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, v);
                }
            }
        }
    }
    Ok((loss, grads))
}

fn apply_gradients<P: ParamSet + ?Sized>(set: &mut P, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    for p in set.params_mut() {
        if let Some(g) = grads.get(p.name()) {
            p.accumulate_grad(g)?;
        }
    }
    Ok(())
}

/// Masked next-token loss of row `b`, divided by `denom`.
pub fn row_loss(
    tape: &mut Tape,
    batch: &Batch,
    b: usize,
    bridge: &Bridge,
    encoder: &EncoderWeights,
    decoder: &DecoderWeights,
    denom: f64,
) -> Result<Var> {
    let x = tape.constant(batch.row_features(b));
    let prompt = bridge.audio_prompt(tape, x, encoder)?;
    let logits = forward_with_prompt(tape, Some(prompt), batch.row_tokens(b), decoder)?;
    let (targets, mask) = batch.shifted_targets(b);
    tape.cross_entropy_masked_sum(logits, &targets, &mask, denom)
}

/// Masked mean cross-entropy of a whole batch, with gradients for every
/// trainable bridge parameter.
pub fn batch_loss(
    batch: &Batch,
    bridge: &Bridge,
    encoder: &EncoderWeights,
    decoder: &DecoderWeights,
    workers: &Workers,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let denom = batch.loss_positions() as f64;
    if denom == 0.0 {
        return Err(Error::EmptyLoss);
    }
    let rows: Vec<usize> = (0..batch.len()).collect();
    reduce_gradients(&rows, workers, |&b| {
        let mut tape = Tape::new();
        let loss = row_loss(&mut tape, batch, b, bridge, encoder, decoder, denom)?;
        Ok((tape.scalar(loss), tape.backward(loss)?.by_param()))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub group_norms: BTreeMap<LrGroup, f64>,
    pub dev_wer: Option<f64>,
}

/// Append-only record of a training run. Wall-clock time is kept apart from
/// the entries so two identical runs compare equal on `entries`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub elapsed_secs: Vec<f64>,
}

impl TrainLog {
    pub fn push(&mut self, entry: LogEntry, elapsed: f64) {
        self.entries.push(entry);
        self.elapsed_secs.push(elapsed);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self, with_time: bool) -> String {
        let mut out =
            String::from("step,loss,grad_norm,grad_norm_base,grad_norm_steering_vectors,grad_norm_router,dev_wer");
        if with_time {
            out.push_str(",elapsed_secs");
        }
        out.push('\n');
        for (e, t) in self.entries.iter().zip(&self.elapsed_secs) {
            let group = |g| e.group_norms.get(&g).map_or(String::new(), |v| format!("{v:.9e}"));
            let _ = write!(
                out,
                "{},{:.12e},{:.9e},{},{},{},{}",
                e.step,
                e.loss,
                e.grad_norm,
                group(LrGroup::Base),
                group(LrGroup::SteeringVectors),
                group(LrGroup::Router),
                e.dev_wer.map_or(String::new(), |w| format!("{w:.6}")),
            );
            if with_time {
                let _ = write!(out, ",{t:.3}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AlignOutcome {
    /// Bridge state at the evaluation with the lowest dev WER.
    pub best: Bridge,
    pub best_step: usize,
    pub best_dev_wer: Option<f64>,
    /// Bridge state after the last step.
    pub last: Bridge,
    pub log: TrainLog,
}

/// Trains only the bridge against the masked transcript loss.
///
/// Batches are drawn by shuffling `train` once per epoch with the optimizer
/// seed. Dev WER is measured every `eval_interval` steps and after the last
/// step; the returned `best` is the state with the lowest dev WER (earliest on
/// ties). Without a dev set the last state is also the best.
#[allow(clippy::too_many_arguments)]
pub fn align_train(
    encoder: &EncoderWeights,
    decoder: &DecoderWeights,
    bridge: Bridge,
    train: &[Utterance],
    dev: &[Utterance],
    spec: &OptimSpec,
    eval: &EvalSpec,
    threads: usize,
    mut progress: impl FnMut(&LogEntry),
) -> Result<AlignOutcome> {
    spec.validate()?;
    if !encoder.is_frozen() || !decoder.is_frozen() {
        return Err(Error::Contract("backbones must be frozen before alignment".into()));
    }
    if spec.max_steps > 0 && train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let workers = Workers::new(threads)?;
    let mut bridge = bridge;
    let mut opt = AdamW::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = TrainLog::default();
    let mut best = (bridge.clone(), 0usize, None::<f64>);
    let start = Instant::now();
    let max_frames = encoder.config.max_frames;
    let max_text = decoder.config.max_positions;

    for step in 1..=spec.max_steps {
        let mut picked = Vec::with_capacity(spec.batch_size);
        while picked.len() < spec.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let batch = collate(&picked, max_frames, max_text)?;
        let (loss, grads) = batch_loss(&batch, &bridge, encoder, decoder, &workers)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
        }
        apply_gradients(&mut bridge, &grads)?;
        let stats = opt.step(&mut bridge)?;

        let dev_wer = if !dev.is_empty() && (step % spec.eval_interval == 0 || step == spec.max_steps) {
            let w = corpus_wer(&bridge, encoder, decoder, dev, eval, &workers)?;
            if best.2.map_or(true, |b| w < b) {
                best = (bridge.clone(), step, Some(w));
            }
            Some(w)
        } else {
            None
        };
        let entry = LogEntry {
            step,
            loss,
            grad_norm: stats.grad_norm,
            group_norms: stats.group_norms,
            dev_wer,
        };
        progress(&entry);
        log.push(entry, start.elapsed().as_secs_f64());
    }
    if best.2.is_none() {
        best = (bridge.clone(), spec.max_steps, None);
    }
    Ok(AlignOutcome {
        best: best.0,
        best_step: best.1,
        best_dev_wer: best.2,
        last: bridge,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub encoder_epochs: usize,
    pub decoder_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Number of text-only transcripts the decoder is pretrained on.
    pub text_corpus_size: usize,
    /// Std of Gaussian noise added to the embeddings of the context the
    /// decoder copies from, so it learns to copy from inexact embeddings.
    pub context_noise: f64,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            encoder_epochs: 2,
            decoder_epochs: 4,
            lr: 1e-3,
            batch_size: 4,
            text_corpus_size: 4000,
            context_noise: 0.25,
            seed: 0,
        }
    }
}

impl PretrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("pretrain.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be at least 1".into()));
        }
        if !(self.context_noise >= 0.0) || !self.context_noise.is_finite() {
            return Err(Error::Config(format!(
                "pretrain.context_noise must be finite and non-negative, got {}",
                self.context_noise
            )));
        }
        Ok(())
    }

    fn optim(&self, seed: u64) -> OptimSpec {
        OptimSpec {
            lr_base: self.lr,
            weight_decay: 0.01,
            clip_norm: f64::INFINITY,
            batch_size: self.batch_size,
            seed,
            ..OptimSpec::default()
        }
    }
}

/// Frame labels: every frame carries the id of the token that generated it.
pub fn frame_labels(utt: &Utterance) -> Result<Vec<usize>> {
    let (t, n) = (utt.frames(), utt.transcript.len());
    if n == 0 || t % n != 0 {
        return Err(Error::Contract(format!(
            "utterance {} has {t} frames for {n} tokens",
            utt.index
        )));
    }
    let k = t / n;
    Ok(utt
        .transcript
        .iter()
        .flat_map(|&tok| std::iter::repeat(tok).take(k))
        .collect())
}

struct FrameHead {
    norm: Norm,
    linear: Linear,
}

struct EncoderTrainer {
    encoder: EncoderWeights,
    head: FrameHead,
}

impl ParamSet for EncoderTrainer {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.encoder.params();
        out.extend(self.head.norm.params());
        out.extend(self.head.linear.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.norm.params_mut());
        out.extend(self.head.linear.params_mut());
        out
    }
}

fn frame_logits(tape: &mut Tape, t: &EncoderTrainer, utt: &Utterance) -> Result<Var> {
    let x = tape.constant(utt.features.clone());
    let h = encode(tape, x, &t.encoder)?;
    let h = t.head.norm.forward(tape, h)?;
    t.head.linear.forward(tape, h)
}

fn epoch_batches(n: usize, batch: usize, epochs: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        out.extend(order.chunks(batch).map(<[usize]>::to_vec));
    }
    out
}

/// Frame-classification pretraining. The head predicts the generating token
/// id (one of `vocab_size` classes) of every frame and is discarded afterwards.
/// Returns frozen weights with the validation frame accuracy recorded.
pub fn pretrain_encoder(
    config: &EncoderConfig,
    vocab_size: usize,
    train: &[Utterance],
    val: &[Utterance],
    spec: &PretrainSpec,
    threads: usize,
) -> Result<EncoderWeights> {
    spec.validate()?;
    if val.is_empty() || (spec.encoder_epochs > 0 && train.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let head_seed = spec.seed ^ 0x68656164;
    let mut head_rng = ChaCha8Rng::seed_from_u64(head_seed);
    let mut trainer = EncoderTrainer {
        encoder: EncoderWeights::init(config, spec.seed)?,
        head: FrameHead {
            norm: Norm::new("head.norm", config.model_dim),
            linear: Linear::new("head.linear", config.model_dim, vocab_size, &mut head_rng),
        },
    };
    let mut opt = AdamW::new(&spec.optim(spec.seed))?;
    let workers = Workers::new(threads)?;
    for (step, idx) in epoch_batches(train.len(), spec.batch_size, spec.encoder_epochs, &mut rng)
        .into_iter()
        .enumerate()
    {
        let (loss, grads) = reduce_gradients(&idx, &workers, |&i| {
            let utt = &train[i];
            let labels = frame_labels(utt)?;
            let mut tape = Tape::new();
            let logits = frame_logits(&mut tape, &trainer, utt)?;
            let mask = vec![true; labels.len()];
            let l = tape.cross_entropy_masked_sum(logits, &labels, &mask, (labels.len() * idx.len()) as f64)?;
            Ok((tape.scalar(l), tape.backward(l)?.by_param()))
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "encoder pretraining loss {loss} at step {}",
                step + 1
            )));
        }
        apply_gradients(&mut trainer, &grads)?;
        opt.step(&mut trainer)?;
    }

    let (mut correct, mut total) = (0usize, 0usize);
    for utt in val {
        let labels = frame_labels(utt)?;
        let mut tape = Tape::new();
        let logits = frame_logits(&mut tape, &trainer, utt)?;
        let v = tape.value(logits);
        for (r, &lab) in labels.iter().enumerate() {
            correct += usize::from(crate::decoder::argmax(v.row(r)) == lab);
        }
        total += labels.len();
    }
    let accuracy = correct as f64 / total as f64;
    let mut encoder = trainer.encoder;
    encoder.freeze_all();
    encoder.frame_accuracy = Some(accuracy);
    if spec.encoder_epochs > 0 && accuracy < 0.6 {
        return Err(Error::PretrainFailure(format!(
            "encoder frame accuracy {accuracy:.4} is below 0.60"
        )));
    }
    Ok(encoder)
}

/// Where the decoder's pretraining loss is taken within an [`lm_sequence`]:
/// from the instruction marker on, i.e. the copied transcript and EOS.
fn lm_loss_mask(transcript_len: usize) -> Vec<bool> {
    // Inputs are the sequence without its last token; position p predicts p+1.
    let seq_len = 2 * transcript_len + 2;
    (0..seq_len - 1).map(|p| p >= transcript_len).collect()
}

fn lm_example(transcript: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let seq = lm_sequence(transcript);
    let inputs = seq[..seq.len() - 1].to_vec();
    let targets = seq[1..].to_vec();
    (inputs, targets, lm_loss_mask(transcript.len()))
}

/// Logits for one copy-format example whose first `context` inputs are the
/// transcript being copied; those embeddings get `N(0, noise²)` added.
fn noisy_copy_logits(
    tape: &mut Tape,
    inputs: &[usize],
    context: usize,
    decoder: &DecoderWeights,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if noise == 0.0 {
        return forward_text(tape, inputs, decoder);
    }
    let table = tape.param(&decoder.embedding);
    let ctx = tape.gather_rows(table, &inputs[..context])?;
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Tensor::from_fn(&[context, decoder.config.model_dim], |_| normal.sample(rng));
    let jitter = tape.constant(jitter);
    let noisy = tape.add(ctx, jitter)?;
    forward_with_prompt(tape, Some(noisy), &inputs[context..], decoder)
}

/// Validation perplexity of the decoder on copy-format text, over the
/// positions the pretraining loss uses.
pub fn text_perplexity(decoder: &DecoderWeights, transcripts: &[Vec<usize>]) -> Result<f64> {
    if transcripts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for t in transcripts {
        let (inputs, targets, mask) = lm_example(t);
        let mut tape = Tape::new();
        let logits = forward_text(&mut tape, &inputs, decoder)?;
        let n = mask.iter().filter(|&&m| m).count();
        let l = tape.cross_entropy_masked_sum(logits, &targets, &mask, 1.0)?;
        nll += tape.scalar(l);
        count += n;
    }
    Ok((nll / count as f64).exp())
}

/// Next-token pretraining on copy-format text: a transcript, the instruction
/// marker, the same transcript again and EOS. The loss covers the copy and
/// EOS, which is the continuation the decoder later has to produce after an
/// audio prompt. The copied context is embedded with noise (see
/// [`PretrainSpec::context_noise`]). Returns frozen weights with the clean
/// validation perplexity.
pub fn pretrain_decoder(
    config: &DecoderConfig,
    train: &[Vec<usize>],
    val: &[Vec<usize>],
    spec: &PretrainSpec,
    threads: usize,
) -> Result<DecoderWeights> {
    spec.validate()?;
    if val.is_empty() || (spec.decoder_epochs > 0 && train.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    if let Some(t) = train.iter().chain(val).find(|t| t.is_empty()) {
        return Err(Error::Contract(format!("empty transcript in text corpus: {t:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut decoder = DecoderWeights::init(config, spec.seed)?;
    let mut opt = AdamW::new(&spec.optim(spec.seed))?;
    let workers = Workers::new(threads)?;
    for (step, idx) in epoch_batches(train.len(), spec.batch_size, spec.decoder_epochs, &mut rng)
        .into_iter()
        .enumerate()
    {
        let denom: usize = idx.iter().map(|&i| train[i].len() + 1).sum();
        let (loss, grads) = reduce_gradients(&idx, &workers, |&i| {
            let (inputs, targets, mask) = lm_example(&train[i]);
            // One noise stream per (step, example) keeps results thread-independent.
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f697365);
            noise_rng.set_stream(((step as u64) << 32) | i as u64);
            let mut tape = Tape::new();
            let logits = noisy_copy_logits(
                &mut tape,
                &inputs,
                train[i].len(),
                &decoder,
                spec.context_noise,
                &mut noise_rng,
            )?;
            let l = tape.cross_entropy_masked_sum(logits, &targets, &mask, denom as f64)?;
            Ok((tape.scalar(l), tape.backward(l)?.by_param()))
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "decoder pretraining loss {loss} at step {}",
                step + 1
            )));
        }
        apply_gradients(&mut decoder, &grads)?;
        opt.step(&mut decoder)?;
    }
    decoder.freeze_all();
    let ppl = text_perplexity(&decoder, val)?;
    decoder.perplexity = Some(ppl);
    if spec.decoder_epochs > 0 && !(ppl < config.vocab_size as f64) {
        return Err(Error::PretrainFailure(format!(
            "decoder perplexity {ppl:.3} is not below the vocabulary size {}",
            config.vocab_size
        )));
    }
    Ok(decoder)
}

/// Gradients of a masked batch loss, exposed for tests and probes that need
/// the raw per-parameter sums without an optimizer step.
pub fn bridge_gradients(
    batch: &Batch,
    bridge: &Bridge,
    encoder: &EncoderWeights,
    decoder: &DecoderWeights,
) -> Result<ParamList> {
    let (_, grads) = batch_loss(batch, bridge, encoder, decoder, &Workers::new(1)?)?;
    let mut out = ParamList::default();
    for p in bridge.params() {
        let mut q = p.clone();
        if let Some(g) = grads.get(p.name()) {
            q.accumulate_grad(g)?;
        }
        out.0.push(q);
    }
    Ok(out)
}
