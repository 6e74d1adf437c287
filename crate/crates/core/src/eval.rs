//! Error rates, evaluation reports and the expert-count ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::params_hash;
use crate::data::{Utterance, Vocabulary, EOS};
use crate::decoder::{greedy_decode, DecoderWeights};
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape};
use crate::parallel::Workers;
use crate::steering::{router_stats, Bridge, RouterStats, StaticAdapter, SteeringConfig, SteeringState};
use crate::training::{align_train, OptimSpec};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance over `|reference|`. Can exceed 1 when the hypothesis
/// inserts many symbols.
pub fn word_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("word_error_rate reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Character-level error rate of the symbols written out without separators.
pub fn character_error_rate(reference: &[String], hypothesis: &[String]) -> Result<f64> {
    let r: Vec<char> = reference.iter().flat_map(|s| s.chars()).collect();
    let h: Vec<char> = hypothesis.iter().flat_map(|s| s.chars()).collect();
    if r.is_empty() {
        return Err(Error::EmptyInput("character_error_rate reference"));
    }
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Hard cap on generated tokens per utterance.
    pub max_new_tokens: usize,
    /// WER at or below which `eval` reports success.
    pub wer_threshold: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            wer_threshold: 0.15,
        }
    }
}

/// Greedy transcript of one utterance.
pub fn transcribe(
    bridge: &Bridge,
    encoder: &EncoderWeights,
    decoder: &DecoderWeights,
    utt: &Utterance,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let x = tape.constant(utt.features.clone());
    let prompt = bridge.audio_prompt(&mut tape, x, encoder)?;
    let prompt = tape.value(prompt).clone();
    greedy_decode(Some(&prompt), &utt.instruction, decoder, max_new, EOS)
}

/// Corpus-level WER: total edits over total reference length.
pub fn corpus_wer(
    bridge: &Bridge,
    encoder: &EncoderWeights,
    decoder: &DecoderWeights,
    corpus: &[Utterance],
    spec: &EvalSpec,
    workers: &Workers,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hyps = workers.map(corpus, |u| transcribe(bridge, encoder, decoder, u, spec.max_new_tokens));
    let (mut edits, mut total) = (0, 0);
    for (u, h) in corpus.iter().zip(hyps) {
        edits += edit_distance(&u.transcript, &h?);
        total += u.transcript.len();
    }
    Ok(edits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub index: u64,
    pub reference: String,
    pub hypothesis: String,
    pub word_edits: usize,
    pub reference_words: usize,
    pub char_edits: usize,
    pub reference_chars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneHashes {
    pub encoder: String,
    pub decoder: String,
}

impl BackboneHashes {
    pub fn of(encoder: &EncoderWeights, decoder: &DecoderWeights) -> Self {
        Self {
            encoder: params_hash(encoder),
            decoder: params_hash(decoder),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub split: String,
    /// Micro-averaged: total word edits over total reference words.
    pub wer: f64,
    pub cer: f64,
    pub utterances: usize,
    pub word_edits: usize,
    pub reference_words: usize,
    pub char_edits: usize,
    pub reference_chars: usize,
    pub trainable_params: usize,
    pub details: Vec<UtteranceResult>,
    pub router: Option<RouterStats>,
    pub backbones: BackboneHashes,
}

impl EvalReport {
    /// Unweighted mean of per-utterance WERs. Differs from `wer` whenever
    /// utterance lengths differ.
    pub fn macro_wer(&self) -> f64 {
        let sum: f64 = self
            .details
            .iter()
            .map(|d| d.word_edits as f64 / d.reference_words as f64)
            .sum();
        sum / self.details.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Scores `hypotheses` (one per utterance) against the references.
pub fn score(
    variant: &str,
    split: &str,
    corpus: &[Utterance],
    hypotheses: &[Vec<usize>],
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if corpus.len() != hypotheses.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} utterances",
            hypotheses.len(),
            corpus.len()
        )));
    }
    let mut details = Vec::with_capacity(corpus.len());
    for (u, h) in corpus.iter().zip(hypotheses) {
        if u.transcript.is_empty() {
            return Err(Error::EmptyInput("reference transcript"));
        }
        let r_sym = vocab.symbols_of(&u.transcript);
        let h_sym = vocab.symbols_of(h);
        let r_chars: Vec<char> = r_sym.concat().chars().collect();
        let h_chars: Vec<char> = h_sym.concat().chars().collect();
        details.push(UtteranceResult {
            index: u.index,
            reference: r_sym.join(" "),
            hypothesis: h_sym.join(" "),
            word_edits: edit_distance(&u.transcript, h),
            reference_words: u.transcript.len(),
            char_edits: edit_distance(&r_chars, &h_chars),
            reference_chars: r_chars.len(),
        });
    }
    let sum = |f: fn(&UtteranceResult) -> usize| details.iter().map(f).sum::<usize>();
    let (we, rw, ce, rc) = (
        sum(|d| d.word_edits),
        sum(|d| d.reference_words),
        sum(|d| d.char_edits),
        sum(|d| d.reference_chars),
    );
    Ok(EvalReport {
        variant: variant.into(),
        split: split.into(),
        wer: we as f64 / rw as f64,
        cer: ce as f64 / rc as f64,
        utterances: details.len(),
        word_edits: we,
        reference_words: rw,
        char_edits: ce,
        reference_chars: rc,
        trainable_params: 0,
        details,
        router: None,
        backbones: BackboneHashes {
            encoder: String::new(),
            decoder: String::new(),
        },
    })
}

/// Greedy-decodes every utterance of `split` and scores it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    bridge: &Bridge,
    encoder: &EncoderWeights,
    decoder: &DecoderWeights,
    corpus: &[Utterance],
    split: &str,
    vocab: &Vocabulary,
    spec: &EvalSpec,
    threads: usize,
) -> Result<EvalReport> {
    let workers = Workers::new(threads)?;
    let hyps = workers
        .map(corpus, |u| transcribe(bridge, encoder, decoder, u, spec.max_new_tokens))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut report = score(&bridge.label(), split, corpus, &hyps, vocab)?;
    report.trainable_params = bridge.trainable_count();
    report.backbones = BackboneHashes::of(encoder, decoder);
    if let Bridge::Moe(state) = bridge {
        report.router = Some(router_stats(state, encoder, corpus)?);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Moe { experts: usize },
    Static,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Moe { experts } => format!("moe-{experts}"),
            Variant::Static => "static".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            variants: vec![
                Variant::Moe { experts: 2 },
                Variant::Moe { experts: 4 },
                Variant::Moe { experts: 8 },
                Variant::Static,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub trainable_params: usize,
    pub best_step: usize,
    pub best_dev_wer: Option<f64>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Everything the variants share: frozen backbones, data, budget and seeds.
pub struct AblationSetup<'a> {
    pub encoder: &'a EncoderWeights,
    pub decoder: &'a DecoderWeights,
    pub train: &'a [Utterance],
    pub dev: &'a [Utterance],
    pub test: &'a [Utterance],
    pub vocab: &'a Vocabulary,
    pub steering: &'a SteeringConfig,
    pub optim: &'a OptimSpec,
    pub eval: &'a EvalSpec,
    pub init_seed: u64,
    pub threads: usize,
}

/// Builds the untrained bridge of a variant.
pub fn init_bridge(
    variant: Variant,
    steering: &SteeringConfig,
    encoder: &EncoderWeights,
    decoder: &DecoderWeights,
    seed: u64,
) -> Result<Bridge> {
    let (l, d, dl) = (
        encoder.config.num_layers,
        encoder.config.model_dim,
        decoder.config.model_dim,
    );
    Ok(match variant {
        Variant::Moe { experts } => {
            let cfg = SteeringConfig {
                num_experts: experts,
                ..steering.clone()
            };
            Bridge::Moe(SteeringState::init(&cfg, l, d, dl, seed)?)
        }
        Variant::Static => Bridge::Static(StaticAdapter::init(d, dl, seed)),
    })
}

/// Trains and evaluates every variant from scratch under the shared setup.
/// A variant that fails is recorded with its error and the run continues.
pub fn run_ablation(
    plan: &AblationPlan,
    setup: &AblationSetup,
    mut progress: impl FnMut(&str, &crate::training::LogEntry),
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &variant in &plan.variants {
        let label = variant.label();
        let outcome =
            init_bridge(variant, setup.steering, setup.encoder, setup.decoder, setup.init_seed).and_then(|bridge| {
                let trainable = bridge.trainable_count();
                let out = align_train(
                    setup.encoder,
                    setup.decoder,
                    bridge,
                    setup.train,
                    setup.dev,
                    setup.optim,
                    setup.eval,
                    setup.threads,
                    |e| progress(&label, e),
                )?;
                let report = evaluate(
                    &out.best,
                    setup.encoder,
                    setup.decoder,
                    setup.test,
                    "test",
                    setup.vocab,
                    setup.eval,
                    setup.threads,
                )?;
                Ok((trainable, out.best_step, out.best_dev_wer, report))
            });
        rows.push(match outcome {
            Ok((trainable_params, best_step, best_dev_wer, report)) => AblationRow {
                variant: label,
                trainable_params,
                best_step,
                best_dev_wer,
                report: Some(report),
                error: None,
            },
            Err(e) => AblationRow {
                variant: label,
                trainable_params: 0,
                best_step: 0,
                best_dev_wer: None,
                report: None,
                error: Some(e.to_string()),
            },
        });
    }
    rows
}

/// One line per variant: label, status, trainable parameters, test WER/CER.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,status,trainable_params,best_step,best_dev_wer,test_wer,test_cer\n");
    for r in rows {
        let (status, wer, cer) = match &r.report {
            Some(rep) => ("ok", format!("{:.6}", rep.wer), format!("{:.6}", rep.cer)),
            None => ("failed", String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            status,
            r.trainable_params,
            r.best_step,
            r.best_dev_wer.map_or(String::new(), |w| format!("{w:.6}")),
            wer,
            cer
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(word_error_rate(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert!((word_error_rate(&["a", "b", "c"], &["a", "x", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            word_error_rate(&["a", "b", "c", "d"], &["x", "a", "b", "c", "d", "e"]).unwrap(),
            0.5
        );
        assert!(word_error_rate::<&str>(&[], &["a"]).is_err());
        assert_eq!(word_error_rate(&["a"], &["b", "c", "d"]).unwrap(), 3.0);
    }

    #[test]
    fn cer_joins_symbols() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(character_error_rate(&s(&["ab", "c"]), &s(&["a", "bc"])).unwrap(), 0.0);
        assert!((character_error_rate(&s(&["ab"]), &s(&["ac"])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn corpus_wer_is_micro_averaged() {
        let vocab = Vocabulary::new(&["a".to_string(), "b".to_string()]).unwrap();
        let utt = |index, transcript: Vec<usize>| Utterance {
            index,
            features: crate::numerics::Tensor::zeros(&[1, 1]),
            transcript,
            instruction: vec![crate::data::INSTR],
        };
        let corpus = vec![utt(0, vec![4]), utt(1, vec![4, 5, 4, 5])];
        let hyps = vec![vec![5], vec![4, 5, 4, 5]];
        let r = score("x", "test", &corpus, &hyps, &vocab).unwrap();
        assert_eq!(r.wer, 1.0 / 5.0);
        assert_eq!(r.macro_wer(), 0.5);
        let perfect: Vec<Vec<usize>> = corpus.iter().map(|u| u.transcript.clone()).collect();
        assert_eq!(score("x", "test", &corpus, &perfect, &vocab).unwrap().wer, 0.0);
    }

    #[test]
    fn csv_marks_failed_variants() {
        let rows = vec![AblationRow {
            variant: "moe-2".into(),
            trainable_params: 0,
            best_step: 0,
            best_dev_wer: None,
            report: None,
            error: Some("boom".into()),
        }];
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().nth(1).unwrap(), "moe-2,failed,0,0,,,");
    }
}
