//! Synthetic "audio"-text corpus, vocabulary, batching and loss masks.
//!
//! Every symbol owns a fixed `k × F` template. An utterance is a random
//! symbol string whose features are the concatenated templates plus Gaussian
//! noise. Generation is a pure function of `(seed, index)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::steering::POOL_KERNEL;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const INSTR: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<instr>"];

/// Symbol table: the four specials, then the task symbols in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: &[String]) -> Result<Self> {
        let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for s in symbols {
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "symbol {s:?} must be non-empty without whitespace"
                )));
            }
            if entries.contains(s) {
                return Err(Error::Config(format!("duplicate symbol {s:?}")));
            }
            entries.push(s.clone());
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_symbols(&self) -> usize {
        self.entries.len() - SPECIALS.len()
    }

    /// Token id of the `i`-th task symbol.
    pub fn symbol_id(i: usize) -> usize {
        SPECIALS.len() + i
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.entries.iter().position(|e| e == symbol)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn symbols_of(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.symbol(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn ids_of(&self, symbols: &[String]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| Error::Format(format!("symbol {s:?} not in vocabulary")))
            })
            .collect()
    }

    /// One entry per line; the line number is the id.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let entries: Vec<String> = text.lines().map(str::to_string).collect();
        if entries.len() < SPECIALS.len() || entries[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        Self::new(&entries[SPECIALS.len()..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }
}

fn default_symbols() -> Vec<String> {
    ('a'..='z').map(|c| c.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub symbols: Vec<String>,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            symbols: default_symbols(),
            frames_per_token: 4,
            feature_dim: 16,
            noise_std: 0.3,
            min_tokens: 3,
            max_tokens: 20,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth.{m}")));
        if self.symbols.is_empty() {
            return fail("symbols must not be empty");
        }
        if self.frames_per_token == 0 || self.feature_dim == 0 {
            return fail("frames_per_token and feature_dim must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail("min_tokens must be in 1..=max_tokens");
        }
        Vocabulary::new(&self.symbols).map(|_| ())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(&self.symbols)
    }
}

/// One synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub index: u64,
    /// `T × F` with `T = k · |transcript|`.
    pub features: Tensor,
    pub transcript: Vec<usize>,
    pub instruction: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    /// Instruction, transcript and the closing EOS.
    pub fn text_len(&self) -> usize {
        self.instruction.len() + self.transcript.len() + 1
    }
}

/// The fixed instruction marker placed before every transcript.
pub fn instruction_tokens() -> Vec<usize> {
    vec![INSTR]
}

/// Utterance generator with its templates drawn once.
#[derive(Clone, Debug)]
pub struct Synth {
    spec: SynthSpec,
    templates: Vec<Tensor>,
}

/// RNG streams: 0 for templates, `1 + index` for utterances, and a disjoint
/// high range for text-only sequences.
const TEXT_STREAM_BASE: u64 = 1 << 48;

impl Synth {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let shape = [spec.frames_per_token, spec.feature_dim];
        let templates: Vec<Tensor> = spec
            .symbols
            .iter()
            .map(|_| Tensor::from_fn(&shape, |_| rng.sample(StandardNormal)))
            .collect();
        for i in 0..templates.len() {
            for j in 0..i {
                if templates[i] == templates[j] {
                    return Err(Error::Config(format!("templates {j} and {i} coincide")));
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            templates,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn templates(&self) -> &[Tensor] {
        &self.templates
    }

    fn transcript(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = rng.gen_range(self.spec.min_tokens..=self.spec.max_tokens);
        (0..n)
            .map(|_| Vocabulary::symbol_id(rng.gen_range(0..self.spec.symbols.len())))
            .collect()
    }

    pub fn utterance(&self, index: u64) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(1 + index);
        let transcript = self.transcript(&mut rng);
        let (k, f) = (self.spec.frames_per_token, self.spec.feature_dim);
        let mut data = Vec::with_capacity(transcript.len() * k * f);
        for &tok in &transcript {
            data.extend_from_slice(self.templates[tok - SPECIALS.len()].data());
        }
        if self.spec.noise_std > 0.0 {
            for v in data.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.spec.noise_std * z;
            }
        }
        let features = Tensor::new(vec![transcript.len() * k, f], data).expect("template sizes");
        Utterance {
            index,
            features,
            transcript,
            instruction: instruction_tokens(),
        }
    }

    /// A transcript from the text-only stream, disjoint from every utterance.
    pub fn text_transcript(&self, index: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(TEXT_STREAM_BASE + index);
        self.transcript(&mut rng)
    }
}

pub fn generate_corpus(spec: &SynthSpec, count: usize) -> Result<Vec<Utterance>> {
    let synth = Synth::new(spec)?;
    Ok((0..count as u64).map(|i| synth.utterance(i)).collect())
}

/// Text the decoder is pretrained on: the transcript in context, the
/// instruction marker, then the transcript again and EOS.
pub fn lm_sequence(transcript: &[usize]) -> Vec<usize> {
    let mut seq = transcript.to_vec();
    seq.extend(instruction_tokens());
    seq.extend_from_slice(transcript);
    seq.push(EOS);
    seq
}

/// Labels and loss mask for one utterance over the decoder sequence
/// `[prompt (S) ; instruction ; transcript ; EOS]`. Position `p` is scored by
/// the logits at `p - 1`.
pub fn sequence_labels(prompt_len: usize, instruction: &[usize], transcript: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let len = prompt_len + instruction.len() + transcript.len() + 1;
    let mut labels = vec![PAD; len];
    let mut mask = vec![false; len];
    let start = prompt_len + instruction.len();
    labels[prompt_len..start].copy_from_slice(instruction);
    for (i, &t) in transcript.iter().chain(std::iter::once(&EOS)).enumerate() {
        labels[start + i] = t;
        mask[start + i] = true;
    }
    (labels, mask)
}

/// Right-padded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B × T_max × F`, zero beyond each row's frame length.
    pub features: Tensor,
    pub frame_lengths: Vec<usize>,
    /// Decoder text inputs (instruction then transcript), padded with PAD.
    pub tokens: Vec<Vec<usize>>,
    pub text_lengths: Vec<usize>,
    /// Audio prompt rows per utterance, `ceil(T / 4)`.
    pub prompt_lengths: Vec<usize>,
    /// Labels over decoder positions, padded to the longest sequence.
    pub labels: Vec<Vec<usize>>,
    /// True exactly at transcript and EOS positions.
    pub loss_mask: Vec<Vec<bool>>,
    pub indices: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frame_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_lengths.is_empty()
    }

    /// Unpadded `T × F` features of row `b`.
    pub fn row_features(&self, b: usize) -> Tensor {
        let (t_max, f) = (self.features.shape()[1], self.features.shape()[2]);
        let t = self.frame_lengths[b];
        let start = b * t_max * f;
        Tensor::new(vec![t, f], self.features.data()[start..start + t * f].to_vec()).expect("row slice")
    }

    pub fn row_tokens(&self, b: usize) -> &[usize] {
        &self.tokens[b][..self.text_lengths[b]]
    }

    /// Unpadded sequence length of row `b`, counting the trailing EOS.
    pub fn sequence_len(&self, b: usize) -> usize {
        self.prompt_lengths[b] + self.text_lengths[b] + 1
    }

    /// Targets and mask aligned with the logits of row `b` (length
    /// `S + text_len`): logits at `p` predict the label at `p + 1`.
    pub fn shifted_targets(&self, b: usize) -> (Vec<usize>, Vec<bool>) {
        let n = self.sequence_len(b);
        (self.labels[b][1..n].to_vec(), self.loss_mask[b][1..n].to_vec())
    }

    pub fn loss_positions(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Drops utterances longer than `max_frames` frames or `max_text` text tokens
/// (instruction + transcript + EOS), then right-pads the rest.
pub fn collate(utterances: &[Utterance], max_frames: usize, max_text: usize) -> Result<Batch> {
    if utterances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let kept: Vec<&Utterance> = utterances
        .iter()
        .filter(|u| u.frames() <= max_frames && u.text_len() <= max_text)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let f = kept[0].features.shape()[1];
    if let Some(u) = kept.iter().find(|u| u.features.shape()[1] != f) {
        return Err(Error::Shape {
            op: "collate",
            lhs: vec![kept[0].frames(), f],
            rhs: u.features.shape().to_vec(),
        });
    }
    let t_max = kept.iter().map(|u| u.frames()).max().unwrap_or(0);
    let b = kept.len();
    let mut features = vec![0.0; b * t_max * f];
    for (i, u) in kept.iter().enumerate() {
        features[i * t_max * f..i * t_max * f + u.features.numel()].copy_from_slice(u.features.data());
    }
    let frame_lengths: Vec<usize> = kept.iter().map(|u| u.frames()).collect();
    let prompt_lengths: Vec<usize> = frame_lengths.iter().map(|t| t.div_ceil(POOL_KERNEL)).collect();
    let text_lengths: Vec<usize> = kept.iter().map(|u| u.instruction.len() + u.transcript.len()).collect();
    let text_max = text_lengths.iter().copied().max().unwrap_or(0);
    let tokens = kept
        .iter()
        .map(|u| {
            let mut t = u.instruction.clone();
            t.extend_from_slice(&u.transcript);
            t.resize(text_max, PAD);
            t
        })
        .collect();
    let seq_max = (0..b)
        .map(|i| prompt_lengths[i] + text_lengths[i] + 1)
        .max()
        .unwrap_or(0);
    let (labels, loss_mask) = kept
        .iter()
        .zip(&prompt_lengths)
        .map(|(u, &s)| {
            let (mut l, mut m) = sequence_labels(s, &u.instruction, &u.transcript);
            l.resize(seq_max, PAD);
            m.resize(seq_max, false);
            (l, m)
        })
        .unzip();
    Ok(Batch {
        features: Tensor::new(vec![b, t_max, f], features)?,
        frame_lengths,
        tokens,
        text_lengths,
        prompt_lengths,
        labels,
        loss_mask,
        indices: kept.iter().map(|u| u.index).collect(),
    })
}

/// Deterministic shuffled partition into train/dev/test.
pub fn split<T: Clone>(corpus: &[T], ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if corpus.len() < 3 {
        return Err(Error::Config(format!(
            "split needs at least 3 items, got {}",
            corpus.len()
        )));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "data.split_ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_dev = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    format: String,
    version: u32,
    spec: SynthSpec,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    index: u64,
    frames: usize,
    features: String,
    transcript: Vec<String>,
    instruction: Vec<String>,
}

pub const CORPUS_FORMAT: &str = "steermoe-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// JSON-lines: a header line with the generating spec, then one utterance per line.
pub fn write_corpus(path: &Path, spec: &SynthSpec, utterances: &[Utterance]) -> Result<()> {
    let vocab = spec.vocabulary()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        spec: spec.clone(),
        count: utterances.len(),
    };
    let mut write_line = |value: String| -> Result<()> {
        w.write_all(value.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    write_line(serde_json::to_string(&header)?)?;
    for u in utterances {
        let line = CorpusLine {
            index: u.index,
            frames: u.frames(),
            features: B64.encode(u.features.to_le_bytes()),
            transcript: vocab.symbols_of(&u.transcript),
            instruction: vocab.symbols_of(&u.instruction),
        };
        write_line(serde_json::to_string(&line)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<(SynthSpec, Vec<Utterance>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty corpus file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader = serde_json::from_str(&first)?;
    if header.format != CORPUS_FORMAT {
        return Err(Error::Format(format!("unexpected corpus format {:?}", header.format)));
    }
    if header.version != CORPUS_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CORPUS_VERSION,
        });
    }
    let vocab = header.spec.vocabulary()?;
    let f = header.spec.feature_dim;
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line)?;
        let bytes = B64
            .decode(rec.features.as_bytes())
            .map_err(|e| Error::Format(format!("utterance {}: {e}", rec.index)))?;
        out.push(Utterance {
            index: rec.index,
            features: Tensor::from_le_bytes(vec![rec.frames, f], &bytes)?,
            transcript: vocab.ids_of(&rec.transcript)?,
            instruction: vocab.ids_of(&rec.instruction)?,
        });
    }
    if out.len() != header.count {
        return Err(Error::Format(format!(
            "header announces {} utterances, file has {}",
            header.count,
            out.len()
        )));
    }
    Ok((header.spec, out))
}
