//! The parallel synthesis network: an encoder stack over symbols, duration
//! and pitch predictors, pitch embedding, duration-driven upsampling and a
//! decoder stack producing mel frames.

mod checkpoint;
mod layers;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use layers::{FftStack, Predictor, SeqMask};

use crate::error::{Error, Result};
use crate::numerics::nn::{init_rng, Conv1d, Embedding, Linear};
use crate::numerics::{Graph, Mode, ParamStore, Tensor, Var};
use crate::text::DEFAULT_SYMBOLS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Layers in each of the two stacks.
    pub n_layers: usize,
    pub n_heads: usize,
    pub kernel_size: usize,
    pub d_ff: usize,
    pub predictor_channels: usize,
    pub predictor_kernel: usize,
    pub pitch_kernel: usize,
    pub dropout: f64,
    pub n_mels: usize,
    pub n_speakers: usize,
    /// 1 for one pitch value per symbol, 3 for the thirds variant.
    pub pitch_values_per_symbol: usize,
    pub pitch_loss_weight: f64,
    pub duration_loss_weight: f64,
    pub max_duration: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_SYMBOLS.chars().count(),
            d_model: 384,
            n_layers: 6,
            n_heads: 1,
            kernel_size: 3,
            d_ff: 1536,
            predictor_channels: 256,
            predictor_kernel: 3,
            pitch_kernel: 3,
            dropout: 0.1,
            n_mels: 80,
            n_speakers: 1,
            pitch_values_per_symbol: 1,
            pitch_loss_weight: 0.1,
            duration_loss_weight: 0.1,
            max_duration: 75,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("predictor_channels", self.predictor_channels),
            ("n_mels", self.n_mels),
            ("n_speakers", self.n_speakers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, k) in [
            ("kernel_size", self.kernel_size),
            ("predictor_kernel", self.predictor_kernel),
            ("pitch_kernel", self.pitch_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !matches!(self.pitch_values_per_symbol, 1 | 3) {
            return Err(Error::Config(format!(
                "pitch_values_per_symbol must be 1 or 3, got {}",
                self.pitch_values_per_symbol
            )));
        }
        if self.pitch_loss_weight < 0.0 || self.duration_loss_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which speaker embedding to add to the input tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Id(usize),
    /// `(1 − weight)·from + weight·to`.
    Blend {
        from: usize,
        to: usize,
        weight: f64,
    },
}

impl Default for Speaker {
    fn default() -> Self {
        Speaker::Id(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub speaker: Speaker,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self {
            ids,
            speaker: Speaker::Id(0),
        }
    }

    pub fn with_speaker(mut self, speaker: Speaker) -> Self {
        self.speaker = speaker;
        self
    }
}

/// Everything `forward_train` needs for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub tokens: TokenSequence,
    /// `n × pitch_values_per_symbol`, standardized.
    pub pitch: Tensor,
    pub durations: Vec<usize>,
    /// `t × n_mels` with `t = Σ durations`.
    pub mel: Tensor,
}

impl TrainExample {
    pub fn symbols(&self) -> usize {
        self.tokens.ids.len()
    }

    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.symbols();
        if n == 0 {
            return Err(Error::Empty("utterance has no symbols".into()));
        }
        if self.durations.len() != n {
            return Err(Error::LengthMismatch {
                what: "durations vs symbols".into(),
                expected: n,
                got: self.durations.len(),
            });
        }
        if self.pitch.shape() != [n, cfg.pitch_values_per_symbol] {
            return Err(Error::shape(
                "pitch target",
                format!("[{n}, {}]", cfg.pitch_values_per_symbol),
                format!("{:?}", self.pitch.shape()),
            ));
        }
        if self.mel.shape().len() != 2 || self.mel.cols() != cfg.n_mels {
            return Err(Error::shape(
                "mel target",
                format!("[t, {}]", cfg.n_mels),
                format!("{:?}", self.mel.shape()),
            ));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.frames() {
            return Err(Error::LengthMismatch {
                what: "sum of durations vs mel frames".into(),
                expected: self.frames(),
                got: total,
            });
        }
        Ok(())
    }
}

/// Batch-level padding targets for one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub symbols: usize,
    pub frames: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub mel: f64,
    pub pitch: f64,
    pub duration: f64,
    pub total: f64,
}

/// Graph handles produced by a training forward pass. Symbol- and
/// frame-indexed outputs include padded rows when padding was requested.
#[derive(Clone, Copy, Debug)]
pub struct TrainVars {
    pub total: Var,
    pub mel_loss: Var,
    pub pitch_loss: Var,
    pub duration_loss: Var,
    pub mel: Var,
    pub pitch: Var,
    pub log_durations: Var,
    pub hidden: Var,
    pub conditioned: Var,
}

/// Constant targets for [`composite_loss`]. Row weights are 0/1 masks.
pub struct LossTargets<'a> {
    pub mel: &'a Tensor,
    pub pitch: &'a Tensor,
    pub log_durations: &'a Tensor,
    pub symbol_weights: Option<&'a [f64]>,
    pub frame_weights: Option<&'a [f64]>,
}

/// `mel MSE + α·pitch MSE + γ·log-duration MSE`, each a mean over unmasked
/// elements. Returns `(total, mel, pitch, duration)`.
pub fn composite_loss(
    g: &mut Graph,
    mel: Var,
    pitch: Var,
    log_durations: Var,
    targets: &LossTargets,
    pitch_weight: f64,
    duration_weight: f64,
) -> Result<(Var, Var, Var, Var)> {
    let mel_loss = g.tape.mse(mel, targets.mel, targets.frame_weights)?;
    let pitch_loss = g.tape.mse(pitch, targets.pitch, targets.symbol_weights)?;
    let dur_loss = g
        .tape
        .mse(log_durations, targets.log_durations, targets.symbol_weights)?;
    let total = g
        .tape
        .lin_comb(&[(mel_loss, 1.0), (pitch_loss, pitch_weight), (dur_loss, duration_weight)])?;
    Ok((total, mel_loss, pitch_loss, dur_loss))
}

/// Maps the predicted standardized pitch (`n × p`) to the pitch fed to the
/// embedding.
pub type PitchEdit<'a> = &'a dyn Fn(&Tensor) -> Result<Tensor>;

/// Caller-supplied adjustments for inference.
#[derive(Default)]
pub struct InferControls<'a> {
    pub pitch: Option<PitchEdit<'a>>,
    /// Replaces predicted durations.
    pub durations: Option<&'a [usize]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `t̂ × n_mels`.
    pub mel: Tensor,
    /// Predicted standardized pitch, `n × p`.
    pub predicted_pitch: Tensor,
    /// Pitch actually used for conditioning (after any transform).
    pub pitch: Tensor,
    pub log_durations: Vec<f64>,
    pub durations: Vec<usize>,
    pub hidden: Tensor,
    pub conditioned: Tensor,
}

/// Sinusoidal positional encodings, `n × d`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(n, d, data).expect("n·d values")
}

/// Row indices that repeat symbol `i` `durations[i]` times.
pub fn upsample_indices(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

/// Repeats row `i` of `g` `durations[i]` times, preserving order.
pub fn upsample(graph: &mut Graph, g: Var, durations: &[usize]) -> Result<Var> {
    let rows = graph.tape.value(g).rows();
    if durations.len() != rows {
        return Err(Error::LengthMismatch {
            what: "durations vs symbols".into(),
            expected: rows,
            got: durations.len(),
        });
    }
    let index = upsample_indices(durations);
    if index.is_empty() {
        return Err(Error::EmptyOutput);
    }
    graph.tape.gather_rows(g, index.into())
}

/// Integer frame counts from log-domain predictions:
/// `clamp(round(exp(x) − 1), 0, max)`.
pub fn realize_durations(log_durations: &[f64], max_duration: usize) -> Vec<usize> {
    log_durations
        .iter()
        .map(|&x| {
            let d = (x.exp() - 1.0).round();
            if d.is_nan() || d <= 0.0 {
                0
            } else {
                (d as usize).min(max_duration)
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FastPitch {
    config: ModelConfig,
    params: ParamStore,
    token_embedding: Embedding,
    speaker_embedding: Option<Embedding>,
    encoder: FftStack,
    duration_predictor: Predictor,
    pitch_predictor: Predictor,
    pitch_embedding: Conv1d,
    decoder: FftStack,
    mel_projection: Linear,
}

impl FastPitch {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let token_embedding = Embedding::new(&mut store, &mut rng, "token_embedding", c.vocab_size, c.d_model);
        let speaker_embedding = (c.n_speakers > 1)
            .then(|| Embedding::new(&mut store, &mut rng, "speaker_embedding", c.n_speakers, c.d_model));
        let encoder = FftStack::new(&mut store, &mut rng, "encoder", c)?;
        let duration_predictor = Predictor::new(&mut store, &mut rng, "duration_predictor", c, 1);
        let pitch_predictor = Predictor::new(&mut store, &mut rng, "pitch_predictor", c, c.pitch_values_per_symbol);
        let pitch_embedding = Conv1d::new(
            &mut store,
            &mut rng,
            "pitch_embedding",
            c.pitch_values_per_symbol,
            c.d_model,
            c.pitch_kernel,
        );
        let decoder = FftStack::new(&mut store, &mut rng, "decoder", c)?;
        let mel_projection = Linear::new(&mut store, &mut rng, "mel_projection", c.d_model, c.n_mels);
        Ok(Self {
            config,
            params: store,
            token_embedding,
            speaker_embedding,
            encoder,
            duration_predictor,
            pitch_predictor,
            pitch_embedding,
            decoder,
            mel_projection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn pitch_embedding(&self) -> &Conv1d {
        &self.pitch_embedding
    }

    pub fn speaker_embedding(&self) -> Option<&Embedding> {
        self.speaker_embedding.as_ref()
    }

    pub fn token_embedding(&self) -> &Embedding {
        &self.token_embedding
    }

    pub fn graph(&self, mode: Mode) -> Graph {
        Graph::new(&self.params, mode)
    }

    fn check_speaker(&self, speaker: Speaker) -> Result<()> {
        let n = self.config.n_speakers;
        let ok = match speaker {
            Speaker::Id(id) => id < n,
            Speaker::Blend { from, to, weight } => from < n && to < n && (0.0..=1.0).contains(&weight),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfRange(format!(
                "speaker {speaker:?} invalid for a model with {n} speaker(s)"
            )))
        }
    }

    /// Token embedding plus speaker embedding (multi-speaker models only)
    /// plus positional encoding, `n × d_model`. Padded rows are zero.
    pub fn embed_tokens(&self, g: &mut Graph, seq: &TokenSequence, mask: Option<&SeqMask>) -> Result<Var> {
        if seq.ids.is_empty() {
            return Err(Error::Empty("token sequence is empty".into()));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        self.check_speaker(seq.speaker)?;
        let mut x = self.token_embedding.lookup(g, &seq.ids)?;
        if let Some(table) = &self.speaker_embedding {
            let d = self.config.d_model;
            let row = match seq.speaker {
                Speaker::Id(id) => table.lookup(g, &[id])?,
                Speaker::Blend { from, to, weight } => {
                    let a = table.lookup(g, &[from])?;
                    let b = table.lookup(g, &[to])?;
                    g.tape.lin_comb(&[(a, 1.0 - weight), (b, weight)])?
                }
            };
            let row = g.tape.reshape(row, vec![d])?;
            x = g.tape.add_row(x, row)?;
        }
        let pe = positional_encoding(seq.ids.len(), self.config.d_model);
        x = g.tape.add_const(x, &pe)?;
        Ok(layers::apply_mask(g, x, mask))
    }

    pub fn encode(&self, g: &mut Graph, x: Var, mask: Option<&SeqMask>) -> Result<Var> {
        self.encoder.forward(g, x, mask, self.config.dropout)
    }

    pub fn decode(&self, g: &mut Graph, x: Var, mask: Option<&SeqMask>) -> Result<Var> {
        self.decoder.forward(g, x, mask, self.config.dropout)
    }

    /// Log-domain durations, `n × 1`.
    pub fn predict_log_durations(&self, g: &mut Graph, h: Var, mask: Option<&SeqMask>) -> Result<Var> {
        self.duration_predictor.forward(g, h, mask, self.config.dropout)
    }

    /// Standardized pitch, `n × pitch_values_per_symbol`.
    pub fn predict_pitch(&self, g: &mut Graph, h: Var, mask: Option<&SeqMask>) -> Result<Var> {
        self.pitch_predictor.forward(g, h, mask, self.config.dropout)
    }

    /// `h + PitchEmbedding(pitch)`.
    pub fn add_pitch(&self, g: &mut Graph, h: Var, pitch: Var) -> Result<Var> {
        let embedded = self.pitch_embedding.forward(g, pitch)?;
        g.tape.add(h, embedded)
    }

    fn decode_frames(&self, g: &mut Graph, frames: Var, mask: Option<&SeqMask>) -> Result<Var> {
        let t = g.tape.value(frames).rows();
        let pe = positional_encoding(t, self.config.d_model);
        let x = g.tape.add_const(frames, &pe)?;
        let x = layers::apply_mask(g, x, mask);
        let y = self.decode(g, x, mask)?;
        let mel = self.mel_projection.forward(g, y)?;
        Ok(layers::apply_mask(g, mel, mask))
    }

    /// Teacher-forced pass with ground-truth pitch and durations. With
    /// `padding`, sequences are padded to the given lengths and every
    /// reduction ignores the padded rows.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        ex: &TrainExample,
        padding: Option<Padding>,
    ) -> Result<(TrainVars, LossBreakdown)> {
        ex.validate(&self.config)?;
        let n = ex.symbols();
        let t = ex.frames();
        let (n_pad, t_pad) = match padding {
            Some(pad) if pad.symbols < n || pad.frames < t => {
                return Err(Error::Config(format!(
                    "padding {pad:?} shorter than utterance ({n} symbols, {t} frames)"
                )))
            }
            Some(pad) => (pad.symbols, pad.frames),
            None => (n, t),
        };
        let symbol_mask = (n_pad > n).then(|| SeqMask::new(n, n_pad));
        let frame_mask = (t_pad > t).then(|| SeqMask::new(t, t_pad));

        let mut ids = ex.tokens.ids.clone();
        ids.resize(n_pad, 0);
        let tokens = TokenSequence {
            ids,
            speaker: ex.tokens.speaker,
        };
        let x = self.embed_tokens(g, &tokens, symbol_mask.as_ref())?;
        let hidden = self.encode(g, x, symbol_mask.as_ref())?;
        let log_durations = self.predict_log_durations(g, hidden, symbol_mask.as_ref())?;
        let pitch_pred = self.predict_pitch(g, hidden, symbol_mask.as_ref())?;

        let pitch_target = pad_rows(&ex.pitch, n_pad);
        let pitch_in = g.tape.constant(pitch_target.clone());
        let conditioned = self.add_pitch(g, hidden, pitch_in)?;

        let mut index = upsample_indices(&ex.durations);
        index.resize(t_pad, 0);
        let frames = g.tape.gather_rows(conditioned, Arc::from(index))?;
        let frames = layers::apply_mask(g, frames, frame_mask.as_ref());
        let mel = self.decode_frames(g, frames, frame_mask.as_ref())?;

        let mel_target = pad_rows(&ex.mel, t_pad);
        let log_dur_target = Tensor::matrix(
            n_pad,
            1,
            (0..n_pad)
                .map(|i| ex.durations.get(i).map_or(0.0, |&d| (1.0 + d as f64).ln()))
                .collect(),
        )?;
        let targets = LossTargets {
            mel: &mel_target,
            pitch: &pitch_target,
            log_durations: &log_dur_target,
            symbol_weights: symbol_mask.as_ref().map(SeqMask::weights),
            frame_weights: frame_mask.as_ref().map(SeqMask::weights),
        };
        let (total, mel_loss, pitch_loss, duration_loss) = composite_loss(
            g,
            mel,
            pitch_pred,
            log_durations,
            &targets,
            self.config.pitch_loss_weight,
            self.config.duration_loss_weight,
        )?;
        let scalar = |v: Var| g.tape.value(v).data()[0];
        let breakdown = LossBreakdown {
            mel: scalar(mel_loss),
            pitch: scalar(pitch_loss),
            duration: scalar(duration_loss),
            total: scalar(total),
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((
            TrainVars {
                total,
                mel_loss,
                pitch_loss,
                duration_loss,
                mel,
                pitch: pitch_pred,
                log_durations,
                hidden,
                conditioned,
            },
            breakdown,
        ))
    }

    /// Fully parallel synthesis on a caller-provided graph. Returns the
    /// output and the graph handle of the mel frames.
    pub fn forward_infer_on(
        &self,
        g: &mut Graph,
        seq: &TokenSequence,
        controls: &InferControls,
    ) -> Result<(ModelOutput, Var)> {
        let x = self.embed_tokens(g, seq, None)?;
        let hidden = self.encode(g, x, None)?;
        let log_dur = self.predict_log_durations(g, hidden, None)?;
        let pitch_pred = self.predict_pitch(g, hidden, None)?;
        let predicted_pitch = g.tape.value(pitch_pred).clone();
        let pitch_in = match controls.pitch {
            Some(transform) => {
                let edited = transform(&predicted_pitch)?;
                if edited.shape() != predicted_pitch.shape() {
                    return Err(Error::shape(
                        "pitch transform",
                        format!("{:?}", predicted_pitch.shape()),
                        format!("{:?}", edited.shape()),
                    ));
                }
                g.tape.constant(edited)
            }
            None => pitch_pred,
        };
        let conditioned = self.add_pitch(g, hidden, pitch_in)?;
        let log_durations = g.tape.value(log_dur).data().to_vec();
        let durations = match controls.durations {
            Some(d) => d.to_vec(),
            None => realize_durations(&log_durations, self.config.max_duration),
        };
        let frames = upsample(g, conditioned, &durations)?;
        let mel = self.decode_frames(g, frames, None)?;
        let out = ModelOutput {
            mel: g.tape.value(mel).clone(),
            predicted_pitch,
            pitch: g.tape.value(pitch_in).clone(),
            log_durations,
            durations,
            hidden: g.tape.value(hidden).clone(),
            conditioned: g.tape.value(conditioned).clone(),
        };
        if !out.mel.is_finite() {
            return Err(Error::NonFinite("synthesized mel".into()));
        }
        Ok((out, mel))
    }

    /// Evaluation-mode synthesis; deterministic for identical inputs.
    pub fn forward_infer(&self, seq: &TokenSequence, controls: &InferControls) -> Result<ModelOutput> {
        let mut g = self.graph(Mode::Eval);
        self.forward_infer_on(&mut g, seq, controls).map(|(out, _)| out)
    }
}

fn pad_rows(t: &Tensor, rows: usize) -> Tensor {
    let cols = t.cols();
    let mut data = t.data().to_vec();
    data.resize(rows * cols, 0.0);
    Tensor::matrix(rows, cols, data).expect("rows·cols values")
}
