//! CNN encoder + recurrent decoder captioner, with a classification head
//! variant, checkpoint files and externally computed feature files.
//!
//! The encoder maps an image (or a stored feature vector) to a
//! `neurons`-dimensional image vector `v = tanh(W·features + b)`. For
//! captioning `v` is the decoder's initial hidden state (`c₀ = 0` for LSTM);
//! for classification a dense softmax head reads `v` directly.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::layers::{
    conv2d, dense, embedding, glorot_uniform, gru_step, lstm_step, maxpool2d, softmax_cross_entropy, BoundParams,
    CellKind, CellVars, LayerParams, ParamStore,
};
use crate::synth::{AccessoryType, CaptionLevel};
use crate::tensor::{softmax_in_place, Graph, Tensor, Var};
use crate::vocab::{Vocab, END, PAD, START};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const FEATURE_FILE_VERSION: u32 = 1;
pub const NEURON_GRID: [usize; 5] = [64, 128, 256, 512, 1024];
pub const DEFAULT_EMBED_DIM: usize = 64;
/// Kernel counts of the three conv blocks.
pub const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderKind {
    MiniCnn,
    FeatureFile { path: PathBuf, dim: usize },
}

impl EncoderKind {
    /// Name used in report tables.
    pub fn label(&self) -> &'static str {
        match self {
            EncoderKind::MiniCnn => "MiniVGG",
            EncoderKind::FeatureFile { .. } => "Features",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Captioning,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "captioning" => Ok(Task::Captioning),
            "classification" => Ok(Task::Classification),
            _ => Err(Error::UnknownKind {
                what: "task",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub decoder: CellKind,
    pub neurons: usize,
    pub embed_dim: usize,
    pub task: Task,
    /// Caption level the model is trained on (ignored for classification).
    pub level: CaptionLevel,
    pub image_size: usize,
    pub seed: u64,
    pub vocab: Vocab,
}

impl ModelConfig {
    pub fn new(task: Task, decoder: CellKind, neurons: usize, vocab: Vocab) -> Self {
        Self {
            encoder: EncoderKind::MiniCnn,
            decoder,
            neurons,
            embed_dim: DEFAULT_EMBED_DIM,
            task,
            level: CaptionLevel::Complete,
            image_size: crate::synth::DEFAULT_IMAGE_SIZE,
            seed: 0,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neurons == 0 || self.embed_dim == 0 {
            return Err(Error::Config("neurons and embed_dim must be positive".into()));
        }
        match &self.encoder {
            EncoderKind::MiniCnn if self.image_size == 0 || !self.image_size.is_multiple_of(8) => Err(Error::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            ))),
            EncoderKind::FeatureFile { dim: 0, .. } => Err(Error::Config("feature dim must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Length of one flattened encoder input.
    pub fn input_dim(&self) -> usize {
        match &self.encoder {
            EncoderKind::MiniCnn => 3 * self.image_size * self.image_size,
            EncoderKind::FeatureFile { dim, .. } => *dim,
        }
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let n = self.neurons;
        let mut shapes = Vec::new();
        let proj_in = match &self.encoder {
            EncoderKind::MiniCnn => {
                let mut c_in = 3;
                for (i, &k) in CONV_CHANNELS.iter().enumerate() {
                    shapes.push((format!("enc.conv{}.weight", i + 1), vec![k, c_in, 3, 3]));
                    shapes.push((format!("enc.conv{}.bias", i + 1), vec![k]));
                    c_in = k;
                }
                let side = self.image_size / 8;
                c_in * side * side
            }
            EncoderKind::FeatureFile { dim, .. } => *dim,
        };
        shapes.push(("enc.proj.weight".into(), vec![proj_in, n]));
        shapes.push(("enc.proj.bias".into(), vec![n]));
        match self.task {
            Task::Captioning => {
                let v = self.vocab.len();
                let e = self.embed_dim;
                shapes.push(("dec.embed".into(), vec![v, e]));
                let prefix = decoder_prefix(self.decoder);
                for g in self.decoder.gates() {
                    shapes.push((format!("{prefix}.W_{g}"), vec![e, n]));
                    shapes.push((format!("{prefix}.U_{g}"), vec![n, n]));
                    shapes.push((format!("{prefix}.b_{g}"), vec![n]));
                }
                shapes.push(("out.weight".into(), vec![n, v]));
                shapes.push(("out.bias".into(), vec![v]));
            }
            Task::Classification => {
                shapes.push(("head.weight".into(), vec![n, NUM_CLASSES]));
                shapes.push(("head.bias".into(), vec![NUM_CLASSES]));
            }
        }
        shapes
    }
}

fn decoder_prefix(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Gru => "dec.gru",
        CellKind::Lstm => "dec.lstm",
    }
}

/// Precomputed per-image feature vectors keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub rows: HashMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    version: u32,
    dim: usize,
    count: usize,
}

impl FeatureTable {
    /// Header line `{version, dim, count}`, then per record a `u32` id
    /// length, the UTF-8 id and `dim` little-endian `f64`s. Records are
    /// written in id order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = FeatureHeader {
            version: FEATURE_FILE_VERSION,
            dim: self.dim,
            count: self.rows.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        let mut ids: Vec<&String> = self.rows.keys().collect();
        ids.sort();
        for id in ids {
            let row = &self.rows[id];
            if row.len() != self.dim {
                return Err(Error::Format(format!("feature row `{id}` has {} values, expected {}", row.len(), self.dim)));
            }
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: FeatureHeader = serde_json::from_str(line.trim_end())?;
        if header.version != FEATURE_FILE_VERSION {
            return Err(Error::Format(format!("unsupported feature file version {}", header.version)));
        }
        let mut rows = HashMap::with_capacity(header.count);
        let mut len = [0u8; 4];
        let mut value = [0u8; 8];
        for _ in 0..header.count {
            reader.read_exact(&mut len)?;
            let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
            reader.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|e| Error::Format(e.to_string()))?;
            let mut row = Vec::with_capacity(header.dim);
            for _ in 0..header.dim {
                reader.read_exact(&mut value)?;
                row.push(f64::from_le_bytes(value));
            }
            rows.insert(id, row);
        }
        Ok(Self { dim: header.dim, rows })
    }
}

#[derive(Clone, Debug)]
pub struct CaptionerModel {
    config: ModelConfig,
    params: ParamStore,
    features: Option<Arc<FeatureTable>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    manifest: Vec<(String, Vec<usize>)>,
    checksum: String,
}

impl CaptionerModel {
    /// Seeded initialization: He-uniform conv kernels, Glorot-uniform
    /// matrices and embeddings, zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let features = load_features(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with("bias") || name.contains(".b_") {
                Tensor::zeros(&shape)
            } else if shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                glorot_uniform(&mut rng, &shape, fan_in, 0)
            } else {
                glorot_uniform(&mut rng, &shape, shape[0], shape[1])
            };
            params.insert(name, t)?;
        }
        Ok(Self {
            config,
            params,
            features,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params.manifest()
    }

    /// Flattened encoder input for one sample: CHW pixels (resized
    /// bilinearly when the size differs) or the stored feature row.
    pub fn input_for(&self, id: &str, image: &Image) -> Result<Vec<f64>> {
        match &self.features {
            Some(table) => table
                .rows
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Format(format!("no stored features for sample `{id}`"))),
            None => Ok(self.image_input(image)),
        }
    }

    /// Preprocessing for a raw image, shared by the CLI and the server.
    pub fn image_input(&self, image: &Image) -> Vec<f64> {
        let s = self.config.image_size;
        if image.width() == s && image.height() == s {
            image.to_chw()
        } else {
            image.resize_bilinear(s, s).to_chw()
        }
    }

    pub fn uses_images(&self) -> bool {
        self.features.is_none()
    }

    fn input_tensor(&self, inputs: &[&[f64]]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dim = self.config.input_dim();
        let mut data = Vec::with_capacity(inputs.len() * dim);
        for x in inputs {
            if x.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "encoder input",
                    left: vec![x.len()],
                    right: vec![dim],
                });
            }
            data.extend_from_slice(x);
        }
        let b = inputs.len();
        let shape = match self.config.encoder {
            EncoderKind::MiniCnn => {
                let s = self.config.image_size;
                vec![b, 3, s, s]
            }
            EncoderKind::FeatureFile { dim, .. } => vec![b, dim],
        };
        Tensor::new(shape, data)
    }

    /// Image vectors `B×neurons`.
    pub fn encode(&self, graph: &mut Graph, bound: &BoundParams, inputs: &[&[f64]]) -> Result<Var> {
        let x = graph.constant(self.input_tensor(inputs)?);
        let b = inputs.len();
        let flat = match self.config.encoder {
            EncoderKind::MiniCnn => {
                let mut h = x;
                for i in 1..=CONV_CHANNELS.len() {
                    let w = bound.var(&format!("enc.conv{i}.weight"))?;
                    let bias = bound.var(&format!("enc.conv{i}.bias"))?;
                    let c = conv2d(graph, h, w, bias, 1, 1)?;
                    let r = graph.relu(c)?;
                    h = maxpool2d(graph, r, 2, 2)?;
                }
                let n: usize = graph.shape(h)[1..].iter().product();
                graph.reshape(h, &[b, n])?
            }
            EncoderKind::FeatureFile { .. } => x,
        };
        let proj = dense(graph, flat, bound.var("enc.proj.weight")?, bound.var("enc.proj.bias")?)?;
        graph.tanh(proj)
    }

    fn require(&self, task: Task) -> Result<()> {
        if self.config.task != task {
            return Err(Error::TaskMismatch(format!(
                "operation needs a {task:?} model, this one is {:?}",
                self.config.task
            )));
        }
        Ok(())
    }

    /// Scalar loss node for a batch. Captioning targets are encoded id
    /// sequences (teacher forcing: input token `t` predicts token `t+1`,
    /// PAD ignored); classification targets are one class index each.
    pub fn loss_node(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        inputs: &[&[f64]],
        targets: &[&[usize]],
    ) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "forward_loss",
                left: vec![inputs.len()],
                right: vec![targets.len()],
            });
        }
        let v = self.encode(graph, bound, inputs)?;
        match self.config.task {
            Task::Classification => {
                let classes = targets
                    .iter()
                    .map(|t| match t {
                        [c] if *c < NUM_CLASSES => Ok(*c),
                        _ => Err(Error::Config(format!("classification target must be one class index, got {t:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let logits = dense(graph, v, bound.var("head.weight")?, bound.var("head.bias")?)?;
                softmax_cross_entropy(graph, logits, &classes, None)
            }
            Task::Captioning => self.caption_loss(graph, bound, v, targets),
        }
    }

    fn caption_loss(&self, graph: &mut Graph, bound: &BoundParams, v: Var, targets: &[&[usize]]) -> Result<Var> {
        let vocab_len = self.vocab().len();
        for t in targets {
            if t.len() < 2 || t[0] != START {
                return Err(Error::Config("caption targets must start with START".into()));
            }
            if let Some(&bad) = t.iter().find(|&&id| id >= vocab_len) {
                return Err(Error::InvalidTokenId(bad));
            }
        }
        // Positions past the last non-PAD target in the batch contribute
        // nothing, so the unroll stops there.
        let steps = targets
            .iter()
            .map(|t| t.iter().rposition(|&id| id != PAD).unwrap_or(0))
            .max()
            .unwrap_or(0)
            .max(1);
        let cell = CellVars::from_bound(bound, decoder_prefix(self.config.decoder), self.config.decoder)?;
        let table = bound.var("dec.embed")?;
        let mut h = v;
        let mut c = self.zero_cell(graph, targets.len());
        let mut hidden = Vec::with_capacity(steps);
        let mut labels = Vec::with_capacity(steps * targets.len());
        for t in 0..steps {
            let ids: Vec<usize> = targets.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let x = embedding(graph, &ids, table)?;
            (h, c) = self.step(graph, x, h, c, &cell)?;
            hidden.push(h);
            labels.extend(targets.iter().map(|s| s.get(t + 1).copied().unwrap_or(PAD)));
        }
        let all = graph.concat_rows(&hidden)?;
        let logits = dense(graph, all, bound.var("out.weight")?, bound.var("out.bias")?)?;
        softmax_cross_entropy(graph, logits, &labels, Some(PAD))
    }

    fn zero_cell(&self, graph: &mut Graph, batch: usize) -> Option<Var> {
        (self.config.decoder == CellKind::Lstm).then(|| graph.constant(Tensor::zeros(&[batch, self.config.neurons])))
    }

    fn step(&self, graph: &mut Graph, x: Var, h: Var, c: Option<Var>, cell: &CellVars) -> Result<(Var, Option<Var>)> {
        match c {
            None => Ok((gru_step(graph, x, h, cell)?, None)),
            Some(c) => {
                let (h, c) = lstm_step(graph, x, h, c, cell)?;
                Ok((h, Some(c)))
            }
        }
    }

    /// Mean batch loss without gradients.
    pub fn batch_loss(&self, inputs: &[&[f64]], targets: &[&[usize]]) -> Result<f64> {
        let mut graph = Graph::new();
        let bound = self.params.bind_constants(&mut graph);
        let loss = self.loss_node(&mut graph, &bound, inputs, targets)?;
        Ok(graph.value(loss).item())
    }

    /// Mean batch loss and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        inputs: &[&[f64]],
        targets: &[&[usize]],
    ) -> Result<(f64, HashMap<String, Tensor>)> {
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph);
        let loss = self.loss_node(&mut graph, &bound, inputs, targets)?;
        let mut grads = graph.backprop(loss)?;
        let named = bound
            .iter()
            .map(|(name, var)| {
                let g = grads.remove(var).unwrap_or_else(|| Tensor::zeros(graph.shape(var)));
                (name.to_string(), g)
            })
            .collect();
        Ok((graph.value(loss).item(), named))
    }

    /// Teacher-forced loss of one image against encoded target ids.
    pub fn forward_loss(&self, input: &[f64], target_ids: &[usize]) -> Result<f64> {
        self.batch_loss(&[input], &[target_ids])
    }

    /// Greedy decoding for a batch: each sequence starts at START and
    /// appends the argmax token (PAD and START excluded) until END or
    /// `max_len` tokens in total.
    pub fn greedy_decode_batch(&self, inputs: &[&[f64]], max_len: usize) -> Result<Vec<Vec<usize>>> {
        self.require(Task::Captioning)?;
        let mut graph = Graph::new();
        let bound = self.params.bind_constants(&mut graph);
        let cell = CellVars::from_bound(&bound, decoder_prefix(self.config.decoder), self.config.decoder)?;
        let table = bound.var("dec.embed")?;
        let (w_out, b_out) = (bound.var("out.weight")?, bound.var("out.bias")?);
        let mut h = self.encode(&mut graph, &bound, inputs)?;
        let mut c = self.zero_cell(&mut graph, inputs.len());
        let mut seqs: Vec<Vec<usize>> = vec![vec![START]; inputs.len()];
        let mut done = vec![false; inputs.len()];
        let v = self.vocab().len();
        while seqs.iter().zip(&done).any(|(s, d)| !d && s.len() < max_len) {
            let ids: Vec<usize> = seqs.iter().map(|s| *s.last().expect("non-empty")).collect();
            let x = embedding(&mut graph, &ids, table)?;
            (h, c) = self.step(&mut graph, x, h, c, &cell)?;
            let logits = dense(&mut graph, h, w_out, b_out)?;
            let rows = graph.value(logits).data();
            for (b, seq) in seqs.iter_mut().enumerate() {
                if done[b] || seq.len() >= max_len {
                    continue;
                }
                let row = &rows[b * v..(b + 1) * v];
                let mut best = END;
                for id in 0..v {
                    if id != PAD && id != START && row[id] > row[best] {
                        best = id;
                    }
                }
                seq.push(best);
                done[b] = best == END;
            }
        }
        Ok(seqs)
    }

    pub fn greedy_decode(&self, input: &[f64], max_len: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(&[input], max_len)?.remove(0))
    }

    /// Decoded caption text for each input.
    pub fn caption_batch(&self, inputs: &[&[f64]]) -> Result<Vec<String>> {
        self.greedy_decode_batch(inputs, self.vocab().max_len())?
            .iter()
            .map(|ids| self.vocab().decode(ids))
            .collect()
    }

    pub fn caption(&self, input: &[f64]) -> Result<String> {
        Ok(self.caption_batch(&[input])?.remove(0))
    }

    /// Class probabilities in [`AccessoryType::ALL`] order.
    pub fn classify_batch(&self, inputs: &[&[f64]]) -> Result<Vec<[f64; NUM_CLASSES]>> {
        self.require(Task::Classification)?;
        let mut graph = Graph::new();
        let bound = self.params.bind_constants(&mut graph);
        let v = self.encode(&mut graph, &bound, inputs)?;
        let logits = dense(&mut graph, v, bound.var("head.weight")?, bound.var("head.bias")?)?;
        Ok(graph
            .value(logits)
            .data()
            .chunks(NUM_CLASSES)
            .map(|row| {
                let mut p = [0.0; NUM_CLASSES];
                p.copy_from_slice(row);
                softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    pub fn classify(&self, input: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        Ok(self.classify_batch(&[input])?.remove(0))
    }

    /// Caption for a raw image: greedy decoding for captioning models, the
    /// predicted class word for classification models.
    pub fn describe(&self, image: &Image) -> Result<String> {
        if !self.uses_images() {
            return Err(Error::Config(
                "this model reads stored features and cannot caption raw images".into(),
            ));
        }
        let input = self.image_input(image);
        match self.config.task {
            Task::Captioning => self.caption(&input),
            Task::Classification => Ok(Self::predict_class(&self.classify(&input)?).word().to_string()),
        }
    }

    /// Level the model answers for; classification models answer `basic`.
    pub fn answers_level(&self) -> CaptionLevel {
        match self.config.task {
            Task::Captioning => self.config.level,
            Task::Classification => CaptionLevel::Basic,
        }
    }

    /// Most probable class; ties go to the lower index.
    pub fn predict_class(probs: &[f64; NUM_CLASSES]) -> AccessoryType {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        AccessoryType::ALL[best]
    }

    fn blob(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        for (_, t) in self.params.iter() {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    /// SHA-256 of the parameter blob; identifies a trained model.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.blob()))
    }

    /// JSON header line `{version, config, manifest, checksum}` followed by
    /// all parameters as little-endian `f64` in manifest order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = self.blob();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            manifest: self.manifest(),
            checksum: hex::encode(Sha256::digest(&blob)),
        };
        let mut out = serde_json::to_vec(&header).expect("plain data serializes");
        out.push(b'\n');
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint has no header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
        }
        let blob = &bytes[split + 1..];
        let actual = hex::encode(Sha256::digest(blob));
        if actual != header.checksum {
            return Err(Error::Checksum {
                expected: header.checksum,
                actual,
            });
        }
        if header.manifest != header.config.parameter_shapes() {
            return Err(Error::Format("parameter manifest does not match the model config".into()));
        }
        let total: usize = header.manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if blob.len() != total * 8 {
            return Err(Error::Format(format!("blob holds {} bytes, manifest needs {}", blob.len(), total * 8)));
        }
        let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut params = ParamStore::new();
        for (name, shape) in header.manifest {
            let n = shape.iter().product();
            params.insert(name, Tensor::new(shape, values.by_ref().take(n).collect())?)?;
        }
        header.config.validate()?;
        let features = load_features(&header.config)?;
        Ok(Self {
            config: header.config,
            params,
            features,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn load_features(config: &ModelConfig) -> Result<Option<Arc<FeatureTable>>> {
    match &config.encoder {
        EncoderKind::MiniCnn => Ok(None),
        EncoderKind::FeatureFile { path, dim } => {
            let table = FeatureTable::read(path)?;
            if table.dim != *dim {
                return Err(Error::Config(format!("feature file has dim {}, config says {dim}", table.dim)));
            }
            Ok(Some(Arc::new(table)))
        }
    }
}

/// Random input in `[0, 1)` of the right length, for tests and probes.
pub fn random_input<R: Rng>(config: &ModelConfig, rng: &mut R) -> Vec<f64> {
    (0..config.input_dim()).map(|_| rng.gen::<f64>()).collect()
}

/// Layer params for an isolated recurrent cell, named like the decoder's.
pub fn decoder_layer(config: &ModelConfig, seed: u64) -> LayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LayerParams::recurrent(decoder_prefix(config.decoder), config.decoder, config.embed_dim, config.neurons, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{OptimizerKind, OptimizerState};

    fn vocab() -> Vocab {
        Vocab::build(&["ring", "gold ring", "silver necklace"], 6).unwrap()
    }

    fn tiny(task: Task, decoder: CellKind) -> ModelConfig {
        ModelConfig {
            encoder: EncoderKind::MiniCnn,
            decoder,
            neurons: 8,
            embed_dim: 4,
            task,
            level: CaptionLevel::Complete,
            image_size: 8,
            seed: 1,
            vocab: vocab(),
        }
    }

    #[test]
    fn manifest_shapes() {
        let mut cfg = ModelConfig::new(Task::Captioning, CellKind::Gru, 256, vocab());
        cfg.image_size = 64;
        let model = CaptionerModel::build(cfg.clone()).unwrap();
        let m = model.manifest();
        assert_eq!(m[0], ("enc.conv1.weight".to_string(), vec![8, 3, 3, 3]));
        assert_eq!(m[6], ("enc.proj.weight".to_string(), vec![32 * 8 * 8, 256]));
        assert!(m.contains(&("dec.gru.U_r".to_string(), vec![256, 256])));
        assert_eq!(m.last().unwrap(), &("out.bias".to_string(), vec![vocab().len()]));

        cfg.task = Task::Classification;
        let m = CaptionerModel::build(cfg).unwrap().manifest();
        assert_eq!(m[m.len() - 2], ("head.weight".to_string(), vec![256, 4]));
        assert!(!m.iter().any(|(n, _)| n.starts_with("dec.")));
    }

    #[test]
    fn same_seed_same_params() {
        let a = CaptionerModel::build(tiny(Task::Captioning, CellKind::Lstm)).unwrap();
        let b = CaptionerModel::build(tiny(Task::Captioning, CellKind::Lstm)).unwrap();
        assert_eq!(a.params(), b.params());
        let mut cfg = tiny(Task::Captioning, CellKind::Lstm);
        cfg.seed = 2;
        assert_ne!(CaptionerModel::build(cfg).unwrap().params(), a.params());
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny(Task::Captioning, CellKind::Gru);
        cfg.image_size = 12;
        assert!(CaptionerModel::build(cfg.clone()).is_err());
        cfg.image_size = 8;
        cfg.neurons = 0;
        assert!(CaptionerModel::build(cfg).is_err());
    }

    #[test]
    fn decode_and_classify_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cap = CaptionerModel::build(tiny(Task::Captioning, CellKind::Gru)).unwrap();
        let x = random_input(cap.config(), &mut rng);
        let ids = cap.greedy_decode(&x, 6).unwrap();
        assert_eq!(ids[0], START);
        assert!(ids.len() <= 6);
        assert!(!ids.contains(&PAD));
        assert_eq!(ids, cap.greedy_decode(&x, 6).unwrap());
        assert!(matches!(cap.classify(&x), Err(Error::TaskMismatch(_))));

        let cls = CaptionerModel::build(tiny(Task::Classification, CellKind::Gru)).unwrap();
        let p = cls.classify(&x).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(cls.greedy_decode(&x, 6).is_err());
    }

    #[test]
    fn batched_decode_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = CaptionerModel::build(tiny(Task::Captioning, CellKind::Lstm)).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|_| random_input(model.config(), &mut rng)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let batch = model.greedy_decode_batch(&refs, 6).unwrap();
        for (x, ids) in xs.iter().zip(&batch) {
            assert_eq!(&model.greedy_decode(x, 6).unwrap(), ids);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let model = CaptionerModel::build(tiny(Task::Captioning, CellKind::Gru)).unwrap();
        let bytes = model.to_bytes();
        let back = CaptionerModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.config(), model.config());
        assert_eq!(back.checksum(), model.checksum());
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(CaptionerModel::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(CaptionerModel::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn feature_file_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.bin");
        let mut rows = HashMap::new();
        rows.insert("a".to_string(), vec![0.1, 0.2, 0.3]);
        rows.insert("b".to_string(), vec![-1.0, 0.5, 2.0]);
        let table = FeatureTable { dim: 3, rows };
        table.write(&path).unwrap();
        assert_eq!(FeatureTable::read(&path).unwrap(), table);

        let mut cfg = tiny(Task::Classification, CellKind::Gru);
        cfg.encoder = EncoderKind::FeatureFile { path: path.clone(), dim: 3 };
        let model = CaptionerModel::build(cfg.clone()).unwrap();
        assert_eq!(model.manifest()[0], ("enc.proj.weight".to_string(), vec![3, 8]));
        let img = Image::filled(8, 8, [0.0; 3]);
        assert_eq!(model.input_for("b", &img).unwrap(), vec![-1.0, 0.5, 2.0]);
        assert!(model.input_for("zzz", &img).is_err());
        cfg.encoder = EncoderKind::FeatureFile { path, dim: 4 };
        assert!(CaptionerModel::build(cfg).is_err());
    }

    #[test]
    fn overfits_one_caption() {
        let mut model = CaptionerModel::build(tiny(Task::Captioning, CellKind::Gru)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(model.config(), &mut rng);
        let target = model.vocab().encode("gold ring").unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.01, model.params()).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            let (l, grads) = model.loss_and_grads(&[&x], &[&target]).unwrap();
            loss = l;
            opt.step(model.params_mut(), &grads).unwrap();
        }
        let loss = model.forward_loss(&x, &target).unwrap().min(loss);
        assert!(loss < 0.01, "{loss}");
        assert_eq!(model.caption(&x).unwrap(), "gold ring");
    }
}
