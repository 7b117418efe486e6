//! Embedding extraction with the first model, per-modality aggregation and
//! the fusion paths that feed the second model.
//!
//! Every frame and every fNIRS channel (rendered as a waveform) passes
//! through the first model on its own; the pooled pre-head embeddings are
//! then summed or concatenated. Video and fNIRS results are fused by
//! addition, concatenation, or by drawing both on one diagram.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PainViT;
use crate::numerics::{exact_sum, Tensor};
use crate::training::{argmax, stack, Samples};
use crate::waveform::{self, Series, WaveformImage};

/// How per-item embeddings are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Addition,
    Concatenation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingModality {
    Video,
    FnirsHbo,
    FnirsHbr,
}

impl EmbeddingModality {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingModality::Video => "video",
            EmbeddingModality::FnirsHbo => "fnirs-hbo",
            EmbeddingModality::FnirsHbr => "fnirs-hbr",
        }
    }
}

impl FromStr for EmbeddingModality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(EmbeddingModality::Video),
            "fnirs-hbo" => Ok(EmbeddingModality::FnirsHbo),
            "fnirs-hbr" => Ok(EmbeddingModality::FnirsHbr),
            other => Err(Error::Data(format!("unknown embedding modality {other:?}"))),
        }
    }
}

/// Per-item embeddings and their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    per_item: Vec<Tensor>,
    fused: Tensor,
    aggregation: Aggregation,
}

impl EmbeddingSet {
    /// Aggregates `items` (all of equal length). Addition is correctly
    /// rounded per coordinate, so it does not depend on item order.
    pub fn from_items(items: Vec<Tensor>, aggregation: Aggregation) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Data("no embeddings to aggregate".into()));
        };
        let d = first.numel();
        if let Some(bad) = items.iter().find(|t| t.numel() != d) {
            return Err(Error::Dimension(format!(
                "embedding lengths differ: {d} vs {}",
                bad.numel()
            )));
        }
        let fused = match aggregation {
            Aggregation::Addition => {
                let acc = (0..d).map(|k| exact_sum(items.iter().map(|t| t.data()[k]))).collect();
                Tensor::new(&[d], acc)?
            }
            Aggregation::Concatenation => {
                let data: Vec<f64> = items.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::new(&[d * items.len()], data)?
            }
        };
        Ok(EmbeddingSet {
            per_item: items,
            fused,
            aggregation,
        })
    }

    pub fn per_item(&self) -> &[Tensor] {
        &self.per_item
    }

    pub fn fused(&self) -> &Tensor {
        &self.fused
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn len(&self) -> usize {
        self.per_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_item.is_empty()
    }

    /// The same items under a different aggregation.
    pub fn reaggregate(&self, aggregation: Aggregation) -> Result<Self> {
        EmbeddingSet::from_items(self.per_item.clone(), aggregation)
    }
}

/// Images per forward pass during extraction. Rows of a batch are
/// independent in eval mode, so this only affects speed.
const EXTRACT_BATCH: usize = 8;

fn embed_images(images: &[Tensor], model: &PainViT) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EXTRACT_BATCH) {
        let emb = model.embed(&stack(chunk)?)?;
        let d = emb.shape()[1];
        for row in emb.data().chunks(d) {
            out.push(Tensor::new(&[d], row.to_vec())?);
        }
    }
    Ok(out)
}

/// Embeds each `[C, H, W]` frame with `model` and aggregates.
pub fn extract_video_embeddings(frames: &[Tensor], model: &PainViT, aggregation: Aggregation) -> Result<EmbeddingSet> {
    if frames.is_empty() {
        return Err(Error::Data("no video frames to embed".into()));
    }
    EmbeddingSet::from_items(embed_images(frames, model)?, aggregation)
}

/// Renders each channel not listed in `excluded` (by index) as a waveform,
/// embeds it with `model` and aggregates.
pub fn extract_fnirs_embeddings(
    channels: &[Series],
    excluded: &[usize],
    model: &PainViT,
    aggregation: Aggregation,
) -> Result<EmbeddingSet> {
    if let Some(&i) = excluded.iter().find(|&&i| i >= channels.len()) {
        return Err(Error::Data(format!(
            "excluded channel index {i} out of range for {} channels",
            channels.len()
        )));
    }
    let c = model.config().in_channels;
    let images = channels
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(_, s)| waveform::render(s)?.to_tensor(c))
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Err(Error::Data("every fNIRS channel is excluded".into()));
    }
    EmbeddingSet::from_items(embed_images(&images, model)?, aggregation)
}

/// Populates the extractor's batch-norm statistics from `frames` and
/// rendered `channels`, interleaved so every batch mixes both kinds.
pub fn calibrate_extractor(model: &mut PainViT, frames: &[Tensor], channels: &[Series]) -> Result<()> {
    let c = model.config().in_channels;
    let rendered = channels
        .iter()
        .map(|s| waveform::render(s)?.to_tensor(c))
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(frames.len() + rendered.len());
    let (mut f, mut r) = (frames.iter(), rendered.iter());
    loop {
        match (f.next(), r.next()) {
            (None, None) => break,
            (a, b) => images.extend(a.into_iter().chain(b).cloned()),
        }
    }
    if images.is_empty() {
        return Err(Error::Data("no calibration images".into()));
    }
    let batches = images.chunks(EXTRACT_BATCH).map(stack).collect::<Result<Vec<_>>>()?;
    model.calibrate(&batches)
}

/// Elementwise `E_V + E_C`.
pub fn fuse_modalities_addition(ev: &EmbeddingSet, ec: &EmbeddingSet) -> Result<Tensor> {
    add_vectors(ev.fused(), ec.fused())
}

fn add_vectors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.numel() != b.numel() {
        return Err(Error::Dimension(format!(
            "cannot add embeddings of length {} and {}",
            a.numel(),
            b.numel()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(&[a.numel()], data)
}

/// `E_V` followed by `E_C`.
pub fn fuse_modalities_concatenation(ev: &EmbeddingSet, ec: &EmbeddingSet) -> Result<Tensor> {
    let data: Vec<f64> = ev.fused().data().iter().chain(ec.fused().data()).copied().collect();
    Tensor::new(&[data.len()], data)
}

/// Both fused vectors drawn on one RGB diagram (video red, fNIRS blue).
pub fn fuse_modalities_single_diagram(ev: &EmbeddingSet, ec: &EmbeddingSet) -> Result<WaveformImage> {
    waveform::render_pair(ev.fused().data(), ec.fused().data())
}

/// What the second model is shown.
#[derive(Clone, Debug, PartialEq)]
pub enum AssessInput<'a> {
    /// A rendered diagram (grayscale is replicated to RGB).
    Diagram(&'a WaveformImage),
    /// A raw embedding fed straight to the classification head.
    Vector(&'a Tensor),
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Class probabilities from the second model.
pub fn assess(input: AssessInput<'_>, model: &PainViT) -> Result<Tensor> {
    if !model.is_calibrated() {
        return Err(Error::State(
            "model has no batch-norm statistics; train or calibrate it first".into(),
        ));
    }
    let logits = match input {
        AssessInput::Diagram(img) => {
            let t = img.to_tensor(model.config().in_channels)?;
            let mut shape = vec![1];
            shape.extend(t.shape());
            model.infer(&t.reshape(&shape)?)?.1
        }
        AssessInput::Vector(v) => {
            let d = model.config().embed_dim();
            if v.numel() != d {
                return Err(Error::Dimension(format!(
                    "head expects a {d}-dim embedding, got {}",
                    v.numel()
                )));
            }
            model.head_logits(&v.clone().reshape(&[1, d])?)?
        }
    };
    let p = softmax(logits.data());
    Tensor::new(&[p.len()], p)
}

/// Most probable class, ties to the lowest index.
pub fn predict(probabilities: &Tensor) -> usize {
    argmax(probabilities.data())
}

// ---------------------------------------------------------- pipelines

/// Which input stream(s) the second model classifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Video,
    FnirsHbo,
    FnirsHbr,
    /// HbO and HbR channels aggregated together.
    FnirsBoth,
    /// Video and fNIRS (both groups) fused.
    Fusion,
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(Source::Video),
            "fnirs-hbo" => Ok(Source::FnirsHbo),
            "fnirs-hbr" => Ok(Source::FnirsHbr),
            "fnirs-both" => Ok(Source::FnirsBoth),
            "fusion" => Ok(Source::Fusion),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    Addition,
    Concatenation,
    SingleDiagram,
}

impl FusionMethod {
    /// Within-modality aggregation used alongside this fusion. The
    /// single-diagram path sums items, matching the addition path.
    pub fn aggregation(self) -> Aggregation {
        match self {
            FusionMethod::Concatenation => Aggregation::Concatenation,
            _ => Aggregation::Addition,
        }
    }
}

impl FromStr for FusionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(FusionMethod::Addition),
            "concatenation" => Ok(FusionMethod::Concatenation),
            "single-diagram" => Ok(FusionMethod::SingleDiagram),
            other => Err(Error::Config(format!("unknown fusion method {other:?}"))),
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Addition => "addition",
            FusionMethod::Concatenation => "concatenation",
            FusionMethod::SingleDiagram => "single-diagram",
        })
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Video => "video",
            Source::FnirsHbo => "fnirs-hbo",
            Source::FnirsHbr => "fnirs-hbr",
            Source::FnirsBoth => "fnirs-both",
            Source::Fusion => "fusion",
        })
    }
}

/// Per-item embeddings of one sample for every modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEmbeddings {
    pub id: String,
    pub label: usize,
    pub video: Vec<Tensor>,
    pub hbo: Vec<Tensor>,
    pub hbr: Vec<Tensor>,
}

impl SampleEmbeddings {
    /// Runs the first model over all frames and channels of one sample.
    pub fn extract(
        id: impl Into<String>,
        label: usize,
        frames: &[Tensor],
        hbo: &[Series],
        hbr: &[Series],
        model: &PainViT,
    ) -> Result<Self> {
        let agg = Aggregation::Addition;
        let video = extract_video_embeddings(frames, model, agg)?.per_item;
        let hbo = if hbo.is_empty() { Vec::new() } else { extract_fnirs_embeddings(hbo, &[], model, agg)?.per_item };
        let hbr = if hbr.is_empty() { Vec::new() } else { extract_fnirs_embeddings(hbr, &[], model, agg)?.per_item };
        Ok(SampleEmbeddings {
            id: id.into(),
            label,
            video,
            hbo,
            hbr,
        })
    }

    pub fn set(&self, source: Source, aggregation: Aggregation) -> Result<EmbeddingSet> {
        let items = match source {
            Source::Video => self.video.clone(),
            Source::FnirsHbo => self.hbo.clone(),
            Source::FnirsHbr => self.hbr.clone(),
            Source::FnirsBoth | Source::Fusion => self.hbo.iter().chain(&self.hbr).cloned().collect(),
        };
        if items.is_empty() {
            return Err(Error::Data(format!("sample {}: no {source} embeddings", self.id)));
        }
        EmbeddingSet::from_items(items, aggregation)
    }

    /// The series (or series pair) the second model sees for this sample.
    pub fn diagram_input(&self, source: Source, fusion: FusionMethod) -> Result<DiagramInput> {
        let agg = fusion.aggregation();
        if source != Source::Fusion {
            return Ok(DiagramInput::Single(self.set(source, agg)?.fused.into_data()));
        }
        let ev = self.set(Source::Video, agg)?;
        let ec = self.set(Source::FnirsBoth, agg)?;
        Ok(match fusion {
            FusionMethod::Addition => DiagramInput::Single(fuse_modalities_addition(&ev, &ec)?.into_data()),
            FusionMethod::Concatenation => {
                DiagramInput::Single(fuse_modalities_concatenation(&ev, &ec)?.into_data())
            }
            FusionMethod::SingleDiagram => DiagramInput::Pair(ev.fused.into_data(), ec.fused.into_data()),
        })
    }
}

/// Series to draw for the second model.
#[derive(Clone, Debug, PartialEq)]
pub enum DiagramInput {
    Single(Vec<f64>),
    Pair(Vec<f64>, Vec<f64>),
}

impl DiagramInput {
    pub fn render(&self) -> Result<WaveformImage> {
        match self {
            DiagramInput::Single(v) => waveform::render_values(v),
            DiagramInput::Pair(a, b) => waveform::render_pair(a, b),
        }
    }
}

/// Labelled diagrams rendered on demand as `[channels, 224, 224]` tensors.
#[derive(Clone, Debug, Default)]
pub struct DiagramSamples {
    pub inputs: Vec<DiagramInput>,
    pub labels: Vec<usize>,
    pub channels: usize,
}

impl DiagramSamples {
    pub fn build(embeddings: &[SampleEmbeddings], source: Source, fusion: FusionMethod, channels: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(embeddings.len());
        for e in embeddings {
            inputs.push(e.diagram_input(source, fusion)?);
        }
        Ok(DiagramSamples {
            inputs,
            labels: embeddings.iter().map(|e| e.label).collect(),
            channels,
        })
    }
}

impl Samples for DiagramSamples {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image(&self, i: usize) -> Result<Tensor> {
        self.inputs[i].render()?.to_tensor(self.channels)
    }
}

// ---------------------------------------------------------- dump files

/// Index written for aggregated rows.
pub const FUSED_INDEX: i64 = -1;

/// Writes `sample_id,modality,item_index,v0,v1,…` records: one per item of
/// every modality followed by that modality's addition aggregate with
/// index −1. Row lengths vary only if embedding widths do.
pub fn write_embedding_dump(w: impl Write, samples: &[SampleEmbeddings]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
    for s in samples {
        for (m, items) in [
            (EmbeddingModality::Video, &s.video),
            (EmbeddingModality::FnirsHbo, &s.hbo),
            (EmbeddingModality::FnirsHbr, &s.hbr),
        ] {
            if items.is_empty() {
                continue;
            }
            let set = EmbeddingSet::from_items(items.clone(), Aggregation::Addition)?;
            let rows = items.iter().enumerate().map(|(i, t)| (i as i64, t)).chain([(FUSED_INDEX, set.fused())]);
            for (idx, t) in rows {
                let mut rec = vec![s.id.clone(), m.as_str().to_string(), idx.to_string()];
                rec.extend(t.data().iter().map(f64::to_string));
                out.write_record(&rec)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses a dump written by [`write_embedding_dump`]. Aggregate rows are
/// skipped; labels are taken from `labels` by sample id (0 if absent).
pub fn read_embedding_dump(r: impl Read, labels: &[(String, usize)]) -> Result<Vec<SampleEmbeddings>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r);
    let mut out: Vec<SampleEmbeddings> = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = n + 1;
        if rec.len() < 4 {
            return Err(Error::Data(format!("embedding dump row {row}: too few fields")));
        }
        let id = &rec[0];
        let modality: EmbeddingModality = rec[1].parse()?;
        let idx: i64 = rec[2]
            .parse()
            .map_err(|_| Error::Data(format!("embedding dump row {row}: bad item index {:?}", &rec[2])))?;
        if idx == FUSED_INDEX {
            continue;
        }
        let values = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("embedding dump row {row}: {e}")))?;
        if out.last().is_none_or(|s| s.id != id) {
            let label = labels.iter().find(|(l, _)| l == id).map_or(0, |(_, y)| *y);
            out.push(SampleEmbeddings {
                id: id.to_string(),
                label,
                video: Vec::new(),
                hbo: Vec::new(),
                hbr: Vec::new(),
            });
        }
        let s = out.last_mut().expect("pushed above");
        let list = match modality {
            EmbeddingModality::Video => &mut s.video,
            EmbeddingModality::FnirsHbo => &mut s.hbo,
            EmbeddingModality::FnirsHbr => &mut s.hbr,
        };
        if idx != list.len() as i64 {
            return Err(Error::Data(format!(
                "embedding dump row {row}: sample {id} {} item {idx} out of order",
                modality.as_str()
            )));
        }
        list.push(Tensor::new(&[values.len()], values)?);
    }
    Ok(out)
}
