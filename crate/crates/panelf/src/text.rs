//! Tokenization, the conditioning encoder, and a toy contrastive
//! image–text trainer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use panelf_core::ops::{concat, conv2d, cross_entropy, embed, linear};
use panelf_core::{Adam, Real, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::ShapeKind;
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const KEYWORD: &str = "cnh3000";
pub const SEQ_LEN: usize = 8;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Dense token ids; line `i` of the vocabulary file is token `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocab {
    /// Reserved tokens, the style keyword, and the words used by the synthetic corpora.
    fn default() -> Self {
        let mut words = vec![KEYWORD, "a", "an", "the", "in", "of", "style", "comic", "panel", "drawing"];
        words.extend(ShapeKind::ALL.iter().map(|k| k.name()));
        Vocab::from_words(words).expect("built-in words are unique")
    }
}

impl Vocab {
    /// `<pad>` and `<unk>` followed by `words` in order.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(words.into_iter().map(|w| w.as_ref().to_lowercase()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Config("vocabulary must start with <pad> and <unk>".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?} at line {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Lowercased whitespace tokens mapped to ids, padded or truncated to [`SEQ_LEN`].
pub fn tokenize(caption: &str, vocab: &Vocab) -> Vec<usize> {
    let mut ids: Vec<usize> = caption
        .split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()))
        .take(SEQ_LEN)
        .collect();
    ids.resize(SEQ_LEN, PAD);
    ids
}

/// Space-joined tokens, padding dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id != PAD)
        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Embedding table `text.embed.weight: [V, cond_dim]` drawn from `N(0, 1)`.
pub fn init_text_encoder(vocab_size: usize, cond_dim: usize, rng: &mut Rng) -> Result<ModelParams> {
    if vocab_size < 2 || cond_dim == 0 {
        return Err(Error::Config("text encoder needs a vocabulary and a positive width".into()));
    }
    let mut p = ModelParams::new();
    p.insert("text.embed.weight", Tensor::param(vec![vocab_size, cond_dim], rng.normal_vec(vocab_size * cond_dim))?)?;
    Ok(p)
}

/// Per-token conditioning `[L, cond_dim]`, with an optional residual mixing
/// layer when `text.mix.weight`/`text.mix.bias` are present.
pub fn encode_text<T: Real>(ids: &[usize], params: &ModelParams<T>) -> Result<Tensor<T>> {
    let table = params.get("text.embed.weight")?;
    if let Some(&bad) = ids.iter().find(|&&id| id >= table.shape()[0]) {
        return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", table.shape()[0])));
    }
    let x = embed(ids, table)?;
    if !params.contains("text.mix.weight") {
        return Ok(x);
    }
    let mixed = linear(&x, params.get("text.mix.weight")?, Some(params.get("text.mix.bias")?))?.silu()?;
    Ok(x.add(&mixed)?)
}

/// Symmetric InfoNCE over cosine similarities; row `i` of each tower is a pair.
pub fn clip_contrastive_loss<T: Real>(img: &Tensor<T>, txt: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if img.shape().len() != 2 || img.shape() != txt.shape() {
        return Err(Error::Config(format!(
            "embeddings must be matching [N, d], got {:?} and {:?}",
            img.shape(),
            txt.shape()
        )));
    }
    let n = img.shape()[0];
    if n < 2 {
        return Err(Error::Config("contrastive loss needs at least two pairs".into()));
    }
    if temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let logits = img
        .l2_normalize_rows()?
        .matmul_nt(&txt.l2_normalize_rows()?)?
        .scale(1.0 / temperature)?;
    let targets: Vec<usize> = (0..n).collect();
    let i2t = cross_entropy(&logits, &targets)?;
    let t2i = cross_entropy(&logits.transpose()?, &targets)?;
    Ok(i2t.add(&t2i)?.scale(0.5)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub embed_dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            embed_dim: 32,
            steps: 600,
            lr: 3e-3,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

/// Both towers of the toy contrastive model.
#[derive(Clone, Debug)]
pub struct ClipModel {
    pub vocab: Vocab,
    /// `text.*` and `img.*` parameters.
    pub params: ModelParams,
    pub config: ClipConfig,
    pub initial_loss: f64,
    pub final_loss: f64,
}

const IMG_CHANNELS: [usize; 4] = [1, 8, 16, 16];

fn init_clip(vocab: &Vocab, cfg: &ClipConfig, image_size: usize, rng: &mut Rng) -> Result<ModelParams> {
    if image_size % 8 != 0 || image_size == 0 {
        return Err(Error::Config(format!("image size {image_size} must be a positive multiple of 8")));
    }
    let d = cfg.embed_dim;
    let mut p = init_text_encoder(vocab.len(), d, rng)?;
    he_init(&mut p, "text.proj.weight", &[d, d], d, rng)?;
    p.insert("text.proj.bias", Tensor::param(vec![d], vec![0.0; d])?)?;
    for i in 0..3 {
        let (cin, cout) = (IMG_CHANNELS[i], IMG_CHANNELS[i + 1]);
        he_init(&mut p, &format!("img.conv{i}.weight"), &[cout, cin, 3, 3], cin * 9, rng)?;
        p.insert(format!("img.conv{i}.bias"), Tensor::param(vec![cout], vec![0.0; cout])?)?;
    }
    let flat = IMG_CHANNELS[3] * (image_size / 8) * (image_size / 8);
    he_init(&mut p, "img.proj.weight", &[d, flat], flat, rng)?;
    p.insert("img.proj.bias", Tensor::param(vec![d], vec![0.0; d])?)?;
    Ok(p)
}

fn he_init(p: &mut ModelParams, path: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<()> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal_f64() * std) as f32).collect();
    p.insert(path, Tensor::param(shape.to_vec(), data)?)
}

/// Image tower: three conv/SiLU/pool stages and a linear projection, `[1, d]`.
pub fn clip_image_embed(params: &ModelParams, img: &Tensor) -> Result<Tensor> {
    let mut h = img.clone();
    for i in 0..3 {
        h = conv2d(&h, params.get(&format!("img.conv{i}.weight"))?, 1, 1)?;
        h = h.add_channel_bias(params.get(&format!("img.conv{i}.bias"))?)?.silu()?.avg_pool2x()?;
    }
    let flat = h.reshape(vec![1, h.numel()])?;
    Ok(linear(&flat, params.get("img.proj.weight")?, Some(params.get("img.proj.bias")?))?)
}

/// Text tower: mean of non-padding token embeddings and a linear projection, `[1, d]`.
pub fn clip_text_embed(params: &ModelParams, ids: &[usize]) -> Result<Tensor> {
    let content: Vec<usize> = ids.iter().copied().filter(|&id| id != PAD).collect();
    let ids = if content.is_empty() { vec![PAD] } else { content };
    let pooled = encode_text(&ids, params)?.mean_axis(0)?;
    let d = pooled.numel();
    Ok(linear(
        &pooled.reshape(vec![1, d])?,
        params.get("text.proj.weight")?,
        Some(params.get("text.proj.bias")?),
    )?)
}

fn batch_loss(params: &ModelParams, batch: &[(&Tensor, &[usize])], temperature: f64) -> Result<Tensor> {
    let imgs = batch
        .iter()
        .map(|(x, _)| clip_image_embed(params, x))
        .collect::<Result<Vec<_>>>()?;
    let txts = batch
        .iter()
        .map(|(_, ids)| clip_text_embed(params, ids))
        .collect::<Result<Vec<_>>>()?;
    clip_contrastive_loss(&concat(&imgs)?, &concat(&txts)?, temperature)
}

/// Trains both towers on `(image, caption)` pairs.
///
/// Each step draws one example per distinct caption so that no two rows of a
/// batch share a caption; at least two distinct captions are required.
pub fn train_toy_clip(pairs: &[(Tensor, String)], vocab: &Vocab, cfg: &ClipConfig) -> Result<ClipModel> {
    let mut by_caption: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (i, (img, caption)) in pairs.iter().enumerate() {
        let ids = tokenize(caption, vocab);
        if img.shape().len() != 3 || img.shape()[0] != 1 || img.shape() != pairs[0].0.shape() {
            return Err(Error::Config(format!("image {i} must be [1, H, W] like the first, got {:?}", img.shape())));
        }
        match by_caption.iter_mut().find(|(c, _)| *c == ids) {
            Some((_, members)) => members.push(i),
            None => by_caption.push((ids, vec![i])),
        }
    }
    if by_caption.len() < 2 {
        return Err(Error::Config("toy CLIP needs at least two distinct captions".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let params = init_clip(vocab, cfg, pairs[0].0.shape()[1], &mut rng)?;
    let mut opt = Adam::new();
    let mut initial_loss = None;
    let mut last = Vec::new();
    for _ in 0..cfg.steps {
        let batch: Vec<(&Tensor, &[usize])> = by_caption
            .iter()
            .map(|(ids, members)| (&pairs[members[rng.below(members.len())]].0, ids.as_slice()))
            .collect();
        let loss = batch_loss(&params, &batch, cfg.temperature)?;
        let value = loss.item()? as f64;
        initial_loss.get_or_insert(value);
        last.push(value);
        loss.backward()?;
        opt.step(params.iter(), cfg.lr)?;
    }
    let tail = &last[last.len().saturating_sub((cfg.steps / 10).max(1))..];
    Ok(ClipModel {
        vocab: vocab.clone(),
        params,
        config: cfg.clone(),
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
    })
}

/// Retrieval scores of the toy model on held-out data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Fraction of images whose most similar caption is their own.
    pub recall_at_1: f64,
    pub matched_cosine: f64,
    pub mismatched_cosine: f64,
}

/// Image→caption retrieval over the distinct `captions`.
pub fn evaluate_retrieval(model: &ClipModel, images: &[(Tensor, String)], captions: &[String]) -> Result<RetrievalReport> {
    let frozen = model.params.deep_clone();
    frozen.set_requires_grad(false);
    let txt = captions
        .iter()
        .map(|c| clip_text_embed(&frozen, &tokenize(c, &model.vocab)))
        .collect::<Result<Vec<_>>>()?;
    let txt = concat(&txt)?.l2_normalize_rows()?;
    let (mut hits, mut matched, mut mismatched, mut n_mis) = (0usize, 0.0, 0.0, 0usize);
    for (img, caption) in images {
        let own = captions
            .iter()
            .position(|c| c == caption)
            .ok_or_else(|| Error::Config(format!("caption `{caption}` not among the candidates")))?;
        let e = clip_image_embed(&frozen, img)?.l2_normalize_rows()?;
        let sims = e.matmul_nt(&txt)?.to_vec();
        let best = (0..sims.len()).max_by(|&a, &b| sims[a].total_cmp(&sims[b])).unwrap_or(0);
        hits += usize::from(best == own);
        for (j, &s) in sims.iter().enumerate() {
            if j == own {
                matched += s as f64;
            } else {
                mismatched += s as f64;
                n_mis += 1;
            }
        }
    }
    let n = images.len().max(1) as f64;
    Ok(RetrievalReport {
        recall_at_1: hits as f64 / n,
        matched_cosine: matched / n,
        mismatched_cosine: mismatched / n_mis.max(1) as f64,
    })
}
