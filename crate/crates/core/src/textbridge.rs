//! Toy dual encoder: a word-level tokenizer over the caption grammar, a
//! small transformer text encoder with a final projection matrix, a conv
//! image encoder, and contrastive pretraining over caption/image pairs.
//!
//! The text pathway is split exactly where the unlearning algorithm needs
//! it: `encode_text` yields the pooled pre-projection feature; `project`
//! applies the projection matrix plus an optional low-rank perturbation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Graph, ParamStore};
use crate::rng::Rng;
use crate::synthworld::{Corpus, Image};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;

/// Word-level vocabulary: three reserved ids then the caption grammar words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = [
            "<pad>", "<start>", "<end>", "an", "image", "of", "a", "red", "green", "blue",
            "yellow", "circle", "square", "triangle", "cross",
        ];
        Vocab {
            words: words.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        Vocab { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Feature and embedding width d.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub max_len: usize,
    /// Image tower base width.
    pub image_base_channels: usize,
    pub image_side: usize,
    /// Fixed softmax temperature for the contrastive grid.
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            blocks: 2,
            heads: 4,
            mlp_dim: 128,
            max_len: 16,
            image_base_channels: 16,
            image_side: 32,
            temperature: 0.07,
        }
    }
}

/// Pooled pre-projection text feature f.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature(pub Tensor);

/// Final embedding (P + dP) f consumed by the U-Net and the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEmbedding(pub Tensor);

/// The dual encoder: all weights under `text.` and `img.` prefixes.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub cfg: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

/// Per-epoch log of contrastive pretraining.
#[derive(Debug, Clone, Default)]
pub struct ContrastiveLog {
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

impl DualEncoder {
    /// Fresh encoder with seeded initialization.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        let vocab = Vocab::default();
        let mut params = ParamStore::new();
        let mut rng = Rng::substream(seed, "encoder-init");
        let d = cfg.dim;

        params.insert(
            "text.tok_embed",
            Tensor::randn(&mut rng, 0.02, &[vocab.len(), d]),
        );
        params.insert(
            "text.pos_embed",
            Tensor::randn(&mut rng, 0.02, &[cfg.max_len, d]),
        );
        for b in 0..cfg.blocks {
            let p = format!("text.block{b}");
            nn::init_norm(&mut params, &format!("{p}.ln1"), d);
            nn::init_self_attention(&mut params, &mut rng, &format!("{p}.attn"), d);
            nn::init_norm(&mut params, &format!("{p}.ln2"), d);
            nn::init_linear(&mut params, &mut rng, &format!("{p}.mlp.l1"), d, cfg.mlp_dim);
            nn::init_linear(&mut params, &mut rng, &format!("{p}.mlp.l2"), cfg.mlp_dim, d);
        }
        nn::init_norm(&mut params, "text.final_norm", d);
        {
            let std_dev = libm::sqrt(1.0 / d as f64);
            params.insert("text.proj", Tensor::randn(&mut rng, std_dev, &[d, d]));
        }

        let ib = cfg.image_base_channels;
        let feat_side = cfg.image_side / 8;
        nn::init_conv(&mut params, &mut rng, "img.conv1", 3, ib, 3);
        nn::init_conv(&mut params, &mut rng, "img.conv2", ib, 2 * ib, 3);
        nn::init_conv(&mut params, &mut rng, "img.conv3", 2 * ib, d, 3);
        nn::init_linear(&mut params, &mut rng, "img.head", d * feat_side * feat_side, d);

        DualEncoder { cfg, vocab, params }
    }

    /// The projection matrix P.
    pub fn projection(&self) -> &Tensor {
        self.params.get("text.proj")
    }

    // ── Tokenizer ────────────────────────────────────────────────────

    /// Word-level tokenization: start + words + end, padded to max_len.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(self.cfg.max_len);
        ids.push(START);
        for word in prompt.split_whitespace() {
            let id = self
                .vocab
                .id(word)
                .ok_or_else(|| Error::validation(format!("word '{word}' not in vocabulary")))?;
            if id < 3 {
                return Err(Error::validation(format!("word '{word}' is reserved")));
            }
            ids.push(id);
        }
        ids.push(END);
        if ids.len() > self.cfg.max_len {
            return Err(Error::validation(format!(
                "prompt has {} tokens, max is {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        while ids.len() < self.cfg.max_len {
            ids.push(PAD);
        }
        Ok(ids)
    }

    // ── Text tower ───────────────────────────────────────────────────

    /// Transformer encoding of a tokenized prompt; returns the pooled
    /// end-token feature (pre-projection).
    pub fn encode_tokens_graph(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Var {
        let s = tokens.len();
        let end_pos = tokens
            .iter()
            .position(|&t| t == END)
            .expect("token stream always carries an end marker");

        // Additive key mask: padded positions contribute nothing.
        let mask = Tensor::new(
            tokens
                .iter()
                .map(|&t| if t == PAD { -1e9 } else { 0.0 })
                .collect(),
            &[s],
        );

        let table = g.param("text.tok_embed");
        let tok = g.tape.gather(table, tokens);
        let pos_table = g.param("text.pos_embed");
        let pos = g.tape.slice_rows(pos_table, 0, s);
        let mut h = g.tape.add(tok, pos);

        for b in 0..self.cfg.blocks {
            let p = format!("text.block{b}");
            let normed = nn::layer_norm(g, &format!("{p}.ln1"), h);
            let attended =
                nn::self_attention(g, &format!("{p}.attn"), normed, self.cfg.heads, Some(&mask));
            h = g.tape.add(h, attended);
            let normed = nn::layer_norm(g, &format!("{p}.ln2"), h);
            let m = nn::linear(g, &format!("{p}.mlp.l1"), normed);
            let m = g.tape.gelu(m);
            let m = nn::linear(g, &format!("{p}.mlp.l2"), m);
            h = g.tape.add(h, m);
        }

        let h = nn::layer_norm(g, "text.final_norm", h);
        g.tape.row_select(h, end_pos)
    }

    /// Pooled pre-projection feature for a prompt.
    pub fn encode_text(&self, prompt: &str) -> Result<TextFeature> {
        let tokens = self.tokenize(prompt)?;
        let mut g = Graph::new(&self.params);
        let f = self.encode_tokens_graph(&mut g, &tokens);
        Ok(TextFeature(g.value(f).clone()))
    }

    // ── Projection ───────────────────────────────────────────────────

    /// (P + dP) f; with dP absent, P f.
    pub fn project(
        &self,
        feature: &TextFeature,
        delta: Option<&Tensor>,
    ) -> Result<ProjectedEmbedding> {
        project_feature(self.projection(), feature, delta)
    }

    /// Projected embedding for a prompt in one call.
    pub fn embed_prompt(&self, prompt: &str, delta: Option<&Tensor>) -> Result<ProjectedEmbedding> {
        let f = self.encode_text(prompt)?;
        self.project(&f, delta)
    }

    // ── Image tower ──────────────────────────────────────────────────

    pub fn encode_image_graph(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = nn::conv(g, "img.conv1", x, 2, 1);
        let h = g.tape.silu(h);
        let h = nn::conv(g, "img.conv2", h, 2, 1);
        let h = g.tape.silu(h);
        let h = nn::conv(g, "img.conv3", h, 2, 1);
        let h = g.tape.silu(h);
        // Flatten rather than pool: the coarse layout carries shape identity.
        let n = g.value(h).numel();
        let flat = g.tape.reshape(h, &[1, n]);
        let e = nn::linear(g, "img.head", flat); // [1, d]
        let d = self.cfg.dim;
        g.tape.reshape(e, &[d])
    }

    /// Deterministic image embedding in R^d.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        let s = self.cfg.image_side;
        if image.planes.shape() != [3, s, s] {
            return Err(Error::ShapeMismatch {
                context: "encode_image",
                expected: format!("[3, {s}, {s}]"),
                got: image.planes.shape_string(),
            });
        }
        let mut g = Graph::new(&self.params);
        let x = g.leaf(image.planes.clone());
        let e = self.encode_image_graph(&mut g, x);
        Ok(g.value(e).clone())
    }

    // ── Contrastive pretraining ──────────────────────────────────────

    /// Symmetric cross-entropy over the cosine-similarity grid of a batch.
    /// Trains the text tower, the projection matrix, and the image tower.
    pub fn contrastive_pretrain(
        &mut self,
        corpus: &Corpus,
        cfg: ContrastiveConfig,
        seed: u64,
    ) -> Result<ContrastiveLog> {
        let mut rng = Rng::substream(seed, "contrastive-train");
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
        let trainable = nn::all_names(&self.params);
        let mut log = ContrastiveLog::default();
        let inv_temp = 1.0 / self.cfg.temperature;

        // Tokenize every caption once.
        let token_streams: Vec<Vec<usize>> = corpus
            .items
            .iter()
            .map(|item| self.tokenize(&item.caption))
            .collect::<Result<_>>()?;

        for epoch in 0..cfg.epochs {
            let order = rng.shuffled_indices(corpus.items.len());
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let mut g = Graph::new(&self.params);
                let mut text_rows = Vec::with_capacity(chunk.len());
                let mut image_rows = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    let f = self.encode_tokens_graph(&mut g, &token_streams[idx]);
                    let proj = g.param("text.proj");
                    let f_col = g.tape.reshape(f, &[self.cfg.dim, 1]);
                    let e = g.tape.matmul(proj, f_col);
                    let e_row = g.tape.reshape(e, &[1, self.cfg.dim]);
                    text_rows.push(e_row);

                    let x = g.leaf(corpus.items[idx].image.planes.clone());
                    let ie = self.encode_image_graph(&mut g, x);
                    let ie_row = g.tape.reshape(ie, &[1, self.cfg.dim]);
                    image_rows.push(ie_row);
                }
                let text_matrix = g.tape.concat_rows(&text_rows);
                let image_matrix = g.tape.concat_rows(&image_rows);
                let text_n = g.tape.l2_normalize_rows(text_matrix);
                let image_n = g.tape.l2_normalize_rows(image_matrix);
                let logits = g.tape.matmul_nt(image_n, text_n);
                let logits = g.tape.scale(logits, inv_temp);
                let loss_i = g.tape.cross_entropy_diag(logits);
                let logits_t = g.tape.transpose(logits);
                let loss_t = g.tape.cross_entropy_diag(logits_t);
                let total = g.tape.add(loss_i, loss_t);
                let loss = g.tape.scale(total, 0.5);

                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "contrastive loss diverged at epoch {epoch}"
                    )));
                }
                epoch_loss += value;
                batches += 1;

                let (grads, _) = g.backward(loss);
                adam.step(&mut self.params, &grads, &trainable, None);
            }
            log.epoch_losses.push(epoch_loss / batches.max(1) as f64);
        }
        Ok(log)
    }

    /// Mean matched-pair and mismatched-pair cosine similarity over a corpus
    /// (the pretraining quality gate).
    pub fn pair_similarity(&self, corpus: &Corpus) -> Result<(f64, f64)> {
        let mut matched = 0.0;
        let mut mismatched = 0.0;
        let n = corpus.items.len();
        // Projected text embeddings per caption are shared; cache by caption.
        let mut cache: alloc::collections::BTreeMap<String, Tensor> =
            alloc::collections::BTreeMap::new();
        for (i, item) in corpus.items.iter().enumerate() {
            if !cache.contains_key(&item.caption) {
                let e = self.embed_prompt(&item.caption, None)?;
                cache.insert(item.caption.clone(), e.0);
            }
            let other = &corpus.items[(i + 1) % n];
            let other_caption = if other.caption == item.caption {
                // Fall back to any different caption in the corpus.
                corpus
                    .items
                    .iter()
                    .map(|it| &it.caption)
                    .find(|c| **c != item.caption)
                    .cloned()
                    .unwrap_or_else(|| other.caption.clone())
            } else {
                other.caption.clone()
            };
            if !cache.contains_key(&other_caption) {
                let e = self.embed_prompt(&other_caption, None)?;
                cache.insert(other_caption.clone(), e.0);
            }
            let ie = self.encode_image(&item.image)?;
            matched += cosine_similarity(&ie, &cache[&item.caption])?;
            mismatched += cosine_similarity(&ie, &cache[&other_caption])?;
        }
        Ok((matched / n as f64, mismatched / n as f64))
    }
}

/// (P + dP) f for a pooled feature (standalone form used by the loss terms).
pub fn project_feature(
    projection: &Tensor,
    feature: &TextFeature,
    delta: Option<&Tensor>,
) -> Result<ProjectedEmbedding> {
    let d = projection.shape()[0];
    if projection.shape() != [d, d] {
        return Err(Error::validation("projection matrix must be square"));
    }
    if feature.0.numel() != d {
        return Err(Error::ShapeMismatch {
            context: "project",
            expected: format!("[{d}]"),
            got: feature.0.shape_string(),
        });
    }
    let effective = match delta {
        Some(dp) => {
            projection.check_same_shape(dp, "project")?;
            projection.add(dp)
        }
        None => projection.clone(),
    };
    let f = feature.0.reshaped(&[d]);
    Ok(ProjectedEmbedding(effective.matvec(&f)))
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(Error::ShapeMismatch {
            context: "cosine_similarity",
            expected: a.shape_string(),
            got: b.shape_string(),
        });
    }
    let na = libm::sqrt(a.data().iter().map(|v| v * v).sum::<f64>());
    let nb = libm::sqrt(b.data().iter().map(|v| v * v).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::validation("cosine_similarity of a zero vector"));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{build_corpus, Split};
    use alloc::vec;

    fn tiny_encoder() -> DualEncoder {
        DualEncoder::init(
            EncoderConfig {
                dim: 16,
                blocks: 2,
                heads: 2,
                mlp_dim: 32,
                max_len: 16,
                image_base_channels: 4,
                image_side: 16,
                temperature: 0.07,
            },
            7,
        )
    }

    #[test]
    fn tokenize_caption() {
        let enc = tiny_encoder();
        let ids = enc.tokenize("an image of a red circle").unwrap();
        assert_eq!(ids.len(), enc.cfg.max_len);
        assert_eq!(ids[0], START);
        assert_eq!(ids[7], END);
        assert!(ids[8..].iter().all(|&t| t == PAD));
        // Stable across calls.
        assert_eq!(ids, enc.tokenize("an image of a red circle").unwrap());
    }

    #[test]
    fn tokenize_empty_prompt() {
        let enc = tiny_encoder();
        let ids = enc.tokenize("").unwrap();
        assert_eq!(ids[0], START);
        assert_eq!(ids[1], END);
        assert!(ids[2..].iter().all(|&t| t == PAD));
    }

    #[test]
    fn tokenize_unknown_word_names_it() {
        let enc = tiny_encoder();
        let err = enc.tokenize("an image of a husky").unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("husky"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_text_deterministic_and_distinct() {
        let enc = tiny_encoder();
        let a = enc.encode_text("an image of a red circle").unwrap();
        let b = enc.encode_text("an image of a red circle").unwrap();
        assert_eq!(a.0.data(), b.0.data());
        let c = enc.encode_text("an image of a blue square").unwrap();
        assert_ne!(a.0.data(), c.0.data());
    }

    #[test]
    fn projection_hand_oracle() {
        // P = I2, dP = [[0,1],[0,0]], f = [2,3] -> [5,3]
        let p = Tensor::eye(2);
        let dp = Tensor::new(vec![0.0, 1.0, 0.0, 0.0], &[2, 2]);
        let f = TextFeature(Tensor::new(vec![2.0, 3.0], &[2]));
        let e = project_feature(&p, &f, Some(&dp)).unwrap();
        assert_eq!(e.0.data(), &[5.0, 3.0]);
        // dP = 0 -> P f exactly.
        let e0 = project_feature(&p, &f, None).unwrap();
        assert_eq!(e0.0.data(), &[2.0, 3.0]);
    }

    #[test]
    fn projection_linearity() {
        let mut rng = Rng::new(9);
        let p = Tensor::randn(&mut rng, 1.0, &[4, 4]);
        let f1 = Tensor::randn(&mut rng, 1.0, &[4]);
        let f2 = Tensor::randn(&mut rng, 1.0, &[4]);
        let sum = TextFeature(f1.add(&f2));
        let lhs = project_feature(&p, &sum, None).unwrap();
        let r1 = project_feature(&p, &TextFeature(f1), None).unwrap();
        let r2 = project_feature(&p, &TextFeature(f2), None).unwrap();
        for (l, r) in lhs.0.data().iter().zip(r1.0.add(&r2.0).data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_hand_oracles() {
        let a = Tensor::new(vec![1.0, 0.0], &[2]);
        let b = Tensor::new(vec![1.0, 1.0], &[2]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ortho = Tensor::new(vec![0.0, 1.0], &[2]);
        assert!(cosine_similarity(&a, &ortho).unwrap().abs() < 1e-12);
        let expected = 1.0 / 2.0_f64.sqrt();
        assert!((cosine_similarity(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!(cosine_similarity(&a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut rng = Rng::new(4);
        let a = Tensor::randn(&mut rng, 1.0, &[8]);
        let b = Tensor::randn(&mut rng, 1.0, &[8]);
        let base = cosine_similarity(&a, &b).unwrap();
        for alpha in [0.5, 2.0, 117.0] {
            let scaled = cosine_similarity(&a.scale(alpha), &b).unwrap();
            assert!((scaled - base).abs() < 1e-6);
        }
    }

    #[test]
    fn image_encoder_finite_on_extremes() {
        let enc = tiny_encoder();
        let ones = Image::from_tensor(Tensor::filled(1.0, &[3, 16, 16])).unwrap();
        let e = enc.encode_image(&ones).unwrap();
        assert!(e.is_finite());
        let e2 = enc.encode_image(&ones).unwrap();
        assert_eq!(e.data(), e2.data());
    }

    #[test]
    fn contrastive_smoke_train_reduces_loss() {
        let mut enc = tiny_encoder();
        let corpus = build_corpus(Split::Pretrain, None, 48, 11, 16).unwrap();
        let log = enc
            .contrastive_pretrain(
                &corpus,
                ContrastiveConfig {
                    epochs: 4,
                    batch_size: 16,
                    lr: 2e-3,
                },
                11,
            )
            .unwrap();
        assert_eq!(log.epoch_losses.len(), 4);
        let first = log.epoch_losses.first().unwrap();
        let last = log.epoch_losses.last().unwrap();
        assert!(last < first, "loss did not decrease: {log:?}");
    }

    #[test]
    fn contrastive_seeded_rerun_identical() {
        let corpus = build_corpus(Split::Pretrain, None, 16, 3, 16).unwrap();
        let cfg = ContrastiveConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
        };
        let mut a = tiny_encoder();
        a.contrastive_pretrain(&corpus, cfg, 5).unwrap();
        let mut b = tiny_encoder();
        b.contrastive_pretrain(&corpus, cfg, 5).unwrap();
        assert_eq!(a.params, b.params);
    }
}
