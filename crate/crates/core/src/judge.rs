//! Evaluation suite: CLIP-style retain/forget scores, Fréchet distance over
//! encoder features, an accuracy-gated concept detector, and the assembled
//! metrics report.
//!
//! Scoring always uses a frozen pre-unlearning copy of the dual encoder, so
//! the metrics measure what generation lost rather than drift in the metric
//! itself.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::diffusion::{sample, DiffusionModel};
use crate::error::{Error, Result};
use crate::linalg::trace_sqrtm_psd;
use crate::nn::{Adam, AdamConfig, Graph, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::synthworld::{Concept, Corpus, Image};
use crate::tensor::Tensor;
use crate::textbridge::{cosine_similarity, DualEncoder};

/// Covariance regularizer added to both covariance estimates.
const COV_EPS: f64 = 1e-6;

// ── Fréchet distance ─────────────────────────────────────────────────

fn mean_and_covariance(feats: &Tensor) -> (Tensor, Tensor) {
    let (n, k) = (feats.shape()[0], feats.shape()[1]);
    let mut mean = Tensor::zeros(&[k]);
    for row in feats.data().chunks(k) {
        for (m, v) in mean.data_mut().iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.data_mut() {
        *m /= n as f64;
    }
    let mut centered = feats.clone();
    for row in centered.data_mut().chunks_mut(k) {
        for (v, m) in row.iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    // Unbiased covariance with a small ridge for near-singular samples.
    let mut cov = centered.transposed().matmul(&centered);
    for v in cov.data_mut().iter_mut() {
        *v /= (n - 1) as f64;
    }
    for i in 0..k {
        cov.data_mut()[i * k + i] += COV_EPS;
    }
    (mean, cov)
}

/// Gaussian Fréchet distance between two feature samples (rows = samples).
pub fn frechet_distance(feats_a: &Tensor, feats_b: &Tensor) -> Result<f64> {
    for (name, f) in [("a", feats_a), ("b", feats_b)] {
        if f.shape().len() != 2 || f.shape()[0] < 2 || f.shape()[1] < 1 {
            return Err(Error::validation(format!(
                "feature set {name} must be [n >= 2, k >= 1], got {:?}",
                f.shape()
            )));
        }
    }
    if feats_a.shape()[1] != feats_b.shape()[1] {
        return Err(Error::ShapeMismatch {
            context: "frechet_distance",
            expected: format!("feature width {}", feats_a.shape()[1]),
            got: format!("{}", feats_b.shape()[1]),
        });
    }
    let (mu_a, cov_a) = mean_and_covariance(feats_a);
    let (mu_b, cov_b) = mean_and_covariance(feats_b);

    let mean_term: f64 = mu_a
        .data()
        .iter()
        .zip(mu_b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace_a: f64 = (0..cov_a.shape()[0])
        .map(|i| cov_a.data()[i * cov_a.shape()[0] + i])
        .sum();
    let trace_b: f64 = (0..cov_b.shape()[0])
        .map(|i| cov_b.data()[i * cov_b.shape()[0] + i])
        .sum();

    // tr sqrtm(cov_a cov_b) via the symmetric form s cov_b s.
    let s = crate::linalg::sqrtm_psd(&cov_a);
    let m = s.matmul(&cov_b).matmul(&s);
    // Symmetrize against accumulated rounding before the eigensolve.
    let k = m.shape()[0];
    let mut sym = m.clone();
    for i in 0..k {
        for j in 0..k {
            let avg = 0.5 * (m.data()[i * k + j] + m.data()[j * k + i]);
            sym.data_mut()[i * k + j] = avg;
        }
    }
    let cross = trace_sqrtm_psd(&sym);

    Ok((mean_term + trace_a + trace_b - 2.0 * cross).max(0.0))
}

/// Fréchet distance between two image sets in the frozen encoder's feature
/// space (the pipeline's Inception substitute).
pub fn fid_score(
    real_images: &[Image],
    generated_images: &[Image],
    extractor: &DualEncoder,
) -> Result<f64> {
    if real_images.len() < 2 || generated_images.len() < 2 {
        return Err(Error::validation("fid_score needs at least 2 images per set"));
    }
    let embed_all = |images: &[Image]| -> Result<Tensor> {
        let d = extractor.cfg.dim;
        let mut data = Vec::with_capacity(images.len() * d);
        for img in images {
            let e = extractor.encode_image(img)?;
            data.extend_from_slice(e.data());
        }
        Ok(Tensor::new(data, &[images.len(), d]))
    };
    frechet_distance(&embed_all(real_images)?, &embed_all(generated_images)?)
}

// ── Concept classifier ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub image_side: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Gaussian noise added to training inputs so the detector tolerates
    /// generation artifacts.
    pub noise_std: f64,
    /// Maximum random translation (pixels) applied to training inputs;
    /// bakes in the position invariance the detector needs.
    pub max_shift: usize,
    /// Fraction of the corpus held out for the accuracy gate.
    pub holdout_fraction: f64,
    /// Minimum held-out accuracy; training aborts below it.
    pub accuracy_gate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            image_side: 32,
            base_channels: 12,
            epochs: 40,
            batch_size: 32,
            lr: 5e-3,
            noise_std: 0.02,
            max_shift: 5,
            holdout_fraction: 0.2,
            accuracy_gate: 0.9,
        }
    }
}

/// Accuracy-gated convolutional detector over the 16-concept vocabulary.
#[derive(Debug, Clone)]
pub struct ConceptClassifier {
    pub cfg: ClassifierConfig,
    pub params: ParamStore,
    /// Held-out accuracy measured at training time.
    pub accuracy: f64,
}

impl ConceptClassifier {
    fn init_params(cfg: &ClassifierConfig, rng: &mut Rng) -> ParamStore {
        let mut store = ParamStore::new();
        let b = cfg.base_channels;
        let side = cfg.image_side / 16;
        crate::nn::init_conv(&mut store, rng, "cls.conv1", 3, b, 3);
        crate::nn::init_norm(&mut store, "cls.norm1", b);
        crate::nn::init_conv(&mut store, rng, "cls.conv2", b, 2 * b, 3);
        crate::nn::init_norm(&mut store, "cls.norm2", 2 * b);
        crate::nn::init_conv(&mut store, rng, "cls.conv3", 2 * b, 4 * b, 3);
        crate::nn::init_norm(&mut store, "cls.norm3", 4 * b);
        crate::nn::init_conv(&mut store, rng, "cls.conv4", 4 * b, 4 * b, 3);
        crate::nn::init_linear(&mut store, rng, "cls.head", 4 * b * side * side, 16);
        store
    }

    fn logits_graph(params: &ParamStore, image: &Tensor) -> Tensor {
        let mut g = Graph::new(params);
        let x = g.leaf(image.clone());
        let out = Self::forward(&mut g, x);
        g.value(out).clone()
    }

    fn forward(g: &mut Graph<'_>, x: crate::tape::Var) -> crate::tape::Var {
        let groups = 4;
        let h = crate::nn::conv(g, "cls.conv1", x, 2, 1);
        let h = crate::nn::group_norm(g, "cls.norm1", h, groups);
        let h = g.tape.silu(h);
        let h = crate::nn::conv(g, "cls.conv2", h, 2, 1);
        let h = crate::nn::group_norm(g, "cls.norm2", h, groups);
        let h = g.tape.silu(h);
        let h = crate::nn::conv(g, "cls.conv3", h, 2, 1);
        let h = crate::nn::group_norm(g, "cls.norm3", h, groups);
        let h = g.tape.silu(h);
        let h = crate::nn::conv(g, "cls.conv4", h, 2, 1);
        let h = g.tape.silu(h);
        let n = g.value(h).numel();
        let flat = g.tape.reshape(h, &[1, n]);
        crate::nn::linear(g, "cls.head", flat)
    }

    /// Index of the predicted concept.
    pub fn classify(&self, image: &Image) -> Result<usize> {
        let s = self.cfg.image_side;
        if image.planes.shape() != [3, s, s] {
            return Err(Error::ShapeMismatch {
                context: "classify",
                expected: format!("[3, {s}, {s}]"),
                got: image.planes.shape_string(),
            });
        }
        let logits = Self::logits_graph(&self.params, &image.planes);
        let mut best = 0usize;
        let mut best_value = f64::NEG_INFINITY;
        for (i, &v) in logits.data().iter().enumerate() {
            if v > best_value {
                best_value = v;
                best = i;
            }
        }
        Ok(best)
    }

    pub fn accuracy_on(&self, corpus: &Corpus) -> Result<f64> {
        let mut hits = 0usize;
        for item in &corpus.items {
            if self.classify(&item.image)? == item.concept.index() {
                hits += 1;
            }
        }
        Ok(hits as f64 / corpus.items.len() as f64)
    }
}

/// Train the detector; aborts if the held-out accuracy misses the gate.
pub fn train_concept_classifier(
    corpus: &Corpus,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ConceptClassifier> {
    let n = corpus.items.len();
    let holdout = ((n as f64 * cfg.holdout_fraction) as usize).max(1);
    if n <= holdout {
        return Err(Error::validation("corpus too small for the holdout split"));
    }
    let covered: BTreeSet<usize> = corpus.items.iter().map(|i| i.concept.index()).collect();
    if covered.len() < 16 {
        return Err(Error::validation(format!(
            "classifier corpus covers {} of 16 concepts",
            covered.len()
        )));
    }
    let train_count = n - holdout;

    let mut rng = Rng::substream(seed, "classifier-train");
    let mut params = ConceptClassifier::init_params(cfg, &mut rng);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let trainable = crate::nn::all_names(&params);

    for epoch in 0..cfg.epochs {
        let order = rng.shuffled_indices(train_count);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(&params);
            let mut rows = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let item = &corpus.items[idx];
                let mut pixels = item.image.planes.clone();
                if cfg.max_shift > 0 {
                    let span = 2 * cfg.max_shift + 1;
                    let dx = rng.below(span) as isize - cfg.max_shift as isize;
                    let dy = rng.below(span) as isize - cfg.max_shift as isize;
                    pixels = shift_image(&pixels, dx, dy);
                }
                if cfg.noise_std > 0.0 {
                    for v in pixels.data_mut() {
                        *v += rng.normal() * cfg.noise_std;
                    }
                }
                let x = g.leaf(pixels);
                let logits = ConceptClassifier::forward(&mut g, x);
                rows.push(logits);
                targets.push(item.concept.index());
            }
            let stacked = g.tape.concat_rows(&rows);
            let loss = g.tape.cross_entropy_rows(stacked, &targets);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classifier loss diverged at epoch {epoch}"
                )));
            }
            let (grads, _) = g.backward(loss);
            adam.step(&mut params, &grads, &trainable, None);
        }
    }

    let classifier = ConceptClassifier {
        cfg: *cfg,
        params,
        accuracy: 0.0,
    };
    let mut hits = 0usize;
    for item in &corpus.items[train_count..] {
        if classifier.classify(&item.image)? == item.concept.index() {
            hits += 1;
        }
    }
    let accuracy = hits as f64 / holdout as f64;
    if accuracy < cfg.accuracy_gate {
        return Err(Error::validation(format!(
            "classifier held-out accuracy {accuracy:.3} below gate {}",
            cfg.accuracy_gate
        )));
    }
    Ok(ConceptClassifier {
        accuracy,
        ..classifier
    })
}

/// Integer translation with edge replication (the border is background in
/// this corpus).
fn shift_image(planes: &Tensor, dx: isize, dy: isize) -> Tensor {
    let c = planes.shape()[0];
    let h = planes.shape()[1];
    let w = planes.shape()[2];
    let mut out = Tensor::zeros(planes.shape());
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                out.data_mut()[(ch * h + y) * w + x] = planes.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

/// TP / (TP + FN) over images generated from the forget prompt (all inputs
/// are positives by construction).
pub fn detection_rate(
    images: &[Image],
    classifier: &ConceptClassifier,
    target: Concept,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::validation("detection_rate on an empty image set"));
    }
    let mut detected = 0usize;
    for img in images {
        if classifier.classify(img)? == target.index() {
            detected += 1;
        }
    }
    Ok(detected as f64 / images.len() as f64)
}

// ── Generation + scoring ─────────────────────────────────────────────

/// The generation-side state under evaluation: a diffusion model, the
/// (possibly modified) conditioning encoder, and the low-rank projection
/// perturbation when one applies.
pub struct GenerativeState<'a> {
    pub diffusion: &'a DiffusionModel,
    pub encoder: &'a DualEncoder,
    pub delta: Option<&'a Tensor>,
}

impl GenerativeState<'_> {
    pub fn sample_image(&self, prompt: &str, steps: usize, seed: u64) -> Result<Image> {
        let cond = self.encoder.embed_prompt(prompt, self.delta)?;
        sample(self.diffusion, &cond, steps, seed)
    }
}

/// Mean cosine similarity between generated images and the prompt embedding,
/// both embedded by the frozen scorer.
pub fn clip_score_batch(
    state: &GenerativeState<'_>,
    scorer: &DualEncoder,
    prompt: &str,
    seeds: &[u64],
    steps: usize,
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::validation("clip_score_batch needs at least one seed"));
    }
    let text = scorer.embed_prompt(prompt, None)?;
    let mut total = 0.0;
    for &seed in seeds {
        let img = state.sample_image(prompt, steps, seed)?;
        let e = scorer.encode_image(&img)?;
        total += cosine_similarity(&e, &text.0)?;
    }
    Ok(total / seeds.len() as f64)
}

// ── Assembled report ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub retain_clip: f64,
    pub forget_clip: f64,
    pub fid: f64,
    pub detection_rate: f64,
    pub unlearning_time_s: f64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub n_forget_samples: usize,
    pub n_retain_samples_per_prompt: usize,
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_forget_samples: 24,
            n_retain_samples_per_prompt: 3,
            sample_steps: 100,
            seed: 0,
        }
    }
}

/// Generate, score, and assemble every metric for one model state.
/// `unlearning_time_s` is copied from the run log (zero for pre-unlearning
/// evaluations).
pub fn evaluate(
    state: &GenerativeState<'_>,
    scorer: &DualEncoder,
    classifier: &ConceptClassifier,
    forget_prompt: &str,
    forget_concept: Concept,
    retain_prompts: &[String],
    ground_truth_forget: &[Image],
    cfg: &EvalConfig,
    unlearning_time_s: f64,
) -> Result<MetricsReport> {
    if cfg.n_forget_samples < 2 {
        return Err(Error::validation("need at least 2 forget samples"));
    }
    if retain_prompts.is_empty() {
        return Err(Error::validation("need at least one retain prompt"));
    }

    // Forget-prompt samples are shared by clip score, FID, and detection.
    let forget_seeds: Vec<u64> = (0..cfg.n_forget_samples)
        .map(|i| derive_seed(cfg.seed, &format!("eval-forget-{i}")))
        .collect();
    let mut forget_images = Vec::with_capacity(forget_seeds.len());
    for &s in &forget_seeds {
        forget_images.push(state.sample_image(forget_prompt, cfg.sample_steps, s)?);
    }

    let forget_text = scorer.embed_prompt(forget_prompt, None)?;
    let mut forget_score = 0.0;
    for img in &forget_images {
        let e = scorer.encode_image(img)?;
        forget_score += cosine_similarity(&e, &forget_text.0)?;
    }
    let forget_clip = forget_score / forget_images.len() as f64;

    let mut retain_total = 0.0;
    for (pi, prompt) in retain_prompts.iter().enumerate() {
        let seeds: Vec<u64> = (0..cfg.n_retain_samples_per_prompt)
            .map(|i| derive_seed(cfg.seed, &format!("eval-retain-{pi}-{i}")))
            .collect();
        retain_total += clip_score_batch(state, scorer, prompt, &seeds, cfg.sample_steps)?;
    }
    let retain_clip = retain_total / retain_prompts.len() as f64;

    let fid = fid_score(ground_truth_forget, &forget_images, scorer)?;
    let detection = detection_rate(&forget_images, classifier, forget_concept)?;

    Ok(MetricsReport {
        retain_clip,
        forget_clip,
        fid,
        detection_rate: detection,
        unlearning_time_s,
        n_samples: forget_images.len(),
        seeds: forget_seeds,
    })
}
