//! Evaluation machinery: Frechet distance between feature Gaussians,
//! classification accuracy/confusion, detection mAP, and the desk-scale
//! feature extractor that stands in for a pretrained embedding network.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::optim::{Adam, OptimConfig};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

// ---------------------------------------------------------------------------
// Gaussian feature statistics and FID
// ---------------------------------------------------------------------------

/// First two moments of a feature cloud: sample mean and unbiased covariance.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance, symmetric.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

/// Sample mean and unbiased (divisor M-1) covariance of an [M, d] feature
/// matrix. Needs at least two samples.
pub fn feature_stats(features: &Tensor) -> Result<FeatureStats> {
    if features.ndim() != 2 {
        return Err(Error::shape(format!(
            "feature_stats: expected [M, d], got {:?}",
            features.shape()
        )));
    }
    let (m, d) = (features.shape()[0], features.shape()[1]);
    if m < 2 {
        return Err(Error::contract(format!(
            "feature_stats: need at least 2 samples, got {m}"
        )));
    }
    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in 0..m {
        for j in 0..d {
            mean[j] += x[row * d + j];
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in 0..m {
        for i in 0..d {
            let di = x[row * d + i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (x[row * d + j] - mean[j]);
            }
        }
    }
    let norm = 1.0 / (m as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] * norm;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(FeatureStats { mean, cov, dim: d, count: m })
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Slightly negative eigenvalues (roundoff) are clamped to zero; asymmetry
/// beyond tolerance is a contract error.
pub fn matrix_sqrt_psd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    if m.len() != d * d {
        return Err(Error::shape(format!(
            "matrix_sqrt_psd: expected {d}x{d} = {} entries, got {}",
            d * d,
            m.len()
        )));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..d {
        for j in (i + 1)..d {
            if (m[i * d + j] - m[j * d + i]).abs() > 1e-8 * scale {
                return Err(Error::contract(format!(
                    "matrix_sqrt_psd: asymmetric at ({i},{j}): {} vs {}",
                    m[i * d + j],
                    m[j * d + i]
                )));
            }
        }
    }
    let mat = DMatrix::from_row_slice(d, d, m);
    let eig = SymmetricEigen::new(mat);
    let mut out = vec![0.0; d * d];
    // S = V diag(sqrt(max(lambda, 0))) V^T
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(0.0);
        let s = lam.sqrt();
        let v = eig.eigenvectors.column(k);
        for i in 0..d {
            let vis = v[i] * s;
            for j in i..d {
                out[i * d + j] += vis * v[j];
            }
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            out[j * d + i] = out[i * d + j];
        }
    }
    Ok(out)
}

fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Frechet distance between two feature Gaussians:
/// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}).
///
/// The cross term is evaluated in the stabilized congruence form
/// sqrt(sqrt(S_r) S_g sqrt(S_r)), which has the same trace; tiny negative
/// results from roundoff are clamped to zero.
pub fn fid(real: &FeatureStats, generated: &FeatureStats) -> Result<f64> {
    if real.dim != generated.dim {
        return Err(Error::shape(format!(
            "fid: dimension mismatch {} vs {}",
            real.dim, generated.dim
        )));
    }
    let d = real.dim;
    let mean_sq: f64 = real
        .mean
        .iter()
        .zip(&generated.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sqrt_r = matrix_sqrt_psd(&real.cov, d)?;
    let mut inner = mat_mul(&sqrt_r, &mat_mul(&generated.cov, &sqrt_r, d), d);
    // Symmetrize before the second square root; the product accumulates
    // roundoff asymmetry.
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = v;
            inner[j * d + i] = v;
        }
    }
    let cross = matrix_sqrt_psd(&inner, d)?;
    let mut trace = 0.0;
    for i in 0..d {
        trace += real.cov[i * d + i] + generated.cov[i * d + i] - 2.0 * cross[i * d + i];
    }
    Ok((mean_sq + trace).max(0.0))
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

/// Accuracy and a C x C count matrix where entry (i, j) counts samples with
/// true class i predicted as j.
pub fn accuracy_confusion(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(f64, Vec<Vec<usize>>)> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "accuracy_confusion: got {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut correct = 0usize;
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::index(format!(
                "accuracy_confusion: class {} out of range ({num_classes})",
                p.max(t)
            )));
        }
        confusion[t][p] += 1;
        if p == t {
            correct += 1;
        }
    }
    Ok((correct as f64 / predictions.len() as f64, confusion))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

/// One scored prediction; box is normalized (cx, cy, w, h).
#[derive(Debug, Clone)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: [f64; 4],
}

/// Per-image predictions and ground truths, kept in parallel.
#[derive(Debug, Default, Clone)]
pub struct DetectionResultSet {
    pub predictions: Vec<Vec<Detection>>,
    pub truths: Vec<Vec<GroundTruth>>,
}

impl DetectionResultSet {
    pub fn push_image(&mut self, preds: Vec<Detection>, gts: Vec<GroundTruth>) -> Result<()> {
        for p in &preds {
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::domain(format!(
                    "detection score {} outside [0, 1]",
                    p.score
                )));
            }
            if p.bbox[2] <= 0.0 || p.bbox[3] <= 0.0 {
                return Err(Error::domain(format!("degenerate predicted box {:?}", p.bbox)));
            }
        }
        self.predictions.push(preds);
        self.truths.push(gts);
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.predictions.len()
    }
}

/// Intersection-over-union of two (cx, cy, w, h) boxes.
pub fn iou_cxcywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ax1 = a[0] - a[2] / 2.0;
    let ay1 = a[1] - a[3] / 2.0;
    let ax2 = a[0] + a[2] / 2.0;
    let ay2 = a[1] + a[3] / 2.0;
    let bx1 = b[0] - b[2] / 2.0;
    let by1 = b[1] - b[3] / 2.0;
    let bx2 = b[0] + b[2] / 2.0;
    let by2 = b[1] + b[3] / 2.0;
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-class non-maximum suppression, highest score first.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for det in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class == det.class && iou_cxcywh(&k.bbox, &det.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

#[derive(Debug, Clone)]
pub struct ApReport {
    /// (class id, average precision), classes sorted ascending.
    pub per_class: Vec<(usize, f64)>,
    pub map: f64,
}

/// Score-sorted greedy matching per class (each ground truth matched at most
/// once at the given IoU threshold), 101-point interpolated average
/// precision, mean over classes that appear in the ground truth or carry
/// predictions.
pub fn mean_average_precision(results: &DetectionResultSet, iou_threshold: f64) -> Result<ApReport> {
    if !(0.0..1.0).contains(&iou_threshold) || iou_threshold == 0.0 {
        return Err(Error::domain(format!(
            "mean_average_precision: IoU threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let mut classes: Vec<usize> = Vec::new();
    for img in &results.truths {
        for gt in img {
            if !classes.contains(&gt.class) {
                classes.push(gt.class);
            }
        }
    }
    for img in &results.predictions {
        for p in img {
            if !classes.contains(&p.class) {
                classes.push(p.class);
            }
        }
    }
    classes.sort_unstable();

    let mut per_class = Vec::with_capacity(classes.len());
    for &class in &classes {
        let npos: usize = results
            .truths
            .iter()
            .map(|img| img.iter().filter(|g| g.class == class).count())
            .sum();

        // (image, score, box), deterministic order: score desc, then image,
        // then original index.
        let mut preds: Vec<(usize, usize, f64, [f64; 4])> = Vec::new();
        for (img_idx, img) in results.predictions.iter().enumerate() {
            for (k, p) in img.iter().enumerate() {
                if p.class == class {
                    preds.push((img_idx, k, p.score, p.bbox));
                }
            }
        }
        preds.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        if npos == 0 {
            // Predictions without any ground truth: AP 0, recorded.
            per_class.push((class, 0.0));
            continue;
        }

        let mut matched: Vec<Vec<bool>> = results
            .truths
            .iter()
            .map(|img| vec![false; img.len()])
            .collect();
        let mut tps = Vec::with_capacity(preds.len());
        for &(img_idx, _, _, bbox) in &preds {
            let gts = &results.truths[img_idx];
            let mut best = (0usize, 0.0f64);
            for (gi, gt) in gts.iter().enumerate() {
                if gt.class != class || matched[img_idx][gi] {
                    continue;
                }
                let iou = iou_cxcywh(&bbox, &gt.bbox);
                if iou > best.1 {
                    best = (gi, iou);
                }
            }
            if best.1 >= iou_threshold {
                matched[img_idx][best.0] = true;
                tps.push(true);
            } else {
                tps.push(false);
            }
        }

        // Precision/recall curve, then 101-point interpolation.
        let mut tp_cum = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tps.len());
        for (i, &tp) in tps.iter().enumerate() {
            if tp {
                tp_cum += 1;
            }
            let precision = tp_cum as f64 / (i + 1) as f64;
            let recall = tp_cum as f64 / npos as f64;
            curve.push((recall, precision));
        }
        let mut ap = 0.0;
        for step in 0..=100 {
            let r = step as f64 / 100.0;
            let p = curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, prec)| *prec)
                .fold(0.0, f64::max);
            ap += p;
        }
        ap /= 101.0;
        per_class.push((class, ap));
    }

    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(ApReport { per_class, map })
}

// ---------------------------------------------------------------------------
// Desk-scale feature extractor for FID
// ---------------------------------------------------------------------------

/// Three strided conv stages feeding a linear feature layer; a classifier
/// head sits on top for training. Features are the pre-activation outputs of
/// the feature layer, so the embedding is signed and roughly Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: [usize; 3],
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ExtractorConfig {
    pub fn desk_default(in_channels: usize, image_size: usize, num_classes: usize) -> Self {
        ExtractorConfig {
            in_channels,
            image_size,
            channels: [8, 16, 32],
            feature_dim: 64,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 {
            return Err(Error::config(format!(
                "extractor: image size {} must be divisible by 8 (three stride-2 stages)",
                self.image_size
            )));
        }
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("extractor: zero feature_dim or num_classes".to_string()));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let s = self.image_size / 8;
        self.channels[2] * s * s
    }
}

pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub weights: ModelWeights,
}

impl FeatureExtractor {
    pub fn init(config: ExtractorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut w = ModelWeights::new();
        let chans = [
            (config.in_channels, config.channels[0]),
            (config.channels[0], config.channels[1]),
            (config.channels[1], config.channels[2]),
        ];
        for (i, &(cin, cout)) in chans.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let mut r = rng.child(i as u64);
            let data = (0..cout * cin * 9).map(|_| r.normal() * std).collect();
            w.insert(
                format!("conv{}.weight", i + 1),
                Tensor::param(vec![cout, cin, 3, 3], data)?,
            )?;
            w.insert(format!("conv{}.bias", i + 1), Tensor::zeros_param(vec![cout]))?;
        }
        let flat = config.flat_dim();
        let mut r = rng.child(10);
        let std = (2.0 / flat as f64).sqrt();
        w.insert(
            "feat.weight",
            Tensor::param(vec![flat, config.feature_dim], (0..flat * config.feature_dim).map(|_| r.normal() * std).collect())?,
        )?;
        w.insert("feat.bias", Tensor::zeros_param(vec![config.feature_dim]))?;
        let mut r = rng.child(11);
        let std = (2.0 / config.feature_dim as f64).sqrt();
        w.insert(
            "head.weight",
            Tensor::param(
                vec![config.feature_dim, config.num_classes],
                (0..config.feature_dim * config.num_classes).map(|_| r.normal() * std).collect(),
            )?,
        )?;
        w.insert("head.bias", Tensor::zeros_param(vec![config.num_classes]))?;
        Ok(FeatureExtractor { config, weights: w })
    }

    /// Batched forward; input [B, C, H, W], returns (features [B, d], logits [B, classes]).
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        if batch.ndim() != 4
            || batch.shape()[1] != cfg.in_channels
            || batch.shape()[2] != cfg.image_size
            || batch.shape()[3] != cfg.image_size
        {
            return Err(Error::shape(format!(
                "extractor: expected [B, {}, {}, {}], got {:?}",
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size,
                batch.shape()
            )));
        }
        let b = batch.shape()[0];
        let mut x = batch.clone();
        for i in 1..=3 {
            x = x
                .conv2d(self.weights.get(&format!("conv{i}.weight"))?, 2, 1)?
                .add_channel_bias(self.weights.get(&format!("conv{i}.bias"))?)?
                .relu();
        }
        let flat = x.reshape(vec![b, cfg.flat_dim()])?;
        let features = flat.linear(self.weights.get("feat.weight")?, Some(self.weights.get("feat.bias")?))?;
        let logits = features
            .relu()
            .linear(self.weights.get("head.weight")?, Some(self.weights.get("head.bias")?))?;
        Ok((features, logits))
    }

    /// Feature rows for a set of images (each [C, H, W]), detached.
    pub fn extract(&self, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::contract("extract: empty image list".to_string()));
        }
        let cfg = &self.config;
        let per = cfg.in_channels * cfg.image_size * cfg.image_size;
        let mut flat = Vec::with_capacity(images.len() * per);
        for img in images {
            if img.len() != per {
                return Err(Error::shape(format!(
                    "extract: image has {} elements, expected {per}",
                    img.len()
                )));
            }
            flat.extend_from_slice(&img.data());
        }
        let batch = Tensor::from_vec(
            vec![images.len(), cfg.in_channels, cfg.image_size, cfg.image_size],
            flat,
        )?;
        let (features, _) = self.forward(&batch)?;
        Ok(features.detach())
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Trains the extractor as a classifier on labeled images. The checkpointed
/// result is pinned by callers so FID values stay comparable across runs.
pub fn train_extractor(
    config: ExtractorConfig,
    images: &[Tensor],
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    rng: &Rng,
) -> Result<(FeatureExtractor, Vec<ExtractorEpoch>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::contract(format!(
            "train_extractor: {} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let model = FeatureExtractor::init(config.clone(), &mut rng.child(0))?;
    let params = model.weights.trainable();
    let mut opt = Adam::new(OptimConfig::adamw_distill().with_lr(2e-3))?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut shuffle_rng = rng.child(1);
    let per = config.in_channels * config.image_size * config.image_size;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut flat = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                flat.extend_from_slice(&images[i].data());
            }
            let batch = Tensor::from_vec(
                vec![chunk.len(), config.in_channels, config.image_size, config.image_size],
                flat,
            )?;
            let (_, logits) = model.forward(&batch)?;
            // Negative mean log-probability of the true class.
            let logp = logits.log_softmax_t(1.0, 1)?;
            let picks: Vec<usize> = chunk
                .iter()
                .enumerate()
                .map(|(row, &i)| row * config.num_classes + labels[i])
                .collect();
            let loss = logp
                .gather_flat(vec![chunk.len()], picks)?
                .mean()
                .mul_scalar(-1.0);
            loss_sum += loss.item() * chunk.len() as f64;
            let ld = logits.data();
            for (row, &i) in chunk.iter().enumerate() {
                let slice = &ld[row * config.num_classes..(row + 1) * config.num_classes];
                if argmax(slice) == labels[i] {
                    correct += 1;
                }
            }
            drop(ld);
            Adam::zero_grad(&params);
            loss.backward()?;
            opt.step(&params)?;
        }
        history.push(ExtractorEpoch {
            epoch,
            loss: loss_sum / images.len() as f64,
            train_acc: correct as f64 / images.len() as f64,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_stats_identical_rows_zero_cov() {
        let f = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let s = feature_stats(&f).unwrap();
        assert_eq!(s.mean, vec![1.0, 2.0]);
        assert!(s.cov.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_stats_two_point_hand_case() {
        // Points (0,0) and (2,2): mean (1,1), unbiased cov [[2,2],[2,2]].
        let f = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let s = feature_stats(&f).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.cov, vec![2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn feature_stats_needs_two_samples() {
        let f = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(feature_stats(&f), Err(Error::Contract(_))));
    }

    #[test]
    fn feature_stats_monte_carlo_recovery() {
        let mut rng = Rng::new(2024);
        let m = 4000;
        // x ~ N(1, 4), y = 0.5 x + N(0, 1): cov = [[4, 2], [2, 2]].
        let mut data = Vec::with_capacity(m * 2);
        for _ in 0..m {
            let x = 1.0 + 2.0 * rng.normal();
            let y = 0.5 * x + rng.normal();
            data.push(x);
            data.push(y);
        }
        let s = feature_stats(&Tensor::from_vec(vec![m, 2], data).unwrap()).unwrap();
        assert!((s.mean[0] - 1.0).abs() < 0.15);
        assert!((s.cov[0] - 4.0).abs() < 0.4);
        assert!((s.cov[1] - 2.0).abs() < 0.3);
        assert!((s.cov[3] - 2.0).abs() < 0.3);
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let i2 = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matrix_sqrt_psd(&i2, 2).unwrap(), i2);
        let d = vec![4.0, 0.0, 0.0, 9.0];
        let s = matrix_sqrt_psd(&d, 2).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[3] - 3.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
    }

    #[test]
    fn sqrt_defining_property_on_random_psd() {
        let mut rng = Rng::new(99);
        for _ in 0..20 {
            let d = 4 + rng.below(5);
            // A^T A is PSD.
            let a: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        m[i * d + j] += a[k * d + i] * a[k * d + j];
                    }
                }
            }
            let s = matrix_sqrt_psd(&m, d).unwrap();
            let ss = mat_mul(&s, &s, d);
            let num: f64 = ss.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den < 1e-8, "residual {}", num / den);
        }
    }

    #[test]
    fn sqrt_rejects_asymmetric() {
        let m = vec![1.0, 0.5, -0.5, 1.0];
        assert!(matches!(matrix_sqrt_psd(&m, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn fid_identity_is_zero_and_symmetric() {
        let s = FeatureStats {
            mean: vec![0.3, -1.2],
            cov: vec![2.0, 0.5, 0.5, 1.0],
            dim: 2,
            count: 10,
        };
        assert!(fid(&s, &s).unwrap().abs() < 1e-9);
        let t = FeatureStats {
            mean: vec![1.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 3.0],
            dim: 2,
            count: 10,
        };
        let ab = fid(&s, &t).unwrap();
        let ba = fid(&t, &s).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn fid_mean_only_case() {
        // mu_r = (0,0), mu_g = (3,4), equal covariances: FID = 25.
        let r = FeatureStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0], dim: 2, count: 5 };
        let g = FeatureStats { mean: vec![3.0, 4.0], cov: vec![1.0, 0.0, 0.0, 1.0], dim: 2, count: 5 };
        assert!((fid(&r, &g).unwrap() - 25.0).abs() < 1e-6);
    }

    #[test]
    fn fid_covariance_only_case() {
        // Equal means, S_r = 4I, S_g = I: per dim 4 + 1 - 2*2 = 1, total 2.
        let r = FeatureStats { mean: vec![0.0, 0.0], cov: vec![4.0, 0.0, 0.0, 4.0], dim: 2, count: 5 };
        let g = FeatureStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0], dim: 2, count: 5 };
        assert!((fid(&r, &g).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fid_dimension_mismatch() {
        let r = FeatureStats { mean: vec![0.0], cov: vec![1.0], dim: 1, count: 5 };
        let g = FeatureStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0], dim: 2, count: 5 };
        assert!(matches!(fid(&r, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn accuracy_confusion_cases() {
        let (acc, conf) = accuracy_confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(conf[0][0] + conf[1][1] + conf[2][2], 3);

        let (acc, conf) = accuracy_confusion(&[0, 0, 0], &[0, 1, 2], 3).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(conf[1][0], 1);
        assert_eq!(conf[2][0], 1);

        assert!(accuracy_confusion(&[], &[], 3).is_err());
    }

    #[test]
    fn accuracy_confusion_matches_hand_tally() {
        let mut rng = Rng::new(17);
        let labels: Vec<usize> = (0..20).map(|_| rng.below(4)).collect();
        let preds: Vec<usize> = (0..20).map(|_| rng.below(4)).collect();
        let (acc, conf) = accuracy_confusion(&preds, &labels, 4).unwrap();
        let mut hand = 0;
        for i in 0..20 {
            if preds[i] == labels[i] {
                hand += 1;
            }
        }
        assert!((acc - hand as f64 / 20.0).abs() < 1e-12);
        let total: usize = conf.iter().map(|r| r.iter().sum::<usize>()).sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn map_perfect_single_detection() {
        let mut rs = DetectionResultSet::default();
        let b = [0.5, 0.5, 0.2, 0.2];
        rs.push_image(
            vec![Detection { class: 0, score: 1.0, bbox: b }],
            vec![GroundTruth { class: 0, bbox: b }],
        )
        .unwrap();
        let r = mean_average_precision(&rs, 0.5).unwrap();
        assert!((r.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn map_no_predictions_is_zero() {
        let mut rs = DetectionResultSet::default();
        rs.push_image(vec![], vec![GroundTruth { class: 1, bbox: [0.5, 0.5, 0.1, 0.1] }])
            .unwrap();
        let r = mean_average_precision(&rs, 0.5).unwrap();
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn map_matches_brute_force_pr_enumeration() {
        // 2 GTs, 3 predictions (scores 0.9 hit, 0.8 miss, 0.7 hit).
        let gt1 = [0.3, 0.3, 0.2, 0.2];
        let gt2 = [0.7, 0.7, 0.2, 0.2];
        let far = [0.1, 0.9, 0.05, 0.05];
        let mut rs = DetectionResultSet::default();
        rs.push_image(
            vec![
                Detection { class: 0, score: 0.9, bbox: gt1 },
                Detection { class: 0, score: 0.8, bbox: far },
                Detection { class: 0, score: 0.7, bbox: gt2 },
            ],
            vec![GroundTruth { class: 0, bbox: gt1 }, GroundTruth { class: 0, bbox: gt2 }],
        )
        .unwrap();
        let r = mean_average_precision(&rs, 0.5).unwrap();
        // PR points: (0.5, 1.0), (0.5, 0.5), (1.0, 2/3).
        // Interpolated: recall <= 0.5 -> 1.0 (51 pts), recall in (0.5, 1.0] -> 2/3 (50 pts).
        let expect = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((r.map - expect).abs() < 1e-12, "map {} expect {expect}", r.map);
    }

    #[test]
    fn map_monotone_in_added_correct_detection() {
        let gt1 = [0.3, 0.3, 0.2, 0.2];
        let gt2 = [0.7, 0.7, 0.2, 0.2];
        let mut base = DetectionResultSet::default();
        base.push_image(
            vec![Detection { class: 0, score: 0.9, bbox: gt1 }],
            vec![GroundTruth { class: 0, bbox: gt1 }, GroundTruth { class: 0, bbox: gt2 }],
        )
        .unwrap();
        let before = mean_average_precision(&base, 0.5).unwrap().map;
        let mut more = DetectionResultSet::default();
        more.push_image(
            vec![
                Detection { class: 0, score: 0.9, bbox: gt1 },
                Detection { class: 0, score: 0.5, bbox: gt2 },
            ],
            vec![GroundTruth { class: 0, bbox: gt1 }, GroundTruth { class: 0, bbox: gt2 }],
        )
        .unwrap();
        let after = mean_average_precision(&more, 0.5).unwrap().map;
        assert!(after >= before - 1e-12, "AP dropped: {before} -> {after}");
        assert!(after <= 1.0 + 1e-12 && before >= 0.0);
    }

    #[test]
    fn nms_keeps_best_per_cluster() {
        let b = [0.5, 0.5, 0.2, 0.2];
        let near = [0.52, 0.5, 0.2, 0.2];
        let far = [0.1, 0.1, 0.1, 0.1];
        let kept = nms(
            vec![
                Detection { class: 0, score: 0.6, bbox: near },
                Detection { class: 0, score: 0.9, bbox: b },
                Detection { class: 0, score: 0.3, bbox: far },
            ],
            0.5,
        );
        assert_eq!(kept.len(), 2);
        assert!((kept[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn extractor_shapes_and_determinism() {
        let cfg = ExtractorConfig::desk_default(1, 16, 3);
        let mut rng = Rng::new(5);
        let model = FeatureExtractor::init(cfg.clone(), &mut rng).unwrap();
        let imgs: Vec<Tensor> = (0..4)
            .map(|i| Tensor::full(vec![1, 16, 16], i as f64 / 4.0))
            .collect();
        let f1 = model.extract(&imgs).unwrap();
        let f2 = model.extract(&imgs).unwrap();
        assert_eq!(f1.shape(), &[4, 64]);
        assert_eq!(f1.to_vec(), f2.to_vec());
    }
}
