//! Small end-to-end segmentation head trained on synthetic images.
//!
//! Model: input projection → recurrent criss-cross attention → reduction to
//! the CCL feature width → linear classifier. Optimised with fixed-step
//! momentum gradient descent on the full batch, single-threaded.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::attention::{backward_recurrent, CCAttentionParams, ForwardCache};
use crate::cca2d::{rcca_forward, RCCAConfig};
use crate::error::{Error, Result};
use crate::losses::{ccl_loss_batch, cross_entropy_batch, CCLConfig, LabelMap, IGNORE_LABEL};
use crate::tensor::{pointwise_project, project_backward, ProjectionWeights, Tensor};

/// Colour channels of generated images.
pub const TOY_INPUT_CHANNELS: usize = 3;

/// Per-channel standard deviation of the pixel noise.
pub const TOY_NOISE_STD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub images: Vec<Tensor<f64>>,
    pub labels: Vec<LabelMap>,
    pub num_classes: usize,
    pub seed: u64,
}

/// Mean colour of class `c` out of `k`: a point on the unit circle in the
/// first two channels and a constant third channel.
pub fn class_color(c: usize, k: usize) -> [f64; 3] {
    let angle = std::f64::consts::TAU * c as f64 / k as f64;
    [angle.cos(), angle.sin(), 1.0]
}

/// Smallest distance between two class colours.
pub fn color_margin(k: usize) -> f64 {
    2.0 * (std::f64::consts::PI / k as f64).sin()
}

/// `n` images of rectangles and full-length one-pixel stripes on a random
/// background. Stripes never share the background class.
pub fn gen_toy(seed: u64, n: usize, h: usize, w: usize, k: usize) -> Result<ToyTask> {
    if k < 2 || k >= IGNORE_LABEL as usize {
        return Err(Error::Config(format!("class count {k} must be in 2..255")));
    }
    if h < 8 || w < 8 || n == 0 {
        return Err(Error::Config(format!("need n ≥ 1 and extents ≥ 8, got {n} of {h}×{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_NOISE_STD).expect("positive std");
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let bg = rng.random_range(0..k);
        let mut ids = vec![bg as u8; h * w];
        for _ in 0..rng.random_range(1..=2) {
            let class = rng.random_range(0..k) as u8;
            let (rh, rw) = (rng.random_range(2..=h / 2), rng.random_range(2..=w / 2));
            let (r0, c0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
            for r in r0..r0 + rh {
                ids[r * w + c0..r * w + c0 + rw].fill(class);
            }
        }
        for _ in 0..rng.random_range(1..=2) {
            let class = ((bg + rng.random_range(1..k)) % k) as u8;
            if rng.random_bool(0.5) {
                let r = rng.random_range(0..h);
                ids[r * w..(r + 1) * w].fill(class);
            } else {
                let c = rng.random_range(0..w);
                for r in 0..h {
                    ids[r * w + c] = class;
                }
            }
        }
        let n_pix = h * w;
        let mut data = vec![0.0; TOY_INPUT_CHANNELS * n_pix];
        for (p, &id) in ids.iter().enumerate() {
            let color = class_color(id as usize, k);
            for (ch, &mean) in color.iter().enumerate() {
                data[ch * n_pix + p] = mean + noise.sample(&mut rng);
            }
        }
        images.push(Tensor::new(vec![TOY_INPUT_CHANNELS, h, w], data)?);
        labels.push(LabelMap::new(h, w, ids)?);
    }
    Ok(ToyTask {
        images,
        labels,
        num_classes: k,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub use_ccl: bool,
    pub ccl: CCLConfig,
    pub channels: usize,
    pub reduced_channels: usize,
    pub loops: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            use_ccl: true,
            ccl: CCLConfig::default(),
            channels: 24,
            reduced_channels: 6,
            loops: 2,
        }
    }
}

/// Multiplier on the default init of the value projection; the recurrent
/// residual `(I + A·Wv)` compounds once per loop.
pub const VALUE_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub input: ProjectionWeights,
    pub attention: CCAttentionParams,
    pub reduce: ProjectionWeights,
    pub classifier: ProjectionWeights,
    pub rcca: RCCAConfig,
}

impl ToyModel {
    pub fn init(cfg: &TrainConfig, in_channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let rcca = RCCAConfig::new(cfg.loops, cfg.channels, cfg.reduced_channels)?;
        let feat = cfg.ccl.reduced_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = ProjectionWeights::random(cfg.channels, in_channels, &mut rng)?;
        let mut attention = CCAttentionParams::random(cfg.channels, cfg.reduced_channels, &mut rng)?;
        for x in attention.wv.weight_mut() {
            *x *= VALUE_INIT_SCALE;
        }
        Ok(Self {
            input,
            attention,
            reduce: ProjectionWeights::random(feat, cfg.channels, &mut rng)?,
            classifier: ProjectionWeights::random(num_classes, feat, &mut rng)?,
            rcca,
        })
    }

    fn zeros_like(&self) -> Self {
        let z =
            |w: &ProjectionWeights| ProjectionWeights::zeros(w.out_channels(), w.in_channels()).expect("valid shape");
        Self {
            input: z(&self.input),
            attention: self.attention.zeros_like(),
            reduce: z(&self.reduce),
            classifier: z(&self.classifier),
            rcca: self.rcca,
        }
    }

    fn weights_mut(&mut self) -> [&mut [f64]; 6] {
        let [q, k, v] = self.attention.parts_mut();
        [
            self.input.weight_mut(),
            q.weight_mut(),
            k.weight_mut(),
            v.weight_mut(),
            self.reduce.weight_mut(),
            self.classifier.weight_mut(),
        ]
    }

    fn forward(&self, image: &Tensor<f64>) -> Result<Activations> {
        let embedded = pointwise_project(image, &self.input)?;
        let (context, cache) = rcca_forward(&embedded, &self.attention, self.rcca.loops)?;
        let features = pointwise_project(&context, &self.reduce)?;
        let logits = pointwise_project(&features, &self.classifier)?;
        Ok(Activations {
            image: image.clone(),
            cache,
            context,
            features,
            logits,
        })
    }

    /// Class id with the highest logit at every position.
    pub fn predict(&self, image: &Tensor<f64>) -> Result<Vec<u8>> {
        Ok(argmax(&self.forward(image)?.logits))
    }
}

struct Activations {
    image: Tensor<f64>,
    cache: ForwardCache<f64>,
    context: Tensor<f64>,
    features: Tensor<f64>,
    logits: Tensor<f64>,
}

fn argmax(logits: &Tensor<f64>) -> Vec<u8> {
    let n = logits.positions();
    (0..n)
        .map(|p| {
            (0..logits.channels())
                .max_by(|&a, &b| logits.data()[a * n + p].total_cmp(&logits.data()[b * n + p]))
                .expect("at least one class") as u8
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total: f64,
    pub seg: f64,
    pub var: f64,
    pub dis: f64,
    pub reg: f64,
    pub pixel_acc: f64,
    /// Mean over classes of the mean squared distance to the class centre.
    pub intra_var: f64,
    /// Mean distance over unordered pairs of class centres.
    pub inter_dist: f64,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "epoch",
    "total",
    "seg",
    "var",
    "dis",
    "reg",
    "pixel_acc",
    "intra_var",
    "inter_dist",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// One row per evaluated epoch; row `e` describes the model after `e` updates.
    pub history: Vec<EpochMetrics>,
    /// Epoch at which the objective or a gradient became non-finite.
    pub failed_at: Option<usize>,
    pub model: ToyModel,
}

impl TrainOutcome {
    pub fn succeeded(&self) -> bool {
        self.failed_at.is_none()
    }

    pub fn first(&self) -> &EpochMetrics {
        self.history.first().expect("at least one epoch is evaluated")
    }

    pub fn last(&self) -> &EpochMetrics {
        self.history.last().expect("at least one epoch is evaluated")
    }
}

fn feature_stats(features: &[&Tensor<f64>], labels: &[&LabelMap]) -> (f64, f64) {
    let mut sums: std::collections::BTreeMap<u8, (Vec<f64>, f64, usize)> = Default::default();
    for (f, l) in features.iter().zip(labels) {
        let n = f.positions();
        let ch = f.channels();
        for (p, &id) in l.ids().iter().enumerate() {
            if id == IGNORE_LABEL {
                continue;
            }
            let e = sums.entry(id).or_insert_with(|| (vec![0.0; ch], 0.0, 0));
            let mut sq = 0.0;
            for k in 0..ch {
                let x = f.data()[k * n + p];
                e.0[k] += x;
                sq += x * x;
            }
            e.1 += sq;
            e.2 += 1;
        }
    }
    if sums.is_empty() {
        return (0.0, 0.0);
    }
    let mut intra = 0.0;
    let mut centers = Vec::new();
    for (sum, sq, count) in sums.values() {
        let count = *count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let mean_sq: f64 = mean.iter().map(|m| m * m).sum();
        let v = sq / count - mean_sq;
        // clamp rounding below zero, keep NaN visible
        intra += if v < 0.0 { 0.0 } else { v };
        centers.push(mean);
    }
    intra /= centers.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0;
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            inter += centers[a]
                .iter()
                .zip(&centers[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    (intra, if pairs > 0 { inter / pairs as f64 } else { 0.0 })
}

/// Trains a freshly initialised model. A non-finite objective or gradient
/// ends the run and is reported through [`TrainOutcome::failed_at`].
pub fn train_toy(task: &ToyTask, init_seed: u64, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.ccl.validate()?;
    let mut model = ToyModel::init(cfg, TOY_INPUT_CHANNELS, task.num_classes, init_seed)?;
    let mut velocity = model.zeros_like();
    let labels: Vec<&LabelMap> = task.labels.iter().collect();
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut failed_at = None;

    for epoch in 0..=cfg.epochs {
        let acts: Vec<Activations> = task
            .images
            .iter()
            .map(|img| model.forward(img))
            .collect::<Result<_>>()?;
        let logits: Vec<&Tensor<f64>> = acts.iter().map(|a| &a.logits).collect();
        let feats: Vec<&Tensor<f64>> = acts.iter().map(|a| &a.features).collect();
        let (seg, d_logits) = cross_entropy_batch(&logits, &labels)?;
        let (ccl, d_feats) = ccl_loss_batch(&feats, &labels, &cfg.ccl, cfg.use_ccl)?;
        let total = if cfg.use_ccl { seg + ccl.total } else { seg };
        let (intra_var, inter_dist) = feature_stats(&feats, &labels);
        let (mut hits, mut valid) = (0usize, 0usize);
        for (a, l) in acts.iter().zip(&labels) {
            for (pred, &id) in argmax(&a.logits).into_iter().zip(l.ids()) {
                if id != IGNORE_LABEL {
                    valid += 1;
                    hits += (pred == id) as usize;
                }
            }
        }
        history.push(EpochMetrics {
            epoch,
            total,
            seg,
            var: ccl.l_var,
            dis: ccl.l_dis,
            reg: ccl.l_reg,
            pixel_acc: hits as f64 / valid.max(1) as f64,
            intra_var,
            inter_dist,
        });
        if !total.is_finite() {
            failed_at = Some(epoch);
            break;
        }
        if epoch == cfg.epochs {
            break;
        }

        let mut grads = model.zeros_like();
        for (i, a) in acts.iter().enumerate() {
            let (d_feat, dw_cls) = project_backward(&a.features, &model.classifier, &d_logits[i])?;
            let mut d_feat = d_feat;
            if cfg.use_ccl {
                d_feat.add_assign(&d_feats[i])?;
            }
            let (d_ctx, dw_red) = project_backward(&a.context, &model.reduce, &d_feat)?;
            let (d_emb, dp) = backward_recurrent(&a.cache, &d_ctx)?;
            let (_, dw_in) = project_backward(&a.image, &model.input, &d_emb)?;
            let parts = [
                dw_in.weight(),
                dp.wq.weight(),
                dp.wk.weight(),
                dp.wv.weight(),
                dw_red.weight(),
                dw_cls.weight(),
            ];
            for (dst, src) in grads.weights_mut().into_iter().zip(parts) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let finite = grads.weights_mut().iter().all(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            failed_at = Some(epoch);
            break;
        }
        for ((w, v), g) in model
            .weights_mut()
            .into_iter()
            .zip(velocity.weights_mut())
            .zip(grads.weights_mut())
        {
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                *wi += *vi;
            }
        }
    }
    Ok(TrainOutcome {
        history,
        failed_at,
        model,
    })
}

/// Shape of the synthetic batch used by the multi-seed harnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyGeometry {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for ToyGeometry {
    fn default() -> Self {
        Self {
            images: 4,
            height: 12,
            width: 12,
            classes: 3,
        }
    }
}

/// Seed of the model initialisation paired with data seed `seed`.
pub fn init_seed_for(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

/// One training run per seed (data and init both derived from the seed).
pub fn train_seeds(seeds: &[u64], geometry: ToyGeometry, cfg: &TrainConfig) -> Result<Vec<TrainOutcome>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let task = gen_toy(seed, geometry.images, geometry.height, geometry.width, geometry.classes)?;
            train_toy(&task, init_seed_for(seed), cfg)
        })
        .collect()
}

/// Number of runs that finished without a non-finite objective.
pub fn success_count(outcomes: &[TrainOutcome]) -> usize {
    outcomes.iter().filter(|o| o.succeeded()).count()
}

pub fn write_metrics_csv<W: Write>(history: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for m in history {
        w.write_record([
            m.epoch.to_string(),
            m.total.to_string(),
            m.seg.to_string(),
            m.var.to_string(),
            m.dis.to_string(),
            m.reg.to_string(),
            m.pixel_acc.to_string(),
            m.intra_var.to_string(),
            m.inter_dist.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_toy(3, 2, 10, 12, 3).unwrap();
        let b = gen_toy(3, 2, 10, 12, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_toy(4, 2, 10, 12, 3).unwrap());
    }

    #[test]
    fn two_class_stripes_contain_both_classes() {
        for seed in 0..5 {
            let t = gen_toy(seed, 1, 8, 8, 2).unwrap();
            let ids = t.labels[0].ids();
            assert!(ids.contains(&0) && ids.contains(&1));
        }
    }

    #[test]
    fn invalid_geometry() {
        assert!(gen_toy(0, 1, 7, 8, 2).is_err());
        assert!(gen_toy(0, 1, 8, 8, 1).is_err());
    }

    #[test]
    fn zero_epochs_reports_untrained_model() {
        let task = gen_toy(1, 1, 8, 8, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_toy(&task, 2, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.succeeded());
        assert_eq!(out.model, ToyModel::init(&cfg, 3, 2, 2).unwrap());
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        write_metrics_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,total,seg,var,dis,reg,pixel_acc,intra_var,inter_dist\n"
        );
    }

    #[test]
    fn feature_stats_simple() {
        let f = Tensor::new(vec![1, 1, 4], vec![0.0, 2.0, 10.0, 10.0]).unwrap();
        let l = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let (intra, inter) = feature_stats(&[&f], &[&l]);
        assert!((intra - 0.5).abs() < 1e-12);
        assert!((inter - 9.0).abs() < 1e-12);
    }
}
