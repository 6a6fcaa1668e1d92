//! Category consistent loss and pixel-wise cross-entropy.
//!
//! All distances are Euclidean. Features arrive already reduced to
//! `reduced_channels`; the reduction itself belongs to the model.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label reserved for positions that contribute to no loss term.
pub const IGNORE_LABEL: u8 = 255;

/// Shape of the intra-class distance penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhiVariant {
    /// Zero, then quadratic, then linear beyond `delta_d`.
    #[default]
    Piecewise,
    /// Zero, then quadratic without bound.
    Quadratic,
}

impl FromStr for PhiVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piecewise" => Ok(Self::Piecewise),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::UnknownVariant {
                kind: "distance function",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CCLConfig {
    pub delta_v: f64,
    pub delta_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub reduced_channels: usize,
    pub phi: PhiVariant,
}

impl Default for CCLConfig {
    fn default() -> Self {
        Self {
            delta_v: 0.5,
            delta_d: 1.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.001,
            reduced_channels: 16,
            phi: PhiVariant::Piecewise,
        }
    }
}

impl CCLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v > 0.0 && self.delta_v < self.delta_d) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 < delta_v < delta_d, got {} and {}",
                self.delta_v, self.delta_d
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.reduced_channels == 0 {
            return Err(Error::Config("reduced channels must be positive".into()));
        }
        Ok(())
    }
}

fn check_distance(dist: f64) -> Result<()> {
    if dist < 0.0 || dist.is_nan() {
        return Err(Error::Domain(format!("distance {dist} is negative")));
    }
    Ok(())
}

/// Intra-class penalty for a feature at distance `dist` from its centre.
pub fn phi_var(dist: f64, cfg: &CCLConfig) -> Result<f64> {
    check_distance(dist)?;
    Ok(phi_var_unchecked(dist, cfg).0)
}

/// Inter-class penalty for two centres at distance `dist`.
pub fn phi_dis(dist: f64, cfg: &CCLConfig) -> Result<f64> {
    check_distance(dist)?;
    Ok(phi_dis_unchecked(dist, cfg).0)
}

/// `(value, derivative)`; at a branch boundary the lower branch wins.
fn phi_var_unchecked(d: f64, cfg: &CCLConfig) -> (f64, f64) {
    let (dv, dd) = (cfg.delta_v, cfg.delta_d);
    if d <= dv {
        (0.0, 0.0)
    } else if d <= dd || cfg.phi == PhiVariant::Quadratic {
        ((d - dv).powi(2), 2.0 * (d - dv))
    } else {
        (d - dd + (dd - dv).powi(2), 1.0)
    }
}

fn phi_dis_unchecked(d: f64, cfg: &CCLConfig) -> (f64, f64) {
    let m = 2.0 * cfg.delta_d;
    if d <= m {
        ((m - d).powi(2), -2.0 * (m - d))
    } else {
        (0.0, 0.0)
    }
}

/// Per-position class ids over an `H × W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("label map holds {} ids", ids.len()),
            });
        }
        Ok(Self { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.width + col]
    }

    /// Checks every id is below `num_classes` or is [`IGNORE_LABEL`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .ids
            .iter()
            .find(|&&id| id != IGNORE_LABEL && id as usize >= num_classes)
        {
            Some(&bad) => Err(Error::Index {
                what: "class id",
                index: bad as usize,
                len: num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour resampling onto a `height × width` grid.
    pub fn downsample_nearest(&self, height: usize, width: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = (r * self.height) / height;
            for c in 0..width {
                let sc = (c * self.width) / width;
                ids.push(self.get(sr, sc));
            }
        }
        Self::new(height, width, ids)
    }
}

/// Class centre and number of contributing positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Per-class mean feature over non-ignored positions. Absent classes are
/// absent from the map.
pub fn class_means(features: &Tensor<f64>, labels: &LabelMap) -> Result<BTreeMap<u8, ClassStats>> {
    let batch = Batch::single(features, labels)?;
    Ok(batch.means())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CCLBreakdown {
    pub l_var: f64,
    pub l_dis: f64,
    pub l_reg: f64,
    /// `alpha·l_var + beta·l_dis + gamma·l_reg`.
    pub total: f64,
    pub centers: BTreeMap<u8, Vec<f64>>,
}

/// Category consistent loss on one feature map.
pub fn ccl_loss(features: &Tensor<f64>, labels: &LabelMap, cfg: &CCLConfig) -> Result<CCLBreakdown> {
    Ok(ccl_loss_batch(&[features], &[labels], cfg, false)?.0)
}

/// As [`ccl_loss`], also returning the gradient of `breakdown.total` with
/// respect to `features`.
pub fn ccl_loss_with_grad(
    features: &Tensor<f64>,
    labels: &LabelMap,
    cfg: &CCLConfig,
) -> Result<(CCLBreakdown, Tensor<f64>)> {
    let (b, mut g) = ccl_loss_batch(&[features], &[labels], cfg, true)?;
    Ok((b, g.pop().expect("one gradient per image")))
}

/// Category consistent loss with class centres pooled over every image of a
/// batch. Gradients (one per image) are returned when `want_grad` is set.
pub fn ccl_loss_batch(
    features: &[&Tensor<f64>],
    labels: &[&LabelMap],
    cfg: &CCLConfig,
    want_grad: bool,
) -> Result<(CCLBreakdown, Vec<Tensor<f64>>)> {
    cfg.validate()?;
    let batch = Batch::new(features, labels)?;
    let stats = batch.means();
    let classes: Vec<u8> = stats.keys().copied().collect();
    let nc = classes.len();
    let slot: BTreeMap<u8, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ch = batch.channels;
    let centers: Vec<&[f64]> = classes.iter().map(|c| stats[c].mean.as_slice()).collect();

    // dL/dmu per class, accumulated from all three terms.
    let mut d_mu = vec![vec![0.0; ch]; nc];
    let mut grads: Vec<Vec<f64>> = batch.feats.iter().map(|f| vec![0.0; f.len()]).collect();

    let mut l_var = 0.0;
    if nc > 0 {
        let mut per_class = vec![0.0; nc];
        for (img, f) in batch.feats.iter().enumerate() {
            let n = f.positions();
            for (p, &id) in batch.labels[img].ids().iter().enumerate() {
                let Some(&s) = slot.get(&id) else { continue };
                let count = stats[&id].count as f64;
                let diff: Vec<f64> = (0..ch).map(|k| f.data()[k * n + p] - centers[s][k]).collect();
                let d = norm(&diff);
                let (val, dphi) = phi_var_unchecked(d, cfg);
                per_class[s] += val / count;
                if want_grad && dphi != 0.0 && d > 0.0 {
                    let scale = cfg.alpha * dphi / (d * count * nc as f64);
                    for k in 0..ch {
                        grads[img][k * n + p] += scale * diff[k];
                        d_mu[s][k] -= scale * diff[k];
                    }
                }
            }
        }
        l_var = per_class.iter().sum::<f64>() / nc as f64;
    }

    let mut l_dis = 0.0;
    if nc >= 2 {
        let norm_pairs = (nc * (nc - 1)) as f64;
        for a in 0..nc {
            for b in 0..nc {
                if a == b {
                    continue;
                }
                let diff: Vec<f64> = (0..ch).map(|k| centers[a][k] - centers[b][k]).collect();
                let d = norm(&diff);
                let (val, dphi) = phi_dis_unchecked(d, cfg);
                l_dis += val / norm_pairs;
                if want_grad && dphi != 0.0 && d > 0.0 {
                    // the ordered pair (a, b) moves both centres
                    let scale = cfg.beta * dphi / (d * norm_pairs);
                    for k in 0..ch {
                        d_mu[a][k] += scale * diff[k];
                        d_mu[b][k] -= scale * diff[k];
                    }
                }
            }
        }
    }

    let mut l_reg = 0.0;
    if nc > 0 {
        for (s, c) in centers.iter().enumerate() {
            let m = norm(c);
            l_reg += m / nc as f64;
            if want_grad && m > 0.0 {
                for k in 0..ch {
                    d_mu[s][k] += cfg.gamma * c[k] / (m * nc as f64);
                }
            }
        }
    }

    let mut out_grads = Vec::new();
    if want_grad {
        for (img, f) in batch.feats.iter().enumerate() {
            let n = f.positions();
            for (p, &id) in batch.labels[img].ids().iter().enumerate() {
                let Some(&s) = slot.get(&id) else { continue };
                let count = stats[&id].count as f64;
                for k in 0..ch {
                    grads[img][k * n + p] += d_mu[s][k] / count;
                }
            }
        }
        for (f, g) in batch.feats.iter().zip(grads) {
            out_grads.push(Tensor::new(f.shape().to_vec(), g)?);
        }
    }

    let total = cfg.alpha * l_var + cfg.beta * l_dis + cfg.gamma * l_reg;
    Ok((
        CCLBreakdown {
            l_var,
            l_dis,
            l_reg,
            total,
            centers: stats.into_iter().map(|(c, s)| (c, s.mean)).collect(),
        },
        out_grads,
    ))
}

/// `seg + alpha·l_var + beta·l_dis + gamma·l_reg`.
pub fn total_loss(seg: f64, ccl: &CCLBreakdown, cfg: &CCLConfig) -> f64 {
    seg + cfg.alpha * ccl.l_var + cfg.beta * ccl.l_dis + cfg.gamma * ccl.l_reg
}

/// Mean negative log-likelihood over non-ignored positions and its gradient
/// with respect to the logits.
pub fn cross_entropy_seg(logits: &Tensor<f64>, labels: &LabelMap) -> Result<(f64, Tensor<f64>)> {
    let (loss, mut g) = cross_entropy_batch(&[logits], &[labels])?;
    Ok((loss, g.pop().expect("one gradient per image")))
}

pub fn cross_entropy_batch(logits: &[&Tensor<f64>], labels: &[&LabelMap]) -> Result<(f64, Vec<Tensor<f64>>)> {
    let batch = Batch::new(logits, labels)?;
    let k = batch.channels;
    if k < 2 {
        return Err(Error::Config(format!(
            "cross-entropy needs at least 2 classes, got {k}"
        )));
    }
    for l in &batch.labels {
        l.validate(k)?;
    }
    let valid: usize = batch
        .labels
        .iter()
        .map(|l| l.ids().iter().filter(|&&id| id != IGNORE_LABEL).count())
        .sum();
    if valid == 0 {
        return Err(Error::UndefinedMean);
    }
    let inv = 1.0 / valid as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.feats.len());
    for (x, lab) in batch.feats.iter().zip(&batch.labels) {
        let n = x.positions();
        let mut g = vec![0.0; x.len()];
        for (p, &id) in lab.ids().iter().enumerate() {
            if id == IGNORE_LABEL {
                continue;
            }
            let max = (0..k).map(|c| x.data()[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x.data()[c * n + p] - max).exp()).sum();
            let log_z = max + z.ln();
            loss += (log_z - x.data()[id as usize * n + p]) * inv;
            for c in 0..k {
                let prob = (x.data()[c * n + p] - log_z).exp();
                let target = if c == id as usize { 1.0 } else { 0.0 };
                g[c * n + p] = (prob - target) * inv;
            }
        }
        grads.push(Tensor::new(x.shape().to_vec(), g)?);
    }
    Ok((loss, grads))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Feature maps paired with aligned label maps, all with the same channel count.
struct Batch<'a> {
    feats: Vec<&'a Tensor<f64>>,
    labels: Vec<&'a LabelMap>,
    channels: usize,
}

impl<'a> Batch<'a> {
    fn single(f: &'a Tensor<f64>, l: &'a LabelMap) -> Result<Self> {
        Self::new(&[f], &[l])
    }

    fn new(feats: &[&'a Tensor<f64>], labels: &[&'a LabelMap]) -> Result<Self> {
        if feats.len() != labels.len() || feats.is_empty() {
            return Err(Error::Config(format!(
                "{} feature maps paired with {} label maps",
                feats.len(),
                labels.len()
            )));
        }
        let channels = feats[0].channels();
        for (f, l) in feats.iter().zip(labels) {
            if f.rank() != 3 || f.shape()[1] != l.height() || f.shape()[2] != l.width() || f.channels() != channels {
                return Err(Error::ShapeMismatch {
                    context: "features vs labels",
                    lhs: f.shape().to_vec(),
                    rhs: vec![channels, l.height(), l.width()],
                });
            }
        }
        Ok(Self {
            feats: feats.to_vec(),
            labels: labels.to_vec(),
            channels,
        })
    }

    fn means(&self) -> BTreeMap<u8, ClassStats> {
        let mut acc: BTreeMap<u8, ClassStats> = BTreeMap::new();
        for (f, l) in self.feats.iter().zip(&self.labels) {
            let n = f.positions();
            for (p, &id) in l.ids().iter().enumerate() {
                if id == IGNORE_LABEL {
                    continue;
                }
                let e = acc.entry(id).or_insert_with(|| ClassStats {
                    mean: vec![0.0; self.channels],
                    count: 0,
                });
                e.count += 1;
                for k in 0..self.channels {
                    e.mean[k] += f.data()[k * n + p];
                }
            }
        }
        for s in acc.values_mut() {
            for m in &mut s.mean {
                *m /= s.count as f64;
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CCLConfig {
        CCLConfig::default()
    }

    #[test]
    fn phi_var_branches() {
        assert_eq!(phi_var(0.4, &cfg()).unwrap(), 0.0);
        assert_eq!(phi_var(1.0, &cfg()).unwrap(), 0.25);
        assert_eq!(phi_var(2.0, &cfg()).unwrap(), 1.5);
        assert!(matches!(phi_var(-0.1, &cfg()), Err(Error::Domain(_))));
        let quad = CCLConfig {
            phi: PhiVariant::Quadratic,
            ..cfg()
        };
        assert_eq!(phi_var(2.0, &quad).unwrap(), 2.25);
    }

    #[test]
    fn phi_var_continuity() {
        let c = cfg();
        let below = |x: f64| x.next_down();
        let above = |x: f64| x.next_up();
        assert_eq!(phi_var(c.delta_v, &c).unwrap(), 0.0);
        assert!(phi_var(above(c.delta_v), &c).unwrap() < 1e-30);
        let at = phi_var(c.delta_d, &c).unwrap();
        assert_eq!(at, (c.delta_d - c.delta_v).powi(2));
        assert!((phi_var(above(c.delta_d), &c).unwrap() - at).abs() < 1e-15);
        assert!((phi_var(below(c.delta_d), &c).unwrap() - at).abs() < 1e-15);
    }

    #[test]
    fn phi_dis_branches() {
        assert_eq!(phi_dis(4.0, &cfg()).unwrap(), 0.0);
        assert_eq!(phi_dis(0.0, &cfg()).unwrap(), 9.0);
        assert_eq!(phi_dis(3.0, &cfg()).unwrap(), 0.0);
        assert!(phi_dis(-1.0, &cfg()).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let b = CCLBreakdown {
            l_var: 2.0,
            l_dis: 3.0,
            l_reg: 10.0,
            total: 0.0,
            centers: BTreeMap::new(),
        };
        assert!((total_loss(1.0, &b, &cfg()) - 6.01).abs() < 1e-12);
        let zero = CCLBreakdown {
            l_var: 0.0,
            l_dis: 0.0,
            l_reg: 0.0,
            total: 0.0,
            centers: BTreeMap::new(),
        };
        assert_eq!(total_loss(0.0, &zero, &cfg()), 0.0);
        let no_reg = CCLConfig { gamma: 0.0, ..cfg() };
        let mut b2 = b.clone();
        b2.l_reg = 1e6;
        assert_eq!(total_loss(1.0, &b, &no_reg), total_loss(1.0, &b2, &no_reg));
    }

    #[test]
    fn class_means_arithmetic() {
        let f = Tensor::new(vec![2, 1, 3], vec![0.0, 2.0, 9.0, 2.0, 0.0, 9.0]).unwrap();
        let l = LabelMap::new(1, 3, vec![4, 4, IGNORE_LABEL]).unwrap();
        let m = class_means(&f, &l).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[&4].mean, vec![1.0, 1.0]);
        assert_eq!(m[&4].count, 2);
        let all_ignored = LabelMap::new(1, 3, vec![IGNORE_LABEL; 3]).unwrap();
        assert!(class_means(&f, &all_ignored).unwrap().is_empty());
    }

    #[test]
    fn one_class_constant_features() {
        let f = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 3.0 } else { 4.0 }).unwrap();
        let l = LabelMap::new(2, 2, vec![1; 4]).unwrap();
        let b = ccl_loss(&f, &l, &cfg()).unwrap();
        assert_eq!((b.l_var, b.l_dis), (0.0, 0.0));
        assert!((b.l_reg - 5.0).abs() < 1e-15);
    }

    #[test]
    fn two_separated_classes() {
        let f = Tensor::new(vec![2, 1, 4], vec![0.0, 0.0, 4.0, 4.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let l = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let b = ccl_loss(&f, &l, &cfg()).unwrap();
        assert_eq!((b.l_var, b.l_dis), (0.0, 0.0));
        let expected = (1.0 + 17f64.sqrt()) / 2.0;
        assert!((b.l_reg - expected).abs() < 1e-15);
    }

    #[test]
    fn coincident_centres_at_origin() {
        let f = Tensor::<f64>::zeros(&[3, 2, 2]).unwrap();
        let l = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let b = ccl_loss(&f, &l, &cfg()).unwrap();
        assert_eq!((b.l_var, b.l_dis, b.l_reg), (0.0, 9.0, 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = Tensor::<f64>::zeros(&[4, 2, 3]).unwrap();
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 0, IGNORE_LABEL]).unwrap();
        let (loss, g) = cross_entropy_seg(&x, &l).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-14);
        // ignored position carries no gradient
        assert!((0..4).all(|c| g.data()[c * 6 + 5] == 0.0));
    }

    #[test]
    fn cross_entropy_saturates() {
        let mut x = Tensor::<f64>::zeros(&[3, 1, 2]).unwrap();
        x.data_mut()[0] = 50.0;
        x.data_mut()[2 * 2 + 1] = 50.0;
        let l = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        assert!(cross_entropy_seg(&x, &l).unwrap().0 < 1e-20);
    }

    #[test]
    fn cross_entropy_errors() {
        let x = Tensor::<f64>::zeros(&[2, 1, 2]).unwrap();
        let ignored = LabelMap::new(1, 2, vec![IGNORE_LABEL; 2]).unwrap();
        assert!(matches!(cross_entropy_seg(&x, &ignored), Err(Error::UndefinedMean)));
        let one = Tensor::<f64>::zeros(&[1, 1, 2]).unwrap();
        assert!(cross_entropy_seg(&one, &LabelMap::new(1, 2, vec![0, 0]).unwrap()).is_err());
        let bad = LabelMap::new(1, 2, vec![0, 7]).unwrap();
        assert!(cross_entropy_seg(&x, &bad).is_err());
    }

    #[test]
    fn downsample_nearest_picks_top_left_of_block() {
        let l = LabelMap::new(4, 4, (0..16).collect()).unwrap();
        let d = l.downsample_nearest(2, 2).unwrap();
        assert_eq!(d.ids(), &[0, 2, 8, 10]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(CCLConfig { delta_v: 2.0, ..cfg() }.validate().is_err());
        assert!(CCLConfig { gamma: -1.0, ..cfg() }.validate().is_err());
        assert_eq!("quadratic".parse::<PhiVariant>().unwrap(), PhiVariant::Quadratic);
        assert!("cubic".parse::<PhiVariant>().is_err());
    }
}
