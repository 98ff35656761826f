//! Feature-map perturbations and stealth statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianMasked,
    PolaritySwitch,
    StatPreserving,
}

/// One attack. `np` is the fraction of elements hit, `sp` the noise scale
/// relative to the map's standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    #[serde(default)]
    pub np: f64,
    #[serde(default)]
    pub sp: f64,
    #[serde(default)]
    pub seed: u64,
    /// Restricts the mask to channels `[start, end)` of a `[C, H, W]` map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<[usize; 2]>,
}

impl NoiseConfig {
    pub fn gaussian(np: f64, sp: f64, seed: u64) -> Self {
        NoiseConfig { kind: NoiseKind::GaussianMasked, np, sp, seed, channels: None }
    }

    pub fn polarity(np: f64, seed: u64) -> Self {
        NoiseConfig { kind: NoiseKind::PolaritySwitch, np, sp: 0.0, seed, channels: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.np) {
            return Err(Error::config(format!("np = {} outside [0, 1]", self.np)));
        }
        if !(self.sp >= 0.0 && self.sp.is_finite()) {
            return Err(Error::config(format!("sp = {} must be finite and >= 0", self.sp)));
        }
        if let Some([a, b]) = self.channels {
            if a >= b {
                return Err(Error::config(format!("empty channel range [{a}, {b})")));
            }
        }
        Ok(())
    }

    /// Same attack with the seed for sample `index`.
    pub fn for_sample(&self, index: u64) -> Self {
        NoiseConfig { seed: self.seed ^ index, ..self.clone() }
    }
}

/// Applies `cfg` to a feature map.
pub fn apply_noise(fm: &Tensor, cfg: &NoiseConfig) -> Result<Tensor> {
    match cfg.kind {
        NoiseKind::GaussianMasked => apply_gaussian_masked(fm, cfg),
        NoiseKind::PolaritySwitch => apply_polarity_switch(fm, cfg),
        NoiseKind::StatPreserving => apply_stat_preserving(fm, cfg.sp, cfg.seed),
    }
}

/// Attack entries keyed by the layer whose output they perturb and the node
/// that layer runs on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseMatrix {
    pub entries: Vec<NoiseEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    pub layer: String,
    pub node: usize,
    #[serde(flatten)]
    pub noise: NoiseConfig,
}

impl NoiseMatrix {
    pub fn single(layer: &str, node: usize, noise: NoiseConfig) -> Self {
        NoiseMatrix { entries: vec![NoiseEntry { layer: layer.to_string(), node, noise }] }
    }

    pub fn get(&self, layer: &str, node: usize) -> Option<&NoiseConfig> {
        self.entries.iter().find(|e| e.layer == layer && e.node == node).map(|e| &e.noise)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Bernoulli(np) mask over a `[C, H, W]` (or any) map, optionally limited to a
/// channel range. Drawn from its own stream so that the mask for a seed does
/// not depend on the attack kind.
pub fn noise_mask(dims: &[usize], cfg: &NoiseConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let len: usize = dims.iter().product();
    let allowed = match cfg.channels {
        None => 0..len,
        Some([a, b]) => {
            if dims.len() != 3 || b > dims[0] {
                return Err(Error::shape(format!("channel range [{a}, {b}) does not fit map {dims:?}")));
            }
            let plane = dims[1] * dims[2];
            a * plane..b * plane
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask = vec![false; len];
    for m in &mut mask[allowed] {
        *m = rng.random::<f64>() < cfg.np;
    }
    Ok(mask)
}

fn value_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn check_non_empty(fm: &Tensor) -> Result<()> {
    if fm.is_empty() {
        return Err(Error::shape("feature map is empty"));
    }
    Ok(())
}

/// `I' = I + G(mu, sp*sigma) * B(np)`, with mu and sigma taken from `fm`.
pub fn apply_gaussian_masked(fm: &Tensor, cfg: &NoiseConfig) -> Result<Tensor> {
    check_non_empty(fm)?;
    let mask = noise_mask(fm.dims(), cfg)?;
    let (mu, sigma) = population_stats(fm.data());
    let normal = Normal::new(mu, cfg.sp * sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = value_stream(cfg.seed);
    let mut out = fm.clone();
    for (v, &hit) in out.data_mut().iter_mut().zip(&mask) {
        if hit {
            *v += normal.sample(&mut rng);
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("gaussian noise produced a non-finite value".into()));
    }
    Ok(out)
}

/// Negates the masked elements.
pub fn apply_polarity_switch(fm: &Tensor, cfg: &NoiseConfig) -> Result<Tensor> {
    check_non_empty(fm)?;
    let mask = noise_mask(fm.dims(), cfg)?;
    let mut out = fm.clone();
    for (v, &hit) in out.data_mut().iter_mut().zip(&mask) {
        if hit {
            *v = -*v;
        }
    }
    Ok(out)
}

/// `P' = mu(P) + (Q - mu(Q)) * sigma(P) / sigma(Q)` with `Q = P + eps`,
/// `eps ~ N(0, epsilon_scale * sigma(P))`. Mean and variance of `P` survive.
pub fn apply_stat_preserving(params: &Tensor, epsilon_scale: f64, seed: u64) -> Result<Tensor> {
    if params.len() < 2 {
        return Err(Error::shape("statistical attack needs at least two elements"));
    }
    if !(epsilon_scale >= 0.0 && epsilon_scale.is_finite()) {
        return Err(Error::config(format!("epsilon scale {epsilon_scale} must be finite and >= 0")));
    }
    if epsilon_scale == 0.0 {
        return Ok(params.clone());
    }
    let (mu_p, sigma_p) = population_stats(params.data());
    let mut rng = value_stream(seed);
    let scale = epsilon_scale * if sigma_p > 0.0 { sigma_p } else { 1.0 };
    let q: Vec<f64> = params
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + scale * z
        })
        .collect();
    let (mu_q, sigma_q) = population_stats(&q);
    if sigma_q == 0.0 {
        return Err(Error::Numeric("perturbed parameters are constant".into()));
    }
    let k = sigma_p / sigma_q;
    let mut out: Vec<f64> = q.iter().map(|&v| mu_p + (v - mu_q) * k).collect();
    // One correction pass removes the rounding drift of the rescale.
    let (mu_o, _) = population_stats(&out);
    out.iter_mut().for_each(|v| *v -= mu_o - mu_p);
    Tensor::new(params.dims().to_vec(), out)
}

/// Population mean and standard deviation (two-pass).
pub fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and standard deviation of a feature map.
pub fn feature_map_stats(fm: &Tensor) -> Result<(f64, f64)> {
    if fm.len() < 2 {
        return Err(Error::shape("feature map statistics need at least two elements"));
    }
    Ok(population_stats(fm.data()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StealthRow {
    pub np: f64,
    pub mean: f64,
    pub stdev: f64,
    pub accuracy: f64,
}

/// For each `np`: mean over samples of the attacked map's mean and stdev, and
/// end-to-end accuracy with the attack applied to `layer`'s output. Sample
/// `i` uses seed `seed ^ i`.
pub fn stealth_sweep(
    model: &ModelSpec,
    data: &LabeledDataset,
    layer: &str,
    sp: f64,
    np_list: &[f64],
    seed: u64,
) -> Result<Vec<StealthRow>> {
    let idx = model.layer_index(layer).ok_or_else(|| Error::config(format!("unknown layer {layer:?}")))?;
    if data.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    // Clean maps at the attacked layer are shared by every np.
    let maps: Vec<Tensor> = (0..data.len())
        .into_par_iter()
        .map(|i| model.forward_range(&data.image(i), 0..idx + 1))
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    np_list
        .iter()
        .map(|&np| {
            let base = NoiseConfig::gaussian(np, sp, seed);
            let per_sample: Vec<(f64, f64, bool)> = maps
                .par_iter()
                .enumerate()
                .map(|(i, fm)| {
                    let noisy = apply_gaussian_masked(fm, &base.for_sample(i as u64))?;
                    let (m, s) = population_stats(noisy.data());
                    let pred = if idx + 1 < model.layers.len() {
                        model.forward_range(&noisy, idx + 1..model.layers.len())?.argmax()
                    } else {
                        noisy.argmax()
                    };
                    Ok((m, s, pred == data.labels()[i]))
                })
                .collect::<Result<_>>()?;
            Ok(StealthRow {
                np,
                mean: per_sample.iter().map(|r| r.0).sum::<f64>() / n,
                stdev: per_sample.iter().map(|r| r.1).sum::<f64>() / n,
                accuracy: per_sample.iter().filter(|r| r.2).count() as f64 / n,
            })
        })
        .collect()
}

pub fn write_stealth_csv<W: std::io::Write>(rows: &[StealthRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![4, 5, 5], (0..100).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn zero_np_is_identity() {
        let fm = map(1);
        assert!(apply_gaussian_masked(&fm, &NoiseConfig::gaussian(0.0, 0.5, 3)).unwrap().bit_eq(&fm));
        assert!(apply_polarity_switch(&fm, &NoiseConfig::polarity(0.0, 3)).unwrap().bit_eq(&fm));
    }

    #[test]
    fn zero_sp_adds_exactly_the_mean() {
        let fm = map(2);
        let (mu, _) = population_stats(fm.data());
        let cfg = NoiseConfig::gaussian(0.4, 0.0, 9);
        let out = apply_gaussian_masked(&fm, &cfg).unwrap();
        let mask = noise_mask(fm.dims(), &cfg).unwrap();
        for ((a, b), hit) in fm.data().iter().zip(out.data()).zip(mask) {
            assert_eq!(*b, if hit { a + mu } else { *a });
        }
    }

    #[test]
    fn full_polarity_negates() {
        let fm = map(3);
        let out = apply_polarity_switch(&fm, &NoiseConfig::polarity(1.0, 0)).unwrap();
        for (a, b) in fm.data().iter().zip(out.data()) {
            assert_eq!(*b, -*a);
        }
    }

    #[test]
    fn channel_range_confines_mask() {
        let mut cfg = NoiseConfig::gaussian(1.0, 0.5, 1);
        cfg.channels = Some([1, 3]);
        let mask = noise_mask(&[4, 5, 5], &cfg).unwrap();
        assert!(mask[..25].iter().all(|m| !m));
        assert!(mask[25..75].iter().all(|m| *m));
        assert!(mask[75..].iter().all(|m| !m));
        cfg.channels = Some([3, 5]);
        assert!(noise_mask(&[4, 5, 5], &cfg).is_err());
    }

    #[test]
    fn stats_of_small_maps() {
        let c = Tensor::filled(&[3], 2.5);
        assert_eq!(feature_map_stats(&c).unwrap(), (2.5, 0.0));
        let t = Tensor::new(vec![2], vec![0.0, 2.0]).unwrap();
        assert_eq!(feature_map_stats(&t).unwrap(), (1.0, 1.0));
        assert!(feature_map_stats(&Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn stat_preserving_zero_scale_and_moments() {
        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(apply_stat_preserving(&p, 0.0, 1).unwrap().bit_eq(&p));
        let q = apply_stat_preserving(&p, 0.7, 1).unwrap();
        assert!(!q.bit_eq(&p));
        let (m0, s0) = population_stats(p.data());
        let (m1, s1) = population_stats(q.data());
        assert!((m1 - m0).abs() <= 1e-9 * (1.0 + m0.abs()));
        assert!((s1 * s1 - s0 * s0).abs() <= 1e-9 * (1.0 + s0 * s0));
        assert!(apply_stat_preserving(&Tensor::zeros(&[1]), 0.5, 1).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(NoiseConfig::gaussian(1.5, 0.5, 0).validate().is_err());
        assert!(NoiseConfig::gaussian(0.5, -1.0, 0).validate().is_err());
    }
}
