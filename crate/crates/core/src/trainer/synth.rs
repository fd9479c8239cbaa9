//! Synthetic hierarchical feature data.
//!
//! Every class at the root level gets a random unit direction as its mean.
//! A class at a deeper level adds its own random unit direction, scaled by
//! `signal`, to its parent's mean; leaves therefore cluster by ancestry when
//! `signal < 1`. Samples are the leaf mean plus correlated Gaussian noise
//! `M·g`, where `M` is a seeded random matrix shared by all samples with
//! Frobenius norm `spread`, so the expected squared noise norm is `spread²`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Samples};
use crate::embedspace::Matrix;
use crate::error::{Error, Result};
use crate::taxonomy::{LabelPath, Taxonomy};

/// Fraction of samples held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Children per class at each level; the first entry is the root count.
    pub branching: Vec<usize>,
    pub dim: usize,
    pub samples_per_leaf: usize,
    pub spread: f64,
    pub signal: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            branching: vec![3, 3, 3],
            dim: 32,
            samples_per_leaf: 20,
            spread: 2.4,
            signal: 0.6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() || self.branching.contains(&0) {
            return Err(Error::invalid("branching", "need at least one level, every factor ≥ 1"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if self.samples_per_leaf == 0 {
            return Err(Error::invalid("samples_per_leaf", "must be positive"));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::invalid(
                "spread",
                format!("must be positive, got {}", self.spread),
            ));
        }
        if !self.signal.is_finite() {
            return Err(Error::invalid("signal", "must be finite"));
        }
        Ok(())
    }
}

fn unit_direction(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Seeded 80/20 split stratified by `group`: each group is shuffled and
/// `round(0.2·size)` of its members are held out, keeping at least one in
/// training. Returns `(train, val)` index lists in ascending order.
pub fn split_indices(group: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_groups = group.iter().copied().max().map_or(0, |g| g + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in group.iter().enumerate() {
        members[g].push(i);
    }
    let mut train = Vec::with_capacity(group.len());
    let mut val = Vec::new();
    for mut m in members {
        m.shuffle(&mut rng);
        let n_val = ((m.len() as f64 * VAL_FRACTION).round() as usize).min(m.len().saturating_sub(1));
        val.extend_from_slice(&m[..n_val]);
        train.extend_from_slice(&m[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Per-class means of `samples` at every level.
pub fn class_means(taxonomy: &Taxonomy, samples: &Samples) -> Result<Vec<Matrix>> {
    let dim = samples.features.dim();
    taxonomy
        .levels()
        .iter()
        .enumerate()
        .map(|(l, level)| {
            let mut m = Matrix::zeros(level.len(), dim);
            let mut counts = vec![0usize; level.len()];
            for (row, label) in samples.features.iter_rows().zip(&samples.labels) {
                let c = label[l];
                counts[c] += 1;
                for (acc, &v) in m.row_mut(c).iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for (c, &n) in counts.iter().enumerate() {
                if n == 0 {
                    return Err(Error::invalid(
                        "dataset",
                        format!("class {c} at level {l} has no training samples"),
                    ));
                }
                m.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
            }
            Ok(m)
        })
        .collect()
}

/// Balanced taxonomy, seeded train/validation features and class embeddings
/// equal to the per-class training means.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let taxonomy = Taxonomy::balanced(&spec.branching)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;

    let mut means: Vec<Vec<f64>> = Vec::new();
    for (l, level) in taxonomy.levels().iter().enumerate() {
        let next: Vec<Vec<f64>> = (0..level.len())
            .map(|c| {
                let u = unit_direction(dim, &mut rng);
                match taxonomy.parent(l, c).expect("class in range") {
                    None => u,
                    Some(p) => means[p].iter().zip(&u).map(|(m, d)| m + spec.signal * d).collect(),
                }
            })
            .collect();
        means = next;
    }

    // Shared noise covariance M·Mᵀ with a random Gaussian M, scaled so the
    // expected squared noise norm is spread².
    let mut mix: Vec<f64> = (0..dim * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let fro = mix.iter().map(|v| v * v).sum::<f64>().sqrt();
    mix.iter_mut().for_each(|v| *v *= spec.spread / fro);
    let n = taxonomy.num_leaves() * spec.samples_per_leaf;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (leaf, mean) in means.iter().enumerate() {
        let path: LabelPath = taxonomy.ancestor_path(leaf)?;
        for _ in 0..spec.samples_per_leaf {
            let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            values.extend(mean.iter().enumerate().map(|(i, &m)| {
                m + mix[i * dim..(i + 1) * dim]
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            }));
            labels.push(path.clone());
        }
    }
    let all = Samples {
        features: Matrix::from_vec(n, dim, values)?,
        labels,
    };
    let leaves: Vec<usize> = all.labels.iter().map(|p| p.leaf().expect("nonempty path")).collect();
    let (train_idx, val_idx) = split_indices(&leaves, spec.seed.wrapping_add(0x5eed));
    let train = all.subset(&train_idx);
    let val = all.subset(&val_idx);
    let class_embeds = class_means(&taxonomy, &train)?;
    let ds = Dataset {
        taxonomy,
        train,
        val,
        class_embeds,
    };
    ds.validate()?;
    Ok(ds)
}
