//! Ground-truth-known synthetic descriptor families.
//!
//! Every family pushes shared latent "patches" through its own frozen random
//! two-layer `tanh` map, adds Gaussian observation noise in that pre-head
//! space, then applies a family head: unit-norm, non-negative unit-norm
//! (histogram-like), or sign bits against random hyperplanes (binary-test
//! like). Different seeds give mutually nonlinear but information-preserving
//! views of the same latents, so translation between them is learnable
//! while naive cross-family matching fails.

use crate::descriptor::{AlgorithmSpec, CorrespondenceDataset, DescriptorMatrix, OutputNorm};
use crate::error::{Error, Result};
use crate::scenarios::{Image, ImageSet};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_LATENT_DIM: usize = 64;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
/// Width of the hidden `tanh` layer of every frozen map.
const MAP_HIDDEN: usize = 256;
/// Pre-activation scale of the first layer; large enough that `tanh` bends.
const MAP_GAIN: f64 = 1.5;
/// Sharpness of the softplus used by non-negative heads.
const SOFTPLUS_SHARPNESS: f32 = 3.0;
/// Pre-head width of binary families before hyperplane projection.
const BINARY_PRE_DIM: usize = 128;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

/// Latent patches with their IDs.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub ids: Vec<u64>,
    pub values: Array2<f32>,
}

impl Latents {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// `n` i.i.d. standard normal latents, rows scaled to unit length, IDs
/// `first_id..first_id + n`.
pub fn gen_latents(n: usize, latent_dim: usize, seed: u64, first_id: u64) -> Result<Latents> {
    if n == 0 || latent_dim == 0 {
        return Err(Error::Config("need n >= 1 latents of dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1A7E));
    let mut values = Array2::<f32>::zeros((n, latent_dim));
    for mut row in values.outer_iter_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    Ok(Latents {
        ids: (first_id..first_id + n as u64).collect(),
        values,
    })
}

/// Declarative description of a synthetic family, as found in family JSON files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub spec: AlgorithmSpec,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Latent coordinates this family cannot observe.
    #[serde(default)]
    pub blind: Vec<usize>,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_SIGMA
}

impl FamilyConfig {
    /// The four stand-in families with seeds `base_seed + k`.
    pub fn standard_four(base_seed: u64) -> Vec<FamilyConfig> {
        AlgorithmSpec::standard_four()
            .into_iter()
            .enumerate()
            .map(|(k, spec)| FamilyConfig {
                spec,
                seed: base_seed + k as u64,
                noise_sigma: DEFAULT_NOISE_SIGMA,
                blind: Vec::new(),
            })
            .collect()
    }
}

/// A frozen random description algorithm.
#[derive(Clone, Debug)]
pub struct SyntheticFamily {
    spec: AlgorithmSpec,
    seed: u64,
    noise_sigma: f64,
    w1: Array2<f32>,
    b1: Array1<f32>,
    w2: Array2<f32>,
    hyperplanes: Option<Array2<f32>>,
}

impl SyntheticFamily {
    pub fn new(cfg: &FamilyConfig, latent_dim: usize) -> Result<Self> {
        if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("{}: noise_sigma must be >= 0", cfg.spec.name())));
        }
        if latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xFA31));
        let pre_dim = if cfg.spec.is_binary() {
            BINARY_PRE_DIM
        } else {
            cfg.spec.dim()
        };
        if let Some(&b) = cfg.blind.iter().find(|&&b| b >= latent_dim) {
            return Err(Error::Config(format!(
                "{}: blind coordinate {b} outside latent_dim {latent_dim}",
                cfg.spec.name()
            )));
        }
        let mut w1 = gaussian(latent_dim, MAP_HIDDEN, MAP_GAIN, &mut rng);
        for &b in &cfg.blind {
            w1.row_mut(b).fill(0.0);
        }
        let b1 = Array1::from_shape_fn(MAP_HIDDEN, |_| rng.gen_range(-0.5f32..0.5));
        let w2 = gaussian(MAP_HIDDEN, pre_dim, (1.0 / MAP_HIDDEN as f64).sqrt(), &mut rng);
        let hyperplanes = cfg
            .spec
            .is_binary()
            .then(|| gaussian(pre_dim, cfg.spec.dim(), 1.0, &mut rng));
        Ok(SyntheticFamily {
            spec: cfg.spec.clone(),
            seed: cfg.seed,
            noise_sigma: cfg.noise_sigma,
            w1,
            b1,
            w2,
            hyperplanes,
        })
    }

    pub fn spec(&self) -> &AlgorithmSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Noise-free pre-head values.
    fn pre_head(&self, latents: &Array2<f32>) -> Array2<f32> {
        let h = (latents.dot(&self.w1) + &self.b1).mapv_into(f32::tanh);
        h.dot(&self.w2)
    }

    /// Describes `latents`, drawing observation noise from a stream keyed by
    /// this family's seed and `noise_seed`.
    pub fn describe(&self, latents: &Latents, noise_seed: u64) -> Result<DescriptorMatrix> {
        if latents.dim() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "{}: latent width {} but map expects {}",
                self.spec.name(),
                latents.dim(),
                self.latent_dim()
            )));
        }
        let mut pre = self.pre_head(&latents.values);
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, mix_seed(noise_seed, 0x0153)));
            pre += &gaussian(pre.nrows(), pre.ncols(), self.noise_sigma, &mut rng);
        }
        let values = match (&self.hyperplanes, self.spec.output_norm()) {
            (Some(planes), _) => pre.dot(planes).mapv_into(|v| if v >= 0.0 { 1.0 } else { 0.0 }),
            (None, OutputNorm::None) => pre,
            (None, norm) => {
                if norm == OutputNorm::NonnegUnitL2 {
                    let k = SOFTPLUS_SHARPNESS;
                    pre.mapv_inplace(|v| {
                        let x = k * v;
                        (if x > 20.0 { x } else { x.exp().ln_1p() }) / k
                    });
                }
                for mut row in pre.outer_iter_mut() {
                    let n = row.dot(&row).sqrt().max(1e-12);
                    row.mapv_inplace(|v| v / n);
                }
                pre
            }
        };
        DescriptorMatrix::new(self.spec.clone(), latents.ids.clone(), values)
    }
}

/// Patch-aligned descriptors of every family for the same latents.
pub fn gen_dataset(latents: &Latents, families: &[SyntheticFamily], noise_seed: u64) -> Result<CorrespondenceDataset> {
    if families.is_empty() {
        return Err(Error::Config("need at least one family".into()));
    }
    let sets = families
        .iter()
        .map(|f| f.describe(latents, noise_seed))
        .collect::<Result<Vec<_>>>()?;
    CorrespondenceDataset::new(sets)
}

/// How views are assigned to families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewAssignment {
    RoundRobin,
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiviewConfig {
    pub n_views: usize,
    pub assignment: ViewAssignment,
    /// Probability that a latent is observed in a given view.
    pub visibility: f64,
    pub seed: u64,
}

impl MultiviewConfig {
    pub fn round_robin(n_views: usize, seed: u64) -> Self {
        MultiviewConfig {
            n_views,
            assignment: ViewAssignment::RoundRobin,
            visibility: 1.0,
            seed,
        }
    }
}

/// Images of one scene, each described by a single family, with latent IDs
/// recorded as ground-truth labels. Row order is shuffled per view.
pub fn gen_multiview(latents: &Latents, families: &[SyntheticFamily], cfg: &MultiviewConfig) -> Result<ImageSet> {
    if cfg.n_views < 2 {
        return Err(Error::Config("need n_views >= 2".into()));
    }
    if families.is_empty() {
        return Err(Error::Config("need at least one family".into()));
    }
    if !(cfg.visibility > 0.0 && cfg.visibility <= 1.0) {
        return Err(Error::Config("visibility must lie in (0, 1]".into()));
    }
    let assignment: Vec<usize> = match &cfg.assignment {
        ViewAssignment::RoundRobin => (0..cfg.n_views).map(|v| v % families.len()).collect(),
        ViewAssignment::Explicit(a) => {
            if a.len() != cfg.n_views || a.iter().any(|&f| f >= families.len()) {
                return Err(Error::Config("explicit assignment must name a family per view".into()));
            }
            a.clone()
        }
    };
    let mut images = Vec::with_capacity(cfg.n_views);
    let mut labels = Vec::with_capacity(cfg.n_views);
    for (view, &fam) in assignment.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, view as u64 + 1));
        let mut rows: Vec<usize> = (0..latents.len())
            .filter(|_| cfg.visibility >= 1.0 || rng.gen_bool(cfg.visibility))
            .collect();
        rows.shuffle(&mut rng);
        let subset = Latents {
            ids: rows.iter().map(|&r| latents.ids[r]).collect(),
            values: latents.values.select(Axis(0), &rows),
        };
        let descs = families[fam].describe(&subset, mix_seed(cfg.seed, 0xD00D + view as u64))?;
        labels.push(subset.ids.clone());
        images.push(Image {
            image_id: view as u32,
            algo: families[fam].spec().name().to_string(),
            descs,
        });
    }
    ImageSet::new(images, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{distance, Metric};

    fn four(latent_dim: usize) -> Vec<SyntheticFamily> {
        FamilyConfig::standard_four(10)
            .iter()
            .map(|c| SyntheticFamily::new(c, latent_dim).unwrap())
            .collect()
    }

    #[test]
    fn latents_are_seeded_unit_rows() {
        let a = gen_latents(50, 16, 3, 0).unwrap();
        assert_eq!(a, gen_latents(50, 16, 3, 0).unwrap());
        for row in a.values.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(gen_latents(3, 4, 0, 100).unwrap().ids, vec![100, 101, 102]);
        assert!(gen_latents(0, 4, 0, 0).is_err());
    }

    #[test]
    fn different_latent_seeds_are_separated() {
        let a = gen_latents(1000, 64, 1, 0).unwrap();
        let b = gen_latents(1000, 64, 2, 0).unwrap();
        let mean: f32 = a
            .values
            .outer_iter()
            .zip(b.values.outer_iter())
            .map(|(x, y)| distance(x.as_slice().unwrap(), y.as_slice().unwrap(), Metric::L2).unwrap())
            .sum::<f32>()
            / 1000.0;
        assert!(mean > 0.5, "mean pairwise distance {mean}");
    }

    #[test]
    fn heads_obey_family_contracts() {
        let lat = gen_latents(200, 64, 5, 0).unwrap();
        for fam in four(64) {
            let d = fam.describe(&lat, 1).unwrap();
            d.check_finalized().unwrap();
            assert_eq!(d.patch_ids(), lat.ids.as_slice());
            if fam.spec().is_binary() {
                assert!(d.is_bits());
                let ones = d.values().sum() / d.values().len() as f32;
                assert!((0.3..0.7).contains(&ones), "bit balance {ones}");
            }
        }
    }

    #[test]
    fn noiseless_describe_is_deterministic() {
        let lat = gen_latents(20, 64, 5, 0).unwrap();
        let mut cfg = FamilyConfig::standard_four(1)[2].clone();
        cfg.noise_sigma = 0.0;
        let fam = SyntheticFamily::new(&cfg, 64).unwrap();
        assert_eq!(fam.describe(&lat, 1).unwrap(), fam.describe(&lat, 2).unwrap());
        let noisy = SyntheticFamily::new(&FamilyConfig::standard_four(1)[2], 64).unwrap();
        assert_eq!(noisy.describe(&lat, 1).unwrap(), noisy.describe(&lat, 1).unwrap());
        assert_ne!(noisy.describe(&lat, 1).unwrap(), noisy.describe(&lat, 2).unwrap());
    }

    #[test]
    fn same_latent_nearer_than_other_latent() {
        // 1000 triples (anchor, same latent re-noised, different latent).
        let lat = gen_latents(1001, 64, 8, 0).unwrap();
        for fam in four(64) {
            let a = fam.describe(&lat, 1).unwrap();
            let b = fam.describe(&lat, 2).unwrap();
            let metric = fam.spec().metric();
            let mut ok = 0;
            for i in 0..1000 {
                let anchor = a.row(i).to_vec();
                let same = distance(&anchor, &b.row(i).to_vec(), metric).unwrap();
                let other = distance(&anchor, &b.row(i + 1).to_vec(), metric).unwrap();
                if same < other {
                    ok += 1;
                }
            }
            assert!(ok >= 990, "{}: {ok}/1000", fam.spec().name());
        }
    }

    #[test]
    fn dataset_and_multiview_layout() {
        let lat = gen_latents(30, 64, 2, 0).unwrap();
        let fams = four(64);
        let ds = gen_dataset(&lat, &fams, 3).unwrap();
        for set in ds.sets() {
            assert_eq!(set.patch_ids(), lat.ids.as_slice());
        }
        let set = gen_multiview(&lat, &fams, &MultiviewConfig::round_robin(4, 9)).unwrap();
        let algos: Vec<&str> = set.images().iter().map(|i| i.algo.as_str()).collect();
        assert_eq!(algos, vec!["brief", "sift", "hardnet", "sosnet"]);
        // Every latent visible everywhere: n * C(views, 2) correspondences.
        assert_eq!(set.ground_truth_pair_count(), 30 * 6);
        assert!(gen_multiview(&lat, &fams, &MultiviewConfig::round_robin(1, 9)).is_err());
    }
}
