//! Descriptor families, descriptor matrices and the elementary operations on
//! descriptor rows (distance, normalization, binarization).

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

/// Value domain of a descriptor family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Real,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    Hamming,
}

/// Normalization applied to finalized descriptors of a family.
///
/// `NonnegUnitL2` covers histogram-style descriptors (SIFT-like): entries are
/// non-negative and rows are unit length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputNorm {
    None,
    UnitL2,
    NonnegUnitL2,
}

impl OutputNorm {
    pub fn is_unit(self) -> bool {
        matches!(self, OutputNorm::UnitL2 | OutputNorm::NonnegUnitL2)
    }
}

macro_rules! token_enum {
    ($ty:ident { $($variant:ident => $tok:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $tok),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tok => Ok($ty::$variant),)+
                    other => Err(Error::Spec(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

token_enum!(Domain { Real => "real", Binary => "binary" });
token_enum!(Metric { L2 => "l2", Hamming => "hamming" });
token_enum!(OutputNorm { None => "none", UnitL2 => "unit_l2", NonnegUnitL2 => "nonneg_unit_l2" });

/// Metadata describing one description algorithm.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct AlgorithmSpec {
    name: String,
    dim: usize,
    domain: Domain,
    metric: Metric,
    output_norm: OutputNorm,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    name: String,
    dim: usize,
    domain: Domain,
    metric: Metric,
    output_norm: OutputNorm,
}

impl TryFrom<RawSpec> for AlgorithmSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        AlgorithmSpec::new(raw.name, raw.dim, raw.domain, raw.metric, raw.output_norm)
    }
}

impl From<AlgorithmSpec> for RawSpec {
    fn from(s: AlgorithmSpec) -> Self {
        RawSpec {
            name: s.name,
            dim: s.dim,
            domain: s.domain,
            metric: s.metric,
            output_norm: s.output_norm,
        }
    }
}

impl AlgorithmSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        domain: Domain,
        metric: Metric,
        output_norm: OutputNorm,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Spec(format!(
                "algorithm name must be a non-empty token, got '{name}'"
            )));
        }
        if dim == 0 {
            return Err(Error::Spec(format!("{name}: dim must be >= 1")));
        }
        match domain {
            Domain::Binary if metric != Metric::Hamming || output_norm != OutputNorm::None => {
                return Err(Error::Spec(format!(
                    "{name}: binary descriptors require metric=hamming and output_norm=none"
                )))
            }
            Domain::Real if metric != Metric::L2 => {
                return Err(Error::Spec(format!("{name}: real descriptors require metric=l2")))
            }
            _ => {}
        }
        Ok(AlgorithmSpec {
            name,
            dim,
            domain,
            metric,
            output_norm,
        })
    }

    pub fn binary(name: impl Into<String>, dim: usize) -> Result<Self> {
        Self::new(name, dim, Domain::Binary, Metric::Hamming, OutputNorm::None)
    }

    pub fn real(name: impl Into<String>, dim: usize, output_norm: OutputNorm) -> Result<Self> {
        Self::new(name, dim, Domain::Real, Metric::L2, output_norm)
    }

    /// 512-bit BRIEF-like family.
    pub fn brief() -> Self {
        Self::binary("brief", 512).expect("valid preset")
    }

    /// 128-d non-negative unit-norm SIFT-like family.
    pub fn sift() -> Self {
        Self::real("sift", 128, OutputNorm::NonnegUnitL2).expect("valid preset")
    }

    pub fn hardnet() -> Self {
        Self::real("hardnet", 128, OutputNorm::UnitL2).expect("valid preset")
    }

    pub fn sosnet() -> Self {
        Self::real("sosnet", 128, OutputNorm::UnitL2).expect("valid preset")
    }

    /// The four stand-in families, weakest first.
    pub fn standard_four() -> Vec<Self> {
        vec![Self::brief(), Self::sift(), Self::hardnet(), Self::sosnet()]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn output_norm(&self) -> OutputNorm {
        self.output_norm
    }

    pub fn is_binary(&self) -> bool {
        self.domain == Domain::Binary
    }

    /// Handcrafted-style families (binary tests, gradient histograms) get the
    /// wide 1024 hidden layers; compact learned-style families get 256.
    pub fn default_hidden_width(&self) -> usize {
        if self.is_binary() || self.output_norm == OutputNorm::NonnegUnitL2 {
            1024
        } else {
            256
        }
    }

    /// Raw descriptors of `self` and `other` can be compared directly.
    pub fn compatible_with(&self, other: &AlgorithmSpec) -> bool {
        self.dim == other.dim && self.domain == other.domain && self.metric == other.metric
    }
}

impl fmt::Display for AlgorithmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({}-d {}, {}, {})",
            self.name, self.dim, self.domain, self.metric, self.output_norm
        )
    }
}

/// `v / ‖v‖₂`.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Normalization(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

/// `out[k] = 1` iff `v[k] >= threshold`.
pub fn binarize(v: &[f32], threshold: f32) -> Vec<f32> {
    v.iter().map(|&x| if x >= threshold { 1.0 } else { 0.0 }).collect()
}

pub(crate) fn is_bit(x: f32) -> bool {
    x == 0.0 || x == 1.0
}

/// Distance between two descriptor rows under `metric`.
///
/// Hamming distances are returned as floats so both metrics share one
/// matcher interface.
pub fn distance(a: &[f32], b: &[f32], metric: Metric) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "descriptor lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    match metric {
        Metric::L2 => Ok(sq_l2(a, b).sqrt()),
        Metric::Hamming => {
            if let Some(x) = a.iter().chain(b).find(|x| !is_bit(**x)) {
                return Err(Error::Domain(format!(
                    "hamming distance requires {{0,1}} entries, found {x}"
                )));
            }
            Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f32)
        }
    }
}

/// Squared Euclidean distance with a fixed 8-lane accumulation order.
pub(crate) fn sq_l2(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            let d = xa[k] - xb[k];
            acc[k] += d * d;
        }
    }
    let mut tail = 0f32;
    for k in chunks * 8..a.len() {
        let d = a[k] - b[k];
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `N` descriptors of one algorithm, row-aligned to patch IDs.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMatrix {
    spec: AlgorithmSpec,
    patch_ids: Vec<u64>,
    values: Array2<f32>,
}

impl DescriptorMatrix {
    pub fn new(spec: AlgorithmSpec, patch_ids: Vec<u64>, values: Array2<f32>) -> Result<Self> {
        if values.nrows() != patch_ids.len() {
            return Err(Error::Shape(format!(
                "{}: {} rows but {} patch ids",
                spec.name(),
                values.nrows(),
                patch_ids.len()
            )));
        }
        if values.ncols() != spec.dim() {
            return Err(Error::Shape(format!(
                "{}: expected {} columns, got {}",
                spec.name(),
                spec.dim(),
                values.ncols()
            )));
        }
        let mut seen = HashSet::with_capacity(patch_ids.len());
        if let Some(dup) = patch_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Dataset(format!("{}: duplicate patch id {dup}", spec.name())));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerics(format!(
                "{}: descriptor values must be finite",
                spec.name()
            )));
        }
        if spec.is_binary() && values.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain(format!(
                "{}: binary descriptor values must lie in [0,1]",
                spec.name()
            )));
        }
        let values = values.as_standard_layout().into_owned();
        Ok(DescriptorMatrix {
            spec,
            patch_ids,
            values,
        })
    }

    pub fn spec(&self) -> &AlgorithmSpec {
        &self.spec
    }

    pub fn patch_ids(&self) -> &[u64] {
        &self.patch_ids
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.values.row(i)
    }

    pub fn into_parts(self) -> (AlgorithmSpec, Vec<u64>, Array2<f32>) {
        (self.spec, self.patch_ids, self.values)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> DescriptorMatrix {
        DescriptorMatrix {
            spec: self.spec.clone(),
            patch_ids: indices.iter().map(|&i| self.patch_ids[i]).collect(),
            values: self.values.select(Axis(0), indices),
        }
    }

    /// True when every entry is exactly 0 or 1.
    pub fn is_bits(&self) -> bool {
        self.values.iter().all(|x| is_bit(*x))
    }

    /// Checks the finalized-descriptor contract: bits for binary families,
    /// unit rows for normalized families.
    pub fn check_finalized(&self) -> Result<()> {
        if self.spec.is_binary() && !self.is_bits() {
            return Err(Error::Domain(format!(
                "{}: finalized binary descriptors must be {{0,1}}",
                self.spec.name()
            )));
        }
        if self.spec.output_norm().is_unit() {
            for (i, row) in self.values.outer_iter().enumerate() {
                let n = row.iter().map(|x| x * x).sum::<f32>().sqrt();
                if (n - 1.0).abs() > 1e-5 {
                    return Err(Error::Normalization(format!(
                        "{}: row {i} has norm {n}",
                        self.spec.name()
                    )));
                }
            }
        }
        if self.spec.output_norm() == OutputNorm::NonnegUnitL2 && self.values.iter().any(|x| *x < 0.0) {
            return Err(Error::Domain(format!(
                "{}: entries must be non-negative",
                self.spec.name()
            )));
        }
        Ok(())
    }
}

/// Patch-aligned descriptor matrices for several algorithms over one shared
/// patch-ID list.
#[derive(Clone, Debug)]
pub struct CorrespondenceDataset {
    sets: Vec<DescriptorMatrix>,
}

impl CorrespondenceDataset {
    /// Aligns every matrix to the patch order of the first one.
    pub fn new(sets: Vec<DescriptorMatrix>) -> Result<Self> {
        let Some(first) = sets.first() else {
            return Err(Error::Dataset("dataset needs at least one algorithm".into()));
        };
        let reference: Vec<u64> = first.patch_ids().to_vec();
        let mut names = HashSet::new();
        let mut aligned = Vec::with_capacity(sets.len());
        for set in sets {
            if !names.insert(set.spec().name().to_string()) {
                return Err(Error::Dataset(format!(
                    "algorithm '{}' appears twice",
                    set.spec().name()
                )));
            }
            if set.patch_ids() == reference.as_slice() {
                aligned.push(set);
                continue;
            }
            if set.len() != reference.len() {
                return Err(Error::Dataset(format!(
                    "'{}' has {} patches, expected {}",
                    set.spec().name(),
                    set.len(),
                    reference.len()
                )));
            }
            let index: std::collections::HashMap<u64, usize> =
                set.patch_ids().iter().enumerate().map(|(i, id)| (*id, i)).collect();
            let order = reference
                .iter()
                .map(|id| {
                    index
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::Dataset(format!("'{}' lacks patch id {id}", set.spec().name())))
                })
                .collect::<Result<Vec<_>>>()?;
            aligned.push(set.select(&order));
        }
        Ok(CorrespondenceDataset { sets: aligned })
    }

    pub fn algorithms(&self) -> impl Iterator<Item = &AlgorithmSpec> {
        self.sets.iter().map(|s| s.spec())
    }

    pub fn get(&self, name: &str) -> Result<&DescriptorMatrix> {
        self.sets
            .iter()
            .find(|s| s.spec().name() == name)
            .ok_or_else(|| Error::Dataset(format!("dataset has no algorithm '{name}'")))
    }

    pub fn sets(&self) -> &[DescriptorMatrix] {
        &self.sets
    }

    pub fn patch_ids(&self) -> &[u64] {
        self.sets[0].patch_ids()
    }

    pub fn len(&self) -> usize {
        self.sets[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
