//! Exhaustive descriptor matchers and match-quality metrics.

use crate::descriptor::{is_bit, sq_l2, DescriptorMatrix, Metric};
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// Ratio threshold used throughout for the symmetric second-NN test.
pub const DEFAULT_RATIO: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub metric: Metric,
    pub ratio: Option<f32>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same pairs with sides exchanged, re-sorted by the new `index_a`.
    pub fn swapped(&self) -> MatchSet {
        let mut pairs: Vec<Match> = self
            .pairs
            .iter()
            .map(|m| Match {
                index_a: m.index_b,
                index_b: m.index_a,
                distance: m.distance,
            })
            .collect();
        pairs.sort_by_key(|m| m.index_a);
        MatchSet {
            pairs,
            metric: self.metric,
            ratio: self.ratio,
        }
    }
}

/// Bit rows packed into 64-bit words for popcount Hamming distances.
#[derive(Clone, Debug)]
pub struct PackedBits {
    words: usize,
    data: Vec<u64>,
}

impl PackedBits {
    pub fn pack(m: ArrayView2<'_, f32>) -> Result<Self> {
        let words = m.ncols().div_ceil(64);
        let mut data = vec![0u64; words * m.nrows()];
        for (r, row) in m.outer_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if !is_bit(v) {
                    return Err(Error::Domain(format!(
                        "hamming matching requires {{0,1}} entries, found {v} at ({r},{c})"
                    )));
                }
                if v == 1.0 {
                    data[r * words + c / 64] |= 1u64 << (c % 64);
                }
            }
        }
        Ok(PackedBits { words, data })
    }

    fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.words..(r + 1) * self.words]
    }

    pub fn distance(&self, r: usize, other: &PackedBits, s: usize) -> u32 {
        self.row(r)
            .iter()
            .zip(other.row(s))
            .map(|(x, y)| (x ^ y).count_ones())
            .sum()
    }
}

/// Full `|A| x |B|` distance matrix. Rows are computed in parallel; values
/// do not depend on the thread count.
pub fn distance_matrix(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, metric: Metric) -> Result<Array2<f32>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "incompatible descriptor dimensions: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = vec![0f32; na * nb];
    if nb == 0 {
        return Ok(Array2::zeros((na, 0)));
    }
    match metric {
        Metric::L2 => {
            let a = a.as_standard_layout();
            let b = b.as_standard_layout();
            let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
            let d = a.len().checked_div(na).unwrap_or(0);
            out.par_chunks_mut(nb).enumerate().for_each(|(i, row)| {
                let ra = &a[i * d..(i + 1) * d];
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = sq_l2(ra, &b[j * d..(j + 1) * d]).sqrt();
                }
            });
        }
        Metric::Hamming => {
            let pa = PackedBits::pack(a)?;
            let pb = PackedBits::pack(b)?;
            out.par_chunks_mut(nb).enumerate().for_each(|(i, row)| {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = pa.distance(i, &pb, j) as f32;
                }
            });
        }
    }
    Ok(Array2::from_shape_vec((na, nb), out).expect("sized"))
}

/// Nearest and second-nearest entries of a distance sequence. Ties keep the
/// lowest index as nearest; the second-nearest distance is the smallest
/// value among all other entries.
fn two_nearest(values: impl Iterator<Item = f32>) -> Option<(usize, f32, f32)> {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for (k, v) in values.enumerate() {
        if v < best.1 {
            second = best.1;
            best = (k, v);
        } else if v < second {
            second = v;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

/// For every row of `a`, its nearest row of `b`.
pub fn match_nn(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, metric: Metric) -> Result<MatchSet> {
    if b.nrows() == 0 {
        return Err(Error::Match("cannot match against an empty set".into()));
    }
    let d = distance_matrix(a, b, metric)?;
    let pairs = d
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let (j, dist, _) = two_nearest(row.iter().copied()).expect("non-empty");
            Match {
                index_a: i,
                index_b: j,
                distance: dist,
            }
        })
        .collect();
    Ok(MatchSet {
        pairs,
        metric,
        ratio: None,
    })
}

fn ratio_ok(d1: f32, d2: f32, ratio: f32) -> bool {
    d2 > 0.0 && d1 <= ratio * d2
}

/// Mutual nearest neighbours that also pass the second-NN ratio test in
/// both query directions.
pub fn match_mutual_ratio(
    a: ArrayView2<'_, f32>,
    b: ArrayView2<'_, f32>,
    metric: Metric,
    ratio: f32,
) -> Result<MatchSet> {
    let d = distance_matrix(a, b, metric)?;
    mutual_ratio_from_distances(&d, metric, ratio)
}

/// [`match_mutual_ratio`] on a precomputed distance matrix.
pub fn mutual_ratio_from_distances(d: &Array2<f32>, metric: Metric, ratio: f32) -> Result<MatchSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let (na, nb) = d.dim();
    if na < 2 || nb < 2 {
        return Err(Error::Match(format!(
            "ratio test needs >= 2 rows per side, got {na} and {nb}"
        )));
    }
    let forward: Vec<(usize, f32, f32)> = d
        .outer_iter()
        .map(|row| two_nearest(row.iter().copied()).expect("non-empty"))
        .collect();
    let backward: Vec<(usize, f32, f32)> = d
        .columns()
        .into_iter()
        .map(|col| two_nearest(col.iter().copied()).expect("non-empty"))
        .collect();
    let pairs = forward
        .iter()
        .enumerate()
        .filter_map(|(i, &(j, d1, d2))| {
            let (back, e1, e2) = backward[j];
            (back == i && ratio_ok(d1, d2, ratio) && ratio_ok(e1, e2, ratio)).then_some(Match {
                index_a: i,
                index_b: j,
                distance: d1,
            })
        })
        .collect();
    Ok(MatchSet {
        pairs,
        metric,
        ratio: Some(ratio),
    })
}

/// Matches two descriptor matrices in their common space; refuses
/// incompatible families.
pub fn match_descriptors(a: &DescriptorMatrix, b: &DescriptorMatrix, ratio: f32) -> Result<MatchSet> {
    if !a.spec().compatible_with(b.spec()) {
        return Err(Error::Spec(format!(
            "incompatible descriptor dimensions: {} vs {}",
            a.spec(),
            b.spec()
        )));
    }
    match_mutual_ratio(a.values().view(), b.values().view(), a.spec().metric(), ratio)
}

/// Ground-truth correspondences between the rows of two sets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pairs: HashSet<(usize, usize)>,
}

impl GroundTruth {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        GroundTruth {
            pairs: pairs.into_iter().collect(),
        }
    }

    /// Rows correspond when they carry the same label (patch or scene-point
    /// ID).
    pub fn from_labels(labels_a: &[u64], labels_b: &[u64]) -> Self {
        let index: HashMap<u64, Vec<usize>> = labels_b.iter().enumerate().fold(HashMap::new(), |mut m, (j, l)| {
            m.entry(*l).or_default().push(j);
            m
        });
        let pairs = labels_a
            .iter()
            .enumerate()
            .flat_map(|(i, l)| index.get(l).into_iter().flatten().map(move |&j| (i, j)))
            .collect();
        GroundTruth { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.pairs.contains(&(a, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchMetrics {
    pub precision: f64,
    pub recall: f64,
    pub count: usize,
    pub correct: usize,
}

/// Precision is 1 for an empty match set; recall is 0 when there is no
/// ground truth.
pub fn match_metrics(matches: &MatchSet, truth: &GroundTruth) -> MatchMetrics {
    let correct = matches
        .pairs
        .iter()
        .filter(|m| truth.contains(m.index_a, m.index_b))
        .count();
    let count = matches.len();
    MatchMetrics {
        precision: if count == 0 { 1.0 } else { correct as f64 / count as f64 },
        recall: if truth.is_empty() {
            0.0
        } else {
            correct as f64 / truth.len() as f64
        },
        count,
        correct,
    }
}

/// Mutual-ratio matching of two descriptor matrices scored against their
/// patch IDs.
pub fn patch_id_metrics(a: &DescriptorMatrix, b: &DescriptorMatrix, ratio: f32) -> Result<MatchMetrics> {
    let m = match_descriptors(a, b, ratio)?;
    Ok(match_metrics(
        &m,
        &GroundTruth::from_labels(a.patch_ids(), b.patch_ids()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::distance;
    use ndarray::{array, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_bits(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
    }

    /// Double-loop reference: sort every row and column independently.
    fn brute_mutual_ratio(a: &Array2<f32>, b: &Array2<f32>, metric: Metric, ratio: f32) -> Vec<(usize, usize)> {
        let dist =
            |i: usize, j: usize| distance(a.row(i).as_slice().unwrap(), b.row(j).as_slice().unwrap(), metric).unwrap();
        let ranked = |mut v: Vec<(f32, usize)>| {
            v.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            (v[0].1, v[0].0, v[1].0)
        };
        let mut out = Vec::new();
        for i in 0..a.nrows() {
            let (j, d1, d2) = ranked((0..b.nrows()).map(|j| (dist(i, j), j)).collect());
            let (back, e1, e2) = ranked((0..a.nrows()).map(|k| (dist(k, j), k)).collect());
            let pass = |x: f32, y: f32| y > 0.0 && x / y <= ratio + f32::EPSILON * 4.0 && x <= ratio * y;
            if back == i && pass(d1, d2) && pass(e1, e2) {
                out.push((i, j));
            }
        }
        out
    }

    fn pairs(m: &MatchSet) -> Vec<(usize, usize)> {
        m.pairs.iter().map(|p| (p.index_a, p.index_b)).collect()
    }

    #[test]
    fn nn_examples() {
        let a = array![[0.0f32, 0.0], [1.0, 1.0], [5.0, 5.0]];
        let m = match_nn(a.view(), a.view(), Metric::L2).unwrap();
        assert!(m
            .pairs
            .iter()
            .enumerate()
            .all(|(i, p)| p.index_b == i && p.distance == 0.0));

        let q = array![[0.9f32, 1.2]];
        let m = match_nn(q.view(), a.view(), Metric::L2).unwrap();
        let exhaustive = (0..3)
            .min_by(|&x, &y| {
                let dx = distance(&[0.9, 1.2], a.row(x).as_slice().unwrap(), Metric::L2).unwrap();
                let dy = distance(&[0.9, 1.2], a.row(y).as_slice().unwrap(), Metric::L2).unwrap();
                dx.partial_cmp(&dy).unwrap()
            })
            .unwrap();
        assert_eq!(m.pairs[0].index_b, exhaustive);
        assert!(matches!(
            match_nn(q.view(), Array2::<f32>::zeros((0, 2)).view(), Metric::L2),
            Err(Error::Match(_))
        ));
    }

    #[test]
    fn hamming_path_agrees_with_float_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_bits(30, 100, &mut rng);
        let b = rand_bits(40, 100, &mut rng);
        let dh = distance_matrix(a.view(), b.view(), Metric::Hamming).unwrap();
        let dl = distance_matrix(a.view(), b.view(), Metric::L2).unwrap();
        for (h, l) in dh.iter().zip(dl.iter()) {
            assert!((h - l * l).abs() < 1e-3);
            assert!((h.sqrt() - l).abs() < 1e-5);
        }
        let nh = match_nn(a.view(), b.view(), Metric::Hamming).unwrap();
        let nl = match_nn(a.view(), b.view(), Metric::L2).unwrap();
        assert_eq!(pairs(&nh), pairs(&nl));
        assert!(matches!(
            distance_matrix(array![[0.5f32]].view(), array![[1.0f32]].view(), Metric::Hamming),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn identical_separated_sets_match_perfectly() {
        let a = Array2::<f32>::eye(10) * 3.0;
        let m = match_mutual_ratio(a.view(), a.view(), Metric::L2, 0.9).unwrap();
        assert_eq!(pairs(&m), (0..10).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn duplicated_target_never_matches() {
        let a = array![[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let b = array![[0.0f32, 0.0], [10.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let m = match_mutual_ratio(a.view(), b.view(), Metric::L2, 0.9).unwrap();
        assert!(m.pairs.iter().all(|p| p.index_b != 1 && p.index_b != 2));
        assert_eq!(pairs(&m), vec![(0, 0), (2, 3)]);

        let flat = Array2::<f32>::ones((4, 3));
        assert!(match_mutual_ratio(flat.view(), flat.view(), Metric::L2, 0.9)
            .unwrap()
            .is_empty());
        assert!(match_mutual_ratio(flat.view(), flat.view(), Metric::L2, 0.0).is_err());
        assert!(match_mutual_ratio(flat.view(), flat.slice(ndarray::s![..1, ..]), Metric::L2, 0.9).is_err());
    }

    #[test]
    fn mutual_ratio_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            // Correlated sets so both accepted and rejected matches occur.
            let a = rand_mat(50, 32, &mut rng);
            let mut b = &a + &(rand_mat(50, 32, &mut rng) * 0.6);
            if trial % 2 == 0 {
                b = b.select(Axis(0), &(0..50).rev().collect::<Vec<_>>());
            }
            let got = match_mutual_ratio(a.view(), b.view(), Metric::L2, 0.9).unwrap();
            assert_eq!(pairs(&got), brute_mutual_ratio(&a, &b, Metric::L2, 0.9));
        }
        for _ in 0..5 {
            let a = rand_bits(40, 64, &mut rng);
            let b = rand_bits(45, 64, &mut rng);
            let got = match_mutual_ratio(a.view(), b.view(), Metric::Hamming, 0.9).unwrap();
            assert_eq!(pairs(&got), brute_mutual_ratio(&a, &b, Metric::Hamming, 0.9));
        }
    }

    #[test]
    fn metrics_examples() {
        let truth = GroundTruth::from_labels(&[5, 6, 7, 8], &[8, 7, 6, 9]);
        assert_eq!(truth.len(), 3);
        let all_right = MatchSet {
            pairs: vec![
                Match {
                    index_a: 1,
                    index_b: 2,
                    distance: 0.1,
                },
                Match {
                    index_a: 2,
                    index_b: 1,
                    distance: 0.1,
                },
            ],
            metric: Metric::L2,
            ratio: None,
        };
        let m = match_metrics(&all_right, &truth);
        assert_eq!(m.precision, 1.0);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        let none = MatchSet {
            pairs: vec![],
            metric: Metric::L2,
            ratio: None,
        };
        let m = match_metrics(&none, &truth);
        assert_eq!((m.precision, m.recall, m.count), (1.0, 0.0, 0));
    }

    #[test]
    fn metrics_hand_counted_twenty() {
        // Labels 0..20 on A; B holds the same labels rotated by 3.
        let la: Vec<u64> = (0..20).collect();
        let lb: Vec<u64> = (0..20).map(|i| (i + 3) % 20).collect();
        let truth = GroundTruth::from_labels(&la, &lb);
        // A row i corresponds to B row (i + 17) % 20.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pairs = Vec::new();
        let mut expected_correct = 0;
        for i in 0..20usize {
            let j = if rng.gen_bool(0.6) { (i + 17) % 20 } else { (i + 1) % 20 };
            if j == (i + 17) % 20 {
                expected_correct += 1;
            }
            pairs.push(Match {
                index_a: i,
                index_b: j,
                distance: 0.0,
            });
        }
        let m = match_metrics(
            &MatchSet {
                pairs,
                metric: Metric::L2,
                ratio: None,
            },
            &truth,
        );
        assert_eq!(m.correct, expected_correct);
        assert_eq!(m.count, 20);
        assert!((m.precision - expected_correct as f64 / 20.0).abs() < 1e-12);
        assert!((m.recall - expected_correct as f64 / 20.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matcher_invariants(seed in 0u64..10_000, noise in 0.05f32..1.5, lo in 0.3f32..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_mat(25, 8, &mut rng);
            let b = &a.select(Axis(0), &(0..25).rev().collect::<Vec<_>>()) + &(rand_mat(25, 8, &mut rng) * noise);
            let ab = match_mutual_ratio(a.view(), b.view(), Metric::L2, 0.9).unwrap();
            let ba = match_mutual_ratio(b.view(), a.view(), Metric::L2, 0.9).unwrap();
            prop_assert_eq!(pairs(&ab.swapped()), pairs(&ba));

            let fwd = match_nn(a.view(), b.view(), Metric::L2).unwrap();
            let bwd = match_nn(b.view(), a.view(), Metric::L2).unwrap();
            for p in &ab.pairs {
                prop_assert_eq!(fwd.pairs[p.index_a].index_b, p.index_b);
                prop_assert_eq!(bwd.pairs[p.index_b].index_b, p.index_a);
            }

            let strict = match_mutual_ratio(a.view(), b.view(), Metric::L2, lo).unwrap();
            let loose: HashSet<_> = pairs(&ab).into_iter().collect();
            for p in pairs(&strict) {
                prop_assert!(loose.contains(&p));
            }

            let mut seen_a = HashSet::new();
            let mut seen_b = HashSet::new();
            for p in &ab.pairs {
                prop_assert!(seen_a.insert(p.index_a) && seen_b.insert(p.index_b));
                prop_assert!(p.distance >= 0.0);
            }
        }
    }
}
