//! Multi-image scenarios: match graphs, tracks and co-visibility statistics.

use crate::bank::{encode, translate_via_bank, ModelBank};
use crate::descriptor::DescriptorMatrix;
use crate::error::{Error, Result};
use crate::matching::{match_descriptors, MatchSet, DEFAULT_RATIO};
use crate::pair::{translate, PairModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::str::FromStr;

/// One image described by a single algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub image_id: u32,
    pub algo: String,
    pub descs: DescriptorMatrix,
}

/// Images of one scene. Ground truth, when present, holds one scene-point
/// label per row of every image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    images: Vec<Image>,
    ground_truth: Option<Vec<Vec<u64>>>,
}

impl ImageSet {
    pub fn new(images: Vec<Image>, ground_truth: Option<Vec<Vec<u64>>>) -> Result<Self> {
        let mut ids = HashSet::new();
        for img in &images {
            if !ids.insert(img.image_id) {
                return Err(Error::Config(format!("duplicate image_id {}", img.image_id)));
            }
            if img.algo != img.descs.spec().name() {
                return Err(Error::Config(format!(
                    "image {} claims algorithm {} but holds {} descriptors",
                    img.image_id,
                    img.algo,
                    img.descs.spec().name()
                )));
            }
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != images.len() || gt.iter().zip(&images).any(|(l, i)| l.len() != i.descs.len()) {
                return Err(Error::Config("ground truth needs one label per descriptor row".into()));
            }
        }
        Ok(ImageSet { images, ground_truth })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn ground_truth(&self) -> Option<&[Vec<u64>]> {
        self.ground_truth.as_deref()
    }

    /// Labels of image at position `k`, if ground truth is known.
    pub fn labels(&self, k: usize) -> Option<&[u64]> {
        self.ground_truth.as_ref().map(|g| g[k].as_slice())
    }

    /// Number of true cross-image correspondences over all unordered image
    /// pairs.
    pub fn ground_truth_pair_count(&self) -> usize {
        let Some(gt) = &self.ground_truth else { return 0 };
        let sets: Vec<HashSet<u64>> = gt.iter().map(|l| l.iter().copied().collect()).collect();
        let mut total = 0;
        for a in 0..sets.len() {
            for b in a + 1..sets.len() {
                total += sets[a].intersection(&sets[b]).count();
            }
        }
        total
    }
}

/// How images described by different algorithms are matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Encode every image into the joint space and match there.
    Embed,
    /// Translate the weaker side into the stronger side's space.
    Progressive,
    /// Raw descriptors, only between compatible families.
    Naive,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Embed => "embed",
            Strategy::Progressive => "progressive",
            Strategy::Naive => "naive",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(Strategy::Embed),
            "progressive" => Ok(Strategy::Progressive),
            "naive" => Ok(Strategy::Naive),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Weakest first.
pub fn default_hierarchy() -> Vec<String> {
    ["brief", "sift", "hardnet", "sosnet"].map(String::from).to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AToB,
    BToA,
    None,
}

/// Translation direction between algorithms `a` and `b`: always from the
/// lower-ranked toward the higher-ranked one.
pub fn progressive_direction(hierarchy: &[String], a: &str, b: &str) -> Result<Direction> {
    let rank = |x: &str| {
        hierarchy
            .iter()
            .position(|h| h == x)
            .ok_or_else(|| Error::Config(format!("algorithm {x:?} is not in the hierarchy")))
    };
    let (ra, rb) = (rank(a)?, rank(b)?);
    Ok(match ra.cmp(&rb) {
        Ordering::Less => Direction::AToB,
        Ordering::Greater => Direction::BToA,
        Ordering::Equal => Direction::None,
    })
}

/// Trained translators available to a scenario.
#[derive(Clone, Copy, Debug, Default)]
pub struct Models<'a> {
    pub bank: Option<&'a ModelBank>,
    pub pairs: &'a [PairModel],
}

impl<'a> Models<'a> {
    pub fn bank(bank: &'a ModelBank) -> Self {
        Models {
            bank: Some(bank),
            pairs: &[],
        }
    }

    /// Translates `descs` into family `dst`, preferring a dedicated pair
    /// network over the bank.
    pub fn translate(&self, descs: &DescriptorMatrix, dst: &str) -> Result<DescriptorMatrix> {
        let src = descs.spec().name();
        if let Some(p) = self.pairs.iter().find(|p| p.src.name() == src && p.dst.name() == dst) {
            return translate(p, descs);
        }
        match self.bank {
            Some(b) if b.has(src) && b.has(dst) => translate_via_bank(b, src, dst, descs),
            _ => Err(Error::Config(format!("no model translates {src} to {dst}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchParams {
    pub ratio: f32,
    pub hierarchy: Vec<String>,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            ratio: DEFAULT_RATIO,
            hierarchy: default_hierarchy(),
        }
    }
}

/// Matches between two images. Indices refer to descriptor rows of
/// `image_a` and `image_b`; `image_a < image_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMatches {
    pub image_a: u32,
    pub image_b: u32,
    pub matches: MatchSet,
    /// `(src, dst)` family names when one side was translated.
    pub translated: Option<(String, String)>,
    /// The pair could not be matched under the strategy.
    pub skipped: bool,
}

fn empty_matches(metric: crate::descriptor::Metric, ratio: f32) -> MatchSet {
    MatchSet {
        pairs: Vec::new(),
        metric,
        ratio: Some(ratio),
    }
}

/// Matches every unordered image pair, in ascending `(image_a, image_b)`
/// order.
pub fn build_match_graph(
    set: &ImageSet,
    strategy: Strategy,
    models: Models<'_>,
    params: &MatchParams,
) -> Result<Vec<PairMatches>> {
    let mut order: Vec<usize> = (0..set.images.len()).collect();
    order.sort_by_key(|&k| set.images[k].image_id);
    let pairs: Vec<(usize, usize)> = order
        .iter()
        .enumerate()
        .flat_map(|(x, &a)| order[x + 1..].iter().map(move |&b| (a, b)))
        .collect();
    let encoded: Vec<Option<DescriptorMatrix>> = match strategy {
        Strategy::Embed => {
            let bank = models
                .bank
                .ok_or_else(|| Error::Config("embed strategy needs a model bank".into()))?;
            set.images
                .iter()
                .map(|img| {
                    if !bank.has(&img.algo) {
                        return Err(Error::Config(format!("bank has no encoder for {}", img.algo)));
                    }
                    encode(bank, &img.algo, &img.descs).map(Some)
                })
                .collect::<Result<_>>()?
        }
        _ => vec![None; set.images.len()],
    };
    if strategy == Strategy::Progressive {
        for img in &set.images {
            progressive_direction(&params.hierarchy, &img.algo, &img.algo)?;
        }
    }
    pairs
        .par_iter()
        .map(|&(a, b)| {
            let (ia, ib) = (&set.images[a], &set.images[b]);
            let mut out = PairMatches {
                image_a: ia.image_id,
                image_b: ib.image_id,
                matches: empty_matches(ia.descs.spec().metric(), params.ratio),
                translated: None,
                skipped: false,
            };
            match strategy {
                Strategy::Embed => {
                    let (ea, eb) = (encoded[a].as_ref().unwrap(), encoded[b].as_ref().unwrap());
                    out.matches = match_descriptors(ea, eb, params.ratio)?;
                }
                Strategy::Naive => {
                    if ia.descs.spec().compatible_with(ib.descs.spec()) {
                        out.matches = match_descriptors(&ia.descs, &ib.descs, params.ratio)?;
                    } else {
                        out.skipped = true;
                    }
                }
                Strategy::Progressive => match progressive_direction(&params.hierarchy, &ia.algo, &ib.algo)? {
                    Direction::None => out.matches = match_descriptors(&ia.descs, &ib.descs, params.ratio)?,
                    Direction::AToB => {
                        let ta = models.translate(&ia.descs, &ib.algo)?;
                        out.matches = match_descriptors(&ta, &ib.descs, params.ratio)?;
                        out.translated = Some((ia.algo.clone(), ib.algo.clone()));
                    }
                    Direction::BToA => {
                        let tb = models.translate(&ib.descs, &ia.algo)?;
                        out.matches = match_descriptors(&ia.descs, &tb, params.ratio)?;
                        out.translated = Some((ib.algo.clone(), ia.algo.clone()));
                    }
                },
            }
            Ok(out)
        })
        .collect()
}

/// Matches in `graph` that connect rows with the same ground-truth label.
pub fn correct_correspondences(set: &ImageSet, graph: &[PairMatches]) -> Result<usize> {
    let gt = set
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Config("image set has no ground truth".into()))?;
    let pos = set.positions();
    let mut correct = 0;
    for pm in graph {
        let (a, b) = (pos[&pm.image_a], pos[&pm.image_b]);
        correct += pm
            .matches
            .pairs
            .iter()
            .filter(|m| gt[a][m.index_a] == gt[b][m.index_b])
            .count();
    }
    Ok(correct)
}

impl ImageSet {
    fn positions(&self) -> HashMap<u32, usize> {
        self.images.iter().enumerate().map(|(k, i)| (i.image_id, k)).collect()
    }
}

/// One scene point: the image rows observing it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: usize,
    pub members: Vec<(u32, usize)>,
    pub algos_present: BTreeSet<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackSet {
    tracks: Vec<Track>,
}

impl TrackSet {
    /// Checks that no observation appears twice.
    pub fn new(tracks: Vec<Track>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tracks {
            for m in &t.members {
                if !seen.insert(*m) {
                    return Err(Error::Config(format!(
                        "observation (image {}, row {}) appears twice",
                        m.0, m.1
                    )));
                }
            }
        }
        Ok(TrackSet { tracks })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Fraction of tracks whose members all share one ground-truth label.
    pub fn purity(&self, set: &ImageSet) -> Result<f64> {
        let gt = set
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Config("image set has no ground truth".into()))?;
        if self.tracks.is_empty() {
            return Err(Error::Stats("no tracks".into()));
        }
        let pos = set.positions();
        let pure = self
            .tracks
            .iter()
            .filter(|t| {
                let label = |&(img, row): &(u32, usize)| gt[pos[&img]][row];
                t.members.iter().all(|m| label(m) == label(&t.members[0]))
            })
            .count();
        Ok(pure as f64 / self.tracks.len() as f64)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so the result does not depend on edge order.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the match graph. Components holding two rows of
/// one image are inconsistent and dropped; singletons are not tracks.
pub fn build_tracks(set: &ImageSet, graph: &[PairMatches]) -> Result<TrackSet> {
    let pos = set.positions();
    let mut offsets = Vec::with_capacity(set.images.len() + 1);
    offsets.push(0usize);
    for img in &set.images {
        offsets.push(offsets.last().unwrap() + img.descs.len());
    }
    let node = |img: u32, row: usize| -> Result<usize> {
        let k = *pos
            .get(&img)
            .ok_or_else(|| Error::Config(format!("match graph references unknown image {img}")))?;
        if row >= set.images[k].descs.len() {
            return Err(Error::Config(format!("row {row} out of range for image {img}")));
        }
        Ok(offsets[k] + row)
    };
    let mut uf = UnionFind::new(*offsets.last().unwrap());
    for pm in graph {
        for m in &pm.matches.pairs {
            uf.union(node(pm.image_a, m.index_a)?, node(pm.image_b, m.index_b)?);
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for x in 0..uf.parent.len() {
        let r = uf.find(x);
        components.entry(r).or_default().push(x);
    }
    let locate = |x: usize| {
        let k = offsets.partition_point(|&o| o <= x) - 1;
        (k, x - offsets[k])
    };
    let mut tracks = Vec::new();
    for nodes in components.into_values() {
        if nodes.len() < 2 {
            continue;
        }
        let mut images = HashSet::new();
        let members: Vec<(usize, usize)> = nodes.iter().map(|&x| locate(x)).collect();
        if !members.iter().all(|(k, _)| images.insert(*k)) {
            continue;
        }
        let mut members: Vec<(u32, usize)> = members.into_iter().map(|(k, r)| (set.images[k].image_id, r)).collect();
        members.sort();
        let algos_present = members
            .iter()
            .map(|(img, _)| set.images[pos[img]].algo.clone())
            .collect();
        tracks.push(Track {
            track_id: 0,
            members,
            algos_present,
        });
    }
    tracks.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    for (k, t) in tracks.iter_mut().enumerate() {
        t.track_id = k;
    }
    TrackSet::new(tracks)
}

/// Co-visibility statistics in percent of tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovisStats {
    pub algorithms: Vec<String>,
    /// `histogram[k]`: tracks with exactly `k + 1` distinct algorithms.
    pub histogram: Vec<f64>,
    /// `cooccurrence[i][j]`: tracks containing both algorithm `i` and `j`.
    pub cooccurrence: Vec<Vec<f64>>,
    pub track_count: usize,
}

impl CovisStats {
    /// Percentage of tracks with at least two distinct algorithms.
    pub fn multi_algorithm_share(&self) -> f64 {
        self.histogram.iter().skip(1).sum()
    }
}

pub fn covisibility_stats(tracks: &TrackSet, algorithms: &[String]) -> Result<CovisStats> {
    if tracks.is_empty() {
        return Err(Error::Stats("cannot compute statistics of an empty track set".into()));
    }
    if algorithms.is_empty() {
        return Err(Error::Stats("no algorithms given".into()));
    }
    let n = algorithms.len();
    let index: HashMap<&str, usize> = algorithms.iter().enumerate().map(|(k, a)| (a.as_str(), k)).collect();
    let mut hist = vec![0usize; n];
    let mut co = vec![vec![0usize; n]; n];
    for t in tracks.tracks() {
        let present: Vec<usize> = t
            .algos_present
            .iter()
            .map(|a| {
                index
                    .get(a.as_str())
                    .copied()
                    .ok_or_else(|| Error::Stats(format!("track {} holds unlisted algorithm {a}", t.track_id)))
            })
            .collect::<Result<_>>()?;
        if present.is_empty() {
            return Err(Error::Stats(format!("track {} has no algorithms", t.track_id)));
        }
        hist[present.len() - 1] += 1;
        for &i in &present {
            for &j in &present {
                co[i][j] += 1;
            }
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / tracks.len() as f64;
    Ok(CovisStats {
        algorithms: algorithms.to_vec(),
        histogram: hist.into_iter().map(pct).collect(),
        cooccurrence: co.into_iter().map(|r| r.into_iter().map(pct).collect()).collect(),
        track_count: tracks.len(),
    })
}
