//! Directional translation networks between two descriptor families.

use crate::descriptor::{AlgorithmSpec, CorrespondenceDataset, DescriptorMatrix};
use crate::error::{Error, Result};
use crate::losses::{translation_loss_bce, translation_loss_l2};
use crate::mlp::{adam_step_models, build_mlp, AdamState, Gradients, Mlp, Mode};
use crate::synthetic::mix_seed;
use crate::train::{epoch_batches, head_for, TrainConfig};
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// What a finished training run looked like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub batch: usize,
    pub steps: u64,
    /// Mean training objective of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainSummary {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairModel {
    pub src: AlgorithmSpec,
    pub dst: AlgorithmSpec,
    pub net: Mlp<f32>,
    pub summary: Option<TrainSummary>,
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    kind: String,
    src: AlgorithmSpec,
    dst: AlgorithmSpec,
    summary: Option<TrainSummary>,
}

const PAIR_KIND: &str = "pair";

/// Translation loss for one batch: BCE on probabilities for binary targets,
/// mean Euclidean error otherwise.
pub(crate) fn translation_loss(
    dst: &AlgorithmSpec,
    pred: ArrayView2<'_, f32>,
    target: ArrayView2<'_, f32>,
) -> Result<(f32, Array2<f32>)> {
    if dst.is_binary() {
        translation_loss_bce(pred, target)
    } else {
        translation_loss_l2(pred, target)
    }
}

/// Turns raw network output into a finalized descriptor matrix of `spec`.
pub(crate) fn finalize(spec: &AlgorithmSpec, patch_ids: Vec<u64>, mut out: Array2<f32>) -> Result<DescriptorMatrix> {
    if spec.is_binary() {
        out.mapv_inplace(|p| if p >= 0.5 { 1.0 } else { 0.0 });
    }
    DescriptorMatrix::new(spec.clone(), patch_ids, out)
}

impl PairModel {
    /// Untrained network with the architecture `train_pair` would use.
    pub fn untrained(src: &AlgorithmSpec, dst: &AlgorithmSpec, cfg: &TrainConfig) -> Result<Self> {
        let mut net = build_mlp(
            src.dim(),
            &cfg.hidden_for(src),
            dst.dim(),
            head_for(dst),
            mix_seed(cfg.seed, 0x9A17),
        )?;
        net.set_mode(Mode::Eval);
        Ok(PairModel {
            src: src.clone(),
            dst: dst.clone(),
            net,
            summary: None,
        })
    }

    /// Mean translation loss of the eval-mode network on `src` -> `dst`.
    pub fn eval_loss(&self, src: &DescriptorMatrix, dst: &DescriptorMatrix) -> Result<f64> {
        self.check_src(src)?;
        let pred = self.net.infer(src.values().view())?;
        Ok(translation_loss(&self.dst, pred.view(), dst.values().view())?.0 as f64)
    }

    fn check_src(&self, descs: &DescriptorMatrix) -> Result<()> {
        if descs.spec() != &self.src {
            return Err(Error::Spec(format!(
                "model translates from {}, input is {}",
                self.src,
                descs.spec()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = PairMeta {
            kind: PAIR_KIND.into(),
            src: self.src.clone(),
            dst: self.dst.clone(),
            summary: self.summary.clone(),
        };
        Ok(self.net.to_xmlp(&serde_json::to_string(&meta)?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut net, meta) = Mlp::from_xmlp(bytes)?;
        let meta: PairMeta =
            serde_json::from_str(&meta).map_err(|e| Error::format("XMLP", "metadata", e.to_string()))?;
        if meta.kind != PAIR_KIND {
            return Err(Error::format(
                "XMLP",
                "metadata",
                format!("not a pair model (kind {:?})", meta.kind),
            ));
        }
        if net.in_dim() != meta.src.dim() || net.out_dim() != meta.dst.dim() {
            return Err(Error::format(
                "XMLP",
                "layer dims",
                format!(
                    "network {}->{} does not fit {} -> {}",
                    net.in_dim(),
                    net.out_dim(),
                    meta.src,
                    meta.dst
                ),
            ));
        }
        net.set_mode(Mode::Eval);
        Ok(PairModel {
            src: meta.src,
            dst: meta.dst,
            net,
            summary: meta.summary,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Trains `N_{src -> dst}` on the aligned patches of `dataset`.
pub fn train_pair(dataset: &CorrespondenceDataset, src: &str, dst: &str, cfg: &TrainConfig) -> Result<PairModel> {
    let x = dataset.get(src).map_err(|e| Error::Dataset(e.to_string()))?;
    let y = dataset.get(dst).map_err(|e| Error::Dataset(e.to_string()))?;
    let batch = cfg.resolve_batch(dataset.len())?;
    let mut model = PairModel::untrained(x.spec(), y.spec(), cfg)?;
    model.net.set_mode(Mode::Train);
    let mut adam = AdamState::for_models(&[&model.net], cfg.adam());
    let mut grads = Gradients::zeros_like(&model.net);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5B0F));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let mut rows = 0usize;
        for idx in epoch_batches(dataset.len(), batch, &mut rng) {
            let xb = x.values().select(Axis(0), &idx);
            let yb = y.values().select(Axis(0), &idx);
            let (pred, cache) = model.net.forward_train(xb.view())?;
            let (loss, g) = translation_loss(y.spec(), pred.view(), yb.view())?;
            grads.fill_zero();
            model.net.backward(g.view(), &cache, &mut grads)?;
            adam_step_models(&mut adam, &mut [&mut model.net], &[&grads])?;
            total += loss as f64 * idx.len() as f64;
            rows += idx.len();
        }
        epoch_losses.push(total / rows as f64);
    }
    model.net.set_mode(Mode::Eval);
    model.summary = Some(TrainSummary {
        config: cfg.clone(),
        batch,
        steps: adam.step_count(),
        epoch_losses,
    });
    Ok(model)
}

/// Eval-mode translation; binary targets are thresholded at 0.5.
pub fn translate(model: &PairModel, descs: &DescriptorMatrix) -> Result<DescriptorMatrix> {
    model.check_src(descs)?;
    let out = model.net.infer(descs.values().view())?;
    finalize(&model.dst, descs.patch_ids().to_vec(), out)
}
