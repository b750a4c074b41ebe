//! The encoder-decoder bank: one encoder and one decoder per family around a
//! shared unit-norm joint space.

use crate::descriptor::{AlgorithmSpec, CorrespondenceDataset, DescriptorMatrix, OutputNorm};
use crate::error::{Error, Result};
use crate::losses::{pair_weights, triplet_loss_hardest, LossConfig, LossVariant};
use crate::mlp::{adam_step_models, build_mlp, AdamState, ByteReader, Cache, Gradients, Head, Mlp, Mode};
use crate::pair::{finalize, translation_loss, TrainSummary};
use crate::synthetic::mix_seed;
use crate::train::{epoch_batches, head_for, TrainConfig};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_EMBED_DIM: usize = 128;
/// Name of the spec attached to encoded descriptors.
pub const JOINT_NAME: &str = "joint";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBank {
    algorithms: Vec<AlgorithmSpec>,
    encoders: Vec<Mlp<f32>>,
    decoders: Vec<Mlp<f32>>,
    embed_dim: usize,
    loss_cfg: LossConfig,
    summary: Option<TrainSummary>,
}

/// Per-pair loss terms of a bank evaluated on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct BankObjective {
    /// `translation[[i, j]]` is the loss of `D_j(E_i(x_i))` against `x_j`.
    pub translation: Array2<f64>,
    /// `matching[[i, j]]` is the triplet loss between `E_i` and `E_j`.
    pub matching: Array2<f64>,
    /// Translation part of the aggregated objective.
    pub translation_total: f64,
    /// Matching part, before multiplying by `alpha`.
    pub matching_total: f64,
    pub total: f64,
}

impl ModelBank {
    /// Seeded, untrained bank with the architecture `train_bank` would use.
    pub fn untrained(
        specs: &[AlgorithmSpec],
        embed_dim: usize,
        loss_cfg: LossConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("a bank needs at least one algorithm".into()));
        }
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        loss_cfg.validate()?;
        for (k, s) in specs.iter().enumerate() {
            if specs[..k].iter().any(|o| o.name() == s.name()) {
                return Err(Error::Config(format!("algorithm {} listed twice", s.name())));
            }
        }
        let mut encoders = Vec::with_capacity(specs.len());
        let mut decoders = Vec::with_capacity(specs.len());
        for (k, s) in specs.iter().enumerate() {
            let hidden = cfg.hidden_for(s);
            let mut e = build_mlp(
                s.dim(),
                &hidden,
                embed_dim,
                Head::UnitL2,
                mix_seed(cfg.seed, 0xE0 + 2 * k as u64),
            )?;
            let mut d = build_mlp(
                embed_dim,
                &hidden,
                s.dim(),
                head_for(s),
                mix_seed(cfg.seed, 0xE1 + 2 * k as u64),
            )?;
            e.set_mode(Mode::Eval);
            d.set_mode(Mode::Eval);
            encoders.push(e);
            decoders.push(d);
        }
        Ok(ModelBank {
            algorithms: specs.to_vec(),
            encoders,
            decoders,
            embed_dim,
            loss_cfg,
            summary: None,
        })
    }

    pub fn algorithms(&self) -> &[AlgorithmSpec] {
        &self.algorithms
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss_cfg
    }

    pub fn summary(&self) -> Option<&TrainSummary> {
        self.summary.as_ref()
    }

    pub fn encoder(&self, algo: &str) -> Result<&Mlp<f32>> {
        Ok(&self.encoders[self.index_of(algo)?])
    }

    pub fn decoder(&self, algo: &str) -> Result<&Mlp<f32>> {
        Ok(&self.decoders[self.index_of(algo)?])
    }

    /// Number of trained networks, `2 |A|`.
    pub fn network_count(&self) -> usize {
        self.encoders.len() + self.decoders.len()
    }

    pub fn has(&self, algo: &str) -> bool {
        self.algorithms.iter().any(|s| s.name() == algo)
    }

    pub fn spec(&self, algo: &str) -> Result<&AlgorithmSpec> {
        Ok(&self.algorithms[self.index_of(algo)?])
    }

    fn index_of(&self, algo: &str) -> Result<usize> {
        self.algorithms
            .iter()
            .position(|s| s.name() == algo)
            .ok_or_else(|| Error::Spec(format!("bank has no algorithm {algo:?}")))
    }

    /// Spec of encoded descriptors.
    pub fn joint_spec(&self) -> AlgorithmSpec {
        AlgorithmSpec::real(JOINT_NAME, self.embed_dim, OutputNorm::UnitL2).expect("valid joint spec")
    }

    /// Evaluates every per-pair loss term in eval mode on `dataset`, and the
    /// objective aggregated under the bank's loss configuration. `sigma` is
    /// the permutation for the linear variant.
    pub fn objective(&self, dataset: &CorrespondenceDataset, sigma: Option<&[usize]>) -> Result<BankObjective> {
        let n = self.algorithms.len();
        let xs = self.aligned_inputs(dataset)?;
        let zs: Vec<Array2<f32>> = (0..n)
            .map(|i| self.encoders[i].infer(xs[i].view()))
            .collect::<Result<_>>()?;
        let mut translation = Array2::zeros((n, n));
        let mut matching = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let pred = self.decoders[j].infer(zs[i].view())?;
                translation[[i, j]] = translation_loss(&self.algorithms[j], pred.view(), xs[j].view())?.0 as f64;
                matching[[i, j]] =
                    triplet_loss_hardest(zs[i].view(), zs[j].view(), self.loss_cfg.margin as f32)?.value as f64;
            }
        }
        let weights = pair_weights(n, &self.loss_cfg, sigma)?;
        let translation_total = weights
            .iter()
            .map(|w| w.translation * translation[[w.src, w.dst]])
            .sum();
        let matching_total = weights.iter().map(|w| w.matching * matching[[w.src, w.dst]]).sum();
        Ok(BankObjective {
            translation,
            matching,
            translation_total,
            matching_total,
            total: translation_total + self.loss_cfg.alpha * matching_total,
        })
    }

    fn aligned_inputs(&self, dataset: &CorrespondenceDataset) -> Result<Vec<Array2<f32>>> {
        self.algorithms
            .iter()
            .map(|s| {
                let m = dataset.get(s.name()).map_err(|e| Error::Dataset(e.to_string()))?;
                if m.spec() != s {
                    return Err(Error::Dataset(format!(
                        "dataset holds {} where the bank expects {}",
                        m.spec(),
                        s
                    )));
                }
                Ok(m.values().clone())
            })
            .collect()
    }
}

/// Trains all encoders and decoders jointly on `L = L^T + alpha L^M`.
pub fn train_bank(
    dataset: &CorrespondenceDataset,
    specs: &[AlgorithmSpec],
    embed_dim: usize,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<ModelBank> {
    let mut bank = ModelBank::untrained(specs, embed_dim, *loss_cfg, cfg)?;
    let xs = bank.aligned_inputs(dataset)?;
    let batch = cfg.resolve_batch(dataset.len())?;
    let n = specs.len();
    for m in bank.encoders.iter_mut().chain(bank.decoders.iter_mut()) {
        m.set_mode(Mode::Train);
    }
    let mut adam = {
        let all: Vec<&Mlp<f32>> = bank.encoders.iter().chain(bank.decoders.iter()).collect();
        AdamState::for_models(&all, cfg.adam())
    };
    let mut enc_grads: Vec<Gradients<f32>> = bank.encoders.iter().map(Gradients::zeros_like).collect();
    let mut dec_grads: Vec<Gradients<f32>> = bank.decoders.iter().map(Gradients::zeros_like).collect();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xBA7C));
    let mut sigma_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x516A));
    let alpha = loss_cfg.alpha as f32;
    let margin = loss_cfg.margin as f32;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (mut total, mut rows) = (0.0, 0usize);
        for idx in epoch_batches(dataset.len(), batch, &mut batch_rng) {
            let xb: Vec<Array2<f32>> = xs.iter().map(|x| x.select(Axis(0), &idx)).collect();
            let mut zs = Vec::with_capacity(n);
            let mut enc_caches: Vec<Cache<f32>> = Vec::with_capacity(n);
            for (enc, x) in bank.encoders.iter_mut().zip(&xb) {
                let (z, c) = enc.forward_train(x.view())?;
                zs.push(z);
                enc_caches.push(c);
            }
            let sigma = (loss_cfg.variant == LossVariant::Linear).then(|| {
                let mut s: Vec<usize> = (0..n).collect();
                s.shuffle(&mut sigma_rng);
                s
            });
            let weights = pair_weights(n, loss_cfg, sigma.as_deref())?;
            let mut grad_z: Vec<Array2<f32>> = zs.iter().map(|z| Array2::zeros(z.dim())).collect();
            for g in enc_grads.iter_mut().chain(dec_grads.iter_mut()) {
                g.fill_zero();
            }
            let mut objective = 0.0f64;
            for w in &weights {
                if w.translation > 0.0 {
                    let dec = &mut bank.decoders[w.dst];
                    let (pred, cache) = dec.forward_train(zs[w.src].view())?;
                    let (loss, mut g) = translation_loss(&specs[w.dst], pred.view(), xb[w.dst].view())?;
                    g *= w.translation as f32;
                    let dz = dec.backward(g.view(), &cache, &mut dec_grads[w.dst])?;
                    grad_z[w.src] += &dz;
                    objective += w.translation * loss as f64;
                }
                if w.matching > 0.0 && alpha > 0.0 {
                    let t = triplet_loss_hardest(zs[w.src].view(), zs[w.dst].view(), margin)?;
                    let s = alpha * w.matching as f32;
                    grad_z[w.src].scaled_add(s, &t.grad_i);
                    grad_z[w.dst].scaled_add(s, &t.grad_j);
                    objective += s as f64 * t.value as f64;
                }
            }
            for k in 0..n {
                bank.encoders[k].backward(grad_z[k].view(), &enc_caches[k], &mut enc_grads[k])?;
            }
            {
                let mut models: Vec<&mut Mlp<f32>> = bank.encoders.iter_mut().chain(bank.decoders.iter_mut()).collect();
                let grads: Vec<&Gradients<f32>> = enc_grads.iter().chain(dec_grads.iter()).collect();
                adam_step_models(&mut adam, &mut models, &grads)?;
            }
            total += objective * idx.len() as f64;
            rows += idx.len();
        }
        epoch_losses.push(total / rows as f64);
    }
    for m in bank.encoders.iter_mut().chain(bank.decoders.iter_mut()) {
        m.set_mode(Mode::Eval);
    }
    bank.summary = Some(TrainSummary {
        config: cfg.clone(),
        batch,
        steps: adam.step_count(),
        epoch_losses,
    });
    Ok(bank)
}

fn check_family(bank: &ModelBank, algo: &str, descs: &DescriptorMatrix) -> Result<usize> {
    let k = bank.index_of(algo)?;
    if descs.spec() != &bank.algorithms[k] {
        return Err(Error::Spec(format!(
            "bank expects {} descriptors for {algo}, input is {}",
            bank.algorithms[k],
            descs.spec()
        )));
    }
    Ok(k)
}

/// Maps descriptors of `algo` into the joint space. Rows are unit-norm.
pub fn encode(bank: &ModelBank, algo: &str, descs: &DescriptorMatrix) -> Result<DescriptorMatrix> {
    let k = check_family(bank, algo, descs)?;
    let z = bank.encoders[k].infer(descs.values().view())?;
    DescriptorMatrix::new(bank.joint_spec(), descs.patch_ids().to_vec(), z)
}

/// Maps joint-space rows to descriptors of `algo`.
pub fn decode(bank: &ModelBank, algo: &str, embeddings: &DescriptorMatrix) -> Result<DescriptorMatrix> {
    let k = bank.index_of(algo)?;
    let z = embeddings.values();
    if z.ncols() != bank.embed_dim {
        return Err(Error::Shape(format!(
            "embedding width {} does not match embed_dim {}",
            z.ncols(),
            bank.embed_dim
        )));
    }
    let out = bank.decoders[k].infer(z.view())?;
    finalize(&bank.algorithms[k], embeddings.patch_ids().to_vec(), out)
}

/// `D_dst(E_src(descs))`.
pub fn translate_via_bank(
    bank: &ModelBank,
    src: &str,
    dst: &str,
    descs: &DescriptorMatrix,
) -> Result<DescriptorMatrix> {
    decode(bank, dst, &encode(bank, src, descs)?)
}

// XBNK v1 layout (little endian):
//   magic "XBNK", u32 version, u32 manifest length + manifest JSON,
//   then per algorithm in manifest order: u32 length + encoder XMLP,
//   u32 length + decoder XMLP.
const XBNK_MAGIC: &[u8; 4] = b"XBNK";
const XBNK_VERSION: u32 = 1;
const XBNK: &str = "XBNK";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    algorithms: Vec<AlgorithmSpec>,
    embed_dim: usize,
    loss: LossConfig,
    summary: Option<TrainSummary>,
}

impl ModelBank {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&Manifest {
            algorithms: self.algorithms.clone(),
            embed_dim: self.embed_dim,
            loss: self.loss_cfg,
            summary: self.summary.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(XBNK_MAGIC);
        out.extend_from_slice(&XBNK_VERSION.to_le_bytes());
        let mut blob = |bytes: &[u8]| {
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        };
        blob(&manifest);
        for (e, d) in self.encoders.iter().zip(&self.decoders) {
            blob(&e.to_xmlp(""));
            blob(&d.to_xmlp(""));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(XBNK, bytes);
        if r.take(4, "magic")? != XBNK_MAGIC {
            return Err(Error::format(XBNK, "magic", "not an XBNK file"));
        }
        let version = r.u32("version")?;
        if version != XBNK_VERSION {
            return Err(Error::format(XBNK, "version", format!("unsupported version {version}")));
        }
        let len = r.u32("manifest length")? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
            .map_err(|e| Error::format(XBNK, "manifest", e.to_string()))?;
        if manifest.algorithms.is_empty() || manifest.embed_dim == 0 {
            return Err(Error::format(XBNK, "manifest", "empty bank"));
        }
        manifest
            .loss
            .validate()
            .map_err(|e| Error::format(XBNK, "manifest", e.to_string()))?;
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for s in &manifest.algorithms {
            for (role, into) in [("encoder", &mut encoders), ("decoder", &mut decoders)] {
                let field = format!("{role} {}", s.name());
                let len = r.u32(&field)? as usize;
                let (mut net, _) =
                    Mlp::from_xmlp(r.take(len, &field)?).map_err(|e| Error::format(XBNK, &field, e.to_string()))?;
                let (want_in, want_out) = if role == "encoder" {
                    (s.dim(), manifest.embed_dim)
                } else {
                    (manifest.embed_dim, s.dim())
                };
                if net.in_dim() != want_in || net.out_dim() != want_out {
                    return Err(Error::format(
                        XBNK,
                        &field,
                        format!(
                            "dims {}->{} expected {want_in}->{want_out}",
                            net.in_dim(),
                            net.out_dim()
                        ),
                    ));
                }
                net.set_mode(Mode::Eval);
                into.push(net);
            }
        }
        if !r.at_end() {
            return Err(Error::format(
                XBNK,
                "trailing bytes",
                format!("{} unread bytes", bytes.len() - r.pos),
            ));
        }
        Ok(ModelBank {
            algorithms: manifest.algorithms,
            encoders,
            decoders,
            embed_dim: manifest.embed_dim,
            loss_cfg: manifest.loss,
            summary: manifest.summary,
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
