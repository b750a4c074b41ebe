use crate::files::{
    load_bank, load_pair, load_xdsc, read_json, write_json, DatasetManifest, FileEntry, ImageEntry, ImageManifest,
    Report, SCHEMA_VERSION,
};
use crate::{
    CliError, Command, Common, EncodeArgs, EvalArgs, GenArgs, MatchArgs, MatchMode, ScenarioArgs, TrainBankArgs,
    TrainFlags, TrainPairArgs, TranslateArgs,
};
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use xdesc_core::bank::{encode, train_bank, translate_via_bank, ModelBank};
use xdesc_core::losses::{LossConfig, LossVariant};
use xdesc_core::matching::{match_descriptors, match_metrics, GroundTruth, MatchMetrics, MatchSet};
use xdesc_core::pair::{train_pair, translate, PairModel};
use xdesc_core::scenarios::{
    build_match_graph, build_tracks, correct_correspondences, covisibility_stats, default_hierarchy, MatchParams,
    Models, Strategy,
};
use xdesc_core::synthetic::{
    gen_dataset, gen_latents, gen_multiview, mix_seed, FamilyConfig, MultiviewConfig, SyntheticFamily, ViewAssignment,
};
use xdesc_core::train::TrainConfig;
use xdesc_core::{xdsc, CorrespondenceDataset, DescriptorMatrix};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    let start = Instant::now();
    let (mut report, common) = match cmd {
        Command::Gen(a) => (gen(&a)?, a.common),
        Command::TrainPair(a) => (train_pair_cmd(&a)?, a.common),
        Command::TrainBank(a) => (train_bank_cmd(&a)?, a.common),
        Command::Translate(a) => (translate_cmd(&a)?, a.common),
        Command::Encode(a) => (encode_cmd(&a)?, a.common),
        Command::Match(a) => (match_cmd(&a)?, a.common),
        Command::Scenario(a) => (scenario(&a)?, a.common),
        Command::Eval(a) => (eval(&a)?, a.common),
    };
    report.timing("total_s", start.elapsed().as_secs_f64());
    finish(&report, &common)
}

fn finish(report: &Report, common: &Common) -> Result<(), CliError> {
    if let Some(path) = &common.report {
        write_json(path, report)?;
    }
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn save_descs(m: &DescriptorMatrix, path: &Path, text: bool) -> Result<(), CliError> {
    xdsc::save(m, path, !text).map_err(|e| CliError::Core(format!("{}: {e}", path.display())))
}

fn train_config(f: &TrainFlags) -> TrainConfig {
    TrainConfig {
        seed: f.seed,
        epochs: f.epochs,
        batch: f.batch,
        lr: f.lr,
        hidden: f.hidden,
    }
}

fn gen(a: &GenArgs) -> Result<Report, CliError> {
    let mut report = Report::new("gen");
    let configs: Vec<FamilyConfig> = match &a.families {
        Some(p) => read_json(p)?,
        None => FamilyConfig::standard_four(a.family_seed),
    };
    let families = configs
        .iter()
        .map(|c| SyntheticFamily::new(c, a.latent_dim))
        .collect::<Result<Vec<_>, _>>()?;
    let noise_seed = a.noise_seed.unwrap_or_else(|| mix_seed(a.seed, 0x4015E));
    report
        .config("n", a.n)
        .config("seed", a.seed)
        .config("noise_seed", noise_seed)
        .config("latent_dim", a.latent_dim)
        .config("first_id", a.first_id)
        .config("families", &configs)
        .config("out", path_str(&a.out));
    let latents = gen_latents(a.n, a.latent_dim, a.seed, a.first_id)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;

    if let Some(n_views) = a.views {
        let cfg = MultiviewConfig {
            n_views,
            assignment: ViewAssignment::RoundRobin,
            visibility: a.visibility,
            seed: noise_seed,
        };
        report.config("views", n_views).config("visibility", a.visibility);
        let set = gen_multiview(&latents, &families, &cfg)?;
        let mut entries = Vec::new();
        for img in set.images() {
            let name = format!("view_{:03}.xdsc", img.image_id);
            save_descs(&img.descs, &a.out.join(&name), a.text)?;
            entries.push(ImageEntry {
                image_id: img.image_id,
                algo: img.algo.clone(),
                path: name,
            });
        }
        let manifest = ImageManifest {
            schema_version: SCHEMA_VERSION,
            kind: "images".into(),
            labels_from_patch_ids: true,
            images: entries,
        };
        write_json(&a.out.join("images.json"), &manifest)?;
        report
            .metric("images", set.images().len())
            .metric("ground_truth_pairs", set.ground_truth_pair_count());
        return Ok(report);
    }

    let ds = gen_dataset(&latents, &families, noise_seed)?;
    let mut files = Vec::new();
    for m in ds.sets() {
        let name = format!("{}.xdsc", m.spec().name());
        save_descs(m, &a.out.join(&name), a.text)?;
        files.push(FileEntry {
            algo: m.spec().name().to_string(),
            path: name,
        });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        kind: "dataset".into(),
        seed: a.seed,
        noise_seed,
        latent_dim: a.latent_dim,
        n: a.n,
        first_id: a.first_id,
        families: configs,
        files,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    report.metric("patches", ds.len()).metric("families", ds.sets().len());
    Ok(report)
}

fn train_pair_cmd(a: &TrainPairArgs) -> Result<Report, CliError> {
    let (_, ds) = DatasetManifest::load(&a.data)?;
    let cfg = train_config(&a.train);
    let mut report = Report::new("train-pair");
    report
        .config("data", path_str(&a.data))
        .config("src", &a.src)
        .config("dst", &a.dst)
        .config("train", &cfg)
        .config("out", path_str(&a.out));
    let t = Instant::now();
    let model = train_pair(&ds, &a.src, &a.dst, &cfg)?;
    report.timing("train_s", t.elapsed().as_secs_f64());
    model.save(&a.out)?;
    if let Some(s) = &model.summary {
        report
            .config("batch", s.batch)
            .metric("steps", s.steps)
            .metric("epoch_losses", &s.epoch_losses)
            .metric("final_loss", s.final_loss());
    }
    Ok(report)
}

fn train_bank_cmd(a: &TrainBankArgs) -> Result<Report, CliError> {
    let (_, ds) = DatasetManifest::load(&a.data)?;
    let specs = if a.algos.is_empty() {
        ds.algorithms().cloned().collect::<Vec<_>>()
    } else {
        a.algos
            .iter()
            .map(|n| ds.get(n).map(|m| m.spec().clone()))
            .collect::<Result<Vec<_>, _>>()?
    };
    let variant: LossVariant = a.variant.parse()?;
    let loss = LossConfig {
        alpha: a.alpha,
        margin: a.margin,
        variant,
        include_self_matching: !a.no_self_matching,
    };
    let cfg = train_config(&a.train);
    let mut report = Report::new("train-bank");
    report
        .config("data", path_str(&a.data))
        .config("algos", specs.iter().map(|s| s.name()).collect::<Vec<_>>())
        .config("loss", loss)
        .config("embed_dim", a.embed_dim)
        .config("train", &cfg)
        .config("out", path_str(&a.out));
    let t = Instant::now();
    let bank = train_bank(&ds, &specs, a.embed_dim, &loss, &cfg)?;
    report.timing("train_s", t.elapsed().as_secs_f64());
    bank.save(&a.out)?;
    if let Some(s) = bank.summary() {
        report
            .config("batch", s.batch)
            .metric("steps", s.steps)
            .metric("epoch_losses", &s.epoch_losses)
            .metric("final_loss", s.final_loss());
    }
    report.metric("networks", bank.network_count());
    Ok(report)
}

fn translate_cmd(a: &TranslateArgs) -> Result<Report, CliError> {
    let input = load_xdsc(&a.input)?;
    let mut report = Report::new("translate");
    report.config("in", path_str(&a.input)).config("out", path_str(&a.out));
    let out = match (&a.model, &a.bank) {
        (Some(m), _) => {
            report.config("model", path_str(m));
            translate(&load_pair(m)?, &input)?
        }
        (None, Some(b)) => {
            let to = a.to.as_deref().expect("clap requires --to with --bank");
            report.config("bank", path_str(b)).config("to", to);
            let bank = load_bank(b)?;
            translate_via_bank(&bank, input.spec().name(), to, &input)?
        }
        (None, None) => unreachable!("clap requires --model or --bank"),
    };
    save_descs(&out, &a.out, a.text)?;
    report
        .metric("rows", out.len())
        .metric("src", input.spec().name())
        .metric("dst", out.spec().name());
    Ok(report)
}

fn encode_cmd(a: &EncodeArgs) -> Result<Report, CliError> {
    let input = load_xdsc(&a.input)?;
    let bank = load_bank(&a.bank)?;
    let algo = a.algo.clone().unwrap_or_else(|| input.spec().name().to_string());
    let z = encode(&bank, &algo, &input)?;
    save_descs(&z, &a.out, a.text)?;
    let mut report = Report::new("encode");
    report
        .config("bank", path_str(&a.bank))
        .config("algo", &algo)
        .config("in", path_str(&a.input))
        .config("out", path_str(&a.out))
        .metric("rows", z.len())
        .metric("embed_dim", bank.embed_dim());
    Ok(report)
}

enum Translator {
    None,
    Bank(ModelBank),
    Pair(PairModel),
}

impl Translator {
    fn load(bank: &Option<std::path::PathBuf>, model: &Option<std::path::PathBuf>) -> Result<Self, CliError> {
        Ok(match (bank, model) {
            (Some(b), _) => Translator::Bank(load_bank(b)?),
            (None, Some(m)) => Translator::Pair(load_pair(m)?),
            (None, None) => Translator::None,
        })
    }

    /// Brings `a` and `b` into one space under `mode`, then matches.
    fn match_pair(
        &self,
        mode: MatchMode,
        a: &DescriptorMatrix,
        b: &DescriptorMatrix,
        ratio: f32,
    ) -> Result<MatchSet, CliError> {
        let m = match (mode, self) {
            (MatchMode::Naive, _) => match_descriptors(a, b, ratio)?,
            (MatchMode::Embed, Translator::Bank(bank)) => {
                let ea = encode(bank, a.spec().name(), a)?;
                let eb = encode(bank, b.spec().name(), b)?;
                match_descriptors(&ea, &eb, ratio)?
            }
            (MatchMode::Embed, _) => return Err(CliError::Input("--mode embed needs --bank".into())),
            (MatchMode::Translate, Translator::Bank(bank)) => {
                let ta = translate_via_bank(bank, a.spec().name(), b.spec().name(), a)?;
                match_descriptors(&ta, b, ratio)?
            }
            (MatchMode::Translate, Translator::Pair(p)) => {
                if p.dst.name() != b.spec().name() {
                    return Err(CliError::Input(format!(
                        "model translates to {} but the second set is {}",
                        p.dst.name(),
                        b.spec().name()
                    )));
                }
                match_descriptors(&translate(p, a)?, b, ratio)?
            }
            (MatchMode::Translate, Translator::None) => {
                return Err(CliError::Input("--mode translate needs --bank or --model".into()))
            }
        };
        Ok(m)
    }
}

fn patch_metrics(m: &MatchSet, a: &DescriptorMatrix, b: &DescriptorMatrix) -> MatchMetrics {
    match_metrics(m, &GroundTruth::from_labels(a.patch_ids(), b.patch_ids()))
}

fn match_cmd(a: &MatchArgs) -> Result<Report, CliError> {
    let da = load_xdsc(&a.a)?;
    let db = load_xdsc(&a.b)?;
    let tr = Translator::load(&a.bank, &a.model)?;
    let mut report = Report::new("match");
    report
        .config("a", path_str(&a.a))
        .config("b", path_str(&a.b))
        .config("mode", format!("{:?}", a.mode).to_lowercase())
        .config("ratio", a.ratio)
        .config("bank", a.bank.as_deref().map(path_str))
        .config("model", a.model.as_deref().map(path_str));
    let matches = tr.match_pair(a.mode, &da, &db, a.ratio as f32)?;
    if let Some(out) = &a.out {
        let f = std::fs::File::create(out).map_err(|e| CliError::io(out, e))?;
        let mut w = std::io::BufWriter::new(f);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "index_a\tindex_b\tdistance")?;
            for m in &matches.pairs {
                writeln!(w, "{}\t{}\t{}", m.index_a, m.index_b, m.distance)?;
            }
            w.flush()
        };
        write().map_err(|e| CliError::io(out, e))?;
        report.config("out", path_str(out));
    }
    report.metric("matches", patch_metrics(&matches, &da, &db));
    Ok(report)
}

fn scenario(a: &ScenarioArgs) -> Result<Report, CliError> {
    let set = ImageManifest::load(&a.manifest)?;
    let strategy: Strategy = a.strategy.parse()?;
    let bank = a.bank.as_ref().map(|p| load_bank(p)).transpose()?;
    let pairs = a.model.iter().map(|p| load_pair(p)).collect::<Result<Vec<_>, _>>()?;
    let params = MatchParams {
        ratio: a.ratio as f32,
        hierarchy: if a.hierarchy.is_empty() {
            default_hierarchy()
        } else {
            a.hierarchy.clone()
        },
    };
    let mut report = Report::new("scenario");
    report
        .config("manifest", path_str(&a.manifest))
        .config("strategy", strategy.as_str())
        .config("bank", a.bank.as_deref().map(path_str))
        .config("models", a.model.iter().map(|p| path_str(p)).collect::<Vec<_>>())
        .config("ratio", a.ratio)
        .config("hierarchy", &params.hierarchy);
    let models = Models {
        bank: bank.as_ref(),
        pairs: &pairs,
    };
    let t = Instant::now();
    let graph = build_match_graph(&set, strategy, models, &params)?;
    report.timing("match_s", t.elapsed().as_secs_f64());
    let tracks = build_tracks(&set, &graph)?;

    let mut algorithms: Vec<String> = Vec::new();
    for img in set.images() {
        if !algorithms.contains(&img.algo) {
            algorithms.push(img.algo.clone());
        }
    }
    let total: usize = graph.iter().map(|p| p.matches.len()).sum();
    report
        .metric("image_pairs", graph.len())
        .metric("skipped_pairs", graph.iter().filter(|p| p.skipped).count())
        .metric("translations", graph.iter().filter(|p| p.translated.is_some()).count())
        .metric("matches", total)
        .metric("tracks", tracks.len());
    if set.ground_truth().is_some() {
        report
            .metric("correct_matches", correct_correspondences(&set, &graph)?)
            .metric("ground_truth_pairs", set.ground_truth_pair_count());
        if !tracks.is_empty() {
            report.metric("track_purity", tracks.purity(&set)?);
        }
    }
    let stats = covisibility_stats(&tracks, &algorithms)?;
    report
        .metric("multi_algorithm_share", stats.multi_algorithm_share())
        .metric("histogram", &stats.histogram);
    if let Some(out) = &a.stats_out {
        write_json(out, &stats)?;
        report.config("stats_out", path_str(out));
    }
    Ok(report)
}

#[derive(Serialize)]
struct PairRecall {
    src: String,
    dst: String,
    skipped: bool,
    #[serde(flatten)]
    metrics: MatchMetrics,
}

fn eval(a: &EvalArgs) -> Result<Report, CliError> {
    let (_, qa) = DatasetManifest::load(&a.data)?;
    let qb: CorrespondenceDataset = match &a.data_b {
        Some(p) => DatasetManifest::load(p)?.1,
        None => qa.clone(),
    };
    let tr = Translator::load(&a.bank, &a.model)?;
    let mut report = Report::new("eval");
    report
        .config("data", path_str(&a.data))
        .config("data_b", a.data_b.as_deref().map(path_str))
        .config("mode", format!("{:?}", a.mode).to_lowercase())
        .config("bank", a.bank.as_deref().map(path_str))
        .config("model", a.model.as_deref().map(path_str))
        .config("ratio", a.ratio);

    let ordered: Vec<(String, String)> = match &tr {
        Translator::Pair(p) => vec![(p.src.name().to_string(), p.dst.name().to_string())],
        Translator::Bank(b) => {
            let names: Vec<&str> = b.algorithms().iter().map(|s| s.name()).collect();
            names
                .iter()
                .flat_map(|x| names.iter().map(move |y| (x.to_string(), y.to_string())))
                .collect()
        }
        Translator::None => {
            let names: Vec<&str> = qa.algorithms().map(|s| s.name()).collect();
            names
                .iter()
                .flat_map(|x| names.iter().map(move |y| (x.to_string(), y.to_string())))
                .collect()
        }
    };
    let mut rows = Vec::with_capacity(ordered.len());
    for (src, dst) in ordered {
        let (da, db) = (qa.get(&src)?, qb.get(&dst)?);
        let naive_incompatible = a.mode == MatchMode::Naive && !da.spec().compatible_with(db.spec());
        let metrics = if naive_incompatible {
            patch_metrics(
                &MatchSet {
                    pairs: Vec::new(),
                    metric: da.spec().metric(),
                    ratio: Some(a.ratio as f32),
                },
                da,
                db,
            )
        } else {
            patch_metrics(&tr.match_pair(a.mode, da, db, a.ratio as f32)?, da, db)
        };
        rows.push(PairRecall {
            src,
            dst,
            skipped: naive_incompatible,
            metrics,
        });
    }
    let cross = rows.iter().filter(|r| r.src != r.dst).map(|r| r.metrics.recall);
    let same = rows.iter().filter(|r| r.src == r.dst).map(|r| r.metrics.recall);
    report
        .metric("worst_cross_recall", cross.clone().reduce(f64::min))
        .metric("best_cross_recall", cross.reduce(f64::max))
        .metric("worst_same_recall", same.reduce(f64::min))
        .metric("pairs", &rows);
    Ok(report)
}
