//! Subcommand bodies. Each one loads its inputs, calls into the core crate and
//! writes a report plus its tabular and image artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::SystemTime;

use connlens::analysis::{
    correlate_loss_scores, mask_split_loss, quartile_compare, top_k_cells, LossScoreCorrelation, MaskSet, MaskSplit,
    QuartileComparison, ScoreTable,
};
use connlens::embstore::{compute_norm_stats, load, write_container, EmbeddingSet, Space};
use connlens::geometry::{knor_multi, read_labels, retrieval_eval, KnorReport, Metric, Pooling, RetrievalReport};
use connlens::heatmap::{grid_from_csv, Heatmap};
use connlens::pnm::{read_ppm, write_ppm};
use connlens::procrustes::{align_report, AlignmentReport};
use connlens::recon::loss::write_sample_losses;
use connlens::recon::{
    capacity_warning, evaluate, load_model, save_model, train, write_history, Arch, EpochRecord, ModelConfig,
    PatchLossMap, TrainerConfig,
};
use connlens::report::{InputDigest, Report, ReportMeta};
use connlens::synth::{generate, write_labels, SynthSpec};
use connlens::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::Context;
use crate::{
    Command, CorrelateArgs, HeatmapArgs, KnorArgs, ProcrustesArgs, ReconEvalArgs, ReconTrainArgs, RetrieveArgs,
    SynthArgs,
};

pub const DEFAULT_KNOR_KS: [usize; 3] = [10, 50, 100];
pub const DEFAULT_RECALL_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_MLP_HIDDEN: usize = 2048;
pub const DEFAULT_SEQREG_WIDTH: usize = 2048;

pub fn run(ctx: &Context, command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(ctx, a),
        Command::Knor(a) => knor(ctx, a),
        Command::Retrieve(a) => retrieve(ctx, a),
        Command::ReconTrain(a) => recon_train(ctx, a),
        Command::ReconEval(a) => recon_eval(ctx, a),
        Command::Procrustes(a) => procrustes(ctx, a),
        Command::Correlate(a) => correlate(ctx, a),
        Command::Heatmap(a) => heatmap(ctx, a),
    }
}

fn emit<T: Serialize>(ctx: &Context, meta: ReportMeta, result: T, started: SystemTime) -> Result<()> {
    let path = ctx.out(&format!("{}.json", meta.command));
    for w in &meta.warnings {
        eprintln!("warning: {w}");
    }
    Report::new(meta, result, started).write(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig(format!("k values must be at least 1, got {ks:?}")));
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn finish(mut w: csv::Writer<fs::File>) -> Result<()> {
    w.flush().map_err(Error::Io)
}

#[derive(Serialize)]
struct SynthResult {
    spec: SynthSpec,
    output: InputDigest,
    labels: Option<String>,
    s_pre: usize,
    s_post: usize,
}

fn synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    let started = SystemTime::now();
    let mut spec = SynthSpec::new(a.kind, a.n, a.m1, a.m2, a.d_pre, a.d_post).with_seed(ctx.seed);
    if let Some(c) = a.classes {
        spec = spec.with_classes(c);
    }
    if let Some(noise) = a.noise {
        spec = spec.with_noise(noise);
    }
    let out = generate(&spec)?;
    let path = a
        .out
        .clone()
        .unwrap_or_else(|| ctx.out(&format!("synth-{}.embd", a.kind)));
    write_container(&out.set, &path)?;
    let labels = match &out.labels {
        Some(l) => {
            let p = ctx.out("labels.csv");
            write_labels(l, &p)?;
            Some(p.display().to_string())
        }
        None => None,
    };
    let meta = ReportMeta::new("synth", ctx.seed, serde_json::to_value(&spec)?);
    let result = SynthResult {
        output: InputDigest::of(&path)?,
        labels,
        s_pre: spec.s_pre(),
        s_post: spec.s_post(),
        spec,
    };
    emit(ctx, meta, result, started)
}

#[derive(Serialize)]
struct KnorResult {
    n: usize,
    averages: BTreeMap<usize, f64>,
    reports: Vec<KnorReport>,
}

fn knor(ctx: &Context, a: &KnorArgs) -> Result<()> {
    let started = SystemTime::now();
    let ks = if !a.ks.is_empty() {
        a.ks.clone()
    } else {
        ctx.file.ks.clone().unwrap_or_else(|| DEFAULT_KNOR_KS.to_vec())
    };
    check_ks(&ks)?;
    let metric = a.metric.or(ctx.file.metric).unwrap_or(Metric::L2);
    let pooling = a.pooling.or(ctx.file.pooling).unwrap_or(Pooling::Mean);
    let set = load(&a.input)?;
    let meta = ReportMeta::new(
        "knor",
        ctx.seed,
        json!({"input": a.input, "ks": ks, "metric": metric, "pooling": pooling}),
    )
    .with_input(&a.input)?;
    let reports = knor_multi(&set, &ks, metric, pooling)?;

    let mut w = csv_writer(&ctx.out("knor_per_sample.csv"))?;
    w.write_record(["id", "k", "shared", "ratio"])?;
    for r in &reports {
        for s in &r.per_sample {
            w.write_record([
                s.id.clone(),
                r.k.to_string(),
                s.shared.to_string(),
                format!("{:?}", s.ratio),
            ])?;
        }
    }
    finish(w)?;

    let result = KnorResult {
        n: set.len(),
        averages: reports.iter().map(|r| (r.k, r.average)).collect(),
        reports,
    };
    emit(ctx, meta, result, started)
}

fn retrieve(ctx: &Context, a: &RetrieveArgs) -> Result<()> {
    let started = SystemTime::now();
    let ks = if a.ks.is_empty() {
        DEFAULT_RECALL_KS.to_vec()
    } else {
        a.ks.clone()
    };
    check_ks(&ks)?;
    let metrics = match a.metric.or(ctx.file.metric) {
        Some(m) => vec![m],
        None => vec![Metric::L2, Metric::Ip],
    };
    let set = load(&a.input)?;
    let labels = read_labels(&a.labels)?;
    let meta = ReportMeta::new(
        "retrieve",
        ctx.seed,
        json!({"input": a.input, "labels": a.labels, "ks": ks, "metrics": metrics}),
    )
    .with_input(&a.input)?
    .with_input(&a.labels)?;
    let mut reports: Vec<RetrievalReport> = Vec::new();
    for &metric in &metrics {
        for space in [Space::Pre, Space::Post] {
            reports.push(retrieval_eval(&set, &labels, metric, space, &ks)?);
        }
    }

    let mut w = csv_writer(&ctx.out("retrieval.csv"))?;
    w.write_record(["space", "metric", "k", "recall"])?;
    for r in &reports {
        for (k, v) in &r.recall {
            w.write_record([
                r.space.to_string(),
                r.metric.to_string(),
                k.to_string(),
                format!("{v:?}"),
            ])?;
        }
    }
    finish(w)?;
    emit(ctx, meta, reports, started)
}

/// Seeded hold-out: shuffles row indices and takes `ceil(frac·n)` of them for validation.
fn split_rows(n: usize, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidConfig(format!("--val-frac {frac} must lie in (0, 1)")));
    }
    let n_val = ((frac * n as f64).ceil() as usize).max(1);
    if n_val >= n {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..n_val].to_vec();
    let mut tr = order[n_val..].to_vec();
    val.sort_unstable();
    tr.sort_unstable();
    Ok((tr, val))
}

fn model_config(ctx: &Context, a: &ReconTrainArgs, set: &EmbeddingSet) -> ModelConfig {
    let d = &ctx.file.model;
    let m = &a.model;
    let dims = set.dims();
    let arch = m.arch.or(d.arch).unwrap_or(Arch::Mlp);
    let mut cfg = match arch {
        Arch::Mlp => {
            let hidden = if m.hidden.is_empty() {
                d.hidden.clone().unwrap_or_else(|| vec![DEFAULT_MLP_HIDDEN])
            } else {
                m.hidden.clone()
            };
            ModelConfig::mlp(dims.d_post, dims.d_pre, dims.s_pre, hidden)
        }
        Arch::Seqreg => {
            let width = m.width.or(d.width).unwrap_or(DEFAULT_SEQREG_WIDTH);
            let base = ModelConfig::seqreg(dims.d_post, dims.d_pre, dims.s_post, dims.s_pre, width);
            let layers = m.layers.or(d.layers).unwrap_or(base.layers);
            let heads = m.heads.or(d.heads).unwrap_or(base.heads);
            let ff = m.ff_dim.or(d.ff_dim).unwrap_or(base.ff_dim);
            base.with_depth(layers, heads, ff)
        }
    };
    if let Some(act) = m.activation.or(d.activation) {
        cfg = cfg.with_activation(act);
    }
    cfg
}

fn trainer_config(ctx: &Context, a: &ReconTrainArgs) -> TrainerConfig {
    let mut cfg = ctx.file.trainer.clone().unwrap_or_default();
    let t = &a.trainer;
    if let Some(v) = t.lr {
        cfg.lr = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = t.patience {
        cfg.patience = v;
    }
    if let Some(v) = t.dropout {
        cfg.dropout = v;
    }
    cfg.seed = ctx.seed;
    cfg
}

#[derive(Serialize)]
struct TrainResult {
    model: ModelConfig,
    param_count: usize,
    train_samples: usize,
    val_samples: usize,
    val_ids: Vec<String>,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_val_loss: f64,
    stopped_early: bool,
    checkpoint: InputDigest,
}

fn recon_train(ctx: &Context, a: &ReconTrainArgs) -> Result<()> {
    let started = SystemTime::now();
    let set = load(&a.input)?;
    let (train_set, val_set) = match &a.val {
        Some(p) => (set, load(p)?),
        None => {
            let (tr, val) = split_rows(set.len(), a.val_frac, ctx.seed)?;
            (set.subset(&tr)?, set.subset(&val)?)
        }
    };
    let model_cfg = model_config(ctx, a, &train_set);
    let trainer_cfg = trainer_config(ctx, a);
    let mut meta = ReportMeta::new(
        "recon-train",
        ctx.seed,
        json!({
            "input": a.input,
            "val": a.val,
            "val_frac": a.val.is_none().then_some(a.val_frac),
            "model": model_cfg,
            "trainer": trainer_cfg,
            "connector_params": a.connector_params,
        }),
    )
    .with_input(&a.input)?;
    if let Some(p) = &a.val {
        meta = meta.with_input(p)?;
    }
    if let Some(w) = capacity_warning(&model_cfg, a.connector_params) {
        meta.warnings.push(w);
    }

    let outcome = train(&train_set, &val_set, model_cfg, &trainer_cfg)?;
    let ckpt = ctx.out("model.rcpt");
    save_model(&outcome.model, Some(&outcome.norms), &ckpt)?;
    write_history(&outcome.history, ctx.out("history.csv"))?;
    let result = TrainResult {
        model: outcome.model.config().clone(),
        param_count: outcome.model.param_count(),
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        val_ids: val_set.ids().to_vec(),
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        stopped_early: outcome.stopped_early,
        checkpoint: InputDigest::of(&ckpt)?,
    };
    emit(ctx, meta, result, started)
}

#[derive(Serialize)]
struct EvalResult {
    n: usize,
    patches_per_sample: usize,
    total: f64,
    mean_sample_loss: f64,
    per_sample: Vec<SampleLoss>,
    loss_maps: String,
}

#[derive(Serialize)]
struct SampleLoss {
    id: String,
    mean_loss: f64,
}

fn recon_eval(ctx: &Context, a: &ReconEvalArgs) -> Result<()> {
    let started = SystemTime::now();
    let ckpt = load_model(&a.model)?;
    let set = load(&a.input)?;
    let mut meta = ReportMeta::new(
        "recon-eval",
        ctx.seed,
        json!({"model": a.model, "input": a.input, "denormalize_norms": a.denormalize_norms}),
    )
    .with_input(&a.model)?
    .with_input(&a.input)?;
    let norms = match ckpt.norms {
        Some(n) => n,
        None => {
            meta.warnings
                .push("checkpoint has no normalization statistics; computed them from the evaluation set".into());
            compute_norm_stats(&set)
        }
    };
    let report = evaluate(&ckpt.model, &set, &norms, None, a.denormalize_norms)?;
    write_sample_losses(&report, ctx.out("sample_losses.csv"))?;
    let maps_path = ctx.out("loss_maps.json");
    let text = serde_json::to_string(&report.per_sample)?;
    fs::write(&maps_path, text).map_err(|source| Error::File {
        path: maps_path.clone(),
        source,
    })?;
    let per_sample: Vec<SampleLoss> = report
        .sample_means()
        .into_iter()
        .map(|(id, mean_loss)| SampleLoss { id, mean_loss })
        .collect();
    let result = EvalResult {
        n: per_sample.len(),
        patches_per_sample: set.dims().s_pre,
        total: report.total,
        mean_sample_loss: per_sample.iter().map(|s| s.mean_loss).sum::<f64>() / per_sample.len().max(1) as f64,
        per_sample,
        loss_maps: maps_path.display().to_string(),
    };
    emit(ctx, meta, result, started)
}

fn procrustes(ctx: &Context, a: &ProcrustesArgs) -> Result<()> {
    let started = SystemTime::now();
    let set = load(&a.input)?;
    let meta = ReportMeta::new("procrustes", ctx.seed, json!({"input": a.input})).with_input(&a.input)?;
    let res = align_report(&set)?;
    let mut w = csv_writer(&ctx.out("alignment_errors.csv"))?;
    w.write_record(["id", "error"])?;
    for (id, e) in set.ids().iter().zip(&res.errors) {
        w.write_record([id.clone(), format!("{e:?}")])?;
    }
    finish(w)?;
    emit(ctx, meta, AlignmentReport::from_result(&res), started)
}

#[derive(Serialize)]
struct CorrelateResult {
    correlation: LossScoreCorrelation,
    quartiles: Option<QuartileComparison>,
    mask_split: Option<Vec<MaskSplit>>,
}

fn read_maps(path: &Path) -> Result<Vec<PatchLossMap>> {
    let text = fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn correlate(ctx: &Context, a: &CorrelateArgs) -> Result<()> {
    let started = SystemTime::now();
    let losses = connlens::recon::loss::read_sample_losses(&a.losses)?;
    let scores = ScoreTable::read_csv(&a.scores, a.score_name.clone())?;
    let mut meta = ReportMeta::new(
        "correlate",
        ctx.seed,
        json!({
            "losses": a.losses,
            "scores": a.scores,
            "score_name": a.score_name,
            "maps": a.maps,
            "masks": a.masks,
            "mask_threshold": a.mask_threshold,
        }),
    )
    .with_input(&a.losses)?
    .with_input(&a.scores)?;
    let correlation = correlate_loss_scores(&losses, &scores)?;
    let quartiles = match quartile_compare(&losses, &scores) {
        Ok(q) => Some(q),
        Err(Error::TooFewSamples { needed, got }) => {
            meta.warnings.push(format!(
                "quartile comparison skipped: {got} matched samples, need {needed}"
            ));
            None
        }
        Err(e) => return Err(e),
    };
    let mask_split = match (&a.maps, &a.masks) {
        (Some(maps_path), Some(dir)) => {
            meta = meta.with_input(maps_path)?;
            let maps = read_maps(maps_path)?;
            let Some(first) = maps.first() else {
                return Err(Error::InvalidConfig(format!(
                    "{} holds no loss maps",
                    maps_path.display()
                )));
            };
            let masks = MaskSet::load_dir(dir, first.m1, first.m2, a.mask_threshold)?;
            let with_mask: Vec<PatchLossMap> = maps
                .iter()
                .filter(|m| masks.masks.contains_key(&m.id))
                .cloned()
                .collect();
            if with_mask.len() < maps.len() {
                meta.warnings.push(format!(
                    "{} of {} loss maps have no mask and were skipped",
                    maps.len() - with_mask.len(),
                    maps.len()
                ));
            }
            Some(mask_split_loss(&with_mask, &masks)?)
        }
        _ => None,
    };
    if let Some(splits) = &mask_split {
        let mut w = csv_writer(&ctx.out("mask_split.csv"))?;
        w.write_record([
            "id",
            "relevant_count",
            "irrelevant_count",
            "relevant_mean_loss",
            "irrelevant_mean_loss",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for s in splits {
            w.write_record([
                s.id.clone(),
                s.relevant_count.to_string(),
                s.irrelevant_count.to_string(),
                opt(s.relevant_mean_loss),
                opt(s.irrelevant_mean_loss),
            ])?;
        }
        finish(w)?;
    }
    let result = CorrelateResult {
        correlation,
        quartiles,
        mask_split,
    };
    emit(ctx, meta, result, started)
}

#[derive(Serialize)]
struct HeatmapResult {
    m1: usize,
    m2: usize,
    scale: f64,
    marked: Vec<(usize, usize)>,
    heatmap: String,
    overlay: Option<String>,
    grid_csv: String,
}

fn load_grid(a: &HeatmapArgs) -> Result<(usize, usize, Vec<f64>)> {
    if let Some(p) = &a.grid {
        let text = fs::read_to_string(p).map_err(|source| Error::File {
            path: p.clone(),
            source,
        })?;
        return grid_from_csv(&text);
    }
    let (Some(p), Some(id)) = (&a.maps, &a.id) else {
        return Err(Error::InvalidConfig("heatmap needs --grid or --maps with --id".into()));
    };
    let maps: HashMap<String, PatchLossMap> = read_maps(p)?.into_iter().map(|m| (m.id.clone(), m)).collect();
    let map = maps.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
    let values = if a.field == "norm-diff" {
        map.norm_diff.clone()
    } else {
        map.sq_error.clone()
    };
    Ok((map.m1, map.m2, values))
}

fn heatmap(ctx: &Context, a: &HeatmapArgs) -> Result<()> {
    let started = SystemTime::now();
    if !(0.0..=1.0).contains(&a.alpha) || a.cell_px == 0 {
        return Err(Error::InvalidConfig(
            "--alpha must lie in [0, 1] and --cell-px be positive".into(),
        ));
    }
    let mut meta = ReportMeta::new(
        "heatmap",
        ctx.seed,
        json!({
            "grid": a.grid,
            "maps": a.maps,
            "id": a.id,
            "field": a.field,
            "image": a.image,
            "top_k": a.top_k,
            "alpha": a.alpha,
            "cell_px": a.cell_px,
        }),
    );
    for p in [&a.grid, &a.maps, &a.image].into_iter().flatten() {
        meta = meta.with_input(p)?;
    }
    let (m1, m2, values) = load_grid(a)?;
    let marked = if a.top_k == 0 {
        Vec::new()
    } else {
        top_k_cells(&values, m2, a.top_k.min(values.len()))?
    };
    let map = Heatmap::new(m1, m2, values, marked)?;

    let heat_path = ctx.out(&format!("{}.ppm", a.name));
    write_ppm(&map.render(a.cell_px), &heat_path)?;
    let csv_path = ctx.out(&format!("{}.csv", a.name));
    fs::write(&csv_path, map.to_csv()).map_err(|source| Error::File {
        path: csv_path.clone(),
        source,
    })?;
    let overlay = match &a.image {
        Some(img) => {
            let blended = map.overlay(&read_ppm(img)?, a.alpha)?;
            let p = ctx.out(&format!("{}_overlay.ppm", a.name));
            write_ppm(&blended, &p)?;
            Some(p.display().to_string())
        }
        None => None,
    };
    let result = HeatmapResult {
        m1,
        m2,
        scale: map.scale,
        marked: map.marked.clone(),
        heatmap: heat_path.display().to_string(),
        overlay,
        grid_csv: csv_path.display().to_string(),
    };
    emit(ctx, meta, result, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use connlens::synth::SynthKind;

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (tr, val) = split_rows(20, 0.1, 3).unwrap();
        assert_eq!((tr.len(), val.len()), (18, 2));
        assert!(val.iter().all(|v| !tr.contains(v)));
        assert_eq!(split_rows(20, 0.1, 3).unwrap(), (tr, val));
        assert!(split_rows(1, 0.5, 0).is_err());
        assert!(split_rows(10, 1.0, 0).is_err());
    }

    #[test]
    fn synth_kind_names_parse() {
        for k in SynthKind::ALL {
            assert_eq!(k.name().parse::<SynthKind>().unwrap(), k);
        }
    }
}
