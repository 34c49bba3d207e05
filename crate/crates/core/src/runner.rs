//! Subcommand implementations. Each run writes `report.json`, `table.csv` and
//! `manifest.json` under the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{load_catalog, load_manifest, Catalog, CatalogSummary};
use crate::config::{Command, FusionInputs, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{
    build_groups, cluster_eval, derive_seed, evaluate_group, oddity_from_similarity, random_top1_baseline,
    retrieval_eval, ClusterReport, EvalGroup, KMeansConfig, Protocol, RetrievalPartial, RetrievalReport, Symmetric,
};
use crate::matrix::{load_distance_matrix, DistanceMatrix};
use crate::metrics::{cosine, pairwise_cosine, pairwise_ssim, Embedding};
use crate::pipeline::{CacheStats, FeaturePipeline};
use crate::reid::{alpha_sweep, cosine_distance_matrix, fused_cmc, sample_validation, ReidSet, SweepResult};
use crate::ssim::{ssim_from_stats, SsimStats};

/// Everything needed to reproduce a run on the same inputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub engines: BTreeMap<String, String>,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out: PathBuf,
    pub report: serde_json::Value,
    pub table: String,
    /// Per-item failures that did not abort the run.
    pub soft_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemFailure {
    pub path: PathBuf,
    pub error: String,
}

/// Validates `cfg` for `cmd`, runs it on a pool of `cfg.jobs` workers and
/// writes the outputs.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate(cmd)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cmd {
        Command::Extract => cmd_extract(cfg),
        Command::Benchmark => cmd_benchmark(cfg),
        Command::Oddity => cmd_oddity(cfg),
        Command::Fuse => cmd_fuse(cfg),
        Command::Sweep => cmd_sweep(cfg),
    })
}

fn engines(p: &FeaturePipeline) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    if let Some(id) = p.backbone_id() {
        m.insert("backbone".into(), id.to_string());
    }
    if let Some(id) = p.segmenter_id() {
        m.insert("segmenter".into(), id.to_string());
    }
    m
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(
    cmd: Command,
    cfg: &RunConfig,
    engines: BTreeMap<String, String>,
    report: &impl Serialize,
    table: String,
    soft_failures: usize,
) -> Result<RunOutcome> {
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let report = serde_json::to_value(report).map_err(|e| Error::Format(e.to_string()))?;
    let manifest = RunManifest {
        toolkit_version: crate::VERSION.to_string(),
        command: cmd.as_str().to_string(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        engines,
        config: cfg.clone(),
    };
    write_file(&out.join("report.json"), pretty(&report)?.as_bytes())?;
    write_file(&out.join("manifest.json"), pretty(&manifest)?.as_bytes())?;
    write_file(&out.join("table.csv"), table.as_bytes())?;
    Ok(RunOutcome {
        out,
        report,
        table,
        soft_failures,
    })
}

fn pretty(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn catalog_for(cfg: &RunConfig) -> Result<Catalog> {
    let catalog = match (&cfg.manifest, &cfg.dataset) {
        (Some(m), _) => load_manifest(m)?,
        (None, Some(d)) => load_catalog(d)?,
        (None, None) => return Err(Error::Config("`dataset` or `manifest` is required".into())),
    };
    for w in catalog.warnings() {
        log::warn!("{w}");
    }
    Ok(catalog)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractReport {
    pub images: usize,
    pub cached: usize,
    pub grids_computed: usize,
    pub masks_computed: usize,
    pub cache_hits: usize,
    pub degenerate_masks: Vec<PathBuf>,
    pub failures: Vec<ItemFailure>,
    pub catalog: CatalogSummary,
}

pub fn cmd_extract(cfg: &RunConfig) -> Result<RunOutcome> {
    let catalog = catalog_for(cfg)?;
    let pipeline = FeaturePipeline::from_config(cfg, true)?;
    let results: Vec<Result<bool>> = catalog
        .records()
        .par_iter()
        .map(|r| pipeline.extract(&r.path))
        .collect();
    let mut degenerate = Vec::new();
    let mut failures = Vec::new();
    let mut table = String::from("path,status\n");
    for (r, res) in catalog.records().iter().zip(results) {
        let status = match res {
            Ok(true) => {
                log::warn!("{}: no foreground patch, using the full frame", r.path.display());
                degenerate.push(r.path.clone());
                "degenerate_mask"
            }
            Ok(false) => "ok",
            Err(e) => {
                log::warn!("{}: {e}", r.path.display());
                failures.push(ItemFailure {
                    path: r.path.clone(),
                    error: e.to_string(),
                });
                "failed"
            }
        };
        let _ = writeln!(table, "{},{status}", csv_field(&r.path.display().to_string()));
    }
    let stats: CacheStats = pipeline.stats();
    let report = ExtractReport {
        images: catalog.len(),
        cached: catalog.len() - failures.len(),
        grids_computed: stats.grid_computed,
        masks_computed: stats.mask_computed,
        cache_hits: stats.grid_hits + stats.mask_hits,
        degenerate_masks: degenerate,
        failures,
        catalog: catalog.summary(),
    };
    let soft = report.failures.len();
    emit(Command::Extract, cfg, engines(&pipeline), &report, table, soft)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub groups: usize,
    pub warnings: Vec<String>,
    pub random_top1: f64,
    pub retrieval: RetrievalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusterReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub variant: Variant,
    pub catalog: CatalogSummary,
    pub protocols: Vec<ProtocolReport>,
    pub skipped_protocols: Vec<String>,
    pub degenerate_masks: Vec<PathBuf>,
    pub failures: Vec<ItemFailure>,
}

/// Retrieval (and, when `kmeans` is set, clustering) over embeddings indexed
/// by catalog position. A missing embedding fails only the groups using it.
pub fn evaluate_embeddings(
    groups: &[EvalGroup],
    embeddings: &[Option<Embedding>],
    kmeans: Option<&KMeansConfig>,
    seed: u64,
) -> (RetrievalReport, Option<ClusterReport>) {
    let lookup = |i: usize| {
        embeddings
            .get(i)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Invalid(format!("no embedding for record {i}")))
    };
    let score = |a: usize, b: usize| -> Result<f64> { Ok(f64::from(cosine(lookup(a)?, lookup(b)?)?)) };
    let retrieval = retrieval_eval(groups, &Symmetric(score));
    let clustering = kmeans.map(|k| {
        let of = |i: usize| embeddings.get(i).cloned().flatten();
        cluster_eval(groups, &of, k, seed)
    });
    (retrieval, clustering)
}

/// Retrieval with SSIM, one category at a time so that only that category's
/// image statistics are resident.
fn evaluate_ssim(
    pipeline: &FeaturePipeline,
    catalog: &Catalog,
    sets: &[(Protocol, Vec<EvalGroup>)],
    failures: &mut Vec<ItemFailure>,
) -> Vec<RetrievalReport> {
    let mut partials: Vec<RetrievalPartial> = vec![RetrievalPartial::default(); sets.len()];
    for category in catalog.categories() {
        let needed: BTreeSet<usize> = sets
            .iter()
            .flat_map(|(_, gs)| gs.iter())
            .filter(|g| &g.category == category)
            .flat_map(|g| g.members.iter().map(|m| m.index))
            .collect();
        if needed.is_empty() {
            continue;
        }
        let needed: Vec<usize> = needed.into_iter().collect();
        let loaded: Vec<Result<SsimStats>> = needed
            .par_iter()
            .map(|&i| SsimStats::new(&pipeline.image(&catalog.get(i).path)?))
            .collect();
        let mut stats = BTreeMap::new();
        for (&i, res) in needed.iter().zip(loaded) {
            match res {
                Ok(s) => {
                    stats.insert(i, s);
                }
                Err(e) => failures.push(ItemFailure {
                    path: catalog.get(i).path.clone(),
                    error: e.to_string(),
                }),
            }
        }
        let get = |i: usize| {
            stats
                .get(&i)
                .ok_or_else(|| Error::Invalid(format!("image {} unavailable", catalog.get(i).path.display())))
        };
        let score = |a: usize, b: usize| -> Result<f64> { Ok(f64::from(ssim_from_stats(get(a)?, get(b)?)?)) };
        let scorer = Symmetric(score);
        for ((_, groups), partial) in sets.iter().zip(partials.iter_mut()) {
            let p = groups
                .par_iter()
                .enumerate()
                .filter(|(_, g)| &g.category == category)
                .map(|(pos, g)| RetrievalPartial::single(pos, evaluate_group(g, &scorer)))
                .reduce(RetrievalPartial::default, RetrievalPartial::merge);
            *partial = std::mem::take(partial).merge(p);
        }
    }
    sets.iter()
        .zip(partials)
        .map(|((_, groups), p)| p.finish(groups))
        .collect()
}

fn pct(x: f64) -> String {
    format!("{:.4}", 100.0 * x)
}

pub fn cmd_benchmark(cfg: &RunConfig) -> Result<RunOutcome> {
    let catalog = catalog_for(cfg)?;
    let pipeline = FeaturePipeline::from_config(cfg, false)?;

    let mut sets = Vec::new();
    let mut skipped = Vec::new();
    let mut set_warnings = Vec::new();
    // Column order of the published results table.
    let order = [Protocol::Wild, Protocol::Illumination, Protocol::Pose, Protocol::All];
    for p in order.into_iter().filter(|p| cfg.protocols.contains(p)) {
        let gs = build_groups(&catalog, p);
        for w in &gs.warnings {
            log::warn!("{p}: {w}");
        }
        if gs.groups.is_empty() {
            log::warn!("{p}: no complete groups, protocol skipped");
            skipped.push(p.as_str().to_string());
            continue;
        }
        set_warnings.push(gs.warnings);
        sets.push((p, gs.groups));
    }

    let mut failures = Vec::new();
    let mut degenerate = Vec::new();
    let results: Vec<(RetrievalReport, Option<ClusterReport>)> = if cfg.variant.is_embedding() {
        let needed: BTreeSet<usize> = sets
            .iter()
            .flat_map(|(_, gs)| gs.iter())
            .flat_map(|g| g.members.iter().map(|m| m.index))
            .collect();
        let needed: Vec<usize> = needed.into_iter().collect();
        let computed: Vec<_> = needed
            .par_iter()
            .map(|&i| pipeline.embedding(&catalog.get(i).path, cfg.variant))
            .collect();
        let mut embeddings: Vec<Option<Embedding>> = vec![None; catalog.len()];
        for (&i, res) in needed.iter().zip(computed) {
            let path = &catalog.get(i).path;
            match res {
                Ok(o) => {
                    if o.degenerate_mask {
                        log::warn!("{}: no foreground detected, using the full frame", path.display());
                        degenerate.push(path.clone());
                    }
                    embeddings[i] = Some(o.embedding);
                }
                Err(e) => {
                    log::warn!("{}: {e}", path.display());
                    failures.push(ItemFailure {
                        path: path.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        let kmeans = cfg.clustering_enabled().then_some(&cfg.kmeans);
        sets.iter()
            .enumerate()
            .map(|(i, (_, groups))| evaluate_embeddings(groups, &embeddings, kmeans, derive_seed(cfg.seed, i as u64)))
            .collect()
    } else {
        evaluate_ssim(&pipeline, &catalog, &sets, &mut failures)
            .into_iter()
            .map(|r| (r, None))
            .collect()
    };

    let mut table = String::from("variant,protocol,metric,value\n");
    let mut protocol_reports = Vec::new();
    for (((p, groups), warnings), (retrieval, clustering)) in sets.iter().zip(set_warnings).zip(results) {
        for f in &retrieval.failures {
            log::warn!("{p} {}/{}: {}", f.category, f.key, f.error);
        }
        let v = cfg.variant.as_str();
        let _ = writeln!(table, "{v},{p},map,{}", pct(retrieval.map));
        let _ = writeln!(table, "{v},{p},top1,{}", pct(retrieval.top1));
        if let Some(c) = &clustering {
            let _ = writeln!(table, "{v},{p},ari,{}", pct(c.ari));
        }
        protocol_reports.push(ProtocolReport {
            protocol: *p,
            groups: groups.len(),
            warnings,
            random_top1: random_top1_baseline(groups),
            retrieval,
            clustering,
        });
    }
    let report = BenchmarkReport {
        variant: cfg.variant,
        catalog: catalog.summary(),
        protocols: protocol_reports,
        skipped_protocols: skipped,
        degenerate_masks: degenerate,
        failures,
    };
    let soft = report.failures.len();
    emit(Command::Benchmark, cfg, engines(&pipeline), &report, table, soft)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelResult {
    pub row: usize,
    pub paths: [PathBuf; 4],
    pub odd: usize,
    pub chosen: usize,
    pub correct: bool,
    pub subset: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SubsetAccuracy {
    pub panels: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OddityReport {
    pub variant: Variant,
    pub panels: Vec<PanelResult>,
    pub per_subset: BTreeMap<String, SubsetAccuracy>,
    pub overall: SubsetAccuracy,
    /// Rows that could not be parsed.
    pub malformed: Vec<String>,
    pub failures: Vec<ItemFailure>,
}

struct Panel {
    row: usize,
    paths: [PathBuf; 4],
    odd: usize,
    subset: String,
}

fn read_panels(path: &Path) -> Result<(Vec<Panel>, Vec<String>)> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut panels = Vec::new();
    let mut malformed = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                malformed.push(format!("row {row}: {e}"));
                continue;
            }
        };
        if rec.len() != 6 || (0..4).any(|k| rec[k].is_empty()) {
            malformed.push(format!("row {row}: expected 4 paths, odd index and subset"));
            continue;
        }
        let odd = match rec[4].parse::<usize>() {
            Ok(o) if o < 4 => o,
            _ => {
                malformed.push(format!("row {row}: odd index {:?} not in 0..4", &rec[4]));
                continue;
            }
        };
        let p = |k: usize| {
            let p = PathBuf::from(&rec[k]);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        panels.push(Panel {
            row,
            paths: [p(0), p(1), p(2), p(3)],
            odd,
            subset: rec[5].to_string(),
        });
    }
    Ok((panels, malformed))
}

fn accuracy(panels: usize, correct: usize) -> SubsetAccuracy {
    SubsetAccuracy {
        panels,
        correct,
        accuracy: if panels == 0 {
            0.0
        } else {
            correct as f64 / panels as f64
        },
    }
}

pub fn cmd_oddity(cfg: &RunConfig) -> Result<RunOutcome> {
    let inputs = cfg
        .oddity
        .as_ref()
        .ok_or_else(|| Error::Config("oddity: [oddity] section is required".into()))?;
    let (panels, malformed) = read_panels(&inputs.panels)?;
    for m in &malformed {
        log::warn!("{}: {m}", inputs.panels.display());
    }
    let pipeline = FeaturePipeline::from_config(cfg, false)?;
    let decide = |panel: &Panel| -> std::result::Result<usize, ItemFailure> {
        let fail = |path: &Path, e: Error| ItemFailure {
            path: path.to_path_buf(),
            error: e.to_string(),
        };
        let sim = if cfg.variant.is_embedding() {
            let es = panel
                .paths
                .iter()
                .map(|p| {
                    pipeline
                        .embedding(p, cfg.variant)
                        .map(|o| o.embedding)
                        .map_err(|e| fail(p, e))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            pairwise_cosine(&es)
        } else {
            let imgs = panel
                .paths
                .iter()
                .map(|p| pipeline.image(p).map_err(|e| fail(p, e)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            pairwise_ssim(&imgs)
        };
        sim.map(|s| oddity_from_similarity(&s))
            .map_err(|e| fail(&panel.paths[0], e))
    };
    let decisions: Vec<_> = panels.par_iter().map(decide).collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (panel, d) in panels.into_iter().zip(decisions) {
        match d {
            Ok(chosen) => {
                let correct = chosen == panel.odd;
                let c = counts.entry(panel.subset.clone()).or_default();
                c.0 += 1;
                c.1 += usize::from(correct);
                results.push(PanelResult {
                    row: panel.row,
                    paths: panel.paths,
                    odd: panel.odd,
                    chosen,
                    correct,
                    subset: panel.subset,
                });
            }
            Err(f) => {
                log::warn!("panel row {}: {}: {}", panel.row, f.path.display(), f.error);
                failures.push(f);
            }
        }
    }
    let per_subset: BTreeMap<String, SubsetAccuracy> =
        counts.iter().map(|(k, &(n, c))| (k.clone(), accuracy(n, c))).collect();
    let overall = accuracy(results.len(), results.iter().filter(|r| r.correct).count());
    let mut table = String::from("subset,panels,correct,accuracy\n");
    for (k, a) in per_subset
        .iter()
        .map(|(k, a)| (k.as_str(), a))
        .chain([("all", &overall)])
    {
        let _ = writeln!(table, "{},{},{},{:.4}", csv_field(k), a.panels, a.correct, a.accuracy);
    }
    let report = OddityReport {
        variant: cfg.variant,
        panels: results,
        per_subset,
        overall,
        malformed,
        failures,
    };
    let soft = report.failures.len() + report.malformed.len();
    emit(Command::Oddity, cfg, engines(&pipeline), &report, table, soft)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f32,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FuseReport {
    pub selected_alpha: f32,
    /// `config`, `validation` or `default`.
    pub alpha_source: String,
    pub validation: Option<SweepResult>,
    pub rows: Vec<AlphaRow>,
    pub queries: usize,
    pub gallery: usize,
    pub evaluated: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    /// `validation` when a validation split is configured, else `test`.
    pub split: String,
    pub queries: usize,
    pub sweep: SweepResult,
}

fn model_distances(
    pipeline: &FeaturePipeline,
    variant: Variant,
    given: Option<&PathBuf>,
    set: &ReidSet,
) -> Result<DistanceMatrix> {
    if let Some(p) = given {
        return load_distance_matrix(p);
    }
    let embed = |entries: &[crate::reid::ReidEntry]| -> Result<Vec<Embedding>> {
        entries
            .par_iter()
            .map(|e| pipeline.embedding(&e.path, variant).map(|o| o.embedding))
            .collect()
    };
    cosine_distance_matrix(&embed(&set.queries)?, &embed(&set.gallery)?)
}

struct FusionData {
    set: ReidSet,
    model: DistanceMatrix,
    external: DistanceMatrix,
}

fn check_shape(d: &DistanceMatrix, set: &ReidSet, what: &str) -> Result<()> {
    let want = (set.queries.len(), set.gallery.len());
    if d.shape() != want {
        return Err(Error::shape(
            format!("{what} {}x{} (queries x gallery)", want.0, want.1),
            format!("{}x{}", d.rows(), d.cols()),
        ));
    }
    Ok(())
}

fn fusion_test(pipeline: &FeaturePipeline, cfg: &RunConfig, f: &FusionInputs) -> Result<FusionData> {
    let set = ReidSet::load(&f.queries, &f.gallery)?;
    let external = load_distance_matrix(&f.external_distances)?;
    check_shape(&external, &set, "external distances")?;
    let model = model_distances(pipeline, cfg.variant, f.model_distances.as_ref(), &set)?;
    check_shape(&model, &set, "model distances")?;
    Ok(FusionData { set, model, external })
}

fn fusion_validation(pipeline: &FeaturePipeline, cfg: &RunConfig, f: &FusionInputs) -> Result<Option<FusionData>> {
    let (Some(q), Some(g), Some(ext)) = (&f.val_queries, &f.val_gallery, &f.val_external_distances) else {
        return Ok(None);
    };
    let mut set = ReidSet::load(q, g)?;
    let mut external = load_distance_matrix(ext)?;
    check_shape(&external, &set, "validation external distances")?;
    let mut model = model_distances(pipeline, cfg.variant, f.val_model_distances.as_ref(), &set)?;
    check_shape(&model, &set, "validation model distances")?;
    if f.val_ids.is_some() || f.val_query_count.is_some() {
        let rows = sample_validation(
            &set,
            f.val_ids.unwrap_or(usize::MAX),
            f.val_query_count.unwrap_or(usize::MAX),
            cfg.seed,
        );
        set = set.select_queries(&rows);
        external = external.select_rows(&rows);
        model = model.select_rows(&rows);
    }
    Ok(Some(FusionData { set, model, external }))
}

fn fusion_inputs(cfg: &RunConfig, cmd: Command) -> Result<&FusionInputs> {
    cfg.fusion
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{}: [fusion] section is required", cmd.as_str())))
}

pub fn cmd_fuse(cfg: &RunConfig) -> Result<RunOutcome> {
    let f = fusion_inputs(cfg, Command::Fuse)?;
    let params = f.params();
    let pipeline = FeaturePipeline::from_config(cfg, false)?;
    let test = fusion_test(&pipeline, cfg, f)?;

    let (selected, source, validation) = match (f.alpha, fusion_validation(&pipeline, cfg, f)?) {
        (Some(a), _) => (a, "config", None),
        (None, Some(v)) => {
            let s = alpha_sweep(&v.model, &v.external, &v.set, &params)?;
            (s.best_alpha, "validation", Some(s))
        }
        (None, None) => {
            log::warn!("no alpha and no validation split, using alpha = {}", params.alpha);
            (params.alpha, "default", None)
        }
    };

    let mut alphas: Vec<f32> = [0.0, 1.0, selected]
        .into_iter()
        .chain(params.grid.iter().copied())
        .collect();
    alphas.sort_by(f32::total_cmp);
    alphas.dedup();
    let scored: Vec<_> = alphas
        .par_iter()
        .map(|&a| fused_cmc(&test.model, &test.external, &test.set, a, &params).map(|r| (a, r)))
        .collect::<Result<_>>()?;
    let (evaluated, excluded) = scored
        .first()
        .map(|(_, r)| (r.evaluated, r.excluded))
        .unwrap_or_default();
    let rows: Vec<AlphaRow> = scored
        .iter()
        .map(|(a, r)| AlphaRow {
            alpha: *a,
            top1: r.topk[0],
            top5: r.topk[1],
        })
        .collect();

    let mut table = String::from("alpha,top1,top5,selected\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{:.2},{},{},{}",
            r.alpha,
            pct(r.top1),
            pct(r.top5),
            u8::from(r.alpha == selected)
        );
    }
    let report = FuseReport {
        selected_alpha: selected,
        alpha_source: source.into(),
        validation,
        rows,
        queries: test.set.queries.len(),
        gallery: test.set.gallery.len(),
        evaluated,
        excluded,
    };
    emit(Command::Fuse, cfg, engines(&pipeline), &report, table, 0)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<RunOutcome> {
    let f = fusion_inputs(cfg, Command::Sweep)?;
    let params = f.params();
    let pipeline = FeaturePipeline::from_config(cfg, false)?;
    let (data, split) = match fusion_validation(&pipeline, cfg, f)? {
        Some(v) => (v, "validation"),
        None => (fusion_test(&pipeline, cfg, f)?, "test"),
    };
    let sweep = alpha_sweep(&data.model, &data.external, &data.set, &params)?;
    let mut table = String::from("alpha,top1,top5\n");
    for r in &sweep.rows {
        let _ = writeln!(table, "{:.2},{},{}", r.alpha, pct(r.top1), pct(r.top5));
    }
    let report = SweepReport {
        split: split.into(),
        queries: data.set.queries.len(),
        sweep,
    };
    emit(Command::Sweep, cfg, engines(&pipeline), &report, table, 0)
}
