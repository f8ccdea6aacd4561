use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;

use sgaug_core::eval::{self, Aggregate, EvalMode, EvalOptions};
use sgaug_core::featmetrics::{self, FeatureRow, ManifoldMetrics};
use sgaug_core::ingest::{self, Dataset, EmbeddingTable};
use sgaug_core::perturb::{self, Method, PerturbationConfig, PerturbationRecord, Resources, ZeroShotSet};
use sgaug_core::quality::{self, FrequencyScorer, HttpScorer, PlausibilityScorer, ScoreOptions};
use sgaug_core::stats::{self, NamedTriplet, ShotBucket, StatsReport, TripletFrequencyTable};
use sgaug_core::{Error, Triplet, Vocabulary};

use crate::output::{num, write_csv, write_json, write_jsonl};
use crate::{
    EvalArgs, FeatMetricsArgs, Globals, HitRateArgs, PerturbArgs, PerturbParams, PlausibilityArgs, StatsArgs,
    SubsetsArgs,
};

/// Bad flag combination detected before any input is read.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 1 for environment failures (files, network), 2 for bad input or flags.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<Error>() {
            return if core.is_environmental() { 1 } else { 2 };
        }
        if cause.is::<UsageError>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 1;
        }
    }
    1
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(ingest::load_vocabulary(path)?)
}

fn load_records(path: &Path) -> Result<Vec<PerturbationRecord>> {
    let f = File::open(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::Io { path: path.into(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn load_subset_triplets(path: &Path, vocab: &Vocabulary) -> Result<BTreeMap<ShotBucket, BTreeSet<Triplet>>> {
    let f = File::open(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let raw: BTreeMap<String, Vec<NamedTriplet>> = serde_json::from_reader(BufReader::new(f)).map_err(|e| {
        Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        }
    })?;
    Ok(stats::parse_subset_triplets(&raw, vocab)?)
}

pub fn stats(a: &StatsArgs, g: &Globals) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let train = ingest::load_dataset(&a.train, &vocab)?;
    if train.is_empty() {
        return Err(Error::Validation(format!("{} contains no graphs", a.train.display())).into());
    }
    let report = StatsReport::build(&train)?;
    info!(
        "{} graphs, {} distinct triplets",
        train.len(),
        report.triplets.len()
    );
    if g.csv {
        let marg = stats::marginal_distributions(&train);
        let mut rows = Vec::new();
        for (kind, hist, names) in [
            ("object", &marg.objects, vocab.object_names()),
            ("predicate", &marg.predicates, vocab.predicate_names()),
        ] {
            for (rank, (id, count, frac)) in hist.top_k(a.top).into_iter().enumerate() {
                rows.push(vec![
                    kind.to_owned(),
                    (rank + 1).to_string(),
                    names[id].clone(),
                    count.to_string(),
                    num(frac),
                ]);
            }
        }
        write_csv(&a.out, &["kind", "rank", "name", "count", "fraction"], &rows)
    } else {
        write_json(&a.out, &report)
    }
}

#[derive(Serialize)]
struct SubsetSummary {
    bucket: &'static str,
    graphs: usize,
    edges: usize,
    triplets: usize,
}

pub fn subsets(a: &SubsetsArgs, g: &Globals) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let train = ingest::load_dataset(&a.train, &vocab)?;
    let test = ingest::load_dataset(&a.test, &vocab)?;
    let table = stats::build_frequency_table(&train);
    if table.is_empty() {
        return Err(Error::Validation("training split has no relationships".into()).into());
    }
    let subsets = stats::shot_subsets(&test, &table);
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let mut summary = Vec::new();
    for s in &subsets.subsets {
        if s.bucket != ShotBucket::All {
            ingest::save_dataset(a.out_dir.join(format!("{}.jsonl", s.bucket.name())), &s.dataset)?;
        }
        info!("{}: {} graphs", s.bucket.name(), s.dataset.len());
        summary.push(SubsetSummary {
            bucket: s.bucket.name(),
            graphs: s.dataset.len(),
            edges: s.dataset.num_edges(),
            triplets: s.triplets.len(),
        });
    }
    write_json(
        &a.out_dir.join("subset_triplets.json"),
        &stats::subset_triplets_json(&subsets, &vocab),
    )?;
    if g.csv {
        let rows: Vec<Vec<String>> = summary
            .iter()
            .map(|s| vec![s.bucket.to_owned(), s.graphs.to_string(), s.edges.to_string(), s.triplets.to_string()])
            .collect();
        write_csv(&a.out_dir.join("summary.csv"), &["bucket", "graphs", "edges", "triplets"], &rows)
    } else {
        write_json(&a.out_dir.join("summary.json"), &summary)
    }
}

/// Config plus the resources its method needs, loaded from the flags.
struct PerturbSetup {
    cfg: PerturbationConfig,
    embeddings: Option<EmbeddingTable>,
    table: Option<TripletFrequencyTable>,
    zero_shot: Option<ZeroShotSet>,
}

impl PerturbSetup {
    fn check_flags(p: &PerturbParams) -> Result<PerturbationConfig> {
        let method: Method = p.method.parse().map_err(|e: Error| usage(e.to_string()))?;
        let mut cfg = PerturbationConfig::new(method);
        cfg.intensity = p.intensity;
        cfg.alpha = p.alpha;
        cfg.master_seed = p.seed;
        if let Some(k) = p.top_k {
            cfg.top_k = k;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let need = |flag: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(usage(format!("--method {method} requires --{flag}")))
            }
        };
        match method {
            Method::Rand => {}
            Method::Neigh => need("embeddings", p.embeddings.is_some())?,
            Method::GraphN => {
                need("embeddings", p.embeddings.is_some())?;
                need("train", p.train.is_some())?;
            }
            Method::OracleZs => need("zs", p.zs.is_some())?,
        }
        Ok(cfg)
    }

    fn load(p: &PerturbParams, cfg: PerturbationConfig, vocab: &Vocabulary) -> Result<Self> {
        let uses = |m: &[Method]| m.contains(&cfg.method);
        let embeddings = match &p.embeddings {
            Some(path) if uses(&[Method::Neigh, Method::GraphN]) => Some(ingest::load_embeddings(path, vocab)?),
            _ => None,
        };
        let table = match &p.train {
            Some(path) if uses(&[Method::GraphN]) => {
                Some(stats::build_frequency_table(&ingest::load_dataset(path, vocab)?))
            }
            _ => None,
        };
        let zero_shot = match &p.zs {
            Some(path) if uses(&[Method::OracleZs]) => {
                let buckets = load_subset_triplets(path, vocab)?;
                let zs = buckets
                    .get(&ShotBucket::Zero)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::Validation(format!("{} has no zs triplets", path.display())))?;
                Some(ZeroShotSet::new(zs.iter().copied()))
            }
            _ => None,
        };
        Ok(Self { cfg, embeddings, table, zero_shot })
    }

    fn resources<'a>(&'a self, vocab: &'a Vocabulary) -> Resources<'a> {
        Resources {
            vocab,
            embeddings: self.embeddings.as_ref(),
            table: self.table.as_ref(),
            zero_shot: self.zero_shot.as_ref(),
        }
    }
}

pub fn perturb(a: &PerturbArgs, _g: &Globals) -> Result<()> {
    let cfg = PerturbSetup::check_flags(&a.params)?;
    let vocab = load_vocab(&a.vocab)?;
    let setup = PerturbSetup::load(&a.params, cfg, &vocab)?;
    let input = ingest::load_dataset(&a.input, &vocab)?;
    let (out, records) = perturb::perturb_dataset(&input, &setup.cfg, &setup.resources(&vocab))?;
    let records: Vec<PerturbationRecord> = records.into_iter().filter(|r| !r.is_empty()).collect();
    info!(
        "perturbed {} of {} graphs, {} nodes",
        records.len(),
        out.len(),
        records.iter().map(|r| r.changes.len()).sum::<usize>()
    );
    ingest::save_dataset(&a.out, &out)?;
    write_jsonl(&a.records, &records)
}

#[derive(Serialize)]
struct BucketRate {
    bucket: &'static str,
    #[serde(flatten)]
    rate: quality::HitRate,
}

fn bucket_rates(
    records: &[PerturbationRecord],
    perturbed: &Dataset,
    buckets: &BTreeMap<ShotBucket, BTreeSet<Triplet>>,
) -> Result<Vec<BucketRate>> {
    ShotBucket::ALL
        .into_iter()
        .filter_map(|b| buckets.get(&b).map(|set| (b, set)))
        .map(|(b, set)| {
            Ok(BucketRate {
                bucket: b.name(),
                rate: quality::hit_rate(records, perturbed, set)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct SweepRow {
    alpha: f64,
    rates: Vec<BucketRate>,
}

pub fn hit_rate(a: &HitRateArgs, g: &Globals) -> Result<()> {
    let sweep_cfg = match &a.sweep_alpha {
        Some(alphas) => {
            if alphas.iter().any(|x| x.is_nan() || *x < 0.0) {
                return Err(usage("--sweep-alpha values must be >= 0"));
            }
            Some(PerturbSetup::check_flags(&a.params)?)
        }
        None => None,
    };
    let vocab = load_vocab(&a.vocab)?;
    let buckets = load_subset_triplets(&a.subsets, &vocab)?;

    let Some(cfg) = sweep_cfg else {
        let (Some(records), Some(perturbed)) = (&a.records, &a.perturbed) else {
            return Err(usage("--records and --perturbed are required without --sweep-alpha"));
        };
        let records = load_records(records)?;
        let perturbed = ingest::load_dataset(perturbed, &vocab)?;
        let rates = bucket_rates(&records, &perturbed, &buckets)?;
        if rates.iter().all(|r| r.rate.empty) {
            warn!("no triplets were perturbed; every hit rate is 0");
        }
        return if g.csv {
            let rows: Vec<Vec<String>> = rates
                .iter()
                .map(|r| vec![r.bucket.to_owned(), num(r.rate.percent), r.rate.hits.to_string(), r.rate.total.to_string()])
                .collect();
            write_csv(&a.out, &["bucket", "percent", "hits", "total"], &rows)
        } else {
            write_json(&a.out, &rates)
        };
    };

    let input_path = a.input.as_ref().expect("clap enforces --input with --sweep-alpha");
    let mut setup = PerturbSetup::load(&a.params, cfg, &vocab)?;
    let input = ingest::load_dataset(input_path, &vocab)?;
    let mut rows = Vec::new();
    for &alpha in a.sweep_alpha.as_deref().unwrap_or_default() {
        setup.cfg.alpha = alpha;
        let (perturbed, records) = perturb::perturb_dataset(&input, &setup.cfg, &setup.resources(&vocab))?;
        let rates = bucket_rates(&records, &perturbed, &buckets)?;
        info!("alpha {alpha}: {}", rates.iter().map(|r| format!("{}={:.2}", r.bucket, r.rate.percent)).collect::<Vec<_>>().join(" "));
        rows.push(SweepRow { alpha, rates });
    }
    if g.csv {
        let mut header = vec!["alpha"];
        header.extend(rows.first().map_or(vec![], |r| r.rates.iter().map(|b| b.bucket).collect()));
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut v = vec![num(r.alpha)];
                v.extend(r.rates.iter().map(|b| num(b.rate.percent)));
                v
            })
            .collect();
        write_csv(&a.out, &header, &table)
    } else {
        write_json(&a.out, &rows)
    }
}

pub fn plausibility(a: &PlausibilityArgs, g: &Globals) -> Result<()> {
    if a.stub_frequency.is_none() && a.endpoint.is_none() {
        return Err(usage("set --endpoint (or SGG_LM_ENDPOINT) or --stub-frequency"));
    }
    if a.max_in_flight == 0 {
        return Err(usage("--max-in-flight must be at least 1"));
    }
    if a.mask_token.is_empty() {
        return Err(usage("--mask-token must not be empty"));
    }
    let vocab = load_vocab(&a.vocab)?;
    let graphs = ingest::load_dataset(&a.graphs, &vocab)?;
    let records = a.records.as_deref().map(load_records).transpose()?;
    let opts = ScoreOptions {
        mask_token: a.mask_token.clone(),
        max_in_flight: a.max_in_flight,
        seed: a.seed,
    };

    let table;
    let http;
    let scorer: &dyn PlausibilityScorer = match (&a.stub_frequency, &a.endpoint) {
        (Some(train), _) => {
            table = stats::build_frequency_table(&ingest::load_dataset(train, &vocab)?);
            &FrequencyScorer::new(&table)
        }
        (None, Some(endpoint)) => {
            http = HttpScorer::new(endpoint, Duration::from_millis(a.timeout_ms))
                .with_retries(a.retries, Duration::from_millis(a.backoff_ms));
            info!("scoring against {}", http.url());
            &http
        }
        (None, None) => unreachable!("checked above"),
    };
    let report = quality::score_graphs(scorer, &graphs, records.as_deref(), &opts)?;
    if report.skipped > 0 {
        warn!("{} graph(s) had no node to mask", report.skipped);
    }
    if g.csv {
        let rows: Vec<Vec<String>> = report
            .per_graph
            .iter()
            .map(|s| vec![s.image_id.clone(), s.masked_node.to_string(), s.target.clone(), num(s.score)])
            .collect();
        write_csv(&a.out, &["image_id", "masked_node", "target", "score"], &rows)
    } else {
        write_json(&a.out, &report)
    }
}

#[derive(Serialize)]
struct PredicateRecall<'a> {
    predicate: &'a str,
    recall: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    mode: EvalMode,
    k: usize,
    graph_constraint: bool,
    subset: Option<&'a str>,
    reweight_x: Option<f64>,
    aggregate: Aggregate,
    images: usize,
    recall: f64,
    mean_recall: f64,
    per_predicate: Vec<PredicateRecall<'a>>,
    per_image: Vec<(String, f64)>,
}

pub fn eval(a: &EvalArgs, g: &Globals) -> Result<()> {
    let mode: EvalMode = a.mode.parse().map_err(|e: Error| usage(e.to_string()))?;
    let aggregate: Aggregate = a.aggregate.parse().map_err(|e: Error| usage(e.to_string()))?;
    let bucket = match &a.subset {
        Some(name) => Some(ShotBucket::from_name(name).ok_or_else(|| usage(format!("unknown subset {name:?}")))?),
        None => None,
    };
    if let Some(x) = a.reweight_x {
        if x.is_nan() || x < 0.0 {
            return Err(usage("--reweight-x must be >= 0"));
        }
    }
    let k = a.k.unwrap_or(if mode == EvalMode::PredCls { 50 } else { 100 });
    if k == 0 {
        return Err(usage("-k must be at least 1"));
    }

    let vocab = load_vocab(&a.vocab)?;
    let gt = ingest::load_dataset(&a.gt, &vocab)?;
    let predictions = ingest::load_predictions(&a.predictions, &vocab)?;
    let filter = match (bucket, &a.subsets) {
        (Some(b), Some(path)) => {
            let mut buckets = load_subset_triplets(path, &vocab)?;
            Some(buckets.remove(&b).with_context(|| format!("{} has no {} list", path.display(), b.name()))?)
        }
        _ => None,
    };
    let freqs = match (&a.reweight_x, &a.train) {
        (Some(_), Some(train)) => Some(stats::predicate_frequencies(&ingest::load_dataset(train, &vocab)?)?),
        _ => None,
    };

    let opts = EvalOptions {
        k,
        mode,
        graph_constraint: !a.no_graph_constraint,
        subset_filter: filter.as_ref(),
        reweight: a.reweight_x.zip(freqs.as_deref()),
        aggregate,
    };
    let matches = eval::match_dataset(&predictions, &gt, &opts)?;
    if matches.is_empty() {
        bail!(Error::Validation("no ground-truth image has an eligible triplet".into()));
    }
    let recall = eval::recall_at_k_from_matches(&matches, aggregate);
    let mr = eval::mean_recall_from_matches(&matches, vocab.num_predicates(), aggregate);
    info!("R@{k} = {:.2}, mR@{k} = {:.2} over {} images", recall.value, mr.value, recall.images);

    let report = EvalReport {
        mode,
        k,
        graph_constraint: opts.graph_constraint,
        subset: bucket.map(ShotBucket::name),
        reweight_x: a.reweight_x,
        aggregate,
        images: recall.images,
        recall: recall.value,
        mean_recall: mr.value,
        per_predicate: mr
            .per_predicate
            .iter()
            .enumerate()
            .map(|(r, v)| PredicateRecall { predicate: vocab.predicate_name(r), recall: *v })
            .collect(),
        per_image: recall.per_image,
    };
    if g.csv {
        let mut rows = vec![
            vec!["recall".to_owned(), num(report.recall)],
            vec!["mean_recall".to_owned(), num(report.mean_recall)],
        ];
        for p in &report.per_predicate {
            if let Some(v) = p.recall {
                rows.push(vec![format!("recall[{}]", p.predicate), num(v)]);
            }
        }
        write_csv(&a.out, &["metric", "value"], &rows)
    } else {
        write_json(&a.out, &report)
    }
}

#[derive(Serialize)]
struct FeatOutput {
    k: usize,
    conditions: Vec<String>,
    rows: Vec<FeatureRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frechet: Option<Vec<f64>>,
}

pub fn feat_metrics(a: &FeatMetricsArgs, g: &Globals) -> Result<()> {
    if a.k == 0 {
        return Err(usage("-k must be at least 1"));
    }
    let two = a.real_b.is_some();
    if a.conditions.len() < 1 + usize::from(two) {
        return Err(usage("--conditions needs one name per condition"));
    }
    let mut sets = vec![(ingest::load_feature_matrix(&a.real)?, ingest::load_feature_matrix(&a.fake)?)];
    if let (Some(rb), Some(fb)) = (&a.real_b, &a.fake_b) {
        sets.push((ingest::load_feature_matrix(rb)?, ingest::load_feature_matrix(fb)?));
    }
    let metrics: Vec<ManifoldMetrics> = sets
        .iter()
        .map(|(r, f)| featmetrics::precision_recall_density_coverage(r, f, a.k))
        .collect::<sgaug_core::Result<_>>()?;
    let frechet = if a.frechet {
        Some(
            sets.iter()
                .map(|(r, f)| featmetrics::frechet_distance(r, f))
                .collect::<sgaug_core::Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    let conditions: Vec<String> = a.conditions.iter().take(sets.len()).cloned().collect();
    let rows = if two {
        featmetrics::summarize_feature_report(
            [&conditions[0], &conditions[1]],
            &[(&a.label, metrics[0], metrics[1])],
        )
        .rows
    } else {
        vec![FeatureRow::reference(&a.label, &conditions[0], metrics[0])]
    };
    let out = FeatOutput { k: a.k, conditions, rows, frechet };
    if g.csv {
        let table: Vec<Vec<String>> = out
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut v = vec![r.label.clone(), r.condition.clone()];
                v.extend(r.metrics.as_array().iter().map(|x| num(*x)));
                v.push(num(r.average));
                v.push(r.drop_percent.map(num).unwrap_or_default());
                v.push(out.frechet.as_ref().map(|f| num(f[i])).unwrap_or_default());
                v
            })
            .collect();
        write_csv(
            &a.out,
            &["label", "condition", "precision", "recall", "density", "coverage", "average", "drop_percent", "frechet"],
            &table,
        )
    } else {
        write_json(&a.out, &out)
    }
}
