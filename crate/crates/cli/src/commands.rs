use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use condist::contrastive::{
    project_store, read_model, train_projection, write_model, TrainConfig, TrainingData,
};
use condist::distill::{
    aggregate, anisotropy_histogram, concept_neighbors, neighbor_shift, read_text, write_text,
};
use condist::distsup::{
    load_concept_property_table, match_corpus, pairs_from_groups, read_corpus, read_groups_file,
    resolve_groups, write_groups_file, MatchOptions,
};
use condist::eval::{
    evaluate_linear, evaluate_mention_classifier, kmeans_purity, read_dataset_file,
    split_and_negatives, ClusterConfig, LinearEvalConfig, MentionClassifierConfig, SplitRatios,
    SvmOptions,
};
use condist::mining::{
    filter_idiosyncratic, mine_from_neighbors, mine_word_identity_pairs, read_kept, read_pairs,
    write_kept, write_pairs, MiningConfig, Threshold,
};
use condist::simsearch::{knn_all, read_cache, write_cache, NeighborCache, NeighborList};
use condist::store::{
    read_store, read_table, write_store, write_table, ConceptEmbeddingTable, MentionStore,
    TABLE_MAGIC,
};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigFile, Resolver};
use crate::manifest::Manifest;
use crate::{Cli, Command, TableFormat, UsageError};

fn usage(msg: impl std::fmt::Display) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.global.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let name = cli.command.name();
    let mut r = file.resolver(name)?;
    let seed = r.get("seed", cli.global.seed, 0u64)?;
    let threads = r.get("threads", cli.global.threads, 0usize)?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut m = Manifest::new(name);
    let primary = match &cli.command {
        Command::Filter(a) => filter(a, &mut r, &mut m)?,
        Command::MineNeigh(a) => mine_neigh(a, &mut r, &mut m)?,
        Command::MineCn(a) => mine_cn(a, &mut r, &mut m)?,
        Command::TrainProj(a) => train_proj(a, seed, &mut r, &mut m)?,
        Command::Project(a) => project(a, &mut m)?,
        Command::Aggregate(a) => aggregate_cmd(a, &mut m)?,
        Command::EvalClf(a) => eval_clf(a, seed, &mut r, &mut m)?,
        Command::EvalMentionClf(a) => eval_mention_clf(a, seed, &mut r, &mut m)?,
        Command::EvalCluster(a) => eval_cluster(a, seed, &mut r, &mut m)?,
        Command::Neighbors(a) => neighbors(a, &mut r, &mut m)?,
        Command::Anisotropy(a) => anisotropy(a, seed, &mut r, &mut m)?,
        Command::NeighborShift(a) => shift(a, &mut r, &mut m)?,
    };
    m.config(r.finish()?);
    let path = m.write_next_to(&primary)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_store(path: &Path, m: &mut Manifest, name: &str) -> Result<MentionStore> {
    let store = read_store(path).with_context(|| format!("reading store {}", path.display()))?;
    m.input(name, path);
    info!(
        "{}: {} mentions, {} concepts, dim {}",
        path.display(),
        store.len(),
        store.vocab().len(),
        store.dim()
    );
    Ok(store)
}

/// Binary tables are recognised by their magic; anything else is read as
/// the text format.
fn load_table(path: &Path, m: &mut Manifest) -> Result<ConceptEmbeddingTable> {
    let mut head = [0u8; 4];
    let is_binary = File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .is_ok()
        && &head == TABLE_MAGIC;
    let table = if is_binary {
        read_table(path).map_err(anyhow::Error::from)
    } else {
        File::open(path)
            .map_err(anyhow::Error::from)
            .and_then(|f| read_text(BufReader::new(f)).map_err(anyhow::Error::from))
    }
    .with_context(|| format!("reading table {}", path.display()))?;
    m.input("table", path);
    Ok(table)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn filter(a: &crate::FilterArgs, r: &mut Resolver, m: &mut Manifest) -> Result<std::path::PathBuf> {
    let k = r.get("k", a.k, 5usize)?;
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let store = load_store(&a.store, m, "store")?;
    let kept = filter_idiosyncratic(&store, k)?;
    info!("kept {} of {} mentions", kept.len(), store.len());
    let mut out = BufWriter::new(
        File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    write_kept(&kept, k, &mut out)?;
    drop(out);
    m.set("result.kept", kept.len());
    m.set("result.removed", store.len() - kept.len());
    m.output("kept", &a.out);
    Ok(a.out.clone())
}

fn cached_lists(
    store: &MentionStore,
    k: usize,
    cache: Option<&Path>,
    m: &mut Manifest,
) -> Result<Vec<NeighborList>> {
    if let Some(path) = cache.filter(|p| p.exists()) {
        let c = read_cache(path)
            .with_context(|| format!("reading neighbour cache {}", path.display()))?;
        if c.lists.len() == store.len() && c.k >= k {
            info!("using neighbour cache {} (k={})", path.display(), c.k);
            m.input("neighbors-cache", path);
            let mut lists = c.lists;
            for l in &mut lists {
                l.neighbors.truncate(k);
            }
            return Ok(lists);
        }
        warn!(
            "neighbour cache {} does not fit this store and k; recomputing",
            path.display()
        );
    }
    let lists = knn_all(store, k)?;
    if let Some(path) = cache {
        let c = NeighborCache::new(lists);
        write_cache(&c, path)
            .with_context(|| format!("writing neighbour cache {}", path.display()))?;
        m.output("neighbors-cache", path);
        return Ok(c.lists);
    }
    Ok(lists)
}

fn mine_neigh(
    a: &crate::MineNeighArgs,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let word_identity = r.flag("word-identity", a.word_identity)?;
    let store = load_store(&a.store, m, "store")?;
    let pairs = if word_identity {
        mine_word_identity_pairs(&store)
    } else {
        let cfg = MiningConfig {
            k_compat: r.get("k", a.k, 5usize)?,
            theta: r.parsed("theta", a.theta, Threshold::default())?,
            ..Default::default()
        };
        cfg.validate().map_err(usage)?;
        let lists = cached_lists(&store, cfg.k_compat, a.neighbors_cache.as_deref(), m)?;
        mine_from_neighbors(&store, &lists, cfg.theta)
    };
    info!("mined {} pairs", pairs.len());
    write_pairs(&pairs, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    m.set("result.pairs", pairs.len());
    m.output("pairs", &a.out);
    Ok(a.out.clone())
}

fn mine_cn(
    a: &crate::MineCnArgs,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let opts = MatchOptions {
        plural_folding: r.flag("plural-folding", a.plural_folding)?,
    };
    let corpus =
        read_corpus(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    m.input("corpus", &a.corpus);
    let (table, report) = load_concept_property_table(&a.properties)
        .with_context(|| format!("reading properties {}", a.properties.display()))?;
    m.input("properties", &a.properties);
    if !report.malformed.is_empty() {
        warn!(
            "skipped {} malformed property lines (first: line {})",
            report.malformed.len(),
            report.malformed[0]
        );
    }
    info!(
        "pruned {} properties with fewer than 3 concepts",
        report.pruned_properties
    );
    let store = load_store(&a.store, m, "store")?;
    let (groups, matched) = match_corpus(&corpus, &table, store.vocab(), opts);
    if matched.unknown_concepts > 0 {
        warn!(
            "{} table concepts are not in the store vocabulary",
            matched.unknown_concepts
        );
    }
    let (pairs, dropped) = pairs_from_groups(&groups, &store);
    if dropped > 0 {
        warn!("{dropped} matched (sentence, concept) members have no mention in the store");
    }
    write_pairs(&pairs, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut groups_path = a.out.as_os_str().to_owned();
    groups_path.push(".groups");
    let groups_path = std::path::PathBuf::from(groups_path);
    write_groups_file(&groups, store.vocab(), &groups_path)
        .with_context(|| format!("writing {}", groups_path.display()))?;
    m.set("result.pruned-properties", report.pruned_properties);
    m.set("result.groups", groups.len());
    m.set("result.pairs", pairs.len());
    m.output("pairs", &a.out);
    m.output("groups", &groups_path);
    Ok(a.out.clone())
}

fn train_proj(
    a: &crate::TrainProjArgs,
    seed: u64,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        out_dim: r.get("out-dim", a.out_dim, d.out_dim)?,
        tau: r.get("tau", a.tau, d.tau)?,
        lr: r.get("lr", a.lr, d.lr)?,
        warmup_epochs: r.get("warmup-epochs", a.warmup_epochs, d.warmup_epochs)?,
        patience: r.get("patience", a.patience, d.patience)?,
        min_delta: r.get("min-delta", a.min_delta, d.min_delta)?,
        batch_pairs: r.get("batch-pairs", a.batch_pairs, d.batch_pairs)?,
        group_sample: r.get("group-sample", a.group_sample, d.group_sample)?,
        group_batch: r.get("group-batch", a.group_batch, d.group_batch)?,
        max_epochs: r.get("max-epochs", a.max_epochs, d.max_epochs)?,
        weight_decay: r.get("weight-decay", a.weight_decay, d.weight_decay)?,
        val_fraction: r.get("val-fraction", a.val_fraction, d.val_fraction)?,
        seed,
    };
    cfg.validate().map_err(usage)?;
    let store = load_store(&a.store, m, "store")?;
    let outcome = match (&a.pairs, &a.groups) {
        (Some(path), _) => {
            let pairs =
                read_pairs(path).with_context(|| format!("reading pairs {}", path.display()))?;
            m.input("pairs", path);
            train_projection(&store, TrainingData::Pairs(&pairs), &cfg)?
        }
        (None, Some(path)) => {
            let groups = read_groups_file(path, store.vocab())
                .with_context(|| format!("reading groups {}", path.display()))?;
            m.input("groups", path);
            let (records, missing) = resolve_groups(&groups, &store);
            if missing > 0 {
                warn!("{missing} group members have no mention in the store");
            }
            train_projection(&store, TrainingData::Groups(&records), &cfg)?
        }
        (None, None) => bail!(usage("one of --pairs or --groups is required")),
    };
    write_model(&outcome.model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut log = String::from("epoch\ttrain_loss\tval_loss\tlr\timproved\n");
    for e in &outcome.history {
        writeln!(log, "{e}").unwrap();
    }
    let mut log_path = a.out.as_os_str().to_owned();
    log_path.push(".log");
    let log_path = std::path::PathBuf::from(log_path);
    write_file(&log_path, &log)?;
    m.set("result.best-epoch", outcome.best_epoch);
    m.set("result.best-loss", format!("{:.6}", outcome.best_loss));
    m.set("result.epochs", outcome.history.len());
    m.set("result.stopped-early", outcome.stopped_early);
    m.output("model", &a.out);
    m.output("log", &log_path);
    Ok(a.out.clone())
}

fn project(a: &crate::ProjectArgs, m: &mut Manifest) -> Result<std::path::PathBuf> {
    let store = load_store(&a.store, m, "store")?;
    let model =
        read_model(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    m.input("model", &a.model);
    let projected = project_store(&store, &model)?;
    write_store(&projected, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    m.output("store", &a.out);
    Ok(a.out.clone())
}

fn aggregate_cmd(a: &crate::AggregateArgs, m: &mut Manifest) -> Result<std::path::PathBuf> {
    let store = load_store(&a.store, m, "store")?;
    let kept = match &a.kept {
        Some(path) => {
            let f = File::open(path)
                .with_context(|| format!("reading kept file {}", path.display()))?;
            m.input("kept", path);
            Some(read_kept(BufReader::new(f))?)
        }
        None => None,
    };
    let agg = aggregate(&store, kept.as_deref())?;
    if !agg.fallbacks.is_empty() {
        warn!(
            "{} concepts lost every mention to filtering and use the unfiltered mean",
            agg.fallbacks.len()
        );
    }
    match a.format {
        TableFormat::Binary => write_table(&agg.table, &a.out)?,
        TableFormat::Text => {
            let mut out = BufWriter::new(File::create(&a.out)?);
            write_text(&agg.table, &mut out)?;
            out.flush()?;
        }
    }
    m.set("format", format!("{:?}", a.format).to_lowercase());
    m.set("result.concepts", agg.table.len());
    m.set("result.fallbacks", agg.fallbacks.len());
    m.output("table", &a.out);
    Ok(a.out.clone())
}

fn labeled_dataset(
    path: &Path,
    vocab: &condist::store::Vocabulary,
    negatives: usize,
    seed: u64,
    m: &mut Manifest,
) -> Result<condist::eval::LabeledDataset> {
    let (rows, unknown) = read_dataset_file(path, vocab)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    m.input("dataset", path);
    if !unknown.is_empty() {
        warn!(
            "{} dataset words are not in the vocabulary (e.g. {:?})",
            unknown.len(),
            unknown[0]
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = split_and_negatives(&rows, SplitRatios::default(), negatives, &mut rng)?;
    for c in &ds.skipped_classes {
        warn!("class {c:?} is too small to split and was skipped");
    }
    if !ds.without_negatives.is_empty() {
        warn!(
            "{} concepts belong to every class and got no negatives",
            ds.without_negatives.len()
        );
    }
    m.set("result.unknown-words", unknown.len());
    m.set("result.skipped-classes", ds.skipped_classes.len());
    Ok(ds)
}

fn eval_clf(
    a: &crate::EvalClfArgs,
    seed: u64,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let negatives = r.get("negatives", a.negatives, 5usize)?;
    let balanced = r.flag("balanced", a.balanced)?;
    let table = load_table(&a.table, m)?;
    let ds = labeled_dataset(&a.dataset, table.vocab(), negatives, seed, m)?;
    let cfg = LinearEvalConfig {
        svm: SvmOptions {
            balanced,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let outcome = evaluate_linear(&ds, &table, &cfg)?;
    if outcome.excluded > 0 {
        warn!(
            "{} dataset concepts have no embedding and were excluded",
            outcome.excluded
        );
    }
    write_file(&a.out, &outcome.report.to_tsv())?;
    m.set("result.macro-f1", format!("{:.4}", outcome.report.macro_f1));
    m.set("result.excluded", outcome.excluded);
    m.output("metrics", &a.out);
    Ok(a.out.clone())
}

fn eval_mention_clf(
    a: &crate::EvalMentionClfArgs,
    seed: u64,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let negatives = r.get("negatives", a.negatives, 5usize)?;
    let d = MentionClassifierConfig::default();
    let cfg = MentionClassifierConfig {
        hidden: r.get("hidden", a.hidden, d.hidden)?,
        lr: r.get("lr", a.lr, d.lr)?,
        batch_size: r.get("batch-size", a.batch_size, d.batch_size)?,
        max_epochs: r.get("max-epochs", a.max_epochs, d.max_epochs)?,
        patience: r.get("patience", a.patience, d.patience)?,
        seed,
    };
    if cfg.hidden == 0
        || cfg.batch_size == 0
        || cfg.patience == 0
        || cfg.lr.is_nan()
        || cfg.lr <= 0.0
    {
        return Err(usage(
            "hidden, batch-size, patience and lr must be positive",
        ));
    }
    let store = load_store(&a.store, m, "store")?;
    let ds = labeled_dataset(&a.dataset, store.vocab(), negatives, seed, m)?;
    let outcome = evaluate_mention_classifier(&ds, &store, &cfg)?;
    if outcome.excluded > 0 {
        warn!(
            "{} dataset concepts have no mentions and were excluded",
            outcome.excluded
        );
    }
    write_file(&a.out, &outcome.report.to_tsv())?;
    m.set("result.macro-f1", format!("{:.4}", outcome.report.macro_f1));
    m.set("result.excluded", outcome.excluded);
    m.output("metrics", &a.out);
    Ok(a.out.clone())
}

fn eval_cluster(
    a: &crate::EvalClusterArgs,
    seed: u64,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let table = load_table(&a.table, m)?;
    let (rows, unknown) = read_dataset_file(&a.gold, table.vocab())
        .with_context(|| format!("reading gold categories {}", a.gold.display()))?;
    m.input("gold", &a.gold);
    if !unknown.is_empty() {
        warn!("{} gold words are not in the vocabulary", unknown.len());
    }
    let mut ids: BTreeMap<&str, u32> = BTreeMap::new();
    for row in &rows {
        let next = ids.len() as u32;
        ids.entry(row.class.as_str()).or_insert(next);
    }
    let gold: Vec<_> = rows
        .iter()
        .map(|row| (row.concept, ids[row.class.as_str()]))
        .collect();
    let d = ClusterConfig::default();
    let k = r.get("k", a.k, ids.len())?;
    let cfg = ClusterConfig {
        restarts: r.get("restarts", a.restarts, d.restarts)?,
        max_iter: r.get("max-iter", a.max_iter, d.max_iter)?,
        tol: r.get("tol", a.tol, d.tol)?,
        seed,
    };
    if k == 0 || cfg.restarts == 0 {
        return Err(usage("k and restarts must be at least 1"));
    }
    let report = kmeans_purity(&table, &gold, k, &cfg)?;
    if report.excluded > 0 {
        warn!(
            "{} gold concepts have no embedding and were excluded",
            report.excluded
        );
    }
    write_file(&a.out, &report.to_text())?;
    m.set("result.mean-purity", format!("{:.4}", report.mean));
    m.set("result.std-purity", format!("{:.4}", report.std));
    m.output("report", &a.out);
    Ok(a.out.clone())
}

fn neighbors(
    a: &crate::NeighborsArgs,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let k = r.get("k", a.k, 10usize)?;
    let table = load_table(&a.table, m)?;
    let mut text = String::from("query\trank\tneighbor\tcosine\n");
    for word in &a.words {
        for (rank, (w, cos)) in concept_neighbors(&table, word, k)?.into_iter().enumerate() {
            writeln!(text, "{word}\t{}\t{w}\t{cos:.6}", rank + 1).unwrap();
        }
    }
    write_file(&a.out, &text)?;
    m.set("words", a.words.join(","));
    m.output("neighbors", &a.out);
    Ok(a.out.clone())
}

fn anisotropy(
    a: &crate::AnisotropyArgs,
    seed: u64,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let samples = r.get("samples", a.samples, 10_000usize)?;
    let bins = r.get("bins", a.bins, 50usize)?;
    if bins == 0 || samples == 0 {
        return Err(usage("samples and bins must be at least 1"));
    }
    let table = load_table(&a.table, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hist = anisotropy_histogram(&table, samples, bins, &mut rng)?;
    write_file(&a.out, &hist.to_text())?;
    m.set("result.mean", format!("{:.6}", hist.mean));
    m.set("result.std", format!("{:.6}", hist.std));
    m.output("histogram", &a.out);
    Ok(a.out.clone())
}

fn shift(
    a: &crate::NeighborShiftArgs,
    r: &mut Resolver,
    m: &mut Manifest,
) -> Result<std::path::PathBuf> {
    let top_in = r.get("top-in", a.top_in, 100usize)?;
    let top_out = r.get("top-out", a.top_out, 1000usize)?;
    if top_in == 0 {
        return Err(usage("--top-in must be at least 1"));
    }
    let base = load_store(&a.base, m, "base")?;
    let tuned = load_store(&a.tuned, m, "tuned")?;
    let pairs = neighbor_shift(&base, &tuned, top_in, top_out)?;
    let vocab = base.vocab();
    let mut text =
        String::from("mention\tneighbor\tconcept\tneighbor_concept\tsentence\tneighbor_sentence\n");
    for (i, j) in &pairs {
        let word = |x: u32| vocab.word(base.concept(x)).unwrap_or("?");
        writeln!(
            text,
            "{i}\t{j}\t{}\t{}\t{}\t{}",
            word(*i),
            word(*j),
            base.sentence(*i),
            base.sentence(*j)
        )
        .unwrap();
    }
    write_file(&a.out, &text)?;
    m.set("result.pairs", pairs.len());
    m.output("pairs", &a.out);
    Ok(a.out.clone())
}
