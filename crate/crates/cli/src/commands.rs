use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use linklab::alias::AliasTable;
use linklab::encoder::{read_embeddings, write_embeddings, EncoderParams};
use linklab::eval::{description_block, evaluate_embeddings, recall_at_k, EvalReport, EvalSet, KbMode};
use linklab::index::{write_token_rows, IndexConfig, SearchIndex};
use linklab::kb::{
    entity_set_intersection, extract_mentions, load_kb, open_text, read_mentions_jsonl, recall_upper_bound,
    write_mentions_jsonl, write_metrics, Entity, Mention, MentionExtraction,
};
use linklab::similarity::link_by_similarity;
use linklab::toyland::{generate, ToylandConfig};
use linklab::trainer::{initial_params, Finetuner};
use linklab::Qid;

use crate::{
    BaselineArgs, BaselineMode, BoundArgs, CliError, CliResult, Context, EmbedKbArgs, EpochArgs, EvalArgs, IndexArgs,
    IngestArgs, LinkArgs, TableArgs, ToylandArgs, TrainArgs, write_atomic,
};

const ENTITY_LANGUAGE: &str = "und";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_entities(path: &Path) -> CliResult<Vec<Entity>> {
    let report = load_kb(open_text(path)?, ENTITY_LANGUAGE)?;
    if report.skipped > 0 {
        log::warn!("{}: skipped {} malformed records", path.display(), report.skipped);
    }
    Ok(report.partition.entities.into_values().collect())
}

fn load_mentions(path: &Path) -> CliResult<Vec<Mention>> {
    Ok(read_mentions_jsonl(open_text(path)?)?)
}

fn load_params(ctx: &Context, checkpoint: Option<&Path>) -> CliResult<EncoderParams> {
    let params = match checkpoint {
        Some(p) => EncoderParams::read_checkpoint(File::open(p).map_err(io_err(p))?)?,
        None => initial_params(&ctx.config)?,
    };
    if params.vocab_size() != ctx.config.vocab_size as usize || params.dim() != ctx.config.dim {
        return Err(CliError::Usage(format!(
            "checkpoint is {}x{}, config asks for vocab_size = {} and dim = {}",
            params.vocab_size(),
            params.dim(),
            ctx.config.vocab_size,
            ctx.config.dim
        )));
    }
    Ok(params)
}

fn parse_mode(s: &str) -> CliResult<KbMode> {
    s.parse().map_err(|e: linklab::Error| CliError::Usage(e.to_string()))
}

fn write_report(path: &Path, report: &EvalReport) -> CliResult<()> {
    write_atomic(path, |w| report.write_tsv(w).map_err(io_err(path)))
}

pub fn ingest(ctx: &Context, a: &IngestArgs) -> CliResult<()> {
    let kb_path = ctx.path(&a.kb);
    let docs: Vec<PathBuf> = a.docs.iter().map(|d| ctx.path(d)).collect();
    let loaded = load_kb(open_text(&kb_path)?, &a.language)?;
    let mut ex = extract_mentions(open_text(&kb_path)?, &a.language)?;
    for d in &docs {
        let more: MentionExtraction = extract_mentions(open_text(d)?, &a.language)?;
        ex.mentions.extend(more.mentions);
        ex.dropped_empty += more.dropped_empty;
        ex.skipped_links += more.skipped_links;
        ex.skipped_records += more.skipped_records;
    }
    let out = ctx.path(&a.out);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let entities_path = out.join("entities.jsonl");
    let mentions_path = out.join("mentions.jsonl");
    let stats_path = out.join("ingest.tsv");
    write_atomic(&entities_path, |w| {
        loaded.partition.write_jsonl(w).map_err(io_err(&entities_path))
    })?;
    write_atomic(&mentions_path, |w| Ok(write_mentions_jsonl(&ex.mentions, w)?))?;
    let links = ex.mentions.len() + ex.dropped_empty + ex.skipped_links;
    let stats = [
        ("entities", loaded.partition.len() as f64),
        ("skipped_records", loaded.skipped as f64),
        ("links", links as f64),
        ("mentions", ex.mentions.len() as f64),
        ("dropped_empty", ex.dropped_empty as f64),
        ("skipped_links", ex.skipped_links as f64),
    ];
    write_atomic(&stats_path, |w| write_metrics(w, &stats).map_err(io_err(&stats_path)))?;
    write_metrics(std::io::stdout().lock(), &stats).map_err(io_err(Path::new("stdout")))?;
    let mut inputs = vec![kb_path.as_path()];
    inputs.extend(docs.iter().map(PathBuf::as_path));
    let m = ctx.manifest("ingest", &inputs, &[&entities_path, &mentions_path, &stats_path]);
    ctx.write_manifest(&out, &m)
}

pub fn table(ctx: &Context, a: &TableArgs) -> CliResult<()> {
    let inputs: Vec<PathBuf> = a.mentions.iter().map(|p| ctx.path(p)).collect();
    let mut mentions = Vec::new();
    for p in &inputs {
        mentions.extend(load_mentions(p)?);
    }
    let table = AliasTable::build(mentions.iter().map(|m| (m.surface.as_str(), m.gold_qid)), a.k, !a.uncased)?;
    let out = ctx.path(&a.out);
    write_atomic(&out, |w| Ok(table.write_tsv(w)?))?;
    log::info!("{} aliases from {} mentions", table.len(), mentions.len());
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    ctx.write_manifest(&out, &ctx.manifest("table", &refs, &[&out]))
}

fn read_table(path: &Path, uncased: bool) -> CliResult<AliasTable> {
    Ok(AliasTable::read_tsv(open_text(path)?, !uncased)?)
}

pub fn link(ctx: &Context, a: &LinkArgs) -> CliResult<()> {
    let table = read_table(&ctx.path(&a.table), a.uncased)?;
    let mut out = std::io::stdout().lock();
    for m in &a.mentions {
        let qids = if a.string {
            link_by_similarity(&table, m, a.k)?
        } else {
            table.link(m).into_iter().take(a.k).collect()
        };
        let rendered: Vec<String> = qids.iter().map(Qid::to_string).collect();
        writeln!(out, "{m}\t{}", rendered.join(" ")).map_err(io_err(Path::new("stdout")))?;
    }
    Ok(())
}

pub fn baseline(ctx: &Context, a: &BaselineArgs) -> CliResult<()> {
    let out = ctx.path(&a.out);
    let mismatch = |what: &str| Err(CliError::Usage(format!("{:?} mode {what}", a.mode)));
    let dense_inputs = a.alias_embeddings.is_some() || a.mention_embeddings.is_some();
    let lexical_inputs = a.table.is_some() || a.eval.is_some();
    let mut inputs = Vec::new();
    match a.mode {
        BaselineMode::Alias | BaselineMode::String => {
            if dense_inputs {
                return mismatch("does not take embedding files");
            }
            let (Some(table_path), Some(eval_path)) = (&a.table, &a.eval) else {
                return mismatch("needs --table and --eval");
            };
            let (table_path, eval_path) = (ctx.path(table_path), ctx.path(eval_path));
            let table = read_table(&table_path, a.uncased)?;
            let mentions = load_mentions(&eval_path)?;
            let depth = a.ks.iter().copied().max().unwrap_or(1);
            let ranked: Vec<Vec<Qid>> = mentions
                .iter()
                .map(|m| match a.mode {
                    BaselineMode::String => link_by_similarity(&table, &m.surface, depth),
                    _ => Ok(table.link(&m.surface)),
                })
                .collect::<Result<_, _>>()?;
            let golds: Vec<Qid> = mentions.iter().map(|m| m.gold_qid).collect();
            let language = mentions.first().map(|m| m.language.as_str()).unwrap_or("");
            let mode = if a.mode == BaselineMode::Alias { "alias" } else { "string" };
            let mut lines = Vec::new();
            for &k in &a.ks {
                let r = recall_at_k(&ranked, &golds, k)?;
                lines.push(format!("{language}\t{mode}\t{k}\t{r}\t{}", golds.len()));
            }
            write_atomic(&out, |w| {
                for l in &lines {
                    writeln!(w, "{l}").map_err(io_err(&out))?;
                }
                Ok(())
            })?;
            inputs.extend([table_path, eval_path]);
        }
        BaselineMode::Dense => {
            if lexical_inputs {
                return mismatch("does not take --table or --eval");
            }
            let (Some(alias_path), Some(mention_path)) = (&a.alias_embeddings, &a.mention_embeddings) else {
                return mismatch("needs --alias-embeddings and --mention-embeddings");
            };
            let (alias_path, mention_path) = (ctx.path(alias_path), ctx.path(mention_path));
            let (kb, kb_qids) = read_embeddings(open_text(&alias_path)?)?;
            let (mentions, golds) = read_embeddings(open_text(&mention_path)?)?;
            let report = evaluate_embeddings(
                kb,
                kb_qids,
                &mentions,
                &golds,
                &a.ks,
                IndexConfig::exact(ctx.config.seed),
                "dense",
                KbMode::Descriptions,
            )?;
            write_report(&out, &report)?;
            inputs.extend([alias_path, mention_path]);
        }
    }
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    ctx.write_manifest(&out, &ctx.manifest("baseline", &refs, &[&out]))
}

pub fn embed_kb(ctx: &Context, a: &EmbedKbArgs) -> CliResult<()> {
    let entities_path = ctx.path(&a.entities);
    let checkpoint = a.checkpoint.as_ref().map(|p| ctx.path(p));
    let entities = load_entities(&entities_path)?;
    let params = load_params(ctx, checkpoint.as_deref())?;
    let refs: Vec<&Entity> = entities.iter().collect();
    let (qids, tokens) = description_block(&refs, ctx.config.context_size, ctx.config.vocab())?;
    let embedded = params.embed(&tokens)?;
    let out = ctx.path(&a.out);
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".tokens");
    let sidecar = PathBuf::from(sidecar);
    write_atomic(&out, |w| Ok(write_embeddings(w, &embedded, &qids)?))?;
    write_atomic(&sidecar, |w| Ok(write_token_rows(w, &qids, &tokens)?))?;
    let mut inputs = vec![entities_path.as_path()];
    inputs.extend(checkpoint.as_deref());
    ctx.write_manifest(&out, &ctx.manifest("embed-kb", &inputs, &[&out, &sidecar]))
}

pub fn index(ctx: &Context, a: &IndexArgs) -> CliResult<()> {
    let emb_path = ctx.path(&a.embeddings);
    let query_path = ctx.path(&a.queries);
    let (kb, qids) = read_embeddings(open_text(&emb_path)?)?;
    let (queries, _) = read_embeddings(open_text(&query_path)?)?;
    let exact = SearchIndex::build(kb.clone(), qids.clone(), None, IndexConfig::exact(ctx.config.seed))?;
    let approx = SearchIndex::build(
        kb,
        qids,
        None,
        IndexConfig {
            partitions: a.partitions,
            default_probes: a.probes,
            seed: ctx.config.seed,
        },
    )?;
    let k = a.k.min(exact.len());
    let mut found = 0usize;
    let mut scanned = 0usize;
    let sizes = approx.partition_sizes();
    for i in 0..queries.len() {
        let q = queries.row(i);
        let truth: HashSet<usize> = exact.search(q, k, None)?.into_iter().map(|h| h.row).collect();
        let hits = approx.search(q, k, None)?;
        found += hits.iter().filter(|h| truth.contains(&h.row)).count();
        let all = approx.search(q, approx.len(), None)?;
        let probed: HashSet<usize> = all.iter().map(|h| approx.assignment()[h.row]).collect();
        scanned += probed.iter().map(|&c| sizes[c]).sum::<usize>();
    }
    let n = queries.len().max(1) as f64;
    let metrics = [
        ("queries", queries.len() as f64),
        ("partitions", a.partitions as f64),
        ("probes", a.probes as f64),
        ("k", k as f64),
        ("recall_vs_exact", found as f64 / (n * k as f64)),
        ("scanned_fraction", scanned as f64 / (n * approx.len() as f64)),
    ];
    let out = ctx.path(&a.out);
    write_atomic(&out, |w| write_metrics(w, &metrics).map_err(io_err(&out)))?;
    ctx.write_manifest(&out, &ctx.manifest("index", &[&emb_path, &query_path], &[&out]))
}

pub fn epoch(ctx: &Context, a: &EpochArgs) -> CliResult<()> {
    let entities_path = ctx.path(&a.entities);
    let train_path = ctx.path(&a.train_mentions);
    let checkpoint = a.checkpoint.as_ref().map(|p| ctx.path(p));
    let entities = load_entities(&entities_path)?;
    let train = load_mentions(&train_path)?;
    let params = load_params(ctx, checkpoint.as_deref())?;
    let refs: Vec<&Entity> = entities.iter().collect();
    let tuner = Finetuner::new(ctx.config.clone(), &refs, &train, None, &[1])?;
    let out = ctx.path(&a.out);
    let mut n = 0;
    write_atomic(&out, |w| {
        n = tuner.generate_epoch(a.round, &params, w)?;
        Ok(())
    })?;
    log::info!("wrote {n} batches to {}", out.display());
    let mut inputs = vec![entities_path.as_path(), train_path.as_path()];
    inputs.extend(checkpoint.as_deref());
    ctx.write_manifest(&out, &ctx.manifest("epoch", &inputs, &[&out]))
}

fn config_text(ctx: &Context) -> String {
    ctx.config
        .entries()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn round_file(dir: &Path, prefix: &str, round: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}_round{round}.{ext}"))
}

/// Last round whose checkpoint and report both exist, counting up from 0.
fn completed_rounds(dir: &Path, rounds: usize) -> Option<usize> {
    let mut last = None;
    for r in 0..=rounds {
        if round_file(dir, "params", r, "ckpt").is_file() && round_file(dir, "report", r, "tsv").is_file() {
            last = Some(r);
        } else {
            break;
        }
    }
    last
}

pub fn train(ctx: &Context, a: &TrainArgs) -> CliResult<()> {
    let cfg = &ctx.config;
    let kb_mode = parse_mode(&a.kb_mode)?;
    let entities_path = ctx.path(&a.entities);
    let train_path = ctx.path(&a.train_mentions);
    let eval_path = ctx.path(&a.eval_mentions);
    let entities = load_entities(&entities_path)?;
    let train = load_mentions(&train_path)?;
    let eval_mentions = load_mentions(&eval_path)?;
    let out = ctx.path(&a.out);
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let config_path = out.join("config.txt");
    let text = config_text(ctx);
    if config_path.is_file() {
        let previous = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
        if previous != text {
            return Err(CliError::Usage(format!(
                "{} was trained with a different config; use a fresh output directory",
                out.display()
            )));
        }
    } else {
        write_atomic(&config_path, |w| w.write_all(text.as_bytes()).map_err(io_err(&config_path)))?;
    }

    let refs: Vec<&Entity> = entities.iter().collect();
    let eval = EvalSet::prepare(
        &refs,
        &eval_mentions,
        Some(&train),
        kb_mode,
        cfg.context_size,
        cfg.vocab(),
    )?;
    let tuner = Finetuner::new(cfg.clone(), &refs, &train, Some(&eval), &a.ks)?;
    let (start, mut params) = match completed_rounds(&out, cfg.rounds) {
        Some(r) => {
            let ckpt = round_file(&out, "params", r, "ckpt");
            log::info!("resuming after round {r}");
            (r + 1, load_params(ctx, Some(&ckpt))?)
        }
        None => (0, tuner.initial_params()?),
    };
    let keep_epochs = !a.no_epochs;
    let mut on_round = |round: usize, p: &EncoderParams, report: &EvalReport, _: Option<&linklab::trainer::RoundSummary>| {
        if round > 0 && keep_epochs {
            let tmp = round_file(&out, "epoch", round, "bin.gz.partial");
            fs::rename(&tmp, round_file(&out, "epoch", round, "bin.gz")).map_err(linklab::Error::Io)?;
        }
        let ckpt = round_file(&out, "params", round, "ckpt");
        write_atomic(&ckpt, |w| Ok(p.write_checkpoint(w)?)).map_err(into_core)?;
        write_report(&round_file(&out, "report", round, "tsv"), report).map_err(into_core)?;
        log::info!(
            "round {round}: {}",
            report
                .recalls
                .iter()
                .map(|(k, r)| format!("R@{k} = {r:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        Ok(())
    };
    let open_epoch = |round: usize| -> linklab::Result<Option<BufWriter<File>>> {
        if !keep_epochs {
            return Ok(None);
        }
        let tmp = round_file(&out, "epoch", round, "bin.gz.partial");
        Ok(Some(BufWriter::new(File::create(tmp)?)))
    };
    tuner.run_with_epochs(&mut params, start, open_epoch, &mut on_round)?;

    let combined = out.join("reports.tsv");
    write_atomic(&combined, |w| {
        for r in 0..=cfg.rounds {
            let path = round_file(&out, "report", r, "tsv");
            for line in open_text(&path)?.lines() {
                let line = line.map_err(io_err(&path))?;
                writeln!(w, "{r}\t{line}").map_err(io_err(&combined))?;
            }
        }
        Ok(())
    })?;
    let m = ctx.manifest("train", &[&entities_path, &train_path, &eval_path], &[&out]);
    ctx.write_manifest(&out, &m)
}

fn into_core(e: CliError) -> linklab::Error {
    match e {
        CliError::Core(e) => e,
        CliError::Io { source, .. } => linklab::Error::Io(source),
        other => linklab::Error::Io(std::io::Error::other(other.to_string())),
    }
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> CliResult<()> {
    let cfg = &ctx.config;
    let kb_mode = parse_mode(&a.kb_mode)?;
    let entities_path = ctx.path(&a.entities);
    let eval_path = ctx.path(&a.eval_mentions);
    let train_path = a.train_mentions.as_ref().map(|p| ctx.path(p));
    let checkpoint = a.checkpoint.as_ref().map(|p| ctx.path(p));
    let entities = load_entities(&entities_path)?;
    let eval_mentions = load_mentions(&eval_path)?;
    let train = train_path.as_deref().map(load_mentions).transpose()?;
    let params = load_params(ctx, checkpoint.as_deref())?;
    let refs: Vec<&Entity> = entities.iter().collect();
    let set = EvalSet::prepare(
        &refs,
        &eval_mentions,
        train.as_deref(),
        kb_mode,
        cfg.context_size,
        cfg.vocab(),
    )?;
    let report = set.evaluate(&params, &a.ks, cfg.index_config(cfg.seed))?;
    let out = ctx.path(&a.out);
    write_report(&out, &report)?;
    let mut inputs = vec![entities_path.as_path(), eval_path.as_path()];
    inputs.extend(train_path.as_deref());
    inputs.extend(checkpoint.as_deref());
    ctx.write_manifest(&out, &ctx.manifest("eval", &inputs, &[&out]))
}

pub fn bound(ctx: &Context, a: &BoundArgs) -> CliResult<()> {
    let entities_path = ctx.path(&a.entities);
    let eval_path = ctx.path(&a.eval_mentions);
    let kb: HashSet<Qid> = load_entities(&entities_path)?.into_iter().map(|e| e.qid).collect();
    let mentions = load_mentions(&eval_path)?;
    let golds: HashSet<Qid> = mentions.iter().map(|m| m.gold_qid).collect();
    let metrics = [
        ("mentions", mentions.len() as f64),
        ("kb_entities", kb.len() as f64),
        ("recall_upper_bound", recall_upper_bound(&mentions, &kb)?),
        ("entity_set_intersection", entity_set_intersection(&golds, &kb)?),
    ];
    let out = ctx.path(&a.out);
    write_atomic(&out, |w| write_metrics(w, &metrics).map_err(io_err(&out)))?;
    ctx.write_manifest(&out, &ctx.manifest("bound", &[&entities_path, &eval_path], &[&out]))
}

pub fn toyland(ctx: &Context, a: &ToylandArgs) -> CliResult<()> {
    let mut cfg = ToylandConfig {
        entities: a.entities,
        ..ToylandConfig::default()
    };
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let corpus = generate(&cfg)?;
    let out = ctx.path(&a.out);
    corpus.write_files(&out)?;
    ctx.write_manifest(&out, &ctx.manifest("toyland", &[], &[&out]))
}
