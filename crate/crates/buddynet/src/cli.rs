//! Command-line surface: `synth`, `train`, `embed`, `index`, `query`,
//! `eval`, `ablate`. A `--config FILE` reads `key = value` text; flags
//! override file values; `--seed` threads through every RNG. Exit codes:
//! 0 success, 1 validation/usage error, 2 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::BlockParams;
use crate::checkpoint::{load_block, save_block};
use crate::config::FullConfig;
use crate::data::{load_labeled_images, synth_dataset, write_dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::read_ground_truth;
use crate::pipeline::{embed_dataset, evaluate_records};
use crate::postproc::{
    compose, load_diffusion_table, offline_diffusion_prepare, save_diffusion_table, SimilarityFunc,
};
use crate::retrieval::{
    load_embeddings, pairwise_similarities, save_embeddings, EmbedOptions, RetrievalIndex,
};
use crate::train::{ablate, ablation_table, metrics_text, train, GridSpec};

const USAGE: &str = "\
usage: buddynet <command> [options]

commands:
  synth   --out DIR [--classes N] [--per-class N] [--side N] [--noise S] [--seed S]
  train   --data DIR --out DIR [--config FILE] [--seed S] [--epochs N]
          [--warmup-epochs N] [--lambda L]
          [--lr LR] [--batch-size N] [--kl-direction down|up|off]
          [--wt-direction up|down|off] [--master-crops G+L|G|L]
          [--assistant-crops G+L|G|L] [--no-checkpoints]
  embed   --ckpt FILE --manifest FILE --out FILE [--config FILE]
          [--ensemble FILE] [--per-segment]
  index   --db FILE --out FILE [--config FILE] [--alpha A] [--graph-k K]
  query   --db FILE --queries FILE --k N [--pp none|Q|WQR|O] [--table FILE]
          [--config FILE]
  eval    --db FILE --queries FILE --gt FILE [--pp none|Q|WQR|O] [--table FILE]
          [--config FILE] [--out FILE]
  ablate  --data DIR --grid lambda|combos [--from F] [--to T] [--step S]
          [--config FILE] [--seed S] [--epochs N] [--out FILE]
";

struct Args {
    flags: BTreeMap<String, String>,
    switches: Vec<String>,
}

impl Args {
    fn parse(argv: &[String], value_flags: &[&str], known_switches: &[&str]) -> Result<Self> {
        let mut flags = BTreeMap::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < argv.len() {
            let arg = &argv[i];
            let Some(name) = arg.strip_prefix("--") else {
                return Err(Error::Validation(format!("unexpected argument {arg:?}")));
            };
            if known_switches.contains(&name) {
                switches.push(name.to_string());
                i += 1;
                continue;
            }
            if !value_flags.contains(&name) {
                return Err(Error::Validation(format!("unknown flag --{name}")));
            }
            let value = argv
                .get(i + 1)
                .ok_or_else(|| Error::Validation(format!("flag --{name} needs a value")))?;
            flags.insert(name.to_string(), value.clone());
            i += 2;
        }
        Ok(Args { flags, switches })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(String::as_str)
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("missing required flag --{name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Validation(format!("bad value {v:?} for --{name}"))),
        }
    }
}

/// Load --config if given, then apply flag overrides that mirror config keys.
fn config_from(args: &Args, overrides: &[(&str, &str)]) -> Result<FullConfig> {
    let mut cfg = match args.get("config") {
        Some(path) => FullConfig::from_file(Path::new(path))?,
        None => FullConfig::default(),
    };
    for (flag, key) in overrides {
        if let Some(v) = args.get(flag) {
            cfg.set(key, v)?;
        }
    }
    // keep the schedule valid when a short --epochs undercuts the default
    cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(cfg.train.epochs);
    Ok(cfg)
}

/// Write to stdout, treating a closed pipe (e.g. `| head`) as a clean stop.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(e.into()),
    }
}

fn cmd_synth(args: &Args) -> Result<()> {
    let out = PathBuf::from(args.require("out")?);
    let mut spec = SyntheticSpec::new(
        args.parse_num("classes")?.unwrap_or(8),
        args.parse_num("per-class")?.unwrap_or(64),
        args.parse_num("side")?.unwrap_or(32),
    );
    if let Some(noise) = args.parse_num::<f64>("noise")? {
        spec.noise_sigma = noise;
    }
    if let Some(seed) = args.parse_num::<u64>("seed")? {
        spec.seed = seed;
    }
    let ds = synth_dataset(&spec)?;
    std::fs::create_dir_all(&out)?;
    write_dataset(&out, &ds)?;
    emit(&format!(
        "wrote {} train / {} database / {} query images to {}\n",
        ds.train.len(),
        ds.database.len(),
        ds.queries.len(),
        out.display()
    ))?;
    Ok(())
}

const TRAIN_OVERRIDES: &[(&str, &str)] = &[
    ("seed", "seed"),
    ("epochs", "epochs"),
    ("warmup-epochs", "warmup_epochs"),
    ("lambda", "lambda"),
    ("lr", "lr"),
    ("batch-size", "batch_size"),
    ("kl-direction", "kl_direction"),
    ("wt-direction", "wt_direction"),
    ("master-crops", "master_crops"),
    ("assistant-crops", "assistant_crops"),
];

fn cmd_train(args: &Args) -> Result<()> {
    let data_dir = PathBuf::from(args.require("data")?);
    let out = PathBuf::from(args.require("out")?);
    let mut cfg = config_from(args, TRAIN_OVERRIDES)?;
    std::fs::create_dir_all(&out)?;
    if !args.has("no-checkpoints") {
        cfg.train.checkpoint_dir = Some(out.join("checkpoints"));
    }
    let images = load_labeled_images(&data_dir.join("train.tsv"))?;
    let state = train(&cfg.train, &images)?;
    save_block(&out.join("master.bnet"), &state.master)?;
    save_block(&out.join("assistant.bnet"), &state.assistant)?;
    std::fs::write(out.join("metrics.tsv"), metrics_text(&state.history))?;
    std::fs::write(out.join("config.txt"), cfg.print())?;
    if let Some(last) = state.history.last() {
        emit(&format!(
            "trained {} epochs; final loss {:.6} (kl {:.6}, master {:.6}, assistant {:.6})\n",
            state.history.len(),
            last.total,
            last.kl,
            last.arc_master,
            last.arc_assistant
        ))?;
    } else {
        emit("trained 0 epochs; wrote initial checkpoints\n")?;
    }
    Ok(())
}

fn cmd_embed(args: &Args) -> Result<()> {
    let cfg = config_from(args, &[("seed", "seed")])?;
    let master = load_block(Path::new(args.require("ckpt")?))?;
    let images = load_labeled_images(Path::new(args.require("manifest")?))?;
    let mut opts = EmbedOptions::new(cfg.train.crop.clone());
    opts.normalize = cfg.concat_normalize;
    if args.has("per-segment") {
        opts.normalize = crate::retrieval::ConcatNormalize::PerSegment;
    }
    let ensemble;
    let blocks: Vec<&BlockParams> = match args.get("ensemble") {
        Some(path) => {
            ensemble = load_block(Path::new(path))?;
            vec![&master, &ensemble]
        }
        None => vec![&master],
    };
    let records = embed_dataset(&images, &blocks, &opts)?;
    save_embeddings(Path::new(args.require("out")?), &records)?;
    emit(&format!(
        "embedded {} images at dim {}\n",
        records.len(),
        records.first().map(|r| r.vector.len()).unwrap_or(0)
    ))?;
    Ok(())
}

fn cmd_index(args: &Args) -> Result<()> {
    let cfg = config_from(args, &[("alpha", "alpha"), ("graph-k", "graph_k")])?;
    let records = load_embeddings(Path::new(args.require("db")?))?;
    let index = RetrievalIndex::from_records(records)?;
    let sims = pairwise_similarities(&index)?;
    let table = offline_diffusion_prepare(&sims, index.len(), &cfg.diffusion)?;
    save_diffusion_table(Path::new(args.require("out")?), &table)?;
    emit(&format!("prepared diffusion table over {} records (alpha {})\n", table.n, table.alpha))?;
    Ok(())
}

fn similarity_from(args: &Args, cfg: &FullConfig, index: &RetrievalIndex) -> Result<SimilarityFunc> {
    let name = args.get("pp").unwrap_or("none");
    if name == "O" {
        if let Some(path) = args.get("table") {
            let table = load_diffusion_table(Path::new(path))?;
            if table.n != index.len() {
                return Err(Error::Validation(format!(
                    "diffusion table covers {} records, index has {}",
                    table.n,
                    index.len()
                )));
            }
            let ids = index.records().iter().map(|r| r.id.clone()).collect();
            return Ok(SimilarityFunc::OfflineDiffusion {
                table,
                cfg: cfg.diffusion.clone(),
                ids,
            });
        }
    }
    compose(name, index, &cfg.diffusion)
}

fn cmd_query(args: &Args) -> Result<()> {
    let cfg = config_from(args, &[])?;
    let db = load_embeddings(Path::new(args.require("db")?))?;
    let index = RetrievalIndex::from_records(db)?;
    let queries = load_embeddings(Path::new(args.require("queries")?))?;
    let k: usize = args
        .parse_num("k")?
        .ok_or_else(|| Error::Validation("missing required flag --k".into()))?;
    if k == 0 {
        return Err(Error::Validation("--k must be at least 1".into()));
    }
    let func = similarity_from(args, &cfg, &index)?;
    for q in &queries {
        let ranked = func.rank(Some(&q.id), &q.vector, &index)?;
        for (rank, (id, score)) in ranked.entries.iter().take(k).enumerate() {
            emit(&format!("{}\t{}\t{}\t{}\n", q.id, rank + 1, id, score))?;
        }
    }
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<()> {
    let cfg = config_from(args, &[])?;
    let db = load_embeddings(Path::new(args.require("db")?))?;
    let index = RetrievalIndex::from_records(db)?;
    let queries = load_embeddings(Path::new(args.require("queries")?))?;
    let gt = read_ground_truth(Path::new(args.require("gt")?))?;
    let func = similarity_from(args, &cfg, &index)?;
    let mut report = evaluate_records(&index, &queries, &gt, &func)?;
    report.config_echo = format!("db_size {} queries {}", index.len(), queries.len());
    let text = report.to_text();
    if let Some(path) = args.get("out") {
        std::fs::write(path, &text)?;
    }
    emit(&text)?;
    Ok(())
}

fn cmd_ablate(args: &Args) -> Result<()> {
    let data_dir = PathBuf::from(args.require("data")?);
    let cfg = config_from(args, TRAIN_OVERRIDES)?;
    let grid = match args.require("grid")? {
        "lambda" => GridSpec::Lambda {
            from: args.parse_num("from")?.unwrap_or(0.30),
            to: args.parse_num("to")?.unwrap_or(0.95),
            step: args.parse_num("step")?.unwrap_or(0.05),
        },
        "combos" => GridSpec::Combinations,
        other => {
            return Err(Error::Validation(format!(
                "unknown grid {other:?} (expected lambda or combos)"
            )))
        }
    };
    // the dataset partitions are reloaded from disk so ablation runs on the
    // exact corpus `synth` wrote
    let data = crate::data::SynthDataset {
        train: load_labeled_images(&data_dir.join("train.tsv"))?,
        database: load_labeled_images(&data_dir.join("database.tsv"))?,
        queries: load_labeled_images(&data_dir.join("queries.tsv"))?,
        ground_truth: read_ground_truth(&data_dir.join("gt.txt"))?,
    };
    let rows = ablate(&grid, &cfg.train, &data)?;
    let table = ablation_table(&rows);
    if let Some(path) = args.get("out") {
        std::fs::write(path, &table)?;
    }
    emit(&table)?;
    Ok(())
}

const TRAIN_FLAGS: &[&str] = &[
    "data", "out", "config", "seed", "epochs", "warmup-epochs", "lambda", "lr",
    "batch-size", "kl-direction", "wt-direction", "master-crops", "assistant-crops",
];

/// Entry point behind the binary. Returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let Some(command) = argv.first() else {
        eprint!("{USAGE}");
        return 1;
    };
    let ablate_flags: Vec<&str> = TRAIN_FLAGS
        .iter()
        .copied()
        .chain(["grid", "from", "to", "step"])
        .collect();
    let (value_flags, switches): (Vec<&str>, &[&str]) = match command.as_str() {
        "synth" => (vec!["out", "classes", "per-class", "side", "noise", "seed"], &[]),
        "train" => (TRAIN_FLAGS.to_vec(), &["no-checkpoints"]),
        "embed" => (vec!["ckpt", "manifest", "out", "config", "ensemble", "seed"], &["per-segment"]),
        "index" => (vec!["db", "out", "config", "alpha", "graph-k"], &[]),
        "query" => (vec!["db", "queries", "k", "pp", "table", "config"], &[]),
        "eval" => (vec!["db", "queries", "gt", "pp", "table", "config", "out"], &[]),
        "ablate" => (ablate_flags, &[]),
        other => {
            eprintln!("error: unknown command {other:?}");
            eprint!("{USAGE}");
            return 1;
        }
    };
    let rest = &argv[1..];
    let result = Args::parse(rest, &value_flags, switches).and_then(|args| match command.as_str() {
        "synth" => cmd_synth(&args),
        "train" => cmd_train(&args),
        "embed" => cmd_embed(&args),
        "index" => cmd_index(&args),
        "query" => cmd_query(&args),
        "eval" => cmd_eval(&args),
        "ablate" => cmd_ablate(&args),
        _ => unreachable!(),
    });
    match result {
        Ok(()) => 0,
        Err(e @ Error::Validation(_)) => {
            eprintln!("error: {e}");
            eprint!("{USAGE}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
