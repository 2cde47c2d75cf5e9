//! Command implementations: train, eval, infer, sweep, export-graph.

use crate::config::{config_hash, RunConfigFile};
use crate::error::{CliError, CliResult};
use slidegcd::checkpoint::{load_checkpoint, save_checkpoint};
use slidegcd::data::PatchBag;
use slidegcd::metrics::Metrics;
use slidegcd::pipeline::{embed_bag, evaluate_bags, infer, train, Checkpoint, TrainConfig};
use slidegcd::slidegraph::build_graph;
use slidegcd::Matrix;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

fn write_metrics_json(metrics: &Metrics, hash: &str, path: &Path) -> CliResult<()> {
    let per_class: BTreeMap<String, &slidegcd::metrics::PerClass> = metrics
        .per_class
        .iter()
        .enumerate()
        .map(|(c, p)| (c.to_string(), p))
        .collect();
    let doc = serde_json::json!({
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
        "macro_auc": metrics.macro_auc,
        "per_class": per_class,
        "config_hash": hash,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn out_dir(cfg: &RunConfigFile, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<()> {
    let mut cfg = RunConfigFile::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let dataset = cfg.resolve_dataset()?;
    let dir = out_dir(&cfg, out);
    std::fs::create_dir_all(&dir)?;

    let ckpt = train(&cfg.train, &dataset)?;
    save_checkpoint(&ckpt, &dir.join("model.sgck"))?;

    let mut log_file = std::fs::File::create(dir.join("train_log.jsonl"))?;
    for record in &ckpt.log {
        writeln!(log_file, "{}", serde_json::to_string(record)?)?;
    }

    if !dataset.test.is_empty() {
        let report = slidegcd::pipeline::evaluate(&ckpt, &dataset, &dataset.test)?;
        write_metrics_json(&report.metrics, &config_hash(&cfg.train), &dir.join("metrics.json"))?;
    }
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    manifest: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let bags = match config {
        Some(c) => RunConfigFile::load(c)?.resolve_eval_bags(manifest)?,
        None => {
            let m = manifest.ok_or_else(|| {
                CliError::Usage("eval needs --manifest when no --config is given".into())
            })?;
            slidegcd::data::load_manifest_bags(m)?
        }
    };
    let refs: Vec<&PatchBag> = bags.iter().collect();
    let report = evaluate_bags(&ckpt, &refs)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    write_metrics_json(&report.metrics, &config_hash(&ckpt.config), &dir.join("metrics.json"))?;
    Ok(())
}

pub fn cmd_infer(checkpoint: &Path, manifest: &Path) -> CliResult<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let bags = slidegcd::data::load_manifest_bags(manifest)?;
    if bags.is_empty() {
        return Err(CliError::Usage("manifest lists no bags".into()));
    }
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for bag in &bags {
        let r = infer(&ckpt, &bag.embeddings)?;
        let probs: Vec<String> = r.probabilities.iter().map(|p| format!("{p:.6}")).collect();
        let neighbors: Vec<String> =
            r.neighbors.iter().map(|n| format!("{}:{}", n.node, n.label)).collect();
        writeln!(
            w,
            "{}\tpredicted={}\tprobs={}\tneighbors={}",
            bag.slide_id,
            r.predicted,
            probs.join(","),
            neighbors.join(",")
        )?;
    }
    Ok(())
}

/// One grid axis: a config key and its candidate values.
struct GridAxis {
    key: String,
    values: Vec<String>,
}

fn parse_grid(specs: &[String]) -> CliResult<Vec<GridAxis>> {
    if specs.is_empty() {
        return Err(CliError::Usage("sweep needs at least one --grid key=v1,v2,...".into()));
    }
    let mut axes = Vec::new();
    for spec in specs {
        let (key, vals) = spec.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("grid spec `{spec}` is not of the form key=v1,v2,..."))
        })?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
        if values.is_empty() || values.iter().any(String::is_empty) {
            return Err(CliError::Usage(format!("grid spec `{spec}` has empty values")));
        }
        axes.push(GridAxis { key: key.trim().to_string(), values });
    }
    Ok(axes)
}

fn apply_override(train: &mut TrainConfig, key: &str, value: &str) -> CliResult<()> {
    let parse_usize = || -> CliResult<usize> {
        value.parse().map_err(|_| CliError::Usage(format!("grid value `{value}` for {key} is not an integer")))
    };
    let parse_f64 = || -> CliResult<f64> {
        value.parse().map_err(|_| CliError::Usage(format!("grid value `{value}` for {key} is not a number")))
    };
    match key {
        "k" => train.k = parse_usize()?,
        "L" | "buffer_len" => train.buffer_len = parse_usize()?,
        "B" | "batch_size" => train.batch_size = parse_usize()?,
        "t" => train.t = parse_f64()?,
        "beta" => train.beta = parse_f64()?,
        "tau" => train.tau = parse_f64()?,
        other => return Err(CliError::Usage(format!("unknown grid key `{other}`"))),
    }
    Ok(())
}

fn cell_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct CellResult {
    label: String,
    metrics: Metrics,
    hash: String,
}

fn run_cell(
    cfg: &RunConfigFile,
    overrides: &[(String, String)],
    base_seed: u64,
    index: usize,
    dir: &Path,
) -> CliResult<CellResult> {
    let mut train_cfg = cfg.train.clone();
    for (key, value) in overrides {
        apply_override(&mut train_cfg, key, value)?;
    }
    train_cfg.seed = cell_seed(base_seed, index);
    train_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let cell = RunConfigFile { train: train_cfg.clone(), ..cfg.clone() };
    let dataset = cell.resolve_dataset()?;
    let ckpt = train(&train_cfg, &dataset)?;
    if dataset.test.is_empty() {
        return Err(CliError::Usage("sweep requires a test split for metrics".into()));
    }
    let report = slidegcd::pipeline::evaluate(&ckpt, &dataset, &dataset.test)?;
    let label: Vec<String> = overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let label = label.join(",");
    let hash = config_hash(&train_cfg);
    write_metrics_json(&report.metrics, &hash, &dir.join(format!("metrics_cell{index:03}.json")))?;
    Ok(CellResult { label, metrics: report.metrics, hash })
}

pub fn cmd_sweep(
    config: &Path,
    grid: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
    parallel: bool,
) -> CliResult<()> {
    let mut cfg = RunConfigFile::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let axes = parse_grid(grid)?;
    // cartesian product in declaration order, last axis fastest
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in &axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for v in &axis.values {
                let mut c = cell.clone();
                c.push((axis.key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    let dir = out_dir(&cfg, out);
    std::fs::create_dir_all(&dir)?;
    let base_seed = cfg.train.seed;

    // fail fast on invalid override values before any cell trains
    for cell in &cells {
        let mut probe = cfg.train.clone();
        for (k, v) in cell {
            apply_override(&mut probe, k, v)?;
        }
        probe.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }

    let results: Vec<CellResult> = if parallel {
        let slots: Vec<CliResult<CellResult>> = std::thread::scope(|scope| {
            let handles: Vec<_> = cells
                .iter()
                .enumerate()
                .map(|(i, cell)| {
                    let cfg = &cfg;
                    let dir = &dir;
                    scope.spawn(move || run_cell(cfg, cell, base_seed, i, dir))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep cell thread panicked")).collect()
        });
        slots.into_iter().collect::<CliResult<Vec<_>>>()?
    } else {
        cells
            .iter()
            .enumerate()
            .map(|(i, cell)| run_cell(&cfg, cell, base_seed, i, &dir))
            .collect::<CliResult<Vec<_>>>()?
    };

    let mut tsv = String::from("cell\tgrid\taccuracy\tmacro_f1\tmacro_auc\tconfig_hash\n");
    for (i, r) in results.iter().enumerate() {
        let auc = r.metrics.macro_auc.map(|a| format!("{a:.6}")).unwrap_or_else(|| "NA".into());
        tsv.push_str(&format!(
            "{i}\t{}\t{:.6}\t{:.6}\t{auc}\t{}\n",
            r.label, r.metrics.accuracy, r.metrics.macro_f1, r.hash
        ));
    }
    std::fs::write(dir.join("sweep.tsv"), tsv)?;
    Ok(())
}

pub fn cmd_export_graph(
    checkpoint: &Path,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> CliResult<()> {
    let ckpt: Checkpoint = load_checkpoint(checkpoint)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;

    let (buffer_rows, buffer_labels) = ckpt.buffer.node_rows();
    let mut sources: Vec<&str> = vec!["buffer"; buffer_rows.rows()];
    let mut labels = buffer_labels;
    let mut rows: Vec<Vec<f64>> =
        (0..buffer_rows.rows()).map(|i| buffer_rows.row(i).to_vec()).collect();
    if let Some(m) = manifest {
        for bag in slidegcd::data::load_manifest_bags(m)? {
            let s = embed_bag(&ckpt, &bag.embeddings)?;
            rows.push(s.row(0).to_vec());
            sources.push("batch");
            labels.push(bag.label);
        }
    }
    let n = rows.len();
    let x0 = Matrix::from_fn(n, ckpt.config.d_s, |i, j| rows[i][j]);
    let graph = build_graph(&x0, &ckpt.params.w_p, ckpt.config.k)?;

    let mut nodes = String::from("id\tsource\tlabel\tx\ty\n");
    for i in 0..n {
        let x = graph.projected.get(i, 0);
        let y = if graph.projected.cols() > 1 { graph.projected.get(i, 1) } else { 0.0 };
        nodes.push_str(&format!("{i}\t{}\t{}\t{x:.6}\t{y:.6}\n", sources[i], labels[i]));
    }
    std::fs::write(dir.join("nodes.tsv"), nodes)?;

    let mut edges = String::from("edge\tanchor\tmembers\n");
    for (e, edge) in graph.hyperedges.iter().enumerate() {
        let members: Vec<String> = edge.iter().map(usize::to_string).collect();
        edges.push_str(&format!("{e}\t{}\t{}\n", edge[0], members.join(",")));
    }
    std::fs::write(dir.join("edges.tsv"), edges)?;
    Ok(())
}
