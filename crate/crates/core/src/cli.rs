//! Command-line surface: dataset generation, landscape mapping, analysis.
//!
//! Exit codes: 0 success, 2 configuration error, 3 convergence failure,
//! 4 I/O error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::basin::{BasinMapper, MinimaRegistry};
use crate::elm::{to_dot, ElmTree};
use crate::error::{Error, Result};
use crate::harness::{auc, erc, landing_frequencies, Algorithm, LandingHistogram};
use crate::model::{Dataset, ModelPoint};
use crate::models::bernoulli::{sample_sketches, template_overlap, TemplateFile};
use crate::models::bicluster::{generate_matrix, save_matrix_csv};
use crate::models::gmm::{sample_gmm, separability, GmmModel};
use crate::pipeline::{
    build_model, difficulty_map, execute, resume_map, write_artifacts, Checkpoint, DifficultyGrid,
    ElmJson, GmmSpecFile, Meta, RunConfig,
};
use crate::rng::substream;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser)]
#[command(
    name = "elma",
    version,
    about = "Energy landscape mapping for non-convex learning objectives"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic datasets with known ground truth.
    Generate {
        #[command(subcommand)]
        what: GenerateCmd,
    },
    /// Run the sampling + mapping pipeline and write ELM artifacts.
    Map(MapArgs),
    /// Analyze existing artifacts (tree export, masses, learners, ERC, ...).
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
}

#[derive(Subcommand)]
enum GenerateCmd {
    /// Mixture-of-Gaussians dataset rescaled to a target separability.
    Gmm {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        dim: usize,
        /// Target separability c.
        #[arg(long)]
        sep: f64,
        #[arg(long)]
        m: usize,
        /// Fraction of points carrying ground-truth labels.
        #[arg(long, default_value_t = 0.0)]
        labels: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Bernoulli sketches from a template file.
    Bernoulli {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        m: usize,
        /// Per-bit flip probability of the generated data.
        #[arg(long)]
        flip: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Co-occurrence count matrix from the And-Or bi-cluster model.
    Bicluster {
        #[arg(long)]
        alts: usize,
        #[arg(long)]
        overlap: usize,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        obs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override config entries as section.key=value (flags win).
    #[arg(long = "set")]
    set: Vec<String>,
    /// Number of independent chains (overrides [pipeline] chains).
    #[arg(long)]
    chains: Option<usize>,
    /// Exit 0 even when the stop rule says "not converged".
    #[arg(long)]
    allow_unconverged: bool,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Export the ELM tree as DOT.
    Tree {
        #[arg(long)]
        elm: PathBuf,
        #[arg(long)]
        dot: PathBuf,
    },
    /// Per-basin probability masses as CSV.
    Mass {
        #[arg(long)]
        elm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-node volumes as CSV.
    Volume {
        #[arg(long)]
        elm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run reference learners and record basin landing frequencies.
    Learners {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding registry.json from `map`.
        #[arg(long)]
        artifacts: PathBuf,
        /// Comma-separated list: em,kmeans,2em.
        #[arg(long)]
        alg: String,
        #[arg(long, default_value_t = 200)]
        runs: u64,
        /// Ground-truth spec for the error column.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error-Recall curve and AUC against a ground-truth model.
    Erc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value = "em")]
        alg: String,
        #[arg(long, default_value_t = 200)]
        runs: u64,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long = "eps-max")]
        eps_max: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline per grid cell: leaf counts, AUC, regimes.
    Difficulty {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version with success codes
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_of(&e)
        }
    }
}

fn exit_code_of(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Json(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Generate { what } => generate(what),
        Cmd::Map(args) => map(args),
        Cmd::Analyze { what } => analyze(what),
    }
}

fn generate(cmd: GenerateCmd) -> Result<i32> {
    match cmd {
        GenerateCmd::Gmm {
            k,
            dim,
            sep,
            m,
            labels,
            seed,
            out,
        } => {
            let truth = crate::pipeline::synth_gmm_truth(k, dim, sep, seed)?;
            let dataset = sample_gmm(&truth, m, labels, &mut substream(seed, "generate-gmm"))?;
            std::fs::create_dir_all(&out)?;
            dataset.save(&out.join("dataset.json"))?;
            GmmSpecFile::from_params(&truth, seed).save(&out.join("truth.json"))?;
            let c = if k >= 2 {
                separability(&truth)?
            } else {
                f64::INFINITY
            };
            println!("wrote dataset.json and truth.json (separability = {c:.4})");
            Ok(EXIT_OK)
        }
        GenerateCmd::Bernoulli {
            templates,
            m,
            flip,
            seed,
            out,
        } => {
            let tf = TemplateFile::load(&templates)?;
            let bits = tf.bits();
            let dataset =
                sample_sketches(&bits, &tf.alphas, flip, m, &mut substream(seed, "generate-bt"))?;
            std::fs::create_dir_all(&out)?;
            dataset.save(&out.join("dataset.json"))?;
            let overlap = if bits.len() >= 2 {
                template_overlap(&bits)?
            } else {
                0.0
            };
            println!("wrote dataset.json ({m} sketches, template overlap = {overlap:.4})");
            Ok(EXIT_OK)
        }
        GenerateCmd::Bicluster {
            alts,
            overlap,
            noise,
            obs,
            seed,
            out,
        } => {
            let gen = generate_matrix(alts, overlap, noise, obs, &mut substream(seed, "generate-bc"))?;
            std::fs::create_dir_all(&out)?;
            save_matrix_csv(&gen.matrix, &out.join("matrix.csv"))?;
            let truth = serde_json::json!({
                "rows": gen.truth_rows,
                "cols": gen.truth_cols,
            });
            std::fs::write(
                out.join("truth.json"),
                serde_json::to_string_pretty(&truth)?,
            )?;
            println!(
                "wrote matrix.csv ({0}x{0}) and truth.json",
                gen.matrix.len()
            );
            Ok(EXIT_OK)
        }
    }
}

fn map(args: MapArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(&args.config)?;
    for spec in &args.set {
        cfg.apply_override(spec)?;
    }
    if let Some(chains) = args.chains {
        cfg.pipeline.chains = chains;
    }
    let base = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let artifacts = match &args.resume {
        Some(ckpt_path) => {
            let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(ckpt_path)?)?;
            let model = build_model(&cfg.model, &base)?;
            let artifacts = resume_map(model.as_ref(), &cfg, ck)?;
            if let Some(dir) = &cfg.output.dir {
                let dir = if dir.is_absolute() {
                    dir.clone()
                } else {
                    base.join(dir)
                };
                let checkpoint = artifacts.checkpoint(cfg.resume_hash());
                write_artifacts(&dir, &artifacts, Some(&checkpoint))?;
            }
            artifacts
        }
        None => execute(&cfg, &base)?,
    };
    println!(
        "mapped {} minima, {} barrier pairs; converged = {}",
        artifacts.registry.live_count(),
        artifacts.barriers.entries.len(),
        artifacts.report.converged
    );
    if artifacts.report.converged || args.allow_unconverged {
        Ok(EXIT_OK)
    } else {
        eprintln!("stop rule verdict: not converged (use --allow-unconverged to accept)");
        Ok(EXIT_CONVERGENCE)
    }
}

fn load_elm(path: &Path) -> Result<(Meta, ElmTree)> {
    let doc: ElmJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok((
        doc.meta,
        ElmTree {
            nodes: doc.nodes,
            root: doc.root,
        },
    ))
}

fn meta_comment(meta: &Meta) -> String {
    format!(
        "# model={} config={} seed={}\n",
        meta.model, meta.config, meta.seed
    )
}

fn write_csv(path: &Path, meta: &Meta, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut text = meta_comment(meta);
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record(header)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in rows {
        wtr.write_record(&row)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let body = wtr
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    text.push_str(&String::from_utf8_lossy(&body));
    std::fs::write(path, text)?;
    Ok(())
}

fn load_registry(artifacts: &Path) -> Result<(Meta, MinimaRegistry)> {
    let text = std::fs::read_to_string(artifacts.join("registry.json"))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let meta: Meta = serde_json::from_value(doc["meta"].clone())?;
    let registry: MinimaRegistry = serde_json::from_value(doc["entries"].clone())?;
    Ok((meta, registry))
}

fn gmm_model_from_config(cfg: &RunConfig, base: &Path) -> Result<GmmModel> {
    if cfg.model.kind != "gmm" {
        return Err(Error::config(
            "learner analysis requires a gmm model configuration",
        ));
    }
    let boxed = build_model(&cfg.model, base)?;
    // rebuild concretely; build_model type-erases
    drop(boxed);
    let ds_path = cfg
        .model
        .dataset
        .as_ref()
        .ok_or_else(|| Error::config("gmm model needs `dataset`"))?;
    let path = if ds_path.is_absolute() {
        ds_path.clone()
    } else {
        base.join(ds_path)
    };
    let dataset = Dataset::load(&path)?;
    let k = cfg.model.k.ok_or_else(|| Error::config("gmm model needs `k`"))?;
    let data: Vec<nalgebra::DVector<f64>> = dataset
        .points
        .iter()
        .map(|p| nalgebra::DVector::from_column_slice(p))
        .collect();
    let prior = match cfg.model.prior.as_deref().unwrap_or("niw") {
        "flat" => crate::models::gmm::GmmPrior::Flat,
        _ => {
            let (mean, cov) = crate::models::gmm::sample_moments(&data)?;
            crate::models::gmm::GmmPrior::default_for(k, &mean, &cov, data.len())
        }
    };
    GmmModel::new(&dataset, k, prior, cfg.model.eps_m.unwrap_or(0.0))
}

fn analyze(cmd: AnalyzeCmd) -> Result<i32> {
    match cmd {
        AnalyzeCmd::Tree { elm, dot } => {
            let (_, tree) = load_elm(&elm)?;
            std::fs::write(&dot, to_dot(&tree))?;
            println!("wrote {}", dot.display());
            Ok(EXIT_OK)
        }
        AnalyzeCmd::Mass { elm, out } => {
            let (meta, tree) = load_elm(&elm)?;
            let rows: Vec<Vec<String>> = tree
                .leaves()
                .map(|n| {
                    vec![
                        n.basin_id.unwrap_or_default().to_string(),
                        format!("{}", n.mass),
                    ]
                })
                .collect();
            write_csv(&out, &meta, &["basin_id", "mass"], rows)?;
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
        AnalyzeCmd::Volume { elm, out } => {
            let (meta, tree) = load_elm(&elm)?;
            let rows: Vec<Vec<String>> = tree
                .nodes
                .iter()
                .map(|n| {
                    vec![
                        n.id.to_string(),
                        match n.kind {
                            crate::elm::NodeKind::Leaf => "leaf".into(),
                            crate::elm::NodeKind::Barrier => "barrier".into(),
                        },
                        format!("{}", n.energy),
                        format!("{}", n.volume),
                    ]
                })
                .collect();
            write_csv(&out, &meta, &["node_id", "kind", "energy", "volume"], rows)?;
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
        AnalyzeCmd::Learners {
            config,
            artifacts,
            alg,
            runs,
            truth,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let base = config
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let model = gmm_model_from_config(&cfg, &base)?;
            let (meta, registry) = load_registry(&artifacts)?;
            let mapper = BasinMapper::with_registry(cfg.tolerances(), registry);
            let theta_star = match truth {
                Some(p) => {
                    let spec = GmmSpecFile::load(&p)?;
                    Some(model.point_of(&spec.params()?))
                }
                None => None,
            };
            let mut rows = Vec::new();
            for name in alg.split(',') {
                let a = Algorithm::parse(name.trim())?;
                let hist = landing_frequencies(
                    &model,
                    &mapper,
                    a,
                    runs,
                    cfg.sampler.seed,
                    theta_star.as_ref(),
                )?;
                for r in &hist.records {
                    rows.push(vec![
                        r.algorithm.clone(),
                        r.run.to_string(),
                        r.basin_id.map(|b| b.to_string()).unwrap_or_default(),
                        r.error.map(|e| format!("{e}")).unwrap_or_default(),
                        format!("{}", r.energy),
                        r.converged.to_string(),
                    ]);
                }
            }
            write_csv(
                &out,
                &meta,
                &["algorithm", "run", "basin_id", "error", "energy", "converged"],
                rows,
            )?;
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
        AnalyzeCmd::Erc {
            config,
            artifacts,
            alg,
            runs,
            truth,
            eps_max,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let base = config
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let model = gmm_model_from_config(&cfg, &base)?;
            let (meta, registry) = load_registry(&artifacts)?;
            let mapper = BasinMapper::with_registry(cfg.tolerances(), registry);
            let spec = GmmSpecFile::load(&truth)?;
            let theta_star = model.point_of(&spec.params()?);
            let a = Algorithm::parse(&alg)?;
            let hist: LandingHistogram = landing_frequencies(
                &model,
                &mapper,
                a,
                runs,
                cfg.sampler.seed,
                Some(&theta_star),
            )?;
            let minima: BTreeMap<u32, ModelPoint> = mapper
                .registry()
                .live()
                .map(|e| (e.id, e.location.clone()))
                .collect();
            let curve = erc(&model, &hist, &minima, &theta_star)?;
            let score = auc(&curve, eps_max)?;
            let doc = serde_json::json!({
                "meta": meta,
                "algorithm": a.name(),
                "eps_max": eps_max,
                "points": curve.points,
                "auc": score,
                "failures": hist.failures,
            });
            std::fs::write(&out, serde_json::to_string_pretty(&doc)?)?;
            println!("wrote {} (auc = {score:.4})", out.display());
            Ok(EXIT_OK)
        }
        AnalyzeCmd::Difficulty { grid, out } => {
            let grid = DifficultyGrid::load(&grid)?;
            let cells = difficulty_map(&grid)?;
            let mut keys: Vec<String> = Vec::new();
            for c in &cells {
                for k in c.condition.keys() {
                    if !keys.contains(k) {
                        keys.push(k.clone());
                    }
                }
            }
            keys.sort();
            let mut header: Vec<&str> = keys.iter().map(String::as_str).collect();
            header.extend(["leaf_count", "auc", "regime", "converged"]);
            let rows: Vec<Vec<String>> = cells
                .iter()
                .map(|c| {
                    let mut row: Vec<String> = keys
                        .iter()
                        .map(|k| {
                            c.condition
                                .get(k)
                                .map(|v| format!("{v}"))
                                .unwrap_or_default()
                        })
                        .collect();
                    row.push(c.leaf_count.to_string());
                    row.push(c.auc.map(|a| format!("{a}")).unwrap_or_default());
                    row.push(c.regime.clone().unwrap_or_default());
                    row.push(c.converged.to_string());
                    row
                })
                .collect();
            let meta = Meta {
                model: grid.model.clone(),
                config: "difficulty-grid".into(),
                seed: grid.sampler.seed,
            };
            write_csv(&out, &meta, &header, rows)?;
            println!("wrote {} ({} cells)", out.display(), cells.len());
            Ok(EXIT_OK)
        }
    }
}
