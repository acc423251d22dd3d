//! Command-line front end. One binary, subcommand per workflow; everything
//! writes only to declared --out paths and checkpoint directories.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 runtime failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prefixgen::analysis::{
    extract_prefix_attention, relation_matrix, write_condition_map, write_relation_csv,
};
use prefixgen::encoders::{parse_pocket_file, select_anchor_inference, PocketGraph};
use prefixgen::model::{
    load_checkpoint, LoadedCheckpoint, ModelConfig, SampleParams, CHECKPOINT_VERSION,
};
use prefixgen::pipeline::{
    control_sweep, evaluate, ingest, read_dataset_jsonl, synthetic_corpus, synthetic_pocket,
    train, write_dataset_jsonl, write_eval_report, write_sweep_csv, write_train_log,
    ConditionsMode, PipelineError, TrainConfig, DATA_FORMAT_VERSION, PROPERTY_NAMES,
};
use prefixgen::props::{PropVec, SurrogateVina, N_PROPERTIES};
use prefixgen::smiles::{detokenize, tokenize};
use prefixgen::tensor::no_grad;

fn version_line() -> String {
    format!(
        "{} (checkpoint format v{}, dataset format v{})",
        env!("CARGO_PKG_VERSION"),
        CHECKPOINT_VERSION,
        DATA_FORMAT_VERSION
    )
}

#[derive(Parser)]
#[command(name = "prefixgen", version = version_line(), about = "Condition-prefixed molecule generator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split SMILES into tokens, one space-separated line per molecule.
    Tokenize {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Label molecules with computed properties, emitting dataset JSONL.
    Props {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Build a labeled dataset from a molecule list or the bundled
    /// synthetic generator.
    Ingest {
        /// Lines of `SMILES` or `SMILES<TAB>pocket_file`.
        #[arg(long = "in", value_name = "FILE", required_unless_present = "synthetic", conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        /// Generate this many synthetic molecules instead of reading --in.
        #[arg(long, value_name = "N")]
        synthetic: Option<usize>,
        /// Directory pocket file names resolve against.
        #[arg(long, value_name = "DIR")]
        pockets: Option<PathBuf>,
        /// With --synthetic: also write this many synthetic pockets into
        /// --pockets and assign them round-robin.
        #[arg(long, value_name = "M", requires = "pockets")]
        synthetic_pockets: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Optimize a model on a JSONL dataset; writes checkpoints and a
    /// training-log CSV into --out.
    Train {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Flat `key = value` file; same keys as --set.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set steps=500. Repeatable.
        #[arg(long, value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Training seed (same as --set seed=N).
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint directory.
        #[arg(long, value_name = "DIR", default_value = "ckpts")]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Recompute labels from the SMILES instead of trusting the file.
        #[arg(long)]
        recompute_labels: bool,
    },
    /// Sample molecules from a checkpoint.
    Sample {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// JSON object with any of vina/qed/sa/logp/lipinski/pocket;
        /// inline if it starts with '{', otherwise a file path. Omitted
        /// keys are unconditioned; omitted flag samples unconditionally.
        #[arg(long, value_name = "JSON")]
        conditions: Option<String>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Score samples against a dataset's conditions.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ignore the dataset's conditions and sample unconditionally.
        #[arg(long)]
        unconditional: bool,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Shift one conditioned property over several scales and report the
    /// achieved means.
    Sweep {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// One of: vina, qed, sa, logp, lipinski.
        #[arg(long, value_name = "NAME")]
        property: String,
        /// Comma-separated shifts, e.g. -2,0,2.
        #[arg(long, value_name = "LIST", allow_hyphen_values = true)]
        scales: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Condition-relation matrix (and optionally the aggregated prefix
    /// attention map) of a checkpoint, as labelled CSV.
    Analyze {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Base conditions, same format as `sample`. Properties absent
        /// here stay unconditioned and relate to nothing; the default
        /// conditions every scalar at a neutral value.
        #[arg(long, value_name = "JSON")]
        conditions: Option<String>,
        /// Perturbation step.
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        delta: f64,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Also write the aggregated condition-row attention map here.
        #[arg(long, value_name = "FILE")]
        attention: Option<PathBuf>,
    },
    /// Run a pocket file through a checkpoint's pocket encoder; prints one
    /// CSV row of embedding coordinates.
    EmbedPocket {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

struct CliError {
    code: u8,
    message: String,
}

fn usage_err(msg: impl std::fmt::Display) -> CliError {
    CliError { code: 1, message: msg.to_string() }
}

fn data_err(msg: impl std::fmt::Display) -> CliError {
    CliError { code: 2, message: msg.to_string() }
}

fn runtime_err(msg: impl std::fmt::Display) -> CliError {
    CliError { code: 3, message: msg.to_string() }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> CliError {
        use PipelineError::*;
        let code = match &e {
            Config(_) => 1,
            EmptyDataset | BadRecord { .. } | VocabMismatch | ConfigMismatch | OptState { .. }
            | Encoder(_) | Checkpoint(_) => 2,
            Diverged { .. } | Io(_) | Model(_) | Loss(_) | Tensor(_) => 3,
        };
        CliError { code, message: e.to_string() }
    }
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn out_writer(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match out {
        Some(p) => {
            let f = File::create(p).map_err(|e| runtime_err(format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn load_ckpt(path: &Path) -> Result<LoadedCheckpoint, CliError> {
    let f = File::open(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    load_checkpoint(&mut io::BufReader::new(f))
        .map_err(|e| data_err(format!("{}: {e}", path.display())))
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConditionSpec {
    vina: Option<f64>,
    qed: Option<f64>,
    sa: Option<f64>,
    logp: Option<f64>,
    lipinski: Option<u8>,
    pocket: Option<PathBuf>,
}

impl ConditionSpec {
    fn props(&self) -> PropVec {
        PropVec {
            vina: self.vina.unwrap_or(0.0),
            qed: self.qed.unwrap_or(0.0),
            sa: self.sa.unwrap_or(0.0),
            logp: self.logp.unwrap_or(0.0),
            lipinski: self.lipinski.unwrap_or(0),
            mask: [
                self.vina.is_some(),
                self.qed.is_some(),
                self.sa.is_some(),
                self.logp.is_some(),
                self.lipinski.is_some(),
            ],
        }
    }
}

fn load_pocket(path: &Path) -> Result<PocketGraph, CliError> {
    let text = read_input(path)?;
    let cloud = parse_pocket_file(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    let mut g = PocketGraph::build(&cloud).map_err(data_err)?;
    g.anchor = Some(select_anchor_inference(&g, &cloud.ligand_refs).map_err(data_err)?);
    Ok(g)
}

/// Inline JSON (starts with '{') is a usage error when malformed; a
/// conditions file is input data.
fn parse_conditions(arg: Option<&str>) -> Result<(PropVec, Option<PocketGraph>), CliError> {
    let spec = match arg {
        None => ConditionSpec::default(),
        Some(s) if s.trim_start().starts_with('{') => {
            serde_json::from_str(s).map_err(|e| usage_err(format!("--conditions: {e}")))?
        }
        Some(path) => {
            let text = read_input(Path::new(path))?;
            serde_json::from_str(&text).map_err(|e| data_err(format!("{path}: {e}")))?
        }
    };
    let pocket = match &spec.pocket {
        Some(p) => Some(load_pocket(p)?),
        None => None,
    };
    Ok((spec.props(), pocket))
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    let oracle = SurrogateVina;
    match cmd {
        Cmd::Tokenize { input, out } => {
            let text = read_input(&input)?;
            let mut w = out_writer(out.as_deref())?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let toks =
                    tokenize(line).map_err(|e| data_err(format!("line {}: {e}", i + 1)))?;
                let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
                writeln!(w, "{}", texts.join(" ")).map_err(runtime_err)?;
            }
            Ok(())
        }
        Cmd::Props { input, out } => {
            let report = ingest(&read_input(&input)?, None, &oracle)?;
            if report.skipped > 0 {
                eprintln!("skipped {} unusable rows", report.skipped);
            }
            let mut w = out_writer(out.as_deref())?;
            write_dataset_jsonl(&mut w, &report.dataset).map_err(runtime_err)?;
            Ok(())
        }
        Cmd::Ingest { input, synthetic, pockets, synthetic_pockets, seed, out } => {
            if synthetic_pockets.is_some() && synthetic.is_none() {
                return Err(usage_err("--synthetic-pockets needs --synthetic"));
            }
            let text = match (&input, synthetic) {
                (Some(path), _) => read_input(path)?,
                (None, Some(n)) => {
                    let corpus = synthetic_corpus(n, seed);
                    match synthetic_pockets {
                        Some(m) if m > 0 => {
                            let dir = pockets.as_ref().expect("clap enforces --pockets");
                            std::fs::create_dir_all(dir).map_err(runtime_err)?;
                            for i in 0..m {
                                let name = format!("pocket{i:03}.txt");
                                std::fs::write(
                                    dir.join(name),
                                    synthetic_pocket(seed.wrapping_add(i as u64)),
                                )
                                .map_err(runtime_err)?;
                            }
                            corpus
                                .iter()
                                .enumerate()
                                .map(|(i, s)| format!("{s}\tpocket{:03}.txt", i % m))
                                .collect::<Vec<_>>()
                                .join("\n")
                        }
                        _ => corpus.join("\n"),
                    }
                }
                (None, None) => unreachable!("clap enforces --in or --synthetic"),
            };
            let report = ingest(&text, pockets.as_deref(), &oracle)?;
            if report.skipped > 0 {
                eprintln!("skipped {} unusable rows", report.skipped);
            }
            let mut w = out_writer(out.as_deref())?;
            write_dataset_jsonl(&mut w, &report.dataset).map_err(runtime_err)?;
            Ok(())
        }
        Cmd::Train { data, config, set, seed, out, resume, recompute_labels } => {
            let mut cfg = TrainConfig::desk(ModelConfig::desk(0, 0));
            if let Some(path) = &config {
                cfg.apply_file_text(&read_input(path)?)?;
            }
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| usage_err(format!("--set {kv:?}: expected key=value")))?;
                cfg.apply_key_value(k.trim(), v.trim())?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = read_dataset_jsonl(&read_input(&data)?, !recompute_labels, &oracle)?;
            let resume_ckpt = match &resume {
                Some(p) => Some(load_ckpt(p)?),
                None => None,
            };
            let outcome = train(&cfg, &report.dataset, &oracle, resume_ckpt, Some(&out))?;
            let mut f = File::create(out.join("train_log.csv")).map_err(runtime_err)?;
            write_train_log(&mut f, &outcome.log).map_err(runtime_err)?;
            println!("examples {} (skipped {} unusable, {} over-length)",
                report.dataset.examples.len(), report.skipped, outcome.skipped_long);
            println!("steps {}", outcome.steps_done);
            println!("holdout loss {} -> {}", outcome.initial_holdout, outcome.final_holdout);
            println!("checkpoint {}", out.join("final.ckpt").display());
            Ok(())
        }
        Cmd::Sample { ckpt, conditions, n, seed, temperature, top_k, out } => {
            let ckpt = load_ckpt(&ckpt)?;
            let (props, pocket) = parse_conditions(conditions.as_deref())?;
            let prefix = {
                let _g = no_grad();
                ckpt.model.encoder.assemble_prefix(pocket.as_ref(), &props).map_err(data_err)?
            };
            let mut w = out_writer(out.as_deref())?;
            for i in 0..n {
                let params = SampleParams {
                    max_len: ckpt.model.config.max_len,
                    temperature,
                    top_k,
                    seed: seed.wrapping_add(i as u64),
                };
                let ids = ckpt.model.sample(&prefix, &params).map_err(runtime_err)?;
                let toks = ckpt.vocab.decode(&ids).map_err(runtime_err)?;
                writeln!(w, "{}", detokenize(&toks)).map_err(runtime_err)?;
            }
            Ok(())
        }
        Cmd::Evaluate { ckpt, data, n, seed, unconditional, out } => {
            let ckpt = load_ckpt(&ckpt)?;
            let report = read_dataset_jsonl(&read_input(&data)?, true, &oracle)?;
            let mode = if unconditional {
                ConditionsMode::Unconditional
            } else {
                ConditionsMode::GroundTruth
            };
            let rep = evaluate(&ckpt.model, &ckpt.vocab, &report.dataset, n, mode, seed, &oracle)?;
            let mut w = out_writer(out.as_deref())?;
            write_eval_report(&mut w, &rep).map_err(runtime_err)?;
            Ok(())
        }
        Cmd::Sweep { ckpt, data, property, scales, n, seed, out } => {
            let prop = PROPERTY_NAMES
                .iter()
                .position(|p| *p == property)
                .ok_or_else(|| {
                    usage_err(format!(
                        "--property {property:?}: expected one of {}",
                        PROPERTY_NAMES.join(", ")
                    ))
                })?;
            let scales: Vec<f64> = scales
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| usage_err(format!("--scales: {e}")))?;
            if scales.is_empty() {
                return Err(usage_err("--scales: need at least one value"));
            }
            let ckpt = load_ckpt(&ckpt)?;
            let report = read_dataset_jsonl(&read_input(&data)?, true, &oracle)?;
            let rows = control_sweep(
                &ckpt.model, &ckpt.vocab, &report.dataset, prop, &scales, n, seed, &oracle,
            )?;
            let mut w = out_writer(out.as_deref())?;
            write_sweep_csv(&mut w, prop, &rows).map_err(runtime_err)?;
            Ok(())
        }
        Cmd::Analyze { ckpt, conditions, delta, out, attention } => {
            if delta == 0.0 || !delta.is_finite() {
                return Err(usage_err("--delta must be a nonzero finite number"));
            }
            let ckpt = load_ckpt(&ckpt)?;
            let (props, pocket) = match &conditions {
                Some(c) => parse_conditions(Some(c))?,
                None => (neutral_conditions(), None),
            };
            let m = relation_matrix(&ckpt.model, pocket.as_ref(), &props, delta)
                .map_err(data_err)?;
            let mut w = out_writer(out.as_deref())?;
            write_relation_csv(&mut w, &m).map_err(runtime_err)?;
            if let Some(path) = &attention {
                let att = extract_prefix_attention(&ckpt.model, pocket.as_ref(), &props)
                    .map_err(data_err)?;
                let mut f =
                    BufWriter::new(File::create(path).map_err(runtime_err)?);
                write_condition_map(&mut f, &att.mean).map_err(runtime_err)?;
            }
            Ok(())
        }
        Cmd::EmbedPocket { ckpt, input, out } => {
            let ckpt = load_ckpt(&ckpt)?;
            let g = load_pocket(&input)?;
            let e = {
                let _guard = no_grad();
                ckpt.model.encoder.pocket.embed(&g).map_err(data_err)?
            };
            let cells: Vec<String> = e.to_vec().iter().map(|v| v.to_string()).collect();
            let mut w = out_writer(out.as_deref())?;
            writeln!(w, "{}", cells.join(",")).map_err(runtime_err)?;
            Ok(())
        }
    }
}

fn neutral_conditions() -> PropVec {
    PropVec {
        vina: -5.0,
        qed: 0.5,
        sa: 0.5,
        logp: 0.0,
        lipinski: 5,
        mask: [true; N_PROPERTIES],
    }
}

fn cli_main(argv: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(cli_main(std::env::args().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use prefixgen::analysis::parse_relation_csv;
    use prefixgen::pipeline::Dataset;
    use std::sync::OnceLock;

    fn args(rest: &[&str]) -> Vec<String> {
        std::iter::once("prefixgen").chain(rest.iter().copied()).map(String::from).collect()
    }

    /// Dataset + trained checkpoint shared across the command tests.
    fn fixture() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
        static FIX: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
        FIX.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let data = dir.path().join("d.jsonl");
            assert_eq!(
                cli_main(args(&[
                    "ingest", "--synthetic", "30", "--seed", "5",
                    "--out", data.to_str().unwrap(),
                ])),
                0
            );
            let ckdir = dir.path().join("ck");
            assert_eq!(cli_main(train_args(&data, &ckdir)), 0);
            let ckpt = ckdir.join("final.ckpt");
            assert!(ckpt.exists());
            (dir, data, ckpt)
        })
    }

    fn train_args(data: &Path, out: &Path) -> Vec<String> {
        args(&[
            "train", "--data", data.to_str().unwrap(),
            "--set", "d=16", "--set", "heads=2", "--set", "layers=1",
            "--set", "max_len=48", "--set", "steps=4", "--set", "batch_size=4",
            "--set", "holdout=4", "--set", "pred_samples=0",
            "--seed", "3", "--out", out.to_str().unwrap(),
        ])
    }

    #[test]
    fn version_names_both_format_versions() {
        let line = version_line();
        assert!(line.contains("checkpoint format v1"), "{line}");
        assert!(line.contains("dataset format v1"), "{line}");
        assert_eq!(cli_main(args(&["--version"])), 0);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(cli_main(args(&["frobnicate"])), 1);
        assert_eq!(cli_main(args(&[])), 1);
        assert_eq!(cli_main(args(&["sample"])), 1);
        assert_eq!(cli_main(args(&["train", "--data", "x.jsonl", "--set", "nonsense"])), 1);
    }

    #[test]
    fn tokenize_splits_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.smi");
        let out = dir.path().join("out.txt");
        std::fs::write(&input, "CCO\nc1ccccc1\n").unwrap();
        assert_eq!(
            cli_main(args(&["tokenize", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()])),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text, "C C O\nc 1 c c c c c 1\n");
        for line in text.lines() {
            assert!(!line.contains("  "));
        }

        std::fs::write(&input, "C%\n").unwrap();
        assert_eq!(
            cli_main(args(&["tokenize", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()])),
            2
        );
        assert_eq!(cli_main(args(&["tokenize", "--in", "no-such-file.smi"])), 2);
    }

    #[test]
    fn props_emits_loadable_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("f.smi");
        let out = dir.path().join("p.jsonl");
        std::fs::write(&input, "CCO\nC)(\nc1ccccc1\n").unwrap();
        assert_eq!(
            cli_main(args(&["props", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()])),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        let oracle = SurrogateVina;
        let report = read_dataset_jsonl(&text, true, &oracle).unwrap();
        assert_eq!(report.dataset.examples.len(), 2);
        assert_eq!(report.dataset.examples[1].props.lipinski, 5);
    }

    #[test]
    fn synthetic_ingest_assigns_pockets_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let pockets = dir.path().join("pk");
        let run_once = |name: &str| {
            let out = dir.path().join(name);
            assert_eq!(
                cli_main(args(&[
                    "ingest", "--synthetic", "12", "--synthetic-pockets", "3",
                    "--pockets", pockets.to_str().unwrap(),
                    "--seed", "5", "--out", out.to_str().unwrap(),
                ])),
                0
            );
            std::fs::read(out).unwrap()
        };
        let a = run_once("a.jsonl");
        let b = run_once("b.jsonl");
        assert_eq!(a, b);
        for i in 0..3 {
            assert!(pockets.join(format!("pocket00{i}.txt")).exists());
        }
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(text.lines().all(|l| l.contains("\"pocket\":")));
    }

    #[test]
    fn train_is_deterministic_and_logs() {
        let (_dir, data, ckpt) = fixture();
        let dir2 = tempfile::tempdir().unwrap();
        let ckdir2 = dir2.path().join("ck");
        assert_eq!(cli_main(train_args(data, &ckdir2)), 0);
        assert_eq!(
            std::fs::read(ckpt).unwrap(),
            std::fs::read(ckdir2.join("final.ckpt")).unwrap()
        );
        let log = std::fs::read_to_string(ckdir2.join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 5);
        assert!(log.starts_with("step,at_loss,pred_loss,total,tokens_per_sec\n"));
    }

    #[test]
    fn train_accepts_config_file_and_rejects_bad_keys() {
        let (_dir, data, _) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "# tiny run\nd = 16\nheads = 2\nlayers = 1\nmax_len = 48\nsteps = 1\nbatch_size = 2\nholdout = 2\npred_samples = 0\n").unwrap();
        let out = dir.path().join("ck");
        assert_eq!(
            cli_main(args(&[
                "train", "--data", data.to_str().unwrap(),
                "--config", cfg.to_str().unwrap(),
                "--seed", "7", "--out", out.to_str().unwrap(),
            ])),
            0
        );
        assert!(out.join("final.ckpt").exists());

        std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
        assert_eq!(
            cli_main(args(&[
                "train", "--data", data.to_str().unwrap(),
                "--config", cfg.to_str().unwrap(),
                "--out", out.to_str().unwrap(),
            ])),
            1
        );
        assert_eq!(
            cli_main(args(&["train", "--data", "missing.jsonl", "--out", out.to_str().unwrap()])),
            2
        );
    }

    #[test]
    fn sample_writes_n_deterministic_lines() {
        let (_dir, _, ckpt) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s.txt");
        let sample = |out: &Path| {
            cli_main(args(&[
                "sample", "--ckpt", ckpt.to_str().unwrap(),
                "--conditions", r#"{"logp": 2.0, "qed": 0.8}"#,
                "--n", "5", "--seed", "9", "--out", out.to_str().unwrap(),
            ]))
        };
        assert_eq!(sample(&out), 0);
        assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 5);
        let first = std::fs::read(&out).unwrap();
        assert_eq!(sample(&out), 0);
        assert_eq!(first, std::fs::read(&out).unwrap());

        assert_eq!(
            cli_main(args(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--conditions", "{bad json", "--n", "1"])),
            1
        );
        assert_eq!(
            cli_main(args(&["sample", "--ckpt", "no-such.ckpt", "--n", "1"])),
            2
        );
    }

    #[test]
    fn evaluate_writes_report_csv() {
        let (_dir, data, ckpt) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.csv");
        assert_eq!(
            cli_main(args(&[
                "evaluate", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
                "--n", "4", "--seed", "1", "--out", out.to_str().unwrap(),
            ])),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 5 + N_PROPERTIES);
        assert!(text.starts_with("samples,4\n"));
    }

    #[test]
    fn sweep_writes_one_row_per_scale() {
        let (_dir, data, ckpt) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sw.csv");
        assert_eq!(
            cli_main(args(&[
                "sweep", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
                "--property", "logp", "--scales", "-1,0,1",
                "--n", "3", "--seed", "2", "--out", out.to_str().unwrap(),
            ])),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("scale,logp_mean,logp_std,valid\n"));

        assert_eq!(
            cli_main(args(&[
                "sweep", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
                "--property", "bogus", "--scales", "0",
            ])),
            1
        );
    }

    #[test]
    fn analyze_emits_parseable_matrices() {
        let (_dir, _, ckpt) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.csv");
        let att = dir.path().join("a.csv");
        assert_eq!(
            cli_main(args(&[
                "analyze", "--ckpt", ckpt.to_str().unwrap(),
                "--out", out.to_str().unwrap(), "--attention", att.to_str().unwrap(),
            ])),
            0
        );
        let r = parse_relation_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
        for (i, row) in r.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(v.is_finite() && *v >= 0.0);
                if j > i {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        let a = parse_relation_csv(&std::fs::read_to_string(&att).unwrap()).unwrap();
        for (i, row) in a.iter().enumerate() {
            let sum: f64 = row[..=i].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert_eq!(
            cli_main(args(&["analyze", "--ckpt", ckpt.to_str().unwrap(), "--delta", "0"])),
            1
        );
    }

    #[test]
    fn embed_pocket_prints_model_width_row() {
        let (_dir, _, ckpt) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let pocket = dir.path().join("p.txt");
        std::fs::write(&pocket, synthetic_pocket(1)).unwrap();
        let out = dir.path().join("e.csv");
        assert_eq!(
            cli_main(args(&[
                "embed-pocket", "--ckpt", ckpt.to_str().unwrap(),
                "--in", pocket.to_str().unwrap(), "--out", out.to_str().unwrap(),
            ])),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        let cells: Vec<f64> =
            text.trim().split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 16);
        assert!(cells.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dataset_jsonl_is_schema_stable() {
        let (_dir, data, _) = fixture();
        let text = std::fs::read_to_string(data).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["smiles", "vina", "qed", "sa", "logp", "lipinski", "pocket"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        let _: Dataset = read_dataset_jsonl(&text, true, &SurrogateVina).unwrap().dataset;
    }
}
