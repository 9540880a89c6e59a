use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use lorafuse::config::FusionConfig;
use lorafuse::harness::{fusion_config, run_preset, write_experiment_csv, HarnessSettings, Preset};
use lorafuse::pipeline::{
    exit_code, export_fused, export_paths, fuse_from_checkpoint, fuse_sets, load_inputs, metrics, resolve_objective,
    sweep, write_sweep_csv, SweepParam,
};
use lorafuse::store::{load_adapter, parse_container, validate_adapter, AdapterSet};
use lorafuse::topology::{build_groups, group_matrix, layer_maps, select_active_units, Factor, Vocabulary};
use lorafuse::FuseError;

#[derive(Parser)]
#[command(name = "lorafuse", version, about = "Fuse LoRA adapters across model families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the modules, shapes and validation status of an adapter file.
    Inspect { adapter: PathBuf },
    /// Print layer maps and the group matrix for a target and its sources.
    Align {
        target: PathBuf,
        #[arg(required = true)]
        sources: Vec<PathBuf>,
        /// Extra alias, `foreign=canonical`; repeatable.
        #[arg(long = "alias", value_parser = parse_alias)]
        aliases: Vec<(String, String)>,
    },
    /// Train the transfer network and write the fused adapter.
    Fuse {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Rebuild the fused adapter from a saved network checkpoint.
    Export {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Check adapter invariants; with --against, also check that only
    /// lora_B tensors differ from the given target.
    Verify {
        adapter: PathBuf,
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// One fused run per value of a parameter.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        /// alpha_init or mu_gate
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        /// CSV path; defaults to `<output.dir>/sweep-<param>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a synthetic transfer scenario preset.
    Harness {
        #[arg(long)]
        preset: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "harness.csv")]
        out: PathBuf,
    },
}

fn parse_alias(s: &str) -> Result<(String, String), String> {
    let (from, to) = s.split_once('=').ok_or_else(|| format!("expected foreign=canonical, got {s:?}"))?;
    Ok((from.trim().to_string(), to.trim().to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<FuseError>().map_or(1, exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Inspect { adapter } => inspect(&adapter),
        Command::Align {
            target,
            sources,
            aliases,
        } => align(&target, &sources, aliases.into_iter().collect()),
        Command::Fuse { config } => fuse(&config),
        Command::Export { config, checkpoint } => export(&config, &checkpoint),
        Command::Verify { adapter, against } => verify(&adapter, against.as_deref()),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => run_sweep(&config, &param, &values, out),
        Command::Harness { preset, seeds, out } => harness(&preset, &seeds, &out),
    }
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let set = load_adapter(path)?;
    println!("family {}  layers {}  pairs {}", set.family_id, set.layer_count, set.len());
    for (key, pair) in &set.pairs {
        let norm = pair.b.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "  {key:<28} A {}x{}  B {}x{}  |B|_F {norm:.4e}",
            pair.a.nrows(),
            pair.a.ncols(),
            pair.b.nrows(),
            pair.b.ncols()
        );
    }
    for extra in &set.extras {
        println!("  extra {} {:?}", extra.name, extra.shape);
    }
    report_violations(&validate_adapter(&set))
}

fn report_violations(violations: &[String]) -> anyhow::Result<()> {
    if violations.is_empty() {
        println!("valid");
        return Ok(());
    }
    for v in violations {
        println!("violation: {v}");
    }
    Err(FuseError::Invalid(format!("{} violation(s)", violations.len())).into())
}

fn align(target: &Path, sources: &[PathBuf], aliases: BTreeMap<String, String>) -> anyhow::Result<()> {
    let target = load_adapter(target)?;
    let sources = sources.iter().map(load_adapter).collect::<Result<Vec<_>, _>>()?;
    let vocab = Vocabulary::with_aliases(aliases);
    for map in layer_maps(&target, &sources)? {
        let table: Vec<String> = map.table.iter().map(|l| l.to_string()).collect();
        println!(
            "source {} ({}, {} layers): {}",
            map.source_index,
            sources[map.source_index].family_id,
            map.source_layers,
            table.join(" ")
        );
    }
    println!("{:<16} {:>4} {:>6}  sources", "type", "rank", "target");
    for ((ty, rank), in_target, per_source) in group_matrix(&target, &sources, &vocab) {
        let marks: String = per_source.iter().map(|&b| if b { 'x' } else { '.' }).collect();
        println!("{ty:<16} {rank:>4} {:>6}  {marks}", if in_target { "x" } else { "." });
    }
    let groups = build_groups(&target, &sources, &vocab);
    let units = select_active_units(&groups, &target, &sources, &layer_maps(&target, &sources)?, &vocab)?;
    println!("{} active group(s), {} transfer unit(s)", groups.len(), units.len());
    if units.is_empty() {
        return Err(FuseError::NothingFuseable.into());
    }
    Ok(())
}

fn load_config(path: &Path) -> anyhow::Result<FusionConfig> {
    FusionConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn fuse(config: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let (target, sources) = load_inputs(&cfg)?;
    let objective = resolve_objective(&cfg)?;
    let outcome = fuse_sets(&target, &sources, &cfg, objective.model.as_ref(), &objective.replay)?;
    let paths = export_fused(&outcome, &cfg)?;
    let m = metrics(&outcome, &target, &objective)?;
    println!(
        "fused {} unit(s); final loss {:.6e}; mean |dB|_F {:.4e}; max lhs/bound {:.4}",
        outcome.report.rows.len(),
        m.final_loss,
        m.mean_delta_norm,
        m.max_bound_ratio
    );
    if let (Some(f), Some(t)) = (m.fused_eval, m.target_only_eval) {
        println!("eval loss: fused {f:.6e}, target only {t:.6e}");
    }
    println!("wrote {}", paths.fused.display());
    println!("wrote {}", paths.checkpoint.display());
    println!("wrote {}", paths.report.display());
    println!("wrote {}", paths.loss_curve.display());
    Ok(())
}

fn export(config: &Path, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let (target, sources) = load_inputs(&cfg)?;
    let outcome = fuse_from_checkpoint(&target, &sources, &cfg, checkpoint)?;
    let paths = export_paths(&cfg);
    std::fs::create_dir_all(&cfg.output.dir).map_err(|e| FuseError::io(&cfg.output.dir, e))?;
    lorafuse::store::save_adapter(&outcome.fused, &paths.fused)?;
    outcome.report.write_csv(&paths.report)?;
    println!("wrote {}", paths.fused.display());
    println!("wrote {}", paths.report.display());
    Ok(())
}

fn raw_tensors(path: &Path) -> anyhow::Result<BTreeMap<String, Vec<u8>>> {
    let bytes = std::fs::read(path).map_err(|e| FuseError::io(path, e))?;
    let (_, records) = parse_container(&bytes)?;
    Ok(records.into_iter().map(|r| (r.name, r.data)).collect())
}

fn verify(adapter: &Path, against: Option<&Path>) -> anyhow::Result<()> {
    let set = load_adapter(adapter)?;
    let mut violations = validate_adapter(&set);
    if let Some(target_path) = against {
        let target: AdapterSet = load_adapter(target_path)?;
        let b_names: std::collections::BTreeSet<String> =
            target.pairs.keys().map(|k| target.tensor_name(k, Factor::B)).collect();
        let ours = raw_tensors(adapter)?;
        let theirs = raw_tensors(target_path)?;
        if ours.keys().ne(theirs.keys()) {
            violations.push("tensor names differ from the target".into());
        }
        let mut patched = 0;
        for (name, bytes) in &ours {
            match theirs.get(name) {
                Some(t) if t == bytes => {}
                Some(_) if b_names.contains(name) => patched += 1,
                Some(_) => violations.push(format!("{name} differs from the target")),
                None => {}
            }
        }
        println!("{patched} lora_B tensor(s) differ from the target; everything else is byte-identical");
    }
    report_violations(&violations)
}

fn run_sweep(config: &Path, param: &str, values: &[f64], out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let param: SweepParam = param.parse()?;
    let rows = sweep(&cfg, param, values)?;
    let out = out.unwrap_or_else(|| cfg.output.dir.join(format!("sweep-{}.csv", param.name())));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
    }
    write_sweep_csv(&out, &rows)?;
    for r in &rows {
        let eval = r.metrics.fused_eval.map_or("-".to_string(), |v| format!("{v:.6e}"));
        println!(
            "{} = {:<8} fused_eval {eval}  final_loss {:.6e}",
            param.name(),
            r.value,
            r.metrics.final_loss
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn harness(preset: &str, seeds: &[u64], out: &Path) -> anyhow::Result<()> {
    let preset: Preset = preset.parse()?;
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let rows = run_preset(preset, seeds, &HarnessSettings::default(), &fusion_config())?;
    for r in &rows {
        println!(
            "{} {:<12} seed {:<3} sources {}  fused {:.6e}  target-only {:.6e}  joint-oracle {:.6e}",
            r.preset.name(),
            r.variant,
            r.seed,
            r.n_sources,
            r.fused_eval,
            r.target_only_eval,
            r.joint_oracle_eval
        );
    }
    write_experiment_csv(out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}
