use std::collections::HashSet;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use super::{
    sibling, write_atomic, write_csv, write_json, AuditReport, BaselineSummary, MatrixRecord, PullbackSummary,
    Readout, ReportMatrices, RunConfig, SeedRun, SeedStability, SmallMassFlag,
};
use crate::block::{residual, Block, ResidualMatrix};
use crate::decoder::{relation_mix_weight, ProxyMatrix, GATE_SYMMETRIZATION};
use crate::diagnostics::{
    assignment_entropy, component_mass, dominant_component, mass_canonicalize, neighbor_readout, proxy_mae,
    readout_directions, relative_reconstruction_error, residual_ranking, small_mass_components, witness_report,
    Canonical, SMALL_MASS,
};
use crate::error::{Result, RsdError};
use crate::fixtures::{
    bilinear_decoder_fit, heldout_bench, make_holdout_mask, run_control_suite, soft_kmeans_baseline, BenchConfig,
    BenchSummary, ControlConfig, ControlSummary,
};
use crate::ingestion::{
    cosine_proxy, embed_statements, load_block_fixture, load_embeddings_for, load_proxy_csv, missing_tokens,
    tokenize, topic_proxy,
};
use crate::pullback::pullback_poles;
use crate::report::ProxyKind;
use crate::trainer::{train, FitTrace, TrainConfig};

#[derive(Serialize)]
struct Envelope<'a, S> {
    config: &'a RunConfig,
    summary: &'a S,
}

/// Runs the synthetic control suite and writes its table as JSON and CSV.
/// Fails with an assertion error naming every failing row.
pub fn cmd_synth_check(config: &RunConfig) -> Result<ControlSummary> {
    let cc = ControlConfig {
        seed: config.seeds[0],
        restarts: config.restarts,
        steps: config.steps(),
        learning_rate: config.learning_rate(),
        lambda: config.lambda,
        hyper: config.hyperparams(),
        ..ControlConfig::default()
    };
    let summary = run_control_suite(&cc)?;
    let out = config.out_path();
    write_json(&out, &Envelope { config, summary: &summary })?;
    write_csv(&sibling(&out, "csv"), &summary.rows)?;
    let failures = summary.failures();
    if !failures.is_empty() {
        let names: Vec<String> = failures
            .iter()
            .map(|r| format!("{} / {} = {:.3e} (needs {})", r.check, r.quantity, r.value, r.rule))
            .collect();
        return Err(RsdError::Assertion(names.join("; ")));
    }
    Ok(summary)
}

#[derive(Serialize)]
struct BenchRow {
    generator: String,
    decoder: String,
    mean_mae: f64,
    wins: usize,
    seeds: usize,
    failed: usize,
    best: bool,
}

/// Runs the held-out proxy benchmark and writes per-setting rows (CSV) and
/// the full cell list (JSON).
pub fn cmd_heldout_bench(config: &RunConfig) -> Result<BenchSummary> {
    let bc = BenchConfig {
        seeds: config.seeds.clone(),
        steps: config.steps(),
        learning_rate: config.learning_rate(),
        lambda: config.lambda,
        holdout: config.holdout.unwrap_or(0.2),
        hyper: config.hyperparams(),
        ..BenchConfig::default()
    };
    let summary = heldout_bench(&bc);
    let n_seeds = bc.seeds.len();
    let cells = &summary.cells;
    let rows: Vec<BenchRow> = summary
        .generators
        .iter()
        .flat_map(|g| {
            g.settings.iter().map(move |&(d, mean_mae, wins)| BenchRow {
                generator: g.generator.to_string(),
                decoder: d.to_string(),
                mean_mae,
                wins,
                seeds: n_seeds,
                failed: cells
                    .iter()
                    .filter(|c| c.generator == g.generator && c.decoder == d && c.mae.is_none())
                    .count(),
                best: g.best == d,
            })
        })
        .collect();
    let out = config.out_path();
    write_json(&out, &Envelope { config, summary: &summary })?;
    write_csv(&sibling(&out, "csv"), &rows)?;
    Ok(summary)
}

pub struct AuditOutcome {
    pub report: AuditReport,
    pub written: Vec<PathBuf>,
}

struct Fitted {
    fit: FitTrace<f64>,
    canonical: Canonical<f64>,
    residual: ResidualMatrix<f64>,
    masses: Vec<f64>,
    rho_x: f64,
    proxy_mae: f64,
    top_residual: usize,
}

fn summarize(
    fit: FitTrace<f64>,
    block: &Block<f64>,
    proxy: &ProxyMatrix<f64>,
    mask: Option<&[(usize, usize)]>,
    eps: f64,
) -> Result<Fitted> {
    let canonical = mass_canonicalize(&fit.memberships, fit.poles(), &fit.model.heads, &fit.model.router);
    let residual = residual(block, &canonical.s, &canonical.c)?;
    let masses = component_mass(&canonical.s).to_vec();
    let rho_x = relative_reconstruction_error(block, &canonical.s, &canonical.c, eps)?;
    let proxy_mae = proxy_mae(proxy.matrix(), fit.a_hat(), mask)?;
    let top_residual = residual_ranking(block, &residual, 1)?[0].index;
    Ok(Fitted {
        fit,
        canonical,
        residual,
        masses,
        rho_x,
        proxy_mae,
        top_residual,
    })
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Ingests a block, fits it, and writes the audit report (plus plot data
/// when requested).
pub fn cmd_audit(config: &RunConfig) -> Result<AuditOutcome> {
    let block_path = config
        .block
        .as_ref()
        .ok_or_else(|| RsdError::Config("audit needs --block".into()))?;
    let emb_path = config
        .embeddings
        .as_ref()
        .ok_or_else(|| RsdError::Config("audit needs --embeddings".into()))?;
    let fixture = load_block_fixture(block_path)?;
    let texts = fixture.texts();
    let wanted: HashSet<String> = texts.iter().flat_map(|t| tokenize(t)).collect();
    let cap = if config.readout_k > 0 { config.readout_cap } else { 0 };
    let table = load_embeddings_for::<f64>(emb_path, &wanted, cap)?;
    let (block, coverage) = embed_statements(&texts, &table)?;
    let n = block.n_items();
    let proxy = match config.proxy {
        ProxyKind::Cosine => cosine_proxy(&block)?,
        ProxyKind::Topic => topic_proxy(&fixture.items, config.topic_affinity())?,
        ProxyKind::File => {
            let path = config
                .proxy_path
                .as_ref()
                .ok_or_else(|| RsdError::Config("--proxy file needs --proxy-path".into()))?;
            load_proxy_csv(path, n)?
        }
    };
    let primary_seed = config.seeds[0];
    let mask = config
        .holdout
        .map(|h| make_holdout_mask(n, h, primary_seed))
        .transpose()?
        .map(|m| m.pairs);
    let hyper = config.hyperparams();
    let eps = config.epsilon;
    let fits: Vec<Fitted> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let tc = TrainConfig {
                steps: config.steps(),
                learning_rate: config.learning_rate(),
                seed,
                lambda: config.lambda,
                masked_pairs: mask.clone(),
                ..TrainConfig::default()
            };
            let fit = train(&block, &proxy, &tc, &hyper)?;
            summarize(fit, &block, &proxy, mask.as_deref(), eps)
        })
        .collect::<Result<_>>()?;
    let main = &fits[0];
    let s = &main.canonical.s;
    let obj = main.fit.final_objective;

    let pb = pullback_poles(&block, s)?;
    let pullback = PullbackSummary {
        rho_x: relative_reconstruction_error(&block, s, &pb.c_star, eps)?,
        energy_x: pb.energy_x,
        energy_proj: pb.energy_proj,
        energy_res: pb.energy_res,
        orthogonality_error: pb.orthogonality_error,
        energy_gap: pb.energy_gap,
    };
    let mass = component_mass(s);
    let small_mass = small_mass_components(&mass)
        .into_iter()
        .map(|k| SmallMassFlag {
            component: k,
            mass: mass[k],
            note: format!("mass below {SMALL_MASS}: minority/outlier/collapse candidate"),
        })
        .collect();

    let mut warnings = Vec::new();
    if n == 2 {
        warnings.push("block-size warning: N = 2 gives a single off-diagonal proxy edge; cross-view evidence is weak".into());
    }
    if n <= config.k {
        warnings.push(format!("block-size warning: N = {n} <= K = {}; memberships are underdetermined", config.k));
    }
    if config.proxy == ProxyKind::Cosine {
        warnings.push("proxy is induced from the block coordinates; agreement is a self-compatibility diagnostic".into());
    }
    let mean_coverage = coverage.mean().unwrap_or(0.0);
    if mean_coverage < 1.0 {
        warnings.push(format!(
            "token coverage {mean_coverage:.3} < 1; missing tokens: {}",
            missing_tokens(&texts, &table).join(", ")
        ));
    }
    if !main.fit.converged {
        warnings.push("final objective is more than 0.1% above the best one recorded during training".into());
    }

    let readouts = if config.readout_k > 0 {
        let exclude = if config.exclude_items { wanted.clone() } else { HashSet::new() };
        let mut out = Vec::new();
        for (name, dir) in readout_directions(&main.canonical.c, &main.residual) {
            match neighbor_readout(dir.view(), &table, config.readout_k, &exclude) {
                Ok(words) => out.push(Readout { direction: name, words }),
                Err(RsdError::Contract(msg)) => warnings.push(format!("readout {name} skipped: {msg}")),
                Err(e) => return Err(e),
            }
        }
        Some(out)
    } else {
        None
    };

    let baseline = if config.baseline {
        let km = soft_kmeans_baseline(&block, config.k, primary_seed)?;
        let kpb = pullback_poles(&block, &km.memberships)?;
        let fit = bilinear_decoder_fit(&km.memberships, &proxy)?;
        Some(BaselineSummary {
            rho_x: relative_reconstruction_error(&block, &km.memberships, &kpb.c_star, eps)?,
            proxy_mae: fit.mae,
            bilinear_w: MatrixRecord::from_array(&fit.w),
        })
    } else {
        None
    };

    let seed_stability = (fits.len() > 1).then(|| SeedStability {
        runs: fits
            .iter()
            .map(|f| SeedRun {
                seed: f.fit.seed,
                rho_x: f.rho_x,
                proxy_loss: f.fit.final_objective.loss_a,
                proxy_mae: f.proxy_mae,
                component_masses: f.masses.clone(),
                top_residual_item: block.items()[f.top_residual].clone(),
            })
            .collect(),
        mass_ranges: (0..config.k).map(|k| range(fits.iter().map(|f| f.masses[k]))).collect(),
        rho_x_range: range(fits.iter().map(|f| f.rho_x)),
        proxy_mae_range: range(fits.iter().map(|f| f.proxy_mae)),
        top_residual_agreement: fits.iter().filter(|f| f.top_residual == main.top_residual).count(),
    });

    let report = AuditReport {
        block_name: fixture.name.clone(),
        proxy_source: proxy.source().to_string(),
        n,
        k: config.k,
        d: block.dim(),
        seed: primary_seed,
        items: block.items().to_vec(),
        coverage: coverage.to_vec(),
        mean_coverage,
        rho_x: main.rho_x,
        coordinate_loss: obj.loss_x,
        proxy_loss: obj.loss_a,
        total_loss: obj.total,
        proxy_mae: main.proxy_mae,
        holdout_pairs: mask.clone(),
        converged: main.fit.converged,
        component_masses: main.masses.clone(),
        per_item_entropy: assignment_entropy(s).to_vec(),
        dominant_component: dominant_component(s),
        residual_ranking: residual_ranking(&block, &main.residual, n)?,
        mix_weight: relation_mix_weight(&main.fit.decoded.gate)?,
        gate_symmetrization: GATE_SYMMETRIZATION.to_string(),
        witness: witness_report(obj.loss_x, obj.loss_a, config.budget_x, config.budget_a)?,
        pullback,
        small_mass,
        warnings,
        readouts,
        baseline,
        seed_stability,
        matrices: ReportMatrices {
            x: MatrixRecord::from_array(block.coords()),
            s: MatrixRecord::from_array(s.matrix()),
            c: MatrixRecord::from_array(main.canonical.c.matrix()),
            a: MatrixRecord::from_array(proxy.matrix()),
            a_hat: MatrixRecord::from_array(main.fit.a_hat()),
            gate: MatrixRecord::from_array(&main.fit.decoded.gate),
        },
        config: config.clone(),
    };
    report.verify(1e-9)?;

    let out = config.out_path();
    write_json(&out, &report)?;
    let mut written = vec![out.clone()];
    if config.plot_data {
        let plot = sibling(&out, "plot.csv");
        write_atomic(&plot, &plot_rows(&report)?)?;
        written.push(plot);
        if let Some(readouts) = &report.readouts {
            let path = sibling(&out, "readouts.csv");
            write_atomic(&path, &readout_rows(readouts)?)?;
            written.push(path);
        }
    }
    Ok(AuditOutcome { report, written })
}

fn plot_rows(report: &AuditReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["item".to_string()];
    header.extend((0..report.k).map(|k| format!("s{k}")));
    header.extend(["residual_norm".to_string(), "dominant".to_string()]);
    w.write_record(&header)?;
    let s = report.matrices.s.to_array()?;
    let mut norms = vec![0.0; report.n];
    for r in &report.residual_ranking {
        norms[r.index] = r.residual_norm;
    }
    for (i, item) in report.items.iter().enumerate() {
        let mut rec = vec![item.clone()];
        rec.extend(s.row(i).iter().map(|v| v.to_string()));
        rec.push(norms[i].to_string());
        rec.push(report.dominant_component[i].to_string());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| RsdError::Io(e.into_error()))
}

fn readout_rows(readouts: &[Readout]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["direction", "rank", "word", "cosine"])?;
    for r in readouts {
        for (rank, n) in r.words.iter().enumerate() {
            w.write_record([r.direction.clone(), (rank + 1).to_string(), n.word.clone(), n.cosine.to_string()])?;
        }
    }
    w.into_inner().map_err(|e| RsdError::Io(e.into_error()))
}
