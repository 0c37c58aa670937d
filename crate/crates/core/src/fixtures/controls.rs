use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_synthetic, STANDARD_SCALES as STANDARD, ls_slope, make_holdout_mask, orthogonal_direction, GeneratorKind, SyntheticSpec};
use crate::block::Block;
use crate::decoder::DecoderMode;
use crate::diagnostics::proxy_mae;
use crate::error::Result;
use crate::model::Hyperparams;
use crate::pullback::{compare_learned_vs_pullback, pullback_poles};
use crate::trainer::{train, FitTrace, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub seed: u64,
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gammas: Vec<f64>,
    pub pullback_steps: usize,
    pub pullback_learning_rate: f64,
    pub hyper: Hyperparams,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            restarts: 8,
            steps: 2000,
            learning_rate: 0.01,
            lambda: 1.0,
            gammas: vec![0.0, 0.25, 0.5, 1.0],
            pullback_steps: 500,
            pullback_learning_rate: 0.01,
            hyper: Hyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub check: String,
    pub quantity: String,
    pub value: f64,
    /// Human-readable pass rule; empty for informational rows.
    pub rule: String,
    pub pass: Option<bool>,
}

impl ControlRow {
    fn info(check: &str, quantity: &str, value: f64) -> Self {
        Self {
            check: check.into(),
            quantity: quantity.into(),
            value,
            rule: String::new(),
            pass: None,
        }
    }

    fn checked(check: &str, quantity: &str, value: f64, rule: &str, pass: bool) -> Self {
        Self {
            check: check.into(),
            quantity: quantity.into(),
            value,
            rule: rule.into(),
            pass: Some(pass),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub config: ControlConfig,
    pub rows: Vec<ControlRow>,
}

impl ControlSummary {
    pub fn failures(&self) -> Vec<&ControlRow> {
        self.rows.iter().filter(|r| r.pass == Some(false)).collect()
    }

    pub fn all_pass(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn value(&self, check: &str, quantity: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.check == check && r.quantity == quantity)
            .map(|r| r.value)
    }
}

struct RestartStats {
    lowest_joint: f64,
    lowest_proxy: f64,
    joint_anchor_coord: f64,
    proxy_anchor_coord: f64,
}

fn restarts(
    kind: GeneratorKind,
    noise: f64,
    cfg: &ControlConfig,
    hyper: &Hyperparams,
) -> Result<RestartStats> {
    let mut spec = SyntheticSpec::standard(kind, cfg.seed);
    spec.coord_noise_std = noise;
    let fx = generate_synthetic::<f64>(&spec)?;
    let fits: Vec<FitTrace<f64>> = (0..cfg.restarts as u64)
        .into_par_iter()
        .map(|r| {
            let tc = TrainConfig {
                steps: cfg.steps,
                learning_rate: cfg.learning_rate,
                seed: cfg.seed.wrapping_mul(1000).wrapping_add(r),
                lambda: cfg.lambda,
                ..TrainConfig::default()
            };
            train(&fx.block, &fx.proxy, &tc, hyper)
        })
        .collect::<Result<_>>()?;
    let by_joint = fits
        .iter()
        .min_by(|a, b| a.final_objective.total.total_cmp(&b.final_objective.total))
        .expect("at least one restart");
    let by_proxy = fits
        .iter()
        .min_by(|a, b| a.final_objective.loss_a.total_cmp(&b.final_objective.loss_a))
        .expect("at least one restart");
    Ok(RestartStats {
        lowest_joint: by_joint.final_objective.total,
        lowest_proxy: by_proxy.final_objective.loss_a,
        joint_anchor_coord: by_joint.final_objective.loss_x,
        proxy_anchor_coord: by_proxy.final_objective.loss_x,
    })
}

/// Runs the same-geometry, misaligned, residual-injection and pullback
/// sanity controls and returns one row per reported quantity.
pub fn run_control_suite(cfg: &ControlConfig) -> Result<ControlSummary> {
    let hyper = cfg.hyper;
    let (same, mis) = rayon::join(
        || restarts(GeneratorKind::SameGeometry, 0.0, cfg, &hyper),
        || restarts(GeneratorKind::Misaligned, 0.0, cfg, &hyper),
    );
    let (same, mis) = (same?, mis?);
    let mut rows = vec![
        ControlRow::checked(
            "Same-geometry cross-view",
            "lowest observed joint loss",
            same.lowest_joint,
            "< 1e-6",
            same.lowest_joint < 1e-6,
        ),
        ControlRow::info("Same-geometry cross-view", "lowest observed proxy loss", same.lowest_proxy),
        ControlRow::info("Same-geometry cross-view", "coordinate loss", same.joint_anchor_coord),
        ControlRow::checked(
            "Misaligned cross-view",
            "lowest observed joint loss",
            mis.lowest_joint,
            "> 1e-3",
            mis.lowest_joint > 1e-3,
        ),
        ControlRow::checked(
            "Misaligned cross-view",
            "proxy-anchor coordinate loss",
            mis.proxy_anchor_coord,
            ">= 10x same-geometry coordinate loss",
            mis.proxy_anchor_coord >= 10.0 * same.joint_anchor_coord,
        ),
    ];

    let spec = SyntheticSpec::standard(GeneratorKind::ResidualInjection, cfg.seed);
    let fx = generate_synthetic::<f64>(&spec)?;
    let dir = orthogonal_direction(&fx.block, &fx.s_star, cfg.seed)?;
    let mut sq = Vec::new();
    let mut energy = Vec::new();
    let mut max_orth: f64 = 0.0;
    for &g in &cfg.gammas {
        let block = Block::new(fx.block.items().to_vec(), fx.block.coords() + &(&dir * g))?;
        let pb = pullback_poles(&block, &fx.s_star)?;
        sq.push(g * g);
        energy.push(pb.energy_res);
        max_orth = max_orth.max(pb.orthogonality_error);
    }
    let slope = ls_slope(&sq, &energy);
    let max_gap = sq
        .iter()
        .zip(&energy)
        .map(|(g2, e)| (e - energy[0] - g2).abs())
        .fold(0.0, f64::max);
    rows.push(ControlRow::checked(
        "Residual injection",
        "energy slope",
        slope,
        "|slope - 1| <= 1e-9",
        (slope - 1.0).abs() <= 1e-9,
    ));
    rows.push(ControlRow::checked(
        "Residual injection",
        "max energy gap",
        max_gap,
        "< 1e-9",
        max_gap < 1e-9,
    ));
    rows.push(ControlRow::checked(
        "Residual injection",
        "max orthogonality error",
        max_orth,
        "< 1e-10",
        max_orth < 1e-10,
    ));

    let spec = SyntheticSpec::standard(GeneratorKind::ScaledDot, cfg.seed);
    let fx = generate_synthetic::<f64>(&spec)?;
    let tc = TrainConfig {
        steps: cfg.pullback_steps,
        learning_rate: cfg.pullback_learning_rate,
        seed: cfg.seed,
        lambda: cfg.lambda,
        ..TrainConfig::default()
    };
    let fit = train(&fx.block, &fx.proxy, &tc, &hyper)?;
    let (learned, pulled) = compare_learned_vs_pullback(&fx.block, &fit.memberships, fit.poles(), hyper.epsilon)?;
    let gap = pullback_poles(&fx.block, &fit.memberships)?.energy_gap;
    rows.push(ControlRow::info("Pullback sanity", "learned error", learned));
    rows.push(ControlRow::checked(
        "Pullback sanity",
        "pullback error",
        pulled,
        "<= learned error",
        pulled <= learned + 1e-12,
    ));
    rows.push(ControlRow::checked(
        "Pullback sanity",
        "pullback energy gap",
        gap,
        "< 1e-10",
        gap < 1e-10,
    ));
    Ok(ControlSummary {
        config: cfg.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub holdout: f64,
    pub generators: Vec<GeneratorKind>,
    /// Planted `V*` scale for the generators.
    pub dot_scale: f64,
    /// Planted `U*` scale for the generators.
    pub ball_scale: f64,
    pub hyper: Hyperparams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: (0..8).collect(),
            steps: 320,
            learning_rate: 0.025,
            lambda: 1.0,
            holdout: 0.2,
            generators: vec![GeneratorKind::Hyperbolic, GeneratorKind::Mixed, GeneratorKind::ScaledDot],
            dot_scale: STANDARD.0,
            ball_scale: STANDARD.1,
            hyper: Hyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub generator: GeneratorKind,
    pub decoder: DecoderMode,
    pub seed: u64,
    /// Held-out MAE, absent when the fit failed.
    pub mae: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSummary {
    pub generator: GeneratorKind,
    /// `(decoder, mean held-out MAE over successful seeds, wins)`.
    pub settings: Vec<(DecoderMode, f64, usize)>,
    /// Setting with the lowest mean held-out MAE.
    pub best: DecoderMode,
}

impl GeneratorSummary {
    pub fn wins(&self, mode: DecoderMode) -> usize {
        self.settings.iter().find(|s| s.0 == mode).map_or(0, |s| s.2)
    }

    pub fn mean_mae(&self, mode: DecoderMode) -> f64 {
        self.settings.iter().find(|s| s.0 == mode).map_or(f64::NAN, |s| s.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub cells: Vec<BenchCell>,
    pub generators: Vec<GeneratorSummary>,
}

impl BenchSummary {
    pub fn generator(&self, kind: GeneratorKind) -> Option<&GeneratorSummary> {
        self.generators.iter().find(|g| g.generator == kind)
    }
}

fn bench_cell(cfg: &BenchConfig, generator: GeneratorKind, decoder: DecoderMode, seed: u64) -> BenchCell {
    let run = || -> Result<f64> {
        let mut spec = SyntheticSpec::standard(generator, seed);
        spec.dot_scale = cfg.dot_scale;
        spec.ball_scale = cfg.ball_scale;
        let fx = generate_synthetic::<f64>(&spec)?;
        let mask = make_holdout_mask(fx.block.n_items(), cfg.holdout, seed)?;
        let tc = TrainConfig {
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
            seed,
            lambda: cfg.lambda,
            masked_pairs: Some(mask.pairs.clone()),
            ..TrainConfig::default()
        };
        let fit = train(&fx.block, &fx.proxy, &tc, &cfg.hyper.with_decoder(decoder))?;
        proxy_mae(fx.proxy.matrix(), fit.a_hat(), Some(&mask.pairs))
    };
    let (mae, error) = match run() {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    BenchCell {
        generator,
        decoder,
        seed,
        mae,
        error,
    }
}

/// Held-out proxy benchmark over every generator, decoder setting and seed.
/// Failed fits are recorded in their cell and the run continues.
pub fn heldout_bench(cfg: &BenchConfig) -> BenchSummary {
    let jobs: Vec<(GeneratorKind, DecoderMode, u64)> = cfg
        .generators
        .iter()
        .flat_map(|&g| cfg.seeds.iter().flat_map(move |&s| DecoderMode::ALL.map(|d| (g, d, s))))
        .collect();
    let cells: Vec<BenchCell> = jobs
        .par_iter()
        .map(|&(g, d, s)| bench_cell(cfg, g, d, s))
        .collect();
    let generators = cfg
        .generators
        .iter()
        .map(|&g| {
            let mut wins = [0usize; 3];
            for &seed in &cfg.seeds {
                let best = DecoderMode::ALL
                    .iter()
                    .enumerate()
                    .filter_map(|(m, &d)| {
                        cells
                            .iter()
                            .find(|c| c.generator == g && c.decoder == d && c.seed == seed)
                            .and_then(|c| c.mae)
                            .map(|mae| (m, mae))
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((m, _)) = best {
                    wins[m] += 1;
                }
            }
            let settings: Vec<(DecoderMode, f64, usize)> = DecoderMode::ALL
                .iter()
                .enumerate()
                .map(|(m, &d)| {
                    let maes: Vec<f64> = cells
                        .iter()
                        .filter(|c| c.generator == g && c.decoder == d)
                        .filter_map(|c| c.mae)
                        .collect();
                    let mean = if maes.is_empty() {
                        f64::NAN
                    } else {
                        maes.iter().sum::<f64>() / maes.len() as f64
                    };
                    (d, mean, wins[m])
                })
                .collect();
            let best = settings
                .iter()
                .filter(|s| s.1.is_finite())
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(DecoderMode::Dual, |s| s.0);
            GeneratorSummary {
                generator: g,
                settings,
                best,
            }
        })
        .collect();
    BenchSummary {
        config: cfg.clone(),
        cells,
        generators,
    }
}
