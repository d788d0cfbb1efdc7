//! Measures a synthetic world: token moments and headline attack metrics.
//!
//! Usage: `cargo run --release --example calibrate -- '<json overrides>' [seed] [attacks]`

use std::time::Instant;

use dlm_mia::attacks::Attack;
use dlm_mia::baselines::ShotPools;
use dlm_mia::eval::diagnostics::{CalibrationReport, DiagnosticsConfig};
use dlm_mia::eval::metrics::{auc, tpr_at_fpr, LabeledScores};
use dlm_mia::oracle::synthetic::{build_synthetic_world, SyntheticWorldConfig};
use dlm_mia::SeedSpec;
use rayon::prelude::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let overrides: serde_json::Value = serde_json::from_str(args.get(1).map_or("{}", String::as_str))?;
    let seed: u64 = args.get(2).map_or(Ok(42), |s| s.parse())?;
    let names = args.get(3).map_or("sama,ratio,loss", String::as_str);
    let diag: DiagnosticsConfig = match overrides.get("diagnostics") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => DiagnosticsConfig::default(),
    };
    let mut world_overrides = overrides.clone();
    if let Some(obj) = world_overrides.as_object_mut() {
        obj.remove("diagnostics");
    }
    let cfg = SyntheticWorldConfig::from_partial(&world_overrides)?;
    let world = build_synthetic_world(&cfg, seed)?;
    let seeds = SeedSpec::new(seed);

    let t0 = Instant::now();
    let report = CalibrationReport::measure(&world, &diag, &seeds)?;
    let d = &report.diagnostics;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "pool n={}/{} member mean {} sd {} skew {} kurt {} | nonmember mean {} sd {} skew {} kurt {}",
        d.member.count,
        d.nonmember.count,
        fmt(d.member.mean),
        fmt(d.member.sd),
        fmt(d.member.skewness),
        fmt(d.member.excess_kurtosis),
        fmt(d.nonmember.mean),
        fmt(d.nonmember.sd),
        fmt(d.nonmember.skewness),
        fmt(d.nonmember.excess_kurtosis),
    );
    println!(
        "config sd {} margin {} strength domain {} instance {} ({:.1?})",
        fmt(d.configuration_sd),
        fmt(d.member_margin),
        fmt(report.domain_signal_strength),
        fmt(report.instance_signal_strength),
        t0.elapsed()
    );

    let shots = ShotPools {
        member: world.member_shots.clone(),
        nonmember: world.nonmember_shots.clone(),
    };
    for name in names.split(',') {
        let t0 = Instant::now();
        let attack = Attack::with_defaults(name)?;
        let scores = if attack.is_corpus_level() {
            attack.score_corpus(&world.samples, &seeds)?
        } else {
            world
                .samples
                .par_iter()
                .map(|s| {
                    let mut r = attack.score_sample(&s.sequence, &world.oracle, &shots, &seeds)?;
                    r.label = s.label;
                    Ok(r)
                })
                .collect::<dlm_mia::Result<Vec<_>>>()?
        };
        let ls = LabeledScores::from_scores(&scores);
        println!(
            "{name:>10}: auc {:.4} tpr@10% {:.3} tpr@1% {:.3} ({:.1?})",
            auc(&ls)?,
            tpr_at_fpr(&ls, 0.10)?,
            tpr_at_fpr(&ls, 0.01)?,
            t0.elapsed()
        );
    }
    Ok(())
}
