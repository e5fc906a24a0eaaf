//! Plots, tables and the plain-text summary built from the sweep CSVs.

use std::fmt::Write as _;
use std::path::Path;

use sesc::framing::overhead_symbols;
use sesc::tasks::find_l_opt;

use crate::config::ExperimentConfig;
use crate::criteria::{self, Criterion, TrainingEvidence};
use crate::pipeline::{read_csv, Layout, Trained};
use crate::plot::{Chart, Series};
use crate::sweeps::{mean_curve, per_image_monotone, std_curve, EvalContext, SweepRow};
use crate::train::EpochRow;
use crate::HarnessError;

#[derive(Clone, Debug)]
pub struct Summary {
    pub criteria: Vec<Criterion>,
    pub text: String,
}

impl Summary {
    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }
}

/// Row-level invariants every sweep CSV must satisfy.
pub fn check_rows(rows: &[SweepRow], l_tot: usize) -> Result<(), HarnessError> {
    let overhead = overhead_symbols(l_tot);
    let mut keys = std::collections::HashSet::new();
    for r in rows {
        let fail = |m: &str| Err(HarnessError::Check(format!("{}: {m}", r.key())));
        if !keys.insert(r.key()) {
            return fail("duplicate row");
        }
        if !(r.accuracy.is_finite() && r.mse.is_finite() && r.symbols_payload.is_finite()) {
            return fail("incomplete row");
        }
        let expected = if r.scheme == "baseline" { r.symbols_payload } else { r.symbols_payload + overhead };
        if (r.symbols_with_overhead - expected).abs() > 1e-9 * expected.max(1.0) {
            return fail("symbols with overhead disagree with payload plus side information");
        }
        if r.scheme == "full" && r.n_mean != l_tot as f64 {
            return fail("full transmission did not send every feature");
        }
    }
    Ok(())
}

fn by_scheme(rows: &[SweepRow]) -> Vec<(String, Vec<SweepRow>)> {
    let mut out: Vec<(String, Vec<SweepRow>)> = Vec::new();
    for r in rows {
        let label = match (r.scheme.as_str(), r.mu) {
            ("sesc", Some(mu)) => format!("sesc mu={mu}"),
            (s, _) => s.to_string(),
        };
        match out.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(r.clone()),
            None => out.push((label, vec![r.clone()])),
        }
    }
    out
}

fn load(out: &Layout, name: &str) -> Result<Vec<SweepRow>, HarnessError> {
    read_csv(&out.path(name))
}

/// Writes plots and `summary.txt`; `compare` is a second output directory of
/// an independent run under the same configuration, checked for identical
/// CSVs.
pub fn emit_with(cfg: &ExperimentConfig, out: &Layout, t: &Trained, ctx: &EvalContext<'_>, compare: Option<&Path>) -> Result<Summary, HarnessError> {
    let l_tot = ctx.l_total();
    let l_rows = load(out, "sweep_l.csv")?;
    let snr_rows = load(out, "sweep_snr.csv")?;
    let mu_rows = load(out, "sweep_mu.csv")?;
    let base_rows = load(out, "baseline.csv")?;
    for rows in [&l_rows, &snr_rows, &mu_rows, &base_rows] {
        check_rows(rows, l_tot)?;
    }
    let s = &cfg.sweeps;
    let mut text = String::new();
    let _ = writeln!(text, "summary for master seed {}", cfg.master_seed);
    let _ = writeln!(text);

    // Similarity versus sent features.
    let sent = |r: &SweepRow| r.sent.unwrap_or(0) as f64;
    let sim = |r: &SweepRow| r.similarity;
    let curve = mean_curve(&l_rows, sent, sim);
    let spread = std_curve(&l_rows, sent, sim);
    let pts: Vec<(usize, f64)> = curve.iter().map(|&(x, y)| (x as usize, y)).collect();
    let l_opt = find_l_opt(&pts, s.l_opt_eps)?;
    let mut chart = Chart::fit(vec![Series {
        label: "similarity".into(),
        points: curve.clone(),
        spread: Some(spread.iter().map(|p| p.1).collect()),
    }]);
    chart.markers.push(l_opt as f64);
    chart.save(&out.path("sweep_l.png"))?;
    let _ = writeln!(
        text,
        "sweep_l.png: semantic similarity (y) vs sent features L (x), {} dB {}, dashed line at L_opt = {l_opt}",
        s.l_sweep_snr_db, s.l_sweep_channel
    );
    let _ = writeln!(text, "  parsing region L = 1..={l_opt}, explicit region L = {}..={l_tot}", l_opt + 1);
    for &(x, y) in curve.iter().filter(|p| [1.0, 4.0, 8.0, 16.0, 32.0, 48.0, l_tot as f64, l_opt as f64].contains(&p.0)) {
        let _ = writeln!(text, "  L {x:>3}: similarity {y:.4}");
    }
    let _ = writeln!(text);

    // Accuracy versus SNR.
    let mut all_snr = snr_rows.clone();
    all_snr.extend(base_rows.iter().cloned().filter(|r| !snr_rows.iter().any(|q| q.key() == r.key())));
    let groups = by_scheme(&all_snr);
    let series: Vec<Series> = groups
        .iter()
        .map(|(label, rows)| Series {
            label: label.clone(),
            points: mean_curve(rows, |r| r.snr_db, |r| r.accuracy),
            spread: Some(std_curve(rows, |r| r.snr_db, |r| r.accuracy).iter().map(|p| p.1).collect()),
        })
        .collect();
    Chart::fit(series.clone()).save(&out.path("sweep_snr.png"))?;
    let _ = writeln!(text, "sweep_snr.png: task accuracy (y) vs SNR dB (x), {}; series in legend order:", s.channel);
    for (k, se) in series.iter().enumerate() {
        let rows = &groups[k].1;
        let sym = mean_curve(rows, |r| r.snr_db, |r| r.symbols_with_overhead);
        let _ = write!(text, "  {}. {:<14}", k + 1, se.label);
        for (&(x, y), &(_, sy)) in se.points.iter().zip(&sym) {
            let _ = write!(text, " {x:>4} dB {:>6.2}% ({sy:.0} sym)", 100.0 * y);
        }
        let _ = writeln!(text);
    }
    let _ = writeln!(text);

    // Threshold policy.
    let mu = |r: &SweepRow| r.mu.unwrap_or(f64::NAN);
    let sym = mean_curve(&mu_rows, mu, |r| r.symbols_payload);
    let sym_all = mean_curve(&mu_rows, mu, |r| r.symbols_with_overhead);
    let acc = mean_curve(&mu_rows, mu, |r| r.accuracy);
    let n = mean_curve(&mu_rows, mu, |r| r.n_mean);
    let full_sym = sym.first().map_or(1.0, |p| p.1);
    Chart::fit(vec![
        Series {
            label: "payload symbols / full".into(),
            points: sym.iter().map(|&(x, y)| (x, y / full_sym)).collect(),
            spread: None,
        },
        Series {
            label: "accuracy".into(),
            points: acc.clone(),
            spread: Some(std_curve(&mu_rows, mu, |r| r.accuracy).iter().map(|p| p.1).collect()),
        },
    ])
    .save(&out.path("sweep_mu.png"))?;
    let _ = writeln!(
        text,
        "sweep_mu.png: relative payload symbols (series 1) and task accuracy (series 2) vs mu, {} dB {}",
        s.mu_sweep_snr_db, s.channel
    );
    let _ = writeln!(text, "  {:>4} {:>6} {:>9} {:>9} {:>8} {:>9} {:>9}", "mu", "n", "payload", "total", "acc%", "dsym%", "dacc");
    for i in 0..sym.len() {
        let (dsym, dacc) = if i == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (100.0 * (1.0 - sym[i].1 / sym[i - 1].1), 100.0 * (acc[i - 1].1 - acc[i].1))
        };
        let _ = writeln!(
            text,
            "  {:>4} {:>6.2} {:>9.1} {:>9.1} {:>8.2} {:>9.2} {:>9.2}",
            sym[i].0,
            n[i].1,
            sym[i].1,
            sym_all[i].1,
            100.0 * acc[i].1,
            dsym,
            dacc
        );
    }
    let _ = writeln!(text, "  dsym% is the symbol saving and dacc the accuracy points lost relative to the previous row");
    let _ = writeln!(text);

    // Training curves.
    let mut curves = Vec::new();
    for name in ["pretrain_curve.csv", "finetune_curve.csv"] {
        if out.path(name).exists() {
            let rows: Vec<EpochRow> = read_csv(&out.path(name))?;
            curves.push(Series {
                label: name.trim_end_matches("_curve.csv").into(),
                points: rows.iter().map(|r| (r.epoch as f64, r.val_mse)).collect(),
                spread: None,
            });
        }
    }
    if !curves.is_empty() {
        Chart::fit(curves.clone()).save(&out.path("training.png"))?;
        let _ = writeln!(text, "training.png: noiseless validation MSE (y) vs epoch (x)");
        for c in &curves {
            let first = c.points.first().map_or(f64::NAN, |p| p.1);
            let last = c.points.last().map_or(f64::NAN, |p| p.1);
            let _ = writeln!(text, "  {}: {first:.5} -> {last:.5} over {} epochs", c.label, c.points.len());
        }
        let _ = writeln!(text);
    }

    let seed = cfg.master_seed;
    let mut crit = vec![
        criteria::l_sweep_shape(&l_rows, l_tot, s.l_opt_eps)?,
        criteria::closeness(&snr_rows, 15.0, l_tot),
        criteria::low_snr_separation(&snr_rows, 0.0, 15.0, l_tot),
        criteria::mu_trade(&mu_rows, per_image_monotone(ctx, &s.mu_grid)?),
        criteria::selectivity(&t.task, &t.eval, cfg.codec.patch_size)?,
        criteria::physical_layer(seed)?,
        criteria::oracles(seed)?,
        criteria::training_sanity(&TrainingEvidence {
            pretrained: &t.pretrained,
            finetuned: &t.finetuned,
            task: &t.task,
            eval: &t.eval,
            channel: cfg.finetune.channel,
            seed,
        })?,
    ];
    let _ = writeln!(text, "acceptance criteria:");
    for c in &crit {
        let _ = writeln!(text, "  {c}");
    }
    match compare {
        Some(dir) => {
            let c = criteria::determinism(&out.root, dir, &crate::pipeline::SWEEP_FILES)?;
            let _ = writeln!(text, "  {c}");
            crit.push(c);
        }
        None => {
            let _ = writeln!(text, "  [----] 9. end-to-end determinism: not evaluated (pass --compare with a second run's directory)");
        }
    }
    std::fs::write(out.path("summary.txt"), &text).map_err(|e| HarnessError::Io(out.path("summary.txt").display().to_string(), e))?;
    Ok(Summary { criteria: crit, text })
}

pub fn emit(cfg: &ExperimentConfig, out: &Layout, t: &Trained, ctx: &EvalContext<'_>) -> Result<Summary, HarnessError> {
    emit_with(cfg, out, t, ctx, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sesc::channel::ChannelKind;

    fn row(scheme: &str, n: f64, payload: f64, overhead: f64) -> SweepRow {
        SweepRow {
            scheme: scheme.into(),
            channel: ChannelKind::Awgn,
            snr_db: 5.0,
            mu: Some(0.0),
            sent: None,
            replicate: 0,
            seed: 1,
            images: 2,
            n_mean: n,
            symbols_payload: payload,
            symbols_with_overhead: payload + overhead,
            accuracy: 0.5,
            similarity: f64::NAN,
            mse: 0.01,
            failure_rate: 0.0,
        }
    }

    #[test]
    fn accounting_is_checked() {
        let oh = overhead_symbols(64);
        assert!(check_rows(&[row("full", 64.0, 2048.0, oh)], 64).is_ok());
        assert!(check_rows(&[row("full", 64.0, 2048.0, oh + 1.0)], 64).is_err());
        assert!(check_rows(&[row("full", 63.0, 2016.0, oh)], 64).is_err());
        assert!(check_rows(&[row("baseline", f64::NAN, 700.0, 0.0)], 64).is_ok());
        let dup = row("full", 64.0, 2048.0, oh);
        assert!(check_rows(&[dup.clone(), dup], 64).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.csv");
        let mut a = row("sesc", 10.25, 328.0, overhead_symbols(64));
        a.mu = Some(0.3);
        a.similarity = 0.987654321012345;
        let mut b = row("baseline", f64::NAN, 700.0, 0.0);
        b.mu = None;
        b.sent = Some(3);
        crate::pipeline::write_csv(&p, &[a.clone(), b.clone()]).unwrap();
        let back: Vec<SweepRow> = read_csv(&p).unwrap();
        assert_eq!(back[0], a);
        assert_eq!(back[1].key(), b.key());
        assert!(back[1].n_mean.is_nan());
        assert_eq!(back[1].symbols_payload, b.symbols_payload);
    }
}
