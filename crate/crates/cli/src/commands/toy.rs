use std::fmt::Write as _;

use rayon::prelude::*;

use margin_forge::io::{labels_to_csv, matrix_to_csv};
use margin_forge::margins::DEFAULT_THRESHOLDS;
use margin_forge::sphere_opt::{optimize_free_embedding, FreeEmbedding};
use margin_forge::{Error, LossKind, MarginReport};

use super::{usize_override, Common};
use crate::config::{check_run_names, resolve, ToyCmd};
use crate::error::CliError;
use crate::output::{pool, write_json, write_resolved, write_text};

pub fn run(common: &Common, k: Option<usize>, d: Option<usize>) -> Result<(), CliError> {
    let typed = [usize_override("k", k), usize_override("d", d)].into_iter().flatten().collect();
    let mut cfg: ToyCmd = resolve(&ToyCmd::default(), common.config.as_deref(), &common.overrides(typed)?)?;
    cfg.optim.seed = cfg.seed;
    cfg.optim.validate()?;
    check_run_names(&cfg.run)?;
    for r in &cfg.run {
        r.reg.validate()?;
        match &r.loss {
            Some(l) => l.validate()?,
            None if r.reg.mu_sm == 0.0 && r.reg.lambda_w == 0.0 => {
                return Err(CliError::Config(format!("run {:?} has neither a loss nor a regularizer", r.name)))
            }
            None => {}
        }
    }
    if cfg.k < 2 || cfg.d < 2 || cfg.per_class == 0 {
        return Err(Error::Infeasible(format!("need k >= 2, d >= 2, per_class >= 1 (k={}, d={})", cfg.k, cfg.d)).into());
    }
    let out = cfg.output_dir.clone();
    write_resolved(&out, &cfg)?;
    if common.dry_run {
        println!("toy: config ok ({} runs), wrote {}", cfg.run.len(), out.join("resolved_config.json").display());
        return Ok(());
    }

    let labels: Vec<usize> = (0..cfg.k * cfg.per_class).map(|i| i % cfg.k).collect();
    let results: Vec<Result<FreeEmbedding<f64>, Error>> = pool(common.jobs)?.install(|| {
        cfg.run
            .par_iter()
            .map(|r| optimize_free_embedding::<f64>(cfg.k, cfg.d, &labels, r.loss.as_ref(), &r.reg, &cfg.optim))
            .collect()
    });

    write_text(&out.join("labels.csv"), &labels_to_csv(&labels))?;
    let mut summary = String::from("name,class_margin_deg,gamma_min,m_samp,loss\n");
    let mut margins = Vec::new();
    for (r, res) in cfg.run.iter().zip(results) {
        let fe = res?;
        let report = MarginReport::compute(&fe.w, &fe.z, &labels, &DEFAULT_THRESHOLDS, true)?;
        let dir = out.join("runs").join(&r.name);
        write_text(&dir.join("prototypes.csv"), &matrix_to_csv(&fe.w))?;
        write_text(&dir.join("features.csv"), &matrix_to_csv(&fe.z))?;
        write_text(&dir.join("history.csv"), &fe.history.to_csv())?;
        write_json(&dir.join("margins.json"), &report.to_json())?;
        let loss = fe.history.last().map(|h| h.loss).unwrap_or(f64::NAN);
        let _ = writeln!(summary, "{},{},{},{},{}", r.name, report.class_margin_deg(), report.gamma_min, report.m_samp, loss);
        println!(
            "{:<16} class margin {:>9.4} deg  gamma_min {:>8.5}  m_samp {:>8.5}",
            r.name,
            report.class_margin_deg(),
            report.gamma_min,
            report.m_samp
        );
        margins.push((r, report));
    }
    write_text(&out.join("summary.csv"), &summary)?;

    if common.assert {
        let ceiling = cfg.k as f64 / (cfg.k as f64 - 1.0) + 1e-6;
        for (r, rep) in &margins {
            if rep.gamma_min > ceiling {
                return Err(CliError::Assert(format!("{}: gamma_min {} exceeds {ceiling}", r.name, rep.gamma_min)));
            }
        }
        let is_lm = |r: &crate::config::RunEntry| r.loss.as_ref().is_some_and(|l| l.kind == LossKind::LmSoftmax);
        for (lm, lm_rep) in margins.iter().filter(|(r, _)| is_lm(r)) {
            for (other, rep) in margins.iter().filter(|(r, _)| !is_lm(r)) {
                if lm_rep.class_margin_deg() < rep.class_margin_deg() - 1.0 {
                    return Err(CliError::Assert(format!(
                        "{} margin {:.4} deg is more than 1 deg below {} ({:.4})",
                        lm.name,
                        lm_rep.class_margin_deg(),
                        other.name,
                        rep.class_margin_deg()
                    )));
                }
            }
        }
    }
    Ok(())
}
