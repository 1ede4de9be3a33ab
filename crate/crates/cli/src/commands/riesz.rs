use serde_json::json;

use margin_forge::io::{labels_to_csv, matrix_to_csv};
use margin_forge::margins::DEFAULT_THRESHOLDS;
use margin_forge::sphere_opt::{check_packing_shape, minimize_riesz};
use margin_forge::MarginReport;

use super::{off_diagonal_range, usize_override, Common};
use crate::config::{resolve, RieszCmd};
use crate::error::CliError;
use crate::output::{pool, write_json, write_resolved, write_text};

/// Known best class margins (degrees) beyond the simplex regime.
const TAMMES_8_3: f64 = 74.0;

pub fn run(common: &Common, k: Option<usize>, d: Option<usize>) -> Result<(), CliError> {
    let typed = [usize_override("k", k), usize_override("d", d)].into_iter().flatten().collect();
    let mut cfg: RieszCmd = resolve(&RieszCmd::default(), common.config.as_deref(), &common.overrides(typed)?)?;
    cfg.optim.seed = cfg.seed;
    cfg.riesz.validate()?;
    cfg.optim.validate()?;
    check_packing_shape(cfg.k, cfg.d)?;
    let out = cfg.output_dir.clone();
    write_resolved(&out, &cfg)?;
    if common.dry_run {
        println!("riesz: config ok, wrote {}", out.join("resolved_config.json").display());
        return Ok(());
    }

    let sol = pool(common.jobs)?.install(|| minimize_riesz::<f64>(cfg.k, cfg.d, &cfg.riesz, &cfg.optim))?;
    let w = sol.protos.matrix();
    let labels: Vec<usize> = (0..cfg.k).collect();
    let report = MarginReport::compute(w, w, &labels, &DEFAULT_THRESHOLDS, true)?;
    let (lo, hi) = off_diagonal_range(w);
    let deg = report.class_margin_deg();

    write_text(&out.join("prototypes.csv"), &matrix_to_csv(w))?;
    write_text(&out.join("labels.csv"), &labels_to_csv(&labels))?;
    write_text(&out.join("history.csv"), &sol.history.to_csv())?;
    write_json(&out.join("margins.json"), &report.to_json())?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "k": cfg.k,
            "d": cfg.d,
            "class_margin_deg": deg,
            "class_margin_rad": report.class_margin,
            "gram_offdiag_min": lo,
            "gram_offdiag_max": hi,
            "best_restart": sol.best_restart,
            "restarts": sol.restarts,
        }),
    )?;
    println!(
        "riesz k={} d={}: class margin {deg:.4} deg, gram off-diagonals [{lo:.6}, {hi:.6}], best restart {} of {}",
        cfg.k,
        cfg.d,
        sol.best_restart,
        sol.restarts.len()
    );

    if common.assert {
        if cfg.k <= cfg.d + 1 {
            let target = (-1.0 / (cfg.k as f64 - 1.0)).acos().to_degrees();
            if (deg - target).abs() > 0.1 {
                return Err(CliError::Assert(format!("class margin {deg:.4} deg, expected {target:.4} +- 0.1")));
            }
        } else if (cfg.k, cfg.d) == (8, 3) && deg < TAMMES_8_3 {
            return Err(CliError::Assert(format!("class margin {deg:.4} deg below {TAMMES_8_3}")));
        }
    }
    Ok(())
}
