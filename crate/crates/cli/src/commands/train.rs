use std::fmt::Write as _;

use rayon::prelude::*;

use margin_forge::datasets::{imbalance_counts, make_blobs};
use margin_forge::io::matrix_to_csv;
use margin_forge::trainer::{build_mlp, train, Histograms, Trained};
use margin_forge::{Error, MlpSpec, TrainConfig};

use super::Common;
use crate::config::{check_run_names, resolve, TrainCmd};
use crate::error::CliError;
use crate::output::{pool, write_json, write_resolved, write_text};

fn plan(cfg: &TrainCmd) -> Result<Vec<(MlpSpec, TrainConfig)>, CliError> {
    check_run_names(&cfg.run)?;
    let mut layer_sizes = vec![cfg.dataset.d_in];
    layer_sizes.extend(&cfg.model.hidden);
    layer_sizes.push(cfg.model.embed_dim);
    let mut optim = cfg.train.optim.clone();
    optim.seed = cfg.seed;
    cfg.run
        .iter()
        .map(|r| {
            let spec = MlpSpec {
                layer_sizes: layer_sizes.clone(),
                embed_normalize: r.loss.as_ref().is_some_and(|l| l.normalize_features),
                seed: cfg.seed,
                ..MlpSpec::default()
            };
            spec.validate()?;
            let tc = TrainConfig {
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                optim: optim.clone(),
                loss: r.loss.clone(),
                reg: r.reg.clone(),
                eval_every: cfg.train.eval_every,
            };
            tc.validate().map_err(|e| CliError::Config(format!("run {:?}: {e}", r.name)))?;
            Ok((spec, tc))
        })
        .collect()
}

pub fn run(common: &Common) -> Result<(), CliError> {
    let cfg: TrainCmd = resolve(&TrainCmd::default(), common.config.as_deref(), &common.overrides(vec![])?)?;
    let ds = &cfg.dataset;
    if ds.k < 2 || ds.d_in == 0 || ds.test_per_class == 0 {
        return Err(Error::Infeasible(format!("need k >= 2, d_in >= 1, test_per_class >= 1 (k={})", ds.k)).into());
    }
    let counts = imbalance_counts(ds.k, &ds.imbalance)?;
    let jobs = plan(&cfg)?;
    let out = cfg.output_dir.clone();
    write_resolved(&out, &cfg)?;
    if common.dry_run {
        println!("train: config ok ({} runs, counts {counts:?}), wrote {}", jobs.len(), out.join("resolved_config.json").display());
        return Ok(());
    }

    let train_set = make_blobs::<f64>(ds.k, ds.d_in, &counts, ds.spread, cfg.seed)?;
    let test_set = train_set.resample(&vec![ds.test_per_class; ds.k], cfg.seed.wrapping_add(1))?;
    train_set.write(&out.join("data"), "train")?;
    test_set.write(&out.join("data"), "test")?;

    let results: Vec<Result<Trained<f64>, Error>> = pool(common.jobs)?.install(|| {
        jobs.par_iter().map(|(spec, tc)| train(build_mlp::<f64>(spec)?, &train_set, &test_set, tc)).collect()
    });

    let mut summary = String::from("name,epoch,train_loss,test_accuracy,class_margin_deg,gamma_min,m_samp,magnitude_ratio\n");
    let mut finals = Vec::new();
    for (r, res) in cfg.run.iter().zip(results) {
        let t = res?;
        let dir = out.join("runs").join(&r.name);
        write_json(&dir.join("record.json"), &t.record.to_json())?;
        write_text(&dir.join("evals.csv"), &t.record.to_csv())?;
        write_text(&dir.join("prototypes.csv"), &matrix_to_csv(&t.prototypes))?;
        let z = t.model.forward(&test_set.inputs)?;
        let hist = Histograms::compute(&t.prototypes, &z, &test_set.labels)?;
        write_text(&dir.join("hist_target_similarity.csv"), &Histograms::bins_to_csv(&hist.target_similarity))?;
        write_text(&dir.join("hist_other_similarity.csv"), &Histograms::bins_to_csv(&hist.other_similarity))?;
        write_text(&dir.join("hist_sample_margin.csv"), &Histograms::bins_to_csv(&hist.sample_margin))?;
        let s = t.record.last();
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{}",
            r.name,
            s.epoch,
            s.train_loss,
            s.test_accuracy,
            s.report.class_margin_deg(),
            s.report.gamma_min,
            s.report.m_samp,
            s.report.magnitude_ratio
        );
        println!(
            "{:<16} acc {:.4}  class margin {:>9.4} deg  m_samp {:>8.5}  gamma_min {:>8.5}",
            r.name,
            s.test_accuracy,
            s.report.class_margin_deg(),
            s.report.m_samp,
            s.report.gamma_min
        );
        finals.push((r.name.clone(), s.report.class_margin_deg()));
    }
    write_text(&out.join("summary.csv"), &summary)?;

    if common.assert {
        let (base, base_deg) = &finals[0];
        for (name, deg) in &finals[1..] {
            if deg <= base_deg {
                return Err(CliError::Assert(format!("{name} margin {deg:.4} deg not above {base} ({base_deg:.4})")));
            }
        }
    }
    Ok(())
}
