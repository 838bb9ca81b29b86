use std::path::Path;

use risp::data::{sample_dataset, sample_in_domain, sample_target_dataset, Dataset, Domain, KConfigs, RenderSample};
use risp::losses::RegVariant;
use risp::net::Network;
use risp::sim::EnvId;
use risp::tasks::{
    baseline_average, baseline_random, eval_state_estimation, loss_landscape, train_risp, Method, RunRecord, Scenario,
    Task, TrainError, Trainer, EPOCH_LOG_HEADER, RESULTS_HEADER,
};

use crate::config::{self, resolved};
use crate::output::{csv, parallel_map, write_atomic};
use crate::plot::LinePlot;
use crate::{
    AblateConfigsArgs, AblateSamplingArgs, CliError, DomainArg, EvalArgs, FitArgs, GenDataArgs, RegArg, TrainArgs,
};

impl RegArg {
    fn variant(self) -> Option<RegVariant> {
        match self {
            RegArg::None => None,
            RegArg::Full => Some(RegVariant::Full),
            RegArg::Fast => Some(RegVariant::Fast),
        }
    }
}

fn load_network(path: &Path, env: EnvId) -> Result<Network, CliError> {
    let net = Network::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if net.config.outputs != env.obs_dim() {
        return Err(CliError::Usage(format!(
            "{}: predictor has {} outputs, {env} needs {}",
            path.display(),
            net.config.outputs,
            env.obs_dim()
        )));
    }
    Ok(net)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        match CliError::from(e) {
            CliError::Usage(_) => CliError::Usage(msg),
            _ => CliError::Io(msg),
        }
    })
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    if let KConfigs::Fixed(k) = a.k_configs {
        if k > a.n {
            return Err(CliError::Usage(format!("--k-configs {k} exceeds --n {}", a.n)));
        }
    }
    let domain = match a.domain {
        DomainArg::Source => Domain::Source,
        DomainArg::Target => Domain::Target,
    };
    let ds = sample_in_domain(a.env, a.n, a.k_configs, a.seed, domain, a.jobs);
    let bytes = ds.to_bytes();
    write_atomic(&a.out, "dataset.risp", &bytes)?;
    write_atomic(&a.out, "manifest.json", (ds.manifest.to_text() + "\n").as_bytes())?;
    write_atomic(&a.out, "config.json", resolved("gen-data", a, None).as_bytes())?;
    println!(
        "{} samples of {} ({} distinct rendering configurations, k-configs {}), sha256 {}",
        ds.len(),
        a.env,
        ds.distinct_psi(),
        a.k_configs,
        hex::encode(&bytes[bytes.len() - 32..])
    );
    Ok(())
}

fn trace_csv(log: &[risp::tasks::EpochLog]) -> String {
    csv(
        "risp training trace v1",
        EPOCH_LOG_HEADER,
        log.iter().map(|e| e.csv_row()),
    )
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    let env = ds.env();
    let mut exp = config::load(a.config.as_deref(), env)?;
    exp.train.reg = a.reg.variant();
    exp.train.seed = a.seed;
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::load(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            if t.net.config.outputs != env.obs_dim() {
                return Err(CliError::Usage(format!(
                    "{}: training state is not for {env}",
                    p.display()
                )));
            }
            exp.train = t.config.clone();
            t
        }
        None => Trainer::new(exp.train.clone(), env.obs_dim()),
    };
    // A resumed run keeps the split of the run that wrote the training state.
    let (train_idx, held_out) = ds.split_indices(trainer.config.seed);
    let train: Vec<RenderSample> = train_idx.iter().map(|&i| ds.samples[i].clone()).collect();
    let eval: Vec<RenderSample> = match &a.eval_data {
        Some(p) => {
            let e = load_dataset(p)?;
            if e.env() != env {
                return Err(CliError::Usage(format!(
                    "{}: holds {} data, expected {env}",
                    p.display(),
                    e.env()
                )));
            }
            e.samples
        }
        None => held_out.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    write_atomic(&a.out, "config.json", resolved("train", a, Some(&exp)).as_bytes())?;
    let budget = a.stop_after.unwrap_or(usize::MAX);
    let mut ran = 0;
    let eval_set = (!eval.is_empty()).then_some(eval.as_slice());
    while !trainer.is_done() && ran < budget {
        match trainer.run_epoch(&train, eval_set) {
            Ok(e) => {
                ran += 1;
                log::info!("epoch {} l_error {:.5} l_reg {:.5}", e.epoch, e.l_error, e.l_reg);
            }
            Err(TrainError::NonFinite { epoch, last_good, log }) => {
                let mut buf = Vec::new();
                last_good.write_to(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
                write_atomic(&a.out, "checkpoint.risp", &buf)?;
                write_atomic(&a.out, "loss_trace.csv", trace_csv(&log).as_bytes())?;
                return Err(CliError::Internal(format!(
                    "non-finite loss in epoch {epoch}; last good checkpoint written to {}",
                    a.out.join("checkpoint.risp").display()
                )));
            }
            Err(e) => return Err(CliError::Usage(e.to_string())),
        }
    }
    let mut buf = Vec::new();
    trainer
        .net
        .write_to(&mut buf)
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_atomic(&a.out, "checkpoint.risp", &buf)?;
    write_atomic(&a.out, "train_state.bin", &trainer.to_bytes())?;
    write_atomic(&a.out, "loss_trace.csv", trace_csv(&trainer.log).as_bytes())?;
    let curve: Vec<(f64, f64)> = trainer.log.iter().map(|e| (e.epoch as f64, e.l_error)).collect();
    let eval_curve: Vec<(f64, f64)> = trainer
        .log
        .iter()
        .map(|e| (e.epoch as f64, e.eval_error.unwrap_or(f64::NAN)))
        .collect();
    write_atomic(
        &a.out,
        "loss_trace.png",
        &LinePlot::new(vec![curve, eval_curve]).render(),
    )?;
    if let Some(last) = trainer.log.last() {
        println!(
            "{env}: {} epochs, l_error {:.5}, l_reg {:.5}, eval error {}",
            trainer.epoch,
            last.l_error,
            last.l_reg,
            last.eval_error.map_or("-".into(), |e| format!("{e:.5}"))
        );
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    let env = ds.env();
    let stats = match a.method {
        Method::Ours | Method::OursNoGrad => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage(format!("method {} needs --checkpoint", a.method)))?;
            eval_state_estimation(&mut load_network(path, env)?, &ds.samples)
        }
        Method::Average => {
            let path = a
                .train_data
                .as_ref()
                .ok_or_else(|| CliError::Usage("method average needs --train-data".into()))?;
            let train = load_dataset(path)?;
            if train.env() != env {
                return Err(CliError::Usage(format!("{}: not a {env} dataset", path.display())));
            }
            eval_state_estimation(&mut baseline_average(&train.samples), &ds.samples)
        }
        Method::Random => eval_state_estimation(&mut baseline_random(env, a.seed), &ds.samples),
        m => {
            return Err(CliError::Usage(format!(
                "method {m} does not estimate states from single images"
            )))
        }
    };
    let row = format!(
        "{env},{},{},{:e},{:e},{}",
        a.method, a.seed, stats.mean, stats.std, stats.n
    );
    write_atomic(
        &a.out,
        "results.csv",
        csv("risp eval v1", "env,method,seed,mean,std,n", [row]).as_bytes(),
    )?;
    write_atomic(&a.out, "config.json", resolved("eval", a, None).as_bytes())?;
    println!(
        "{env} {}: {:.5} ± {:.5} over {} images",
        a.method, stats.mean, stats.std, stats.n
    );
    Ok(())
}

fn results_csv(records: &[RunRecord]) -> String {
    let rows = records.iter().map(|r| {
        let phi = if r.task == Task::Sysid {
            r.estimate
                .iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(";")
        } else {
            String::new()
        };
        format!("{},{phi}", r.csv_row())
    });
    csv("risp results v1", &format!("{RESULTS_HEADER},phi_hat"), rows)
}

fn traces_csv(records: &[RunRecord]) -> String {
    let rows = records.iter().flat_map(|r| {
        r.trace
            .iter()
            .enumerate()
            .map(move |(i, l)| format!("{},{},{i},{l:e}", r.method, r.seed))
    });
    csv("risp loss traces v1", "method,seed,iteration,loss", rows)
}

pub fn fit_task(task: Task, name: &str, a: &FitArgs) -> Result<(), CliError> {
    let exp = config::load(a.config.as_deref(), a.env)?;
    if a.seeds.is_empty() || a.methods.is_empty() {
        return Err(CliError::Usage("need at least one seed and one method".into()));
    }
    Scenario::new(task, a.env, a.seeds[0]).map_err(|e| CliError::Usage(e.to_string()))?;
    let need = |flag: &Option<std::path::PathBuf>, method: Method, what: &str| -> Result<Option<Network>, CliError> {
        if !a.methods.contains(&method) {
            return Ok(None);
        }
        let p = flag
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("method {method} needs --{what}")))?;
        load_network(p, a.env).map(Some)
    };
    let ours = need(&a.checkpoint, Method::Ours, "checkpoint")?;
    let no_grad = need(&a.checkpoint_no_grad, Method::OursNoGrad, "checkpoint-no-grad")?;
    let jobs: Vec<(u64, Method)> = a
        .seeds
        .iter()
        .flat_map(|&s| a.methods.iter().map(move |&m| (s, m)))
        .collect();
    let results = parallel_map(&jobs, a.jobs, |&(seed, method)| {
        let sc = Scenario::new(task, a.env, seed).expect("scenario checked above");
        let net = match method {
            Method::Ours => ours.as_ref(),
            Method::OursNoGrad => no_grad.as_ref(),
            _ => None,
        };
        sc.run(method, net, a.sampling, &exp.fit)
    });
    let records: Vec<RunRecord> = results.into_iter().collect::<Result<_, _>>()?;
    write_atomic(&a.out, "results.csv", results_csv(&records).as_bytes())?;
    write_atomic(&a.out, "traces.csv", traces_csv(&records).as_bytes())?;
    let timing: String = records
        .iter()
        .map(|r| format!("{} seed {}: {:.3} s\n", r.method, r.seed, r.wall_seconds))
        .collect();
    write_atomic(&a.out, "timing.txt", timing.as_bytes())?;
    let series: Vec<Vec<(f64, f64)>> = records
        .iter()
        .filter(|r| !r.trace.is_empty())
        .map(|r| r.trace.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect())
        .collect();
    let mut plot = LinePlot::new(series);
    plot.log_y = true;
    write_atomic(&a.out, "traces.png", &plot.render())?;
    write_atomic(&a.out, "config.json", resolved(name, a, Some(&exp)).as_bytes())?;
    for r in &records {
        println!(
            "{} {} seed {}: error {:.5} ({})",
            a.env,
            r.method,
            r.seed,
            r.metric,
            if r.failed() { "failed" } else { "completed" }
        );
    }
    Ok(())
}

pub fn ablate_configs(a: &AblateConfigsArgs) -> Result<(), CliError> {
    if a.n < 2 || a.test_n == 0 {
        return Err(CliError::Usage("--n must be at least 2 and --test-n positive".into()));
    }
    let exp = config::load(a.config.as_deref(), a.env)?;
    let ks = [KConfigs::Fixed(1), KConfigs::Fixed(10.min(a.n)), KConfigs::Fresh];
    let test = sample_target_dataset(a.env, a.test_n, a.seed.wrapping_add(1000)).samples;
    let sets: Vec<Vec<RenderSample>> = ks
        .iter()
        .map(|&k| {
            let ds = sample_dataset(a.env, a.n, k, a.seed);
            ds.split_indices(a.seed)
                .0
                .iter()
                .map(|&i| ds.samples[i].clone())
                .collect()
        })
        .collect();
    let curves: Vec<(usize, Option<RegVariant>)> =
        (0..ks.len()).flat_map(|k| [(k, a.reg.variant()), (k, None)]).collect();
    let logs = parallel_map(&curves, a.jobs, |&(k, reg)| {
        let cfg = risp::tasks::TrainConfig {
            reg,
            seed: a.seed,
            ..exp.train.clone()
        };
        train_risp(&sets[k], &cfg, Some(&test)).map(|t| t.log)
    });
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (&(k, reg), log) in curves.iter().zip(logs) {
        let log = log.map_err(|e| CliError::Internal(e.to_string()))?;
        let reg_name = reg.map_or("none".to_string(), |r| r.to_string());
        let curve = format!("k{}-{reg_name}", ks[k]);
        for e in &log {
            rows.push(format!(
                "{curve},{},{reg_name},{},{:e},{:e},{:e},{:e}",
                ks[k],
                e.epoch,
                e.eval_error.unwrap_or(f64::NAN),
                e.l_error,
                e.l_reg,
                e.gamma
            ));
        }
        series.push(
            log.iter()
                .map(|e| (e.epoch as f64, e.eval_error.unwrap_or(f64::NAN)))
                .collect(),
        );
    }
    let header = "curve,k_configs,reg,epoch,eval_error,l_error,l_reg,gamma";
    write_atomic(
        &a.out,
        "ablate_configs.csv",
        csv("risp ablate-configs v1", header, rows).as_bytes(),
    )?;
    write_atomic(&a.out, "ablate_configs.png", &LinePlot::new(series).render())?;
    write_atomic(
        &a.out,
        "config.json",
        resolved("ablate-configs", a, Some(&exp)).as_bytes(),
    )?;
    println!("wrote {} curves to {}", curves.len(), a.out.display());
    Ok(())
}

pub fn ablate_sampling(a: &AblateSamplingArgs) -> Result<(), CliError> {
    let env = a.env;
    if env.param_dim() != 1 {
        return Err(CliError::Usage(format!("{env} has more than one system parameter")));
    }
    if a.grid < 2 {
        return Err(CliError::Usage("--grid needs at least two points".into()));
    }
    if !a.method.optimizes() {
        return Err(CliError::Usage(format!("method {} has no loss to map", a.method)));
    }
    let exp = config::load(a.config.as_deref(), env)?;
    let net = match a.method {
        Method::Ours | Method::OursNoGrad => {
            let p = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage(format!("method {} needs --checkpoint", a.method)))?;
            Some(load_network(p, env)?)
        }
        _ => None,
    };
    let sc = Scenario::new(Task::Sysid, env, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let points: Vec<Vec<f64>> = (0..a.grid).map(|i| vec![i as f64 / (a.grid - 1) as f64]).collect();
    let params: Vec<f64> = points.iter().map(|z| sc.problem.values(z)[0]).collect();
    let landscapes = parallel_map(&a.samplings, a.jobs, |&s| {
        let frames = sc.frames(s);
        loss_landscape(
            &sc.problem,
            &sc.evidence_for(a.method, &frames),
            a.method,
            net.as_ref(),
            &points,
            &exp.fit,
        )
    });
    let landscapes: Vec<Vec<f64>> = landscapes.into_iter().collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut argmins = Vec::new();
    for (s, losses) in a.samplings.iter().zip(&landscapes) {
        for (p, l) in params.iter().zip(losses) {
            rows.push(format!("{s},{p:e},{l:e}"));
        }
        let best = argmin(losses);
        argmins.push(match best {
            Some(i) => format!("{s},{i},{:e}", params[i]),
            None => format!("{s},,"),
        });
        println!(
            "{s}: argmin {}",
            best.map_or("-".into(), |i| format!("{} at {:.4}", i, params[i]))
        );
    }
    write_atomic(
        &a.out,
        "landscape.csv",
        csv("risp landscape v1", "sampling,param,loss", rows).as_bytes(),
    )?;
    write_atomic(
        &a.out,
        "argmins.csv",
        csv("risp landscape argmins v1", "sampling,grid_index,param", argmins).as_bytes(),
    )?;
    // Curves are normalized to their own maximum so different frame counts share one axis.
    let series = landscapes
        .iter()
        .map(|l| {
            let top = l.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
            params
                .iter()
                .zip(l)
                .map(|(&p, &v)| (p, if top > 0.0 { v / top } else { v }))
                .collect()
        })
        .collect();
    write_atomic(&a.out, "landscape.png", &LinePlot::new(series).render())?;
    write_atomic(
        &a.out,
        "config.json",
        resolved("ablate-sampling", a, Some(&exp)).as_bytes(),
    )?;
    Ok(())
}

/// Index of the smallest finite value (the first one on ties).
pub fn argmin(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

pub fn manifest_dump(path: &Path) -> Result<(), CliError> {
    let ds = load_dataset(path)?;
    println!("{}", ds.manifest.to_text());
    Ok(())
}
