//! The pipeline stages: collect, balance, train, eval, report.
//!
//! Every stage writes the resolved config next to its outputs, so rerunning
//! with that file reproduces the outputs byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sgdrive::dataset::{
    histogram_csv, plan_route, record_episode, steer_histogram, BalancedSet, DatasetIndex,
    IndexEntry, RecordSpec, INDEX_VERSION,
};
use sgdrive::evaluation::{
    evaluate, generate_eval_paths, parallel_map, EvalReport, FailureCause, Policy, Termination,
};
use sgdrive::geometry::DEFAULT_SPACING;
use sgdrive::model::{build_model, Architecture, InputShape, ModelParameters};
use sgdrive::sim::sensor::ChannelMode;
use sgdrive::sim::town::{generate_town, TownMap};
use sgdrive::training::{train as run_training, EpochStats, RefSource, TrainReport};
use sgdrive::Error;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const INDEX_FILE: &str = "index.json";
pub const BALANCED_FILE: &str = "balanced.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const EVAL_JSON_FILE: &str = "eval_report.json";
pub const EVAL_CSV_FILE: &str = "eval_report.csv";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const RUN_FILE: &str = "run.json";

fn town(cfg: &RunConfig, seed: u64) -> Result<Arc<TownMap>> {
    Ok(Arc::new(generate_town(seed, &cfg.sim.town)?))
}

fn load_index(data: &Path) -> Result<DatasetIndex> {
    let p = data.join(INDEX_FILE);
    if !p.exists() {
        return Err(CliError::Data(format!("no dataset index at {}", p.display())));
    }
    Ok(DatasetIndex::load(&p)?)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Records `data.episodes` expert episodes in the training town.
///
/// Episode `e` plans its route with ChaCha8 seeded by `seed` on stream `e`
/// and uses condition seed `data.condition_seeds[e % len]`. A recording the
/// expert cannot finish is retried on a fresh stream, up to
/// `data.max_attempts` times. Up to `jobs` episodes are recorded at once; the
/// output does not depend on `jobs`.
pub fn collect(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<DatasetIndex> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let town = town(cfg, cfg.sim.town_seed)?;
    let traffic = cfg.collect_traffic();
    let seeds = &cfg.data.condition_seeds;
    let entries = parallel_map(cfg.data.episodes, jobs, |e| -> Result<IndexEntry> {
        let mut last = None;
        for attempt in 0..cfg.data.max_attempts {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(e as u64 | (attempt as u64) << 32);
            let (path, start) = plan_route(
                &town,
                &mut rng,
                cfg.data.route_length,
                DEFAULT_SPACING,
                cfg.sim.vehicle.cruise_speed,
            )?;
            let spec = RecordSpec {
                episode_id: e as u32,
                condition_seed: seeds[e % seeds.len()],
                traffic_seed: rng.gen(),
                length: cfg.data.episode_length,
                k: cfg.data.k,
                dt: cfg.sim.dt,
                stuck_timeout: cfg.data.stuck_timeout,
            };
            match record_episode(
                &town,
                &path,
                start,
                &cfg.sim.vehicle,
                &traffic,
                &cfg.sim.sensor,
                &cfg.expert,
                &spec,
            ) {
                Ok(log) => {
                    let file = DatasetIndex::episode_path(out, e as u32);
                    log.save(&file)?;
                    return Ok(IndexEntry {
                        file: file.file_name().unwrap().to_string_lossy().into_owned(),
                        episode_id: e as u32,
                        town_seed: cfg.sim.town_seed,
                        condition_seed: spec.condition_seed,
                        n_ticks: log.header.n_ticks,
                    });
                }
                Err(err @ Error::Recording(_)) => last = Some(err),
                Err(err) => return Err(err.into()),
            }
        }
        Err(last.expect("at least one attempt").into())
    });
    let index = DatasetIndex {
        version: INDEX_VERSION,
        k: cfg.data.k,
        mode: ChannelMode::Asd,
        episodes: entries.into_iter().collect::<Result<Vec<_>>>()?,
    };
    write_atomic(&out.join(INDEX_FILE), serde_json::to_string_pretty(&index)?.as_bytes())?;
    cfg.write_resolved(out)?;
    Ok(index)
}

/// Balances the dataset in `data`, writing `balanced.json` and the steer
/// histograms before and after balancing into `out`.
pub fn balance(cfg: &RunConfig, data: &Path, out: &Path) -> Result<BalancedSet> {
    cfg.validate()?;
    let index = load_index(data)?;
    let dataset = index.load_dataset(data)?;
    let refs = dataset.all_refs();
    let spec = cfg.balance_spec();
    let set = BalancedSet::build(&refs, &spec)?;
    fs::create_dir_all(out)?;
    set.save(&out.join(BALANCED_FILE))?;
    fs::write(out.join("hist_pre.csv"), histogram_csv(&steer_histogram(&refs, spec.n_bins)))?;
    fs::write(
        out.join("hist_post.csv"),
        histogram_csv(&steer_histogram(&set.samples, spec.n_bins)),
    )?;
    cfg.write_resolved(out)?;
    Ok(set)
}

/// Trains `model.arch` in `model.channels` on the balanced set of `data`.
/// Writes per-epoch checkpoints, `model.ckpt` and `train_report.csv`.
pub fn train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParameters, TrainReport)> {
    cfg.validate()?;
    let index = load_index(data)?;
    if cfg.model.channels == ChannelMode::Asd && index.mode == ChannelMode::As {
        return Err(CliError::Config(
            "dataset was recorded without depth and cannot train an asd model".into(),
        ));
    }
    let balanced_path = data.join(BALANCED_FILE);
    if !balanced_path.exists() {
        return Err(CliError::Data(format!(
            "no balanced set at {}; run balance first",
            balanced_path.display()
        )));
    }
    let set = BalancedSet::load(&balanced_path)?;
    let dataset = index.load_dataset(data)?;
    let first = dataset
        .episodes
        .first()
        .ok_or_else(|| CliError::Data("dataset has no episodes".into()))?;
    let input = InputShape {
        k: dataset.k,
        mode: cfg.model.channels,
        grid_h: first.header.grid_h as usize,
        grid_w: first.header.grid_w as usize,
    };
    let model = build_model(cfg.model.arch, input, &cfg.model.dims, cfg.init_seed())?;
    let source = RefSource {
        dataset: &dataset,
        refs: &set.samples,
        mode: cfg.model.channels,
        weights: (set.weight_of(false), set.weight_of(true)),
    };
    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let (model, report) = run_training(
        &model,
        &source,
        &cfg.train_config(),
        Some(&out.join("checkpoints")),
        on_epoch,
    )?;
    model.save(&out.join(MODEL_FILE))?;
    fs::write(out.join(TRAIN_REPORT_FILE), report.to_csv())?;
    if let Some(epoch) = report.diverged_at {
        return Err(Error::Diverged { epoch }.into());
    }
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalPolicy {
    Expert,
    Checkpoint(PathBuf),
}

/// Provenance of an eval run, read back by [`report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub policy: String,
    pub arch: Option<Architecture>,
    pub channels: Option<ChannelMode>,
    pub checkpoint: Option<PathBuf>,
    pub size_mb: Option<f64>,
}

/// Closed-loop evaluation in the held-out town. Writes `eval_report.json`,
/// `eval_report.csv`, `traces.jsonl` (one line per tick, tagged with the
/// path index) and `run.json`.
pub fn eval(cfg: &RunConfig, policy: &EvalPolicy, out: &Path, jobs: usize) -> Result<EvalReport> {
    cfg.validate()?;
    let model = match policy {
        EvalPolicy::Expert => None,
        EvalPolicy::Checkpoint(p) => {
            if !p.exists() {
                return Err(CliError::Data(format!("no checkpoint at {}", p.display())));
            }
            let m = ModelParameters::load(p)?;
            if m.mode() != cfg.model.channels {
                return Err(CliError::Config(format!(
                    "checkpoint expects {} input but the sensing config is {}",
                    m.mode().tag(),
                    cfg.model.channels.tag()
                )));
            }
            let s = &cfg.sim.sensor;
            if (m.input.grid_h, m.input.grid_w) != (s.grid_h, s.grid_w) {
                return Err(CliError::Config(format!(
                    "checkpoint expects a {}x{} grid, sensor renders {}x{}",
                    m.input.grid_h, m.input.grid_w, s.grid_h, s.grid_w
                )));
            }
            Some(m)
        }
    };
    let pol = match &model {
        Some(m) => Policy::Model(m),
        None => Policy::Expert(&cfg.expert),
    };
    let town = town(cfg, cfg.sim.eval_town_seed)?;
    let env = cfg.rollout_env();
    let paths = generate_eval_paths(&town, &cfg.eval, &env, &cfg.expert)?;
    let (report, traces) = evaluate(pol, &town, &paths, &cfg.eval, &env, &cfg.expert, true, jobs)?;

    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    fs::write(out.join(EVAL_JSON_FILE), report.to_json()?)?;
    fs::write(out.join(EVAL_CSV_FILE), report.to_csv())?;
    let mut w = BufWriter::new(fs::File::create(out.join(TRACES_FILE))?);
    for (i, trace) in traces.iter().enumerate() {
        for t in trace {
            let mut v = serde_json::to_value(t)?;
            v["path"] = i.into();
            serde_json::to_writer(&mut w, &v)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    let info = RunInfo {
        policy: report.policy.clone(),
        arch: model.as_ref().map(|m| m.arch),
        channels: model.as_ref().map(|m| m.mode()),
        checkpoint: match policy {
            EvalPolicy::Checkpoint(p) => Some(p.clone()),
            EvalPolicy::Expert => None,
        },
        size_mb: model.as_ref().map(|m| m.size_mb()),
    };
    fs::write(out.join(RUN_FILE), serde_json::to_string_pretty(&info)?)?;
    Ok(report)
}

/// One evaluated run as seen by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub dir: PathBuf,
    pub info: RunInfo,
    pub eval: EvalReport,
    pub train: Option<TrainReport>,
}

/// One directional comparison of two policy groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trend {
    pub name: String,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    /// `lhs > rhs` or `lhs <= rhs` depending on the trend; `None` if a side is missing.
    pub holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub runs: Vec<Run>,
    pub trends: Vec<Trend>,
}

/// Name of the success-rate trend: angle-commanded models vs the baseline.
pub const TREND_SUCCESS: &str = "success_angle_models_gt_discrete_baseline";
/// Name of the collision trend: depth vs no depth for angle-input models.
pub const TREND_DEPTH: &str = "veh_ped_per_km_angle_input_asd_le_as";

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(EVAL_JSON_FILE).exists() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    if dir.is_dir() {
        let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(EVAL_JSON_FILE).exists())
            .collect();
        subs.sort();
        out.extend(subs);
    }
    Ok(())
}

fn load_run(dir: &Path) -> Result<Run> {
    let eval = EvalReport::from_json(&fs::read_to_string(dir.join(EVAL_JSON_FILE))?)?;
    let info: RunInfo = match fs::read_to_string(dir.join(RUN_FILE)) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => RunInfo {
            policy: eval.policy.clone(),
            arch: None,
            channels: None,
            checkpoint: None,
            size_mb: None,
        },
    };
    let train = match info
        .checkpoint
        .as_ref()
        .and_then(|c| c.parent())
        .map(|p| p.join(TRAIN_REPORT_FILE))
    {
        Some(p) if p.exists() => Some(TrainReport::from_csv(&fs::read_to_string(p)?)?),
        _ => None,
    };
    Ok(Run {
        dir: dir.to_path_buf(),
        info,
        eval,
        train,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn veh_ped(r: &EvalReport) -> Option<f64> {
    r.collisions_per_km.map(|c| c.vehicle + c.pedestrian)
}

/// Directional trends over the given runs, grouped by architecture and channel mode.
pub fn trends(runs: &[Run]) -> Vec<Trend> {
    let arch_of = |r: &Run| r.info.arch;
    let angle = mean(
        runs.iter()
            .filter(|r| matches!(arch_of(r), Some(Architecture::AngleInput | Architecture::AngleBranched)))
            .map(|r| r.eval.success_rate),
    );
    let baseline = mean(
        runs.iter()
            .filter(|r| arch_of(r) == Some(Architecture::DiscreteBranched))
            .map(|r| r.eval.success_rate),
    );
    let ai = |mode: ChannelMode| {
        mean(
            runs.iter()
                .filter(|r| arch_of(r) == Some(Architecture::AngleInput) && r.info.channels == Some(mode))
                .filter_map(|r| veh_ped(&r.eval)),
        )
    };
    let (asd, as_) = (ai(ChannelMode::Asd), ai(ChannelMode::As));
    vec![
        Trend {
            name: TREND_SUCCESS.into(),
            lhs: angle,
            rhs: baseline,
            holds: angle.zip(baseline).map(|(a, b)| a > b),
        },
        Trend {
            name: TREND_DEPTH.into(),
            lhs: asd,
            rhs: as_,
            holds: asd.zip(as_).map(|(a, b)| a <= b),
        },
    ]
}

/// Joins eval and train reports of `run_dirs` (each a run or a directory of
/// runs) into `comparison.csv`, `summary.csv`, `failures.csv`,
/// `loss_curves.csv` and `trends.csv` under `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    let mut dirs = Vec::new();
    for d in run_dirs {
        find_runs(d, &mut dirs)?;
    }
    if dirs.is_empty() {
        return Err(CliError::Data("no eval runs found".into()));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;

    let mut cmp = String::from(
        "run,policy,episodes,success_rate,normal_driving_rate,collision_vehicle_per_km,\
         collision_pedestrian_per_km,collision_other_per_km,size_mb\n",
    );
    let mut fail = String::from("run,policy,failed,timeout,stuck,steer_caused,throttle_caused\n");
    let mut loss = String::from("run,policy,epoch,steer_loss,throttle_loss,total,lr\n");
    for r in &runs {
        let e = &r.eval;
        let c = e.collisions_per_km;
        let _ = writeln!(
            cmp,
            "{},{},{},{:.4},{},{},{},{},{}",
            r.dir.display(),
            e.policy,
            e.n_episodes,
            e.success_rate,
            opt(e.normal_driving_rate),
            opt(c.map(|c| c.vehicle)),
            opt(c.map(|c| c.pedestrian)),
            opt(c.map(|c| c.other)),
            opt(r.info.size_mb),
        );
        let failed: Vec<_> = e.episodes.iter().filter(|x| !x.success).collect();
        let count = |f: &dyn Fn(&&sgdrive::evaluation::EpisodeResult) -> bool| failed.iter().filter(|x| f(x)).count();
        let _ = writeln!(
            fail,
            "{},{},{},{},{},{},{}",
            r.dir.display(),
            e.policy,
            failed.len(),
            count(&|x| x.termination == Termination::Timeout),
            count(&|x| x.termination == Termination::Stuck),
            count(&|x| x.failure_cause == Some(FailureCause::Steer)),
            count(&|x| x.failure_cause == Some(FailureCause::Throttle)),
        );
        if let Some(t) = &r.train {
            for s in &t.epochs {
                let _ = writeln!(
                    loss,
                    "{},{},{},{},{},{},{}",
                    r.dir.display(),
                    e.policy,
                    s.epoch,
                    s.steer_loss,
                    s.throttle_loss,
                    s.total,
                    s.lr
                );
            }
        }
    }

    let mut policies: Vec<&str> = runs.iter().map(|r| r.eval.policy.as_str()).collect();
    policies.sort_unstable();
    policies.dedup();
    let mut summary = String::from(
        "policy,runs,success_rate,normal_driving_rate,collision_vehicle_per_km,\
         collision_pedestrian_per_km,collision_other_per_km,size_mb\n",
    );
    for p in policies {
        let group: Vec<&Run> = runs.iter().filter(|r| r.eval.policy == p).collect();
        let rates = |f: fn(&sgdrive::evaluation::CollisionRates) -> f64| {
            mean(group.iter().filter_map(|r| r.eval.collisions_per_km.as_ref().map(f)))
        };
        let _ = writeln!(
            summary,
            "{p},{},{},{},{},{},{},{}",
            group.len(),
            opt(mean(group.iter().map(|r| r.eval.success_rate))),
            opt(mean(group.iter().filter_map(|r| r.eval.normal_driving_rate))),
            opt(rates(|c| c.vehicle)),
            opt(rates(|c| c.pedestrian)),
            opt(rates(|c| c.other)),
            opt(mean(group.iter().filter_map(|r| r.info.size_mb))),
        );
    }

    let trends = trends(&runs);
    let mut tr = String::from("trend,lhs,rhs,holds\n");
    for t in &trends {
        let holds = t.holds.map_or("undefined".to_string(), |h| h.to_string());
        let _ = writeln!(tr, "{},{},{},{holds}", t.name, opt(t.lhs), opt(t.rhs));
    }

    fs::write(out.join("comparison.csv"), cmp)?;
    fs::write(out.join("failures.csv"), fail)?;
    fs::write(out.join("loss_curves.csv"), loss)?;
    fs::write(out.join("summary.csv"), summary)?;
    fs::write(out.join("trends.csv"), tr)?;
    Ok(ReportOutput { runs, trends })
}
