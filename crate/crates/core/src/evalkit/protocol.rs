use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::report::{AblationReport, EvalReport, ReportConfig, RunValue, SweepPoint, SweepReport};
use crate::corpus::{fold_split, kfold, low_resource_split, DatasetSpec};
use crate::error::{Error, Result};
use crate::gazegen::GEN_PREFIX;
use crate::tensor::ParamStore;
use crate::trainkit::{
    build_joint, evaluate_metric, train_joint, Example, TrainConfig, TrainOutcome,
};

/// Run `f(0..n)` on up to `jobs` worker threads. Results come back in index
/// order, so the output does not depend on `jobs`.
pub fn par_map<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().unwrap()[i] = Some(v);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|v| v.unwrap())
        .collect()
}

/// Everything a protocol needs besides the training config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub task: String,
    pub spec: DatasetSpec,
    pub vocab_size: usize,
    /// Training pool; the whole dataset under cross-validation.
    pub pool: Vec<Example>,
    /// The original evaluation set used as the low-resource test split.
    pub test: Vec<Example>,
    pub generator: Option<ParamStore<f32>>,
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Protocol {
    CrossVal { folds: usize },
    LowResource { k: usize, data_seeds: Vec<u64> },
}

impl Protocol {
    fn name(&self) -> String {
        match self {
            Self::CrossVal { folds } => format!("crossval-{folds}"),
            Self::LowResource { k, .. } => format!("lowresource-k{k}"),
        }
    }
}

/// One finished training run plus its test score.
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub value: RunValue,
}

fn pick(data: &[Example], idx: &[usize]) -> Vec<Example> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

impl Experiment {
    /// Train on `train`, select on `dev`, score `test`. An undefined metric
    /// on the test split is recorded in the run instead of failing it.
    pub fn run(
        &self,
        name: &str,
        cfg: &TrainConfig,
        train: &[Example],
        dev: &[Example],
        test: &[Example],
    ) -> Result<RunResult> {
        let (model, init) = build_joint(cfg, self.vocab_size, &self.spec, self.generator.as_ref())?;
        let generator_init = init.subset(GEN_PREFIX).digest();
        let outcome = train_joint(&model, init, &self.spec, train, dev, cfg)?;
        let n = if cfg.baseline {
            1
        } else {
            cfg.n_scanpaths_train
        };
        let (value, error) =
            match evaluate_metric(&model, &outcome.store, &self.spec, test, n, cfg.seed) {
                Ok(v) => (Some(v), None),
                Err(Error::Metric(m)) => (None, Some(m)),
                Err(e) => return Err(e),
            };
        let value = RunValue {
            run: name.into(),
            value,
            error,
            best_epoch: outcome.best_epoch,
            generator_init,
            generator_final: outcome.store.subset(GEN_PREFIX).digest(),
        };
        Ok(RunResult { outcome, value })
    }

    fn report_config(&self, cfg: &TrainConfig, protocol: &Protocol, label: &str) -> ReportConfig {
        ReportConfig {
            label: label.into(),
            protocol: protocol.name(),
            k: match protocol {
                Protocol::LowResource { k, .. } => Some(*k),
                Protocol::CrossVal { .. } => None,
            },
            n_scanpaths: cfg.n_scanpaths_train,
            freeze_generator: cfg.freeze_generator,
            pretrained_generator: cfg.pretrained_generator,
            baseline: cfg.baseline,
            lr: cfg.lr,
        }
    }

    /// Every run of `protocol` under `cfg`, aggregated.
    pub fn evaluate(
        &self,
        protocol: &Protocol,
        cfg: &TrainConfig,
        label: &str,
    ) -> Result<EvalReport> {
        let runs: Vec<RunValue> = match protocol {
            Protocol::CrossVal { folds } => {
                let parts = kfold(self.pool.len(), *folds, cfg.seed)?;
                par_map(self.jobs, *folds, |i| {
                    let s = fold_split(&parts, i);
                    let r = self.run(
                        &format!("fold{i}"),
                        cfg,
                        &pick(&self.pool, &s.train),
                        &pick(&self.pool, &s.dev),
                        &pick(&self.pool, &s.test),
                    )?;
                    Ok(r.value)
                })
                .into_iter()
                .collect::<Result<_>>()?
            }
            Protocol::LowResource { k, data_seeds } => {
                if data_seeds.is_empty() {
                    return Err(Error::Config("no data seeds".into()));
                }
                par_map(self.jobs, data_seeds.len(), |j| {
                    let s =
                        low_resource_split(self.pool.len(), *k, data_seeds[j], self.test.len())?;
                    let r = self.run(
                        &format!("seed{}", data_seeds[j]),
                        cfg,
                        &pick(&self.pool, &s.train),
                        &pick(&self.pool, &s.dev),
                        &self.test,
                    )?;
                    Ok(r.value)
                })
                .into_iter()
                .collect::<Result<_>>()?
            }
        };
        Ok(EvalReport::new(
            &self.task,
            self.spec.metric,
            self.report_config(cfg, protocol, label),
            runs,
        ))
    }
}

pub fn run_crossval(exp: &Experiment, cfg: &TrainConfig, folds: usize) -> Result<EvalReport> {
    exp.evaluate(&Protocol::CrossVal { folds }, cfg, "crossval")
}

/// One report per `K`, each over all `data_seeds`; the training seed stays
/// `cfg.seed`.
pub fn run_lowresource(
    exp: &Experiment,
    cfg: &TrainConfig,
    ks: &[usize],
    data_seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    ks.iter()
        .map(|&k| {
            let p = Protocol::LowResource {
                k,
                data_seeds: data_seeds.to_vec(),
            };
            exp.evaluate(&p, cfg, &format!("k={k}"))
        })
        .collect()
}

/// One evaluation per scanpath count, with training and prediction counts
/// set together.
pub fn sweep_scanpaths(
    exp: &Experiment,
    cfg: &TrainConfig,
    protocol: &Protocol,
    counts: &[usize],
) -> Result<SweepReport> {
    if counts.is_empty() {
        return Err(Error::Config("no scanpath counts to sweep".into()));
    }
    let points = counts
        .iter()
        .map(|&n| {
            let c = TrainConfig {
                n_scanpaths_train: n,
                ..cfg.clone()
            };
            Ok(SweepPoint {
                n_scanpaths: n,
                report: exp.evaluate(protocol, &c, &format!("n={n}"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        task: exp.task.clone(),
        points,
    })
}

pub const ABLATIONS: [&str; 3] = ["full", "frozen", "scratch"];

/// Full, frozen-generator, and untrained-generator runs under identical
/// seeds and splits.
pub fn run_ablations(
    exp: &Experiment,
    cfg: &TrainConfig,
    protocol: &Protocol,
) -> Result<AblationReport> {
    if exp.generator.is_none() {
        return Err(Error::Config(
            "ablations need a pretrained generator checkpoint".into(),
        ));
    }
    let configs = ABLATIONS
        .iter()
        .map(|&label| {
            let c = TrainConfig {
                freeze_generator: label == "frozen",
                pretrained_generator: label != "scratch",
                baseline: false,
                ..cfg.clone()
            };
            exp.evaluate(protocol, &c, label)
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        task: exp.task.clone(),
        configs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::SuiteConfig;
    use crate::corpus::{make_synthetic_suite, Label, MetricKind};
    use crate::textenc::Vocab;
    use crate::trainkit::{build_generator, encode_examples};

    fn cfg() -> TrainConfig {
        TrainConfig {
            d_model: 16,
            layers: 1,
            max_len: 24,
            l_max: 6,
            max_epochs: 1,
            batch_size: 8,
            n_scanpaths_train: 1,
            pretrained_generator: false,
            ..TrainConfig::default()
        }
    }

    fn experiment(pool: usize) -> Experiment {
        let suite = make_synthetic_suite(&SuiteConfig {
            gaze_sentences: 4,
            train: pool,
            test: 10,
            lexicon: 40,
            ..SuiteConfig::default()
        })
        .unwrap();
        let v = Vocab::build(suite.texts(), 200).unwrap();
        let task = suite.task("keyword").unwrap();
        Experiment {
            task: "keyword".into(),
            spec: task.spec.clone(),
            vocab_size: v.len(),
            pool: encode_examples(&task.train, &v, 24).unwrap(),
            test: encode_examples(&task.test, &v, 24).unwrap(),
            generator: None,
            jobs: 1,
        }
    }

    #[test]
    fn par_map_is_order_stable() {
        let a = par_map(1, 17, |i| i * i);
        let b = par_map(4, 17, |i| i * i);
        assert_eq!(a, b);
        assert!(par_map(3, 0, |i| i).is_empty());
    }

    #[test]
    fn crossval_ten_runs_and_reproducible() {
        let exp = experiment(40);
        let a = run_crossval(&exp, &cfg(), 10).unwrap();
        assert_eq!(a.runs.len(), 10);
        let b = run_crossval(&Experiment { jobs: 3, ..exp }, &cfg(), 10).unwrap();
        assert_eq!(a, b);
        let m = a.mean.unwrap();
        let vals = a.values();
        assert!(vals.iter().all(|&v| v <= 1.0) && m >= vals.iter().cloned().fold(1.0, f64::min));
    }

    #[test]
    fn lowresource_reports_per_k() {
        let exp = experiment(60);
        let reps = run_lowresource(&exp, &cfg(), &[5, 10], &[111, 222]).unwrap();
        assert_eq!(reps.len(), 2);
        assert!(reps.iter().all(|r| r.runs.len() == 2));
        assert_eq!(reps[1].config.k, Some(10));
        assert!(run_lowresource(&exp, &cfg(), &[60], &[111]).is_err());
    }

    #[test]
    fn sweep_of_text_only_control_is_flat() {
        let exp = experiment(30);
        let c = TrainConfig {
            baseline: true,
            ..cfg()
        };
        let p = Protocol::LowResource {
            k: 10,
            data_seeds: vec![111],
        };
        let s = sweep_scanpaths(&exp, &c, &p, &[1, 3]).unwrap();
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.points[0].report.mean, s.points[1].report.mean);
        assert_eq!(s.points[1].report.config.n_scanpaths, 3);
        let single = sweep_scanpaths(&exp, &c, &p, &[7]).unwrap();
        assert_eq!(single.points.len(), 1);
        assert!(sweep_scanpaths(&exp, &c, &p, &[]).is_err());
    }

    #[test]
    fn ablation_contracts() {
        let mut exp = experiment(30);
        let c = cfg();
        let p = Protocol::LowResource {
            k: 10,
            data_seeds: vec![111],
        };
        assert!(run_ablations(&exp, &c, &p).is_err());
        let (_, mut gen) = build_generator(&c, exp.vocab_size).unwrap();
        let id = gen.ids().next().unwrap();
        gen.tensor_mut(id).data[0] += 1.0;
        exp.generator = Some(gen.clone());
        let r = run_ablations(&exp, &c, &p).unwrap();
        assert_eq!(r.configs.len(), 3);
        let run = |l: &str| r.get(l).unwrap().runs[0].clone();
        assert_eq!(run("frozen").generator_init, run("frozen").generator_final);
        assert_eq!(run("frozen").generator_init, gen.digest());
        assert_ne!(run("full").generator_init, run("full").generator_final);
        let (_, fresh) = build_generator(&c, exp.vocab_size).unwrap();
        assert_eq!(run("scratch").generator_init, fresh.digest());
        assert_ne!(run("scratch").generator_init, gen.digest());
    }

    #[test]
    fn undefined_auc_is_recorded() {
        let mut exp = experiment(30);
        exp.spec.metric = MetricKind::Auc;
        exp.test.iter_mut().for_each(|e| e.label = Label::Class(1));
        let p = Protocol::LowResource {
            k: 10,
            data_seeds: vec![111, 222],
        };
        let r = exp.evaluate(&p, &cfg(), "x").unwrap();
        assert_eq!(r.errors().len(), 2);
        assert_eq!(r.mean, None);
    }
}
