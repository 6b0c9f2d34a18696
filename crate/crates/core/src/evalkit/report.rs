use serde::{Deserialize, Serialize};

use crate::corpus::MetricKind;

/// Settings echoed into every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Free-form configuration name (`full`, `frozen`, `n=5`, ...).
    pub label: String,
    pub protocol: String,
    pub k: Option<usize>,
    pub n_scanpaths: usize,
    pub freeze_generator: bool,
    pub pretrained_generator: bool,
    pub baseline: bool,
    pub lr: f64,
}

/// One training/evaluation run. `value` is `None` when the metric is
/// undefined on the test split; `error` then says why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunValue {
    pub run: String,
    pub value: Option<f64>,
    pub error: Option<String>,
    pub best_epoch: usize,
    pub generator_init: String,
    pub generator_final: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: MetricKind,
    pub config: ReportConfig,
    pub runs: Vec<RunValue>,
    pub mean: Option<f64>,
    /// Sample standard deviation over `sqrt(n)`; 0 for a single run.
    pub stderr: Option<f64>,
}

pub fn mean_stderr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

impl EvalReport {
    pub fn new(task: &str, metric: MetricKind, config: ReportConfig, runs: Vec<RunValue>) -> Self {
        let vals = Self::values_of(&runs);
        let ms = mean_stderr(&vals);
        Self {
            task: task.into(),
            metric,
            config,
            runs,
            mean: ms.map(|m| m.0),
            stderr: ms.map(|m| m.1),
        }
    }

    fn values_of(runs: &[RunValue]) -> Vec<f64> {
        runs.iter().filter_map(|r| r.value).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        Self::values_of(&self.runs)
    }

    pub fn errors(&self) -> Vec<&str> {
        self.runs
            .iter()
            .filter_map(|r| r.error.as_deref())
            .collect()
    }

    pub fn csv_rows(&self, out: &mut String) {
        for r in &self.runs {
            let v = r.value.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.config.label, self.metric, r.run, v
            ));
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        self.csv_rows(&mut s);
        s
    }
}

pub const CSV_HEADER: &str = "config,metric,run,value\n";

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    for r in reports {
        r.csv_rows(&mut s);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_scanpaths: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Plot-ready curve: one row per scanpath count.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_scanpaths,mean,stderr,runs\n");
        for p in &self.points {
            let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            s.push_str(&format!(
                "{},{},{},{}\n",
                p.n_scanpaths,
                f(p.report.mean),
                f(p.report.stderr),
                p.report.values().len()
            ));
        }
        s
    }

    /// True when every point's mean is at least the previous mean minus the
    /// previous point's standard error.
    pub fn non_decreasing_within_noise(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| match (w[0].report.mean, w[1].report.mean) {
                (Some(a), Some(b)) => b >= a - w[0].report.stderr.unwrap_or(0.0),
                _ => false,
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: String,
    pub configs: Vec<EvalReport>,
}

impl AblationReport {
    pub fn get(&self, label: &str) -> Option<&EvalReport> {
        self.configs.iter().find(|r| r.config.label == label)
    }

    pub fn to_csv(&self) -> String {
        reports_to_csv(&self.configs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, v: Option<f64>) -> RunValue {
        RunValue {
            run: name.into(),
            value: v,
            error: v.is_none().then(|| "undefined".to_string()),
            best_epoch: 1,
            generator_init: String::new(),
            generator_final: String::new(),
        }
    }

    #[test]
    fn identical_values_have_zero_stderr() {
        let runs = (0..5)
            .map(|i| run(&format!("seed{i}"), Some(0.8)))
            .collect();
        let r = EvalReport::new("t", MetricKind::Accuracy, ReportConfig::default(), runs);
        assert_eq!((r.mean, r.stderr), (Some(0.8), Some(0.0)));
    }

    #[test]
    fn aggregates_recompute_from_runs() {
        let runs = vec![
            run("a", Some(1.0)),
            run("b", Some(2.0)),
            run("c", None),
            run("d", Some(4.0)),
        ];
        let r = EvalReport::new("t", MetricKind::Auc, ReportConfig::default(), runs);
        let m = 7.0 / 3.0;
        let sd = (((1.0 - m) * (1.0f64 - m) + (2.0 - m) * (2.0 - m) + (4.0 - m) * (4.0 - m)) / 2.0)
            .sqrt();
        assert!((r.mean.unwrap() - m).abs() < 1e-12);
        assert!((r.stderr.unwrap() - sd / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.errors(), vec!["undefined"]);
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.to_csv().lines().count(), 5);
        assert!(r.to_csv().contains(",auc,c,\n"));
    }

    #[test]
    fn sweep_noise_rule() {
        let point = |n, vals: &[f64]| SweepPoint {
            n_scanpaths: n,
            report: EvalReport::new(
                "t",
                MetricKind::Accuracy,
                ReportConfig::default(),
                vals.iter().map(|&v| run("r", Some(v))).collect(),
            ),
        };
        let up = SweepReport {
            task: "t".into(),
            points: vec![
                point(1, &[0.7, 0.8]),
                point(3, &[0.72, 0.74]),
                point(5, &[0.9, 0.9]),
            ],
        };
        assert!(up.non_decreasing_within_noise());
        let down = SweepReport {
            task: "t".into(),
            points: vec![point(1, &[0.8, 0.8]), point(3, &[0.7, 0.7])],
        };
        assert!(!down.non_decreasing_within_noise());
        assert_eq!(up.to_csv().lines().count(), 4);
    }
}
