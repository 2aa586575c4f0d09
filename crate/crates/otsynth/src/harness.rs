//! Experiment driver: builds simulation environments, fans replicates across
//! a worker pool, runs every configured method on the three observed arms,
//! evaluates the synthetic output against the withheld oracle arm, and
//! writes per-replicate artifacts plus one aggregate table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::OttmlConfig;
use crate::baselines::DEFAULT_FACTORS;
use crate::data::save_dataset;
use crate::dgp::{make_environment, ScenarioSpec};
use crate::error::{Error, Result};
use crate::eval::{full_report, marginal_summary, EvalReport, MarginalSummary, METRIC_NAMES};
use crate::map::AlignmentKernelSpec;
use crate::methods::{MethodContext, MethodRegistry};
use crate::synth::SynthConfig;

/// Marginal-summary columns of the result tables, in print order.
pub const MARGINAL_STAT_NAMES: [&str; 5] = ["Mean", "Std", "q1", "q2", "q3"];

/// Tweak folded into the per-replicate seed to derive the outcome-model
/// seed, so the model stream never coincides with the sampling stream.
const MODEL_SEED_TWEAK: u64 = 0xA5A5_5A5A_C0FF_EE11;

/// Everything one experiment run needs, loadable from a TOML file whose keys
/// mirror these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenarios: Vec<u32>,
    pub replicates: usize,
    pub n0: usize,
    pub n1: usize,
    pub n0_prime: usize,
    pub n1_prime: usize,
    /// Method names resolved against the registry at run time.
    pub methods: Vec<String>,
    pub ottml: OttmlConfig,
    pub synth: SynthConfig,
    pub kernel: AlignmentKernelSpec,
    pub gensynth_factors: usize,
    /// Base seed; replicate k simulates from seed XOR k.
    pub seed: u64,
    /// Seed for the evaluation projections, shared by all replicates.
    pub eval_seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![1],
            replicates: 5,
            n0: 500,
            n1: 250,
            n0_prime: 500,
            n1_prime: 250,
            methods: vec![
                "otsynth-linear".into(),
                "otsynth-net".into(),
                "twfe".into(),
                "matchsynth".into(),
                "gensynth".into(),
            ],
            ottml: OttmlConfig::default(),
            synth: SynthConfig::default(),
            kernel: AlignmentKernelSpec::default(),
            gensynth_factors: DEFAULT_FACTORS,
            seed: 0,
            eval_seed: 0,
            output_dir: PathBuf::from("otsynth-out"),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list must be nonempty".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("scenario list must be nonempty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if self.gensynth_factors == 0 {
            return Err(Error::Config("GenSynth factor count must be at least 1".into()));
        }
        let registry = MethodRegistry::with_builtins();
        for name in &self.methods {
            registry.get(name)?;
        }
        for &scenario in &self.scenarios {
            self.scenario_spec(scenario, 0)?.validate()?;
        }
        self.ottml.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    /// The simulation spec for one replicate: data from seed XOR k, outcome
    /// model from a tweaked stream so the two never coincide.
    pub fn scenario_spec(&self, scenario: u32, replicate: usize) -> Result<ScenarioSpec> {
        let rep_seed = self.seed ^ replicate as u64;
        ScenarioSpec::for_scenario(
            scenario,
            self.n0,
            self.n1,
            self.n0_prime,
            self.n1_prime,
            rep_seed ^ MODEL_SEED_TWEAK,
            rep_seed,
        )
    }

    fn method_context(&self, replicate_seed: u64) -> MethodContext {
        MethodContext {
            ottml: self.ottml.clone(),
            synth: self.synth.clone(),
            kernel: self.kernel.clone(),
            gensynth_factors: self.gensynth_factors,
            seed: replicate_seed,
        }
    }
}

/// Mean and standard error of one statistic over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub se: f64,
}

fn mean_se(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MetricSummary { mean, se }
}

fn marginal_values(summary: &MarginalSummary) -> [f64; 5] {
    [summary.mean, summary.std_dev, summary.q1, summary.q2, summary.q3]
}

fn aggregate_marginals(summaries: &[MarginalSummary]) -> BTreeMap<String, MetricSummary> {
    let mut out = BTreeMap::new();
    for (j, name) in MARGINAL_STAT_NAMES.iter().enumerate() {
        let column: Vec<f64> = summaries.iter().map(|s| marginal_values(s)[j]).collect();
        out.insert(name.to_string(), mean_se(&column));
    }
    out
}

/// Per-metric mean and standard error over a cell's replicate reports:
/// marginal summaries of the synthetic outcome plus every distance.
pub fn aggregate(reports: &[EvalReport]) -> Result<BTreeMap<String, MetricSummary>> {
    if reports.is_empty() {
        return Err(Error::EmptySample { context: "aggregation over replicates".into() });
    }
    let reference: Vec<&String> = reports[0].distances.keys().collect();
    for (i, report) in reports.iter().enumerate().skip(1) {
        for key in &reference {
            if !report.distances.contains_key(*key) {
                return Err(Error::MetricSetMismatch { report: i, metric: (*key).clone() });
            }
        }
        for key in report.distances.keys() {
            if !reports[0].distances.contains_key(key) {
                return Err(Error::MetricSetMismatch { report: i, metric: key.clone() });
            }
        }
    }
    let marginals: Vec<MarginalSummary> =
        reports.iter().map(|r| r.marginal_synthetic).collect();
    let mut out = aggregate_marginals(&marginals);
    for key in reference {
        let column: Vec<f64> = reports.iter().map(|r| r.distances[key]).collect();
        out.insert(key.clone(), mean_se(&column));
    }
    Ok(out)
}

/// One row of the aggregate table: a (scenario, method) cell, or the
/// scenario's oracle row carrying only marginal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario: u32,
    pub method: String,
    /// Replicates that produced a report; failures are excluded.
    pub count: usize,
    pub values: BTreeMap<String, MetricSummary>,
}

/// The experiment's one summary table, mirroring the result tables: marginal
/// columns first, then distances in print order, one mean and one standard
/// error per statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    pub fn get(&self, scenario: u32, method: &str, stat: &str) -> Option<MetricSummary> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.method == method)
            .and_then(|r| r.values.get(stat))
            .copied()
    }

    pub fn to_csv(&self) -> String {
        let mut csv = String::from("scenario,method,count");
        for name in MARGINAL_STAT_NAMES.iter().chain(METRIC_NAMES.iter()) {
            let _ = write!(csv, ",{name},{name}_se");
        }
        csv.push('\n');
        for row in &self.rows {
            let _ = write!(csv, "{},{},{}", row.scenario, row.method, row.count);
            for name in MARGINAL_STAT_NAMES.iter().chain(METRIC_NAMES.iter()) {
                match row.values.get(*name) {
                    Some(v) => {
                        let _ = write!(csv, ",{},{}", v.mean, v.se);
                    }
                    None => csv.push_str(",,"),
                }
            }
            csv.push('\n');
        }
        csv
    }
}

#[derive(Debug, Clone, Serialize)]
struct ReplicateRecord<'a> {
    scenario: u32,
    replicate: usize,
    method: &'a str,
    report: &'a EvalReport,
}

struct ReplicateOutcome {
    oracle_marginal: MarginalSummary,
    per_method: Vec<std::result::Result<EvalReport, String>>,
}

fn run_replicate(
    config: &ExperimentConfig,
    registry: &MethodRegistry,
    scenario: u32,
    replicate: usize,
    dir: &Path,
) -> Result<ReplicateOutcome> {
    let spec = config.scenario_spec(scenario, replicate)?;
    let env = make_environment(&spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let oracle_y: Vec<f64> = env.z1prime_oracle.rows().iter().map(|o| o.y()).collect();
    let oracle_marginal = marginal_summary(&oracle_y)?;
    let ctx = config.method_context(config.seed ^ replicate as u64);
    let mut per_method = Vec::with_capacity(config.methods.len());
    for name in &config.methods {
        let outcome = registry
            .run(name, &env.z0, &env.z1, &env.z0prime, &ctx)
            .and_then(|synthetic| {
                save_dataset(&synthetic, &dir.join(format!("{name}.csv")))?;
                let report = full_report(&synthetic, &env.z1prime_oracle, config.eval_seed)?;
                let record = ReplicateRecord { scenario, replicate, method: name, report: &report };
                let json = serde_json::to_string_pretty(&record)
                    .map_err(|e| Error::Serialization(e.to_string()))?;
                let path = dir.join(format!("{name}.report.json"));
                fs::write(&path, json + "\n").map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                Ok(report)
            });
        match outcome {
            Ok(report) => per_method.push(Ok(report)),
            Err(err) => {
                let path = dir.join(format!("{name}.error.txt"));
                fs::write(&path, format!("{err}\n")).map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                per_method.push(Err(err.to_string()));
            }
        }
    }
    Ok(ReplicateOutcome { oracle_marginal, per_method })
}

/// Runs the full experiment: every scenario and replicate, every method,
/// per-replicate synthetic CSVs and reports on disk, and one aggregate CSV.
/// Replicates fan out across the configured worker pool; per-replicate seeds
/// make the outputs identical at any worker count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<AggregateTable> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::Io {
        path: config.output_dir.display().to_string(),
        source: e,
    })?;
    let registry = MethodRegistry::with_builtins();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(self::effective_workers(config.workers))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut rows = Vec::new();
    for &scenario in &config.scenarios {
        let scenario_dir = config.output_dir.join(format!("scenario-{scenario}"));
        let outcomes: Vec<Result<ReplicateOutcome>> = pool.install(|| {
            (0..config.replicates)
                .into_par_iter()
                .map(|replicate| {
                    let dir = scenario_dir.join(format!("replicate-{replicate}"));
                    run_replicate(config, &registry, scenario, replicate, &dir)
                })
                .collect()
        });
        let outcomes: Vec<ReplicateOutcome> =
            outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        for (m, name) in config.methods.iter().enumerate() {
            let reports: Vec<EvalReport> = outcomes
                .iter()
                .filter_map(|o| o.per_method[m].as_ref().ok().cloned())
                .collect();
            let values = if reports.is_empty() {
                BTreeMap::new()
            } else {
                aggregate(&reports)?
            };
            rows.push(AggregateRow {
                scenario,
                method: name.clone(),
                count: reports.len(),
                values,
            });
        }
        let oracle_marginals: Vec<MarginalSummary> =
            outcomes.iter().map(|o| o.oracle_marginal).collect();
        rows.push(AggregateRow {
            scenario,
            method: "oracle".into(),
            count: oracle_marginals.len(),
            values: aggregate_marginals(&oracle_marginals),
        });
    }
    let table = AggregateTable { rows };
    let csv_path = config.output_dir.join("aggregate.csv");
    fs::write(&csv_path, table.to_csv()).map_err(|e| Error::Io {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    Ok(table)
}

fn effective_workers(workers: usize) -> usize {
    workers.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::DEFAULT_PROJECTIONS;

    fn report_with(mean: f64, w1: f64) -> EvalReport {
        let marginal = MarginalSummary { mean, std_dev: 1.0, q1: 0.0, q2: mean, q3: 1.0 };
        let mut distances = BTreeMap::new();
        for name in METRIC_NAMES {
            distances.insert(name.to_string(), w1);
        }
        EvalReport { marginal_synthetic: marginal, marginal_oracle: marginal, distances }
    }

    #[test]
    fn aggregate_matches_hand_arithmetic() {
        let single = aggregate(&[report_with(2.0, 1.5)]).unwrap();
        for v in single.values() {
            assert_eq!(v.se, 0.0);
        }
        assert_eq!(single["W1-Y"].mean, 1.5);
        let pair = aggregate(&[report_with(1.0, 1.0), report_with(3.0, 3.0)]).unwrap();
        assert_eq!(pair["Mean"].mean, 2.0);
        assert!((pair["Mean"].se - 1.0).abs() < 1e-12);
        assert_eq!(pair["W1-Y"].mean, 2.0);
        assert!((pair["W1-Y"].se - 1.0).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_rejects_heterogeneous_metric_sets() {
        let a = report_with(1.0, 1.0);
        let mut b = report_with(2.0, 2.0);
        b.distances.remove("KL-Y");
        let err = aggregate(&[a.clone(), b]).unwrap_err();
        match err {
            Error::MetricSetMismatch { report, metric } => {
                assert_eq!(report, 1);
                assert_eq!(metric, "KL-Y");
            }
            other => panic!("unexpected error {other}"),
        }
        let mut c = report_with(2.0, 2.0);
        c.distances.insert("Extra".into(), 0.0);
        assert!(matches!(
            aggregate(&[a, c]),
            Err(Error::MetricSetMismatch { metric, .. }) if metric == "Extra"
        ));
    }

    #[test]
    fn csv_layout_is_stable_and_complete() {
        let mut values = BTreeMap::new();
        values.insert("Mean".to_string(), MetricSummary { mean: 1.25, se: 0.5 });
        let table = AggregateTable {
            rows: vec![
                AggregateRow { scenario: 1, method: "twfe".into(), count: 2, values },
                AggregateRow {
                    scenario: 1,
                    method: "oracle".into(),
                    count: 2,
                    values: BTreeMap::new(),
                },
            ],
        };
        let csv = table.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("scenario,method,count,Mean,Mean_se,Std,Std_se,q1,q1_se"));
        assert!(header.contains("W1-Y,W1-Y_se,Hellinger-Y"));
        assert!(header.ends_with("MMD2-Z,MMD2-Z_se"));
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,twfe,2,1.25,0.5,,"));
        // Fields: 3 identity columns + 2 per statistic.
        let want_fields = 3 + 2 * (MARGINAL_STAT_NAMES.len() + METRIC_NAMES.len());
        assert_eq!(first.split(',').count(), want_fields);
    }

    #[test]
    fn config_round_trips_through_toml_and_validates() {
        let text = r#"
            scenarios = [1, 5]
            replicates = 2
            n0 = 40
            n1 = 20
            n0_prime = 30
            n1_prime = 25
            methods = ["twfe", "matchsynth"]
            seed = 7
            output_dir = "somewhere"
            workers = 2

            [ottml]
            max_outer = 4

            [synth]
            multistart = 1
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(config.scenarios, vec![1, 5]);
        assert_eq!(config.replicates, 2);
        assert_eq!(config.ottml.max_outer, 4);
        assert_eq!(config.synth.multistart, 1);
        // Unlisted keys keep their defaults.
        assert_eq!(config.ottml.alpha_star, OttmlConfig::default().alpha_star);
        assert_eq!(config.gensynth_factors, DEFAULT_FACTORS);
        let _ = DEFAULT_PROJECTIONS;

        assert!(ExperimentConfig::from_toml_str("replicates = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("methods = []").is_err());
        assert!(ExperimentConfig::from_toml_str("methods = [\"nope\"]").is_err());
        assert!(ExperimentConfig::from_toml_str("scenarios = [12]").is_err());
    }

    #[test]
    fn tiny_experiment_writes_artifacts_and_reruns_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            scenarios: vec![1],
            replicates: 2,
            n0: 30,
            n1: 20,
            n0_prime: 25,
            n1_prime: 40,
            methods: vec!["twfe".into()],
            output_dir: tmp.path().join("run"),
            ..ExperimentConfig::default()
        };
        let table = run_experiment(&config).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].method, "twfe");
        assert_eq!(table.rows[0].count, 2);
        assert_eq!(table.rows[1].method, "oracle");
        for replicate in 0..2 {
            let dir = config.output_dir.join("scenario-1").join(format!("replicate-{replicate}"));
            assert!(dir.join("twfe.csv").is_file());
            assert!(dir.join("twfe.report.json").is_file());
        }
        let csv = fs::read_to_string(config.output_dir.join("aggregate.csv")).unwrap();

        // Rerun into a fresh directory with more workers: identical bytes.
        let config2 = ExperimentConfig {
            output_dir: tmp.path().join("run2"),
            workers: 2,
            ..config
        };
        let table2 = run_experiment(&config2).unwrap();
        let csv2 = fs::read_to_string(config2.output_dir.join("aggregate.csv")).unwrap();
        assert_eq!(csv, csv2);
        assert_eq!(table, table2);
    }

    #[test]
    fn oracle_statistics_feed_the_oracle_row() {
        let tmp = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            scenarios: vec![1],
            replicates: 2,
            n0: 20,
            n1: 15,
            n0_prime: 20,
            n1_prime: 60,
            methods: vec!["matchsynth".into()],
            output_dir: tmp.path().join("run"),
            ..ExperimentConfig::default()
        };
        let table = run_experiment(&config).unwrap();
        let oracle_mean = table.get(1, "oracle", "Mean").unwrap();
        // tau = 10 and the control surface is centered near zero mean shift;
        // the treated oracle mean lands far from zero.
        assert!(oracle_mean.mean.is_finite());
        assert!(table.get(1, "oracle", "W1-Y").is_none());
        assert!(table.get(1, "matchsynth", "W1-Y").is_some());
    }
}
