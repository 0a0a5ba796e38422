//! Generators for ensemble workflows shaped like an additive-manufacturing
//! UQ campaign: melt-pool thermal runs, microstructure runs over the
//! cartesian product of melt-pool cases and UQ parameters, and property
//! ensembles followed by an optimization step.
//!
//! Payloads are shell mocks that sleep briefly and pass files between
//! stages, so generated workflows run anywhere with a POSIX shell. The
//! simulator only looks at resource shapes and `expected_runtime_s`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pst::{StageSpec, TaskDescription, WorkflowSpec};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenerateError {
    #[error("UnknownShape: {0} (expected additivefoam, exaca, exaconstit, uq-stage1 or toy)")]
    UnknownShape(String),
    #[error("invalid example parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    AdditiveFoam,
    ExaCa,
    ExaConstit,
    UqStage1,
    Toy,
}

impl FromStr for Shape {
    type Err = GenerateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "additivefoam" => Ok(Self::AdditiveFoam),
            "exaca" => Ok(Self::ExaCa),
            "exaconstit" => Ok(Self::ExaConstit),
            "uq-stage1" => Ok(Self::UqStage1),
            "toy" => Ok(Self::Toy),
            other => Err(GenerateError::UnknownShape(other.to_string())),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AdditiveFoam => "additivefoam",
            Self::ExaCa => "exaca",
            Self::ExaConstit => "exaconstit",
            Self::UqStage1 => "uq-stage1",
            Self::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleParams {
    /// Ensemble size for exaconstit, tasks per stage for toy.
    pub tasks: usize,
    /// Melt-pool cases (additivefoam, exaca, uq-stage1).
    pub cases: usize,
    /// Microstructure UQ parameter sets (exaca, uq-stage1).
    pub params: usize,
    /// Stage count for toy.
    pub stages: usize,
    /// Expected-runtime range for exaconstit tasks.
    pub runtime_range_s: (f64, f64),
    pub seed: u64,
    /// How long each mock payload sleeps when run for real.
    pub mock_sleep_s: f64,
}

impl Default for ExampleParams {
    fn default() -> Self {
        Self {
            tasks: 7875,
            cases: 4,
            params: 3,
            stages: 3,
            runtime_range_s: (600.0, 1500.0),
            seed: 0,
            mock_sleep_s: 0.05,
        }
    }
}

struct Mock<'a> {
    params: &'a ExampleParams,
}

impl Mock<'_> {
    /// `sh -c` payload: check inputs, sleep, produce outputs.
    fn task(&self, uid: String, requires: &[String], produces: &[String]) -> TaskDescription {
        let mut script = String::new();
        for r in requires {
            script.push_str(&format!("test -e {r} && "));
        }
        script.push_str(&format!("sleep {}", self.params.mock_sleep_s));
        for p in produces {
            if let Some((dir, _)) = p.rsplit_once('/') {
                script.push_str(&format!(" && mkdir -p {dir}"));
            }
            script.push_str(&format!(" && echo {uid} > {p}"));
        }
        TaskDescription::new(uid, "sh").with_args(["-c".to_string(), script])
    }
}

fn thermal_file(case: usize) -> String {
    format!("additivefoam/case-{case:03}.thermal")
}

fn additivefoam_stages(mock: &Mock, cases: usize, requires: &[String]) -> Vec<StageSpec> {
    let mesh = "additivefoam/mesh.ready".to_string();
    let pre = mock
        .task(
            "additivefoam-pre".into(),
            requires,
            std::slice::from_ref(&mesh),
        )
        .with_resources(1, 1, 0)
        .with_runtime(120.0)
        .with_tag("app", "additivefoam");
    let run = |case: usize| {
        let mut needs = vec![mesh.clone()];
        if case % 2 == 1 {
            // Odd runs follow the even run next to them.
            needs.push(thermal_file(case - 1));
        }
        mock.task(
            format!("additivefoam-run-{case:03}"),
            &needs,
            &[thermal_file(case)],
        )
        .with_resources(224, 1, 0)
        .with_runtime(1800.0)
        .with_pre_exec(["export OMP_NUM_THREADS=1"])
        .with_tag("app", "additivefoam")
    };
    let even: Vec<_> = (0..cases).filter(|c| c % 2 == 0).map(run).collect();
    let odd: Vec<_> = (0..cases).filter(|c| c % 2 == 1).map(run).collect();
    let all_thermal: Vec<String> = (0..cases).map(thermal_file).collect();
    let post = mock
        .task(
            "additivefoam-post".into(),
            &all_thermal,
            &["additivefoam/meltpools.ready".to_string()],
        )
        .with_resources(1, 1, 0)
        .with_runtime(60.0)
        .with_tag("app", "additivefoam");

    let mut stages = vec![
        StageSpec::new("additivefoam-pre", vec![pre]),
        StageSpec::new("additivefoam-even", even),
    ];
    if !odd.is_empty() {
        stages.push(StageSpec::new("additivefoam-odd", odd));
    }
    stages.push(StageSpec::new("additivefoam-post", vec![post]));
    stages
}

fn exaca_stages(mock: &Mock, cases: usize, params: usize, chained: bool) -> Vec<StageSpec> {
    let mut tasks = Vec::with_capacity(cases * params);
    let mut outputs = Vec::with_capacity(cases * params);
    for case in 0..cases {
        for p in 0..params {
            let out = format!("exaca/c{case:03}-p{p:03}.micro");
            let needs = if chained {
                vec![
                    "additivefoam/meltpools.ready".to_string(),
                    thermal_file(case),
                ]
            } else {
                Vec::new()
            };
            tasks.push(
                mock.task(
                    format!("exaca-c{case:03}-p{p:03}"),
                    &needs,
                    std::slice::from_ref(&out),
                )
                .with_resources(8, 7, 1)
                .with_runtime(600.0)
                .with_tag("app", "exaca")
                .with_tag("meltpool_case", case.to_string())
                .with_tag("uq_param", p.to_string()),
            );
            outputs.push(out);
        }
    }
    let analysis = mock
        .task(
            "exaca-analysis".into(),
            &outputs,
            &["exaca/analysis.done".to_string()],
        )
        .with_resources(1, 1, 0)
        .with_runtime(120.0)
        .with_tag("app", "exaca");
    vec![
        StageSpec::new("exaca", tasks),
        StageSpec::new("exaca-analysis", vec![analysis]),
    ]
}

fn exaconstit_stages(mock: &Mock, n: usize, params: &ExampleParams) -> Vec<StageSpec> {
    let (lo, hi) = params.runtime_range_s;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let tasks: Vec<_> = (0..n)
        .map(|i| {
            let runtime = if lo < hi { rng.gen_range(lo..hi) } else { lo };
            mock.task(
                format!("exaconstit-{i:05}"),
                &[],
                &[format!("exaconstit/rve-{i:05}.out")],
            )
            .with_resources(64, 7, 1)
            .with_runtime(runtime)
            .with_tag("app", "exaconstit")
        })
        .collect();
    let mut optimize = TaskDescription::new("optimization", "sh")
        .with_args([
            "-c".to_string(),
            format!(
                "test $(ls exaconstit | wc -l) -ge {n} && sleep {} && echo done > exaconstit/optimized.params",
                params.mock_sleep_s
            ),
        ])
        .with_resources(1, 1, 0)
        .with_runtime(60.0);
    optimize.tags.insert("app".into(), "optimization".into());
    vec![
        StageSpec::new("exaconstit", tasks),
        StageSpec::new("optimization", vec![optimize]),
    ]
}

pub fn generate_example(
    shape: &str,
    params: &ExampleParams,
) -> Result<WorkflowSpec, GenerateError> {
    let shape: Shape = shape.parse()?;
    let mock = Mock { params };
    let positive = |v: usize, what: &str| {
        if v == 0 {
            Err(GenerateError::Invalid(format!("{what} must be ≥ 1")))
        } else {
            Ok(())
        }
    };
    let stages = match shape {
        Shape::AdditiveFoam => {
            positive(params.cases, "cases")?;
            additivefoam_stages(&mock, params.cases, &[])
        }
        Shape::ExaCa => {
            positive(params.cases, "cases")?;
            positive(params.params, "params")?;
            exaca_stages(&mock, params.cases, params.params, false)
        }
        Shape::ExaConstit => {
            positive(params.tasks, "tasks")?;
            let (lo, hi) = params.runtime_range_s;
            if !(lo > 0.0 && lo <= hi) {
                return Err(GenerateError::Invalid(format!(
                    "runtime range ({lo}, {hi})"
                )));
            }
            exaconstit_stages(&mock, params.tasks, params)
        }
        Shape::UqStage1 => {
            positive(params.cases, "cases")?;
            positive(params.params, "params")?;
            // Structural stand-in for the UQ input grid: one task that lays
            // out the case directories.
            let inputs: Vec<String> = (0..params.cases)
                .map(|c| format!("uq/case-{c:03}/inputs.txt"))
                .collect();
            let grid = mock
                .task("uq-inputs".into(), &[], &inputs)
                .with_resources(1, 1, 0)
                .with_runtime(30.0)
                .with_tag("app", "uq");
            let mut stages = vec![StageSpec::new("uq-inputs", vec![grid])];
            stages.extend(additivefoam_stages(&mock, params.cases, &inputs));
            stages.extend(exaca_stages(&mock, params.cases, params.params, true));
            stages
        }
        Shape::Toy => {
            positive(params.stages, "stages")?;
            positive(params.tasks, "tasks")?;
            (0..params.stages)
                .map(|s| {
                    let tasks = (0..params.tasks)
                        .map(|t| {
                            let needs = if s == 0 {
                                Vec::new()
                            } else {
                                vec![format!("toy/s{}-t{t}.out", s - 1)]
                            };
                            mock.task(
                                format!("toy-s{s}-t{t}"),
                                &needs,
                                &[format!("toy/s{s}-t{t}.out")],
                            )
                            .with_runtime(10.0)
                        })
                        .collect();
                    StageSpec::new(format!("stage-{s}"), tasks)
                })
                .collect()
        }
    };
    Ok(WorkflowSpec::new(shape.to_string(), stages))
}
