//! End-to-end drivers shared by the CLI and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::conflict::{collect_gradients, conflict_report, AdapterPoint, ConflictReport, PairMode};
use crate::error::Result;
use crate::generator::GeneratorState;
use crate::manifold::{
    kmeans, knn_consistency, pca_2d, purity, random_project, spread_comparison, DistortionAudit, KnnReport,
    ParamCloud, ProjectionKind, SpreadComparison,
};
use crate::report::{fmt_f64, svg_curves, svg_histogram, svg_scatter, Csv, Outputs};
use crate::rng::{self, stream};
use crate::tasks::{compromise_oracle, sample_balanced, sample_shared_inputs, CompromiseBound, Instance};
use crate::tokenizer::{detokenize, AdapterSet};
use crate::train::{
    avg_sample_conditions, derive_avg_pg, eval, lora_init, train_pg, train_single_from, train_static, EvalShuffle,
    Experiment, Method, RunResult, TrainConfig, TrainedModel,
};

/// Dense `A·B` of every layer and module, concatenated.
pub fn delta_vector(set: &AdapterSet) -> Vec<f64> {
    set.layers
        .iter()
        .flatten()
        .flat_map(|p| p.delta().into_data())
        .collect()
}

/// Trains the arm named by `cfg.train.method`. The avg-pg and shuffle-pg
/// arms train a generator first and evaluate the derived control.
pub fn run_method(cfg: &RunConfig, exp: &Experiment) -> Result<(RunResult, TrainedModel)> {
    let tc = &cfg.train;
    match tc.method {
        Method::Single | Method::Shared | Method::Sft => train_static(tc, exp),
        Method::Pg => {
            let (r, state) = train_pg(tc, exp)?;
            Ok((r, TrainedModel::Generator(state)))
        }
        Method::AvgPg | Method::ShufflePg => {
            let (mut r, state) = train_pg(tc, exp)?;
            let data = exp.eval_set(tc.eval_per_task);
            let (losses, model) = derived_control(tc, exp, state, &data)?;
            r.method = tc.method;
            r.eval_losses = losses;
            Ok((r, model))
        }
    }
}

fn derived_control(
    tc: &TrainConfig,
    exp: &Experiment,
    state: GeneratorState,
    data: &[Instance],
) -> Result<(Vec<f64>, TrainedModel)> {
    let model = if tc.method == Method::AvgPg {
        TrainedModel::Fixed(derive_avg_pg(&state, &avg_sample_conditions(exp, tc.avg_samples))?)
    } else {
        TrainedModel::Generator(state)
    };
    let shuffle = match tc.method {
        Method::ShufflePg => EvalShuffle::Derange(exp.seed),
        _ => EvalShuffle::None,
    };
    Ok((eval(&model, exp, data, shuffle)?, model))
}

/// Loss-curve CSV: one row per step, one column per task.
pub fn curves_csv(result: &RunResult) -> Result<Csv> {
    let k = result.curves.len();
    let mut header = vec!["step".to_string()];
    header.extend((0..k).map(|t| format!("task{t}")));
    let mut csv = Csv::new(&header);
    let steps = result.curves.iter().map(|c| c.len()).max().unwrap_or(0);
    for s in 0..steps {
        let mut row = vec![s.to_string()];
        row.extend(result.curves.iter().map(|c| c.get(s).map_or(String::new(), |v| fmt_f64(*v))));
        csv.row(row)?;
    }
    Ok(csv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub method: Method,
    pub task_losses: Vec<f64>,
    pub mean_loss: f64,
    /// `single` only: each task's adapter on the other tasks.
    pub cross_task_losses: Option<Vec<Vec<f64>>>,
    pub backbone_unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub pg_below_shuffle: bool,
    pub pg_below_avg: bool,
    /// avg-pg, shuffle-pg, shared and sft all at or above `0.8·L*`.
    pub controls_collapse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub seed: u64,
    pub bound: Option<CompromiseBound>,
    pub rows: Vec<SuiteRow>,
    pub ordering: Option<OrderingCheck>,
}

impl SuiteReport {
    pub fn row(&self, m: Method) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.method == m)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// The six-arm comparison. The generator is trained once; avg-pg and
/// shuffle-pg are derived from it.
pub fn conflict_suite(cfg: &RunConfig) -> Result<(SuiteReport, Outputs)> {
    let exp = cfg.experiment()?;
    let data = exp.eval_set(cfg.train.eval_per_task);
    let mut outputs = Outputs::new();
    let mut rows = Vec::new();
    let arms = &cfg.conflict.static_arms;
    for method in [Method::Single, Method::Shared, Method::Sft] {
        let mut tc = cfg.train.clone();
        tc.method = method;
        tc.steps = arms.steps;
        tc.batch = arms.batch;
        tc.optimizer.lr = arms.lr;
        let (r, _) = train_static(&tc, &exp)?;
        outputs.add_csv(format!("curves_{}.csv", method.name()), &curves_csv(&r)?);
        rows.push(SuiteRow {
            method,
            mean_loss: mean(&r.eval_losses),
            task_losses: r.eval_losses,
            cross_task_losses: r.cross_task_losses,
            backbone_unchanged: r.backbone_unchanged,
        });
    }
    let mut tc = cfg.train.clone();
    tc.method = Method::Pg;
    let (r, state) = train_pg(&tc, &exp)?;
    outputs.add_csv("curves_pg.csv", &curves_csv(&r)?);
    rows.push(SuiteRow {
        method: Method::Pg,
        mean_loss: mean(&r.eval_losses),
        task_losses: r.eval_losses.clone(),
        cross_task_losses: None,
        backbone_unchanged: r.backbone_unchanged,
    });
    for method in [Method::AvgPg, Method::ShufflePg] {
        tc.method = method;
        let (losses, _) = derived_control(&tc, &exp, state.clone(), &data)?;
        rows.push(SuiteRow {
            method,
            mean_loss: mean(&losses),
            task_losses: losses,
            cross_task_losses: None,
            backbone_unchanged: r.backbone_unchanged && exp.backbone.digest() == r.backbone_digest,
        });
    }
    let bound = if exp.tasks.len() == 2 && exp.backbone.config().is_linear_mode() {
        Some(compromise_oracle((&exp.tasks[0], &exp.tasks[1]), &exp.backbone)?)
    } else {
        None
    };
    let get = |m: Method| rows.iter().find(|r| r.method == m).map(|r| r.mean_loss).unwrap_or(f64::NAN);
    let ordering = bound.map(|b| OrderingCheck {
        pg_below_shuffle: get(Method::Pg) < get(Method::ShufflePg),
        pg_below_avg: get(Method::Pg) < get(Method::AvgPg),
        controls_collapse: [Method::AvgPg, Method::ShufflePg, Method::Shared, Method::Sft]
            .iter()
            .all(|m| get(*m) >= 0.8 * b.per_task),
    });
    let report = SuiteReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        bound,
        rows,
        ordering,
    };
    let mut table = Csv::new(&["method", "mean_loss", "task_losses", "backbone_unchanged"]);
    for row in &report.rows {
        table.row(vec![
            row.method.name().into(),
            fmt_f64(row.mean_loss),
            row.task_losses.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";"),
            row.backbone_unchanged.to_string(),
        ])?;
    }
    outputs.add_csv("suite.csv", &table);
    outputs.add_json("suite.json", &report)?;
    let series: Vec<(String, Vec<f64>)> = report
        .rows
        .iter()
        .map(|r| (r.method.name().to_string(), vec![r.mean_loss; 2]))
        .collect();
    outputs.add("suite.svg", svg_curves("mean eval loss per arm (log)", &series, true));
    Ok((report, outputs))
}

/// Gradient-conflict analysis at `point`, or at the configured one.
pub fn gradient_analysis(cfg: &RunConfig, point: Option<AdapterPoint>) -> Result<(ConflictReport, Outputs)> {
    let exp = cfg.experiment()?;
    let c = &cfg.conflict;
    let mut r = rng::seeded(cfg.seed, stream::GRADIENTS);
    let data = match c.pairing {
        PairMode::Matched => sample_shared_inputs(&exp.tasks, c.samples_per_task, &mut r),
        PairMode::Exhaustive => sample_balanced(&exp.tasks, c.samples_per_task, &mut r),
    };
    let point = point.unwrap_or(if c.identity_point {
        AdapterPoint::TruncatedIdentity
    } else {
        AdapterPoint::Zero
    });
    let set = point.materialize(&exp.layout);
    let (samples, rejected) = collect_gradients(&exp.backbone, &exp.tasks, &set, &data)?;
    let k = exp.tasks.len();
    let pairs: Vec<(usize, usize)> = if k <= 4 {
        (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect()
    } else {
        vec![(0, 0), (0, 1)]
    };
    let report = conflict_report(&samples, k, c.pairing, &pairs, c.clusters, cfg.seed, rejected)?;
    let mut outputs = Outputs::new();
    outputs.add_json("conflict.json", &report)?;
    let mut hist = Csv::new(&["task_i", "task_j", "bin", "lower", "count"]);
    for (i, j, counts) in &report.histograms {
        for (b, n) in counts.iter().enumerate() {
            hist.row(vec![
                i.to_string(),
                j.to_string(),
                b.to_string(),
                fmt_f64(-1.0 + 0.04 * b as f64),
                n.to_string(),
            ])?;
        }
        outputs.add(format!("hist_{i}_{j}.svg"), svg_histogram(&format!("cosine, tasks {i} and {j}"), counts));
    }
    outputs.add_csv("histograms.csv", &hist);
    let mut mat = Csv::new(&["task_i", "task_j", "mean_cos", "conflict_ratio", "pairs"]);
    for i in 0..k {
        for j in 0..k {
            mat.row(vec![
                i.to_string(),
                j.to_string(),
                fmt_f64(report.stats.mean_cos[i][j]),
                fmt_f64(report.stats.conflict_ratio[i][j]),
                report.stats.pair_counts[i][j].to_string(),
            ])?;
        }
    }
    outputs.add_csv("cosine_matrix.csv", &mat);
    Ok((report, outputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldReport {
    pub samples: usize,
    pub dimension: usize,
    /// `None` when the cloud already fits in the target dimension.
    pub projection: Option<DistortionAudit>,
    pub kmeans_labels: Vec<usize>,
    pub kmeans_objective: Vec<f64>,
    pub purity: f64,
    pub knn: KnnReport,
    pub pca: Vec<[f64; 2]>,
    pub spread: Option<SpreadComparison>,
}

/// Generated updates for `per_task` fresh instances of every task.
pub fn generated_cloud(exp: &Experiment, state: &GeneratorState, per_task: usize) -> Result<ParamCloud> {
    use rayon::prelude::*;
    let mut r = rng::indexed(exp.seed, stream::EVAL_DATA, 0x3A);
    let data = sample_balanced(&exp.tasks, per_task, &mut r);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = data
        .par_iter()
        .map(|inst| {
            let cond = exp.condition(inst);
            let set = detokenize(&state.generate(&cond)?)?;
            Ok((delta_vector(&set), cond.into_data()))
        })
        .collect::<Result<_>>()?;
    let (vectors, conditions) = rows.into_iter().unzip();
    Ok(ParamCloud {
        vectors,
        conditions,
        tasks: data.iter().map(|i| i.task).collect(),
    })
}

/// Per-task adapters trained directly from one shared initialization, one
/// per data seed.
pub fn optimized_cloud(cfg: &RunConfig, exp: &Experiment) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let arms = &cfg.conflict.static_arms;
    let mut tc = cfg.train.clone();
    tc.method = Method::Single;
    tc.steps = arms.steps;
    tc.batch = arms.batch;
    tc.optimizer.lr = arms.lr;
    let init = lora_init(exp, tc.lora_init_std, 0);
    let mut vectors = Vec::new();
    let mut tasks = Vec::new();
    for t in 0..exp.tasks.len() {
        for s in 0..cfg.manifold.optimized_seeds {
            let set = train_single_from(&tc, exp, t, &init, 1000 + (t * 64 + s) as u64)?;
            vectors.push(delta_vector(&set));
            tasks.push(t);
        }
    }
    Ok((vectors, tasks))
}

/// Geometry of a trained generator's update family.
pub fn manifold_analysis(
    cfg: &RunConfig,
    exp: &Experiment,
    state: &GeneratorState,
    with_spread: bool,
) -> Result<(ManifoldReport, Outputs)> {
    let m = &cfg.manifold;
    let cloud = generated_cloud(exp, state, m.samples_per_task)?;
    let dimension = cloud.vectors[0].len();
    let (points, projection) = if dimension > m.projection_dim {
        let p = random_project(&cloud.vectors, m.projection_dim, ProjectionKind::Gaussian, cfg.seed)?;
        (p.vectors, Some(p.audit))
    } else {
        (cloud.vectors.clone(), None)
    };
    let km = kmeans(&points, m.clusters.min(points.len()), cfg.seed)?;
    let pur = purity(&km.labels, &cloud.tasks);
    let knn = knn_consistency(&points, &cloud.conditions, m.neighbors, cfg.seed)?;
    let pca = pca_2d(&points)?;
    let spread = if with_spread {
        let (opt, opt_tasks) = optimized_cloud(cfg, exp)?;
        Some(spread_comparison(&cloud, &opt, &opt_tasks)?)
    } else {
        None
    };
    let report = ManifoldReport {
        samples: cloud.len(),
        dimension,
        projection,
        kmeans_labels: km.labels.clone(),
        kmeans_objective: km.objective.clone(),
        purity: pur,
        knn,
        pca,
        spread,
    };
    let mut outputs = Outputs::new();
    outputs.add_json("manifold.json", &report)?;
    let mut header = vec!["sample".to_string(), "task".to_string(), "cluster".to_string()];
    header.extend((0..points[0].len()).map(|i| format!("p{i}")));
    let mut proj = Csv::new(&header);
    let mut coords = Csv::new(&["sample", "task", "cluster", "pc1", "pc2"]);
    for (i, p) in points.iter().enumerate() {
        let mut row = vec![i.to_string(), cloud.tasks[i].to_string(), km.labels[i].to_string()];
        row.extend(p.iter().map(|v| fmt_f64(*v)));
        proj.row(row)?;
        coords.row(vec![
            i.to_string(),
            cloud.tasks[i].to_string(),
            km.labels[i].to_string(),
            fmt_f64(report.pca[i][0]),
            fmt_f64(report.pca[i][1]),
        ])?;
    }
    outputs.add_csv("projected.csv", &proj);
    outputs.add_csv("pca.csv", &coords);
    outputs.add("pca.svg", svg_scatter("generated updates, first two components", &report.pca, &cloud.tasks));
    Ok((report, outputs))
}
