//! Synthetic tasks with known linear target operators.
//!
//! Every task maps `x ↦ x·M_t`. Opposing pairs push the same input in
//! contradictory directions, so a single static operator can only reach a
//! compromise whose loss has a closed form under unit-Gaussian inputs.

use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    /// `w×w` target operator.
    pub operator: Tensor,
    /// Fixed instruction embedding.
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    /// `I ± δ·P`, `P` the projector onto the first half of the coordinates.
    ScalePair,
    /// Plane rotations by `±asin(δ)` in every coordinate plane `(2i, 2i+1)`.
    RotationPair,
}

/// Instruction embedding, a deterministic function of `(seed, id)`.
pub fn task_embedding(seed: u64, id: usize, width: usize) -> Vec<f64> {
    let mut r = rng::indexed(seed, stream::TASKS, id as u64 + 1);
    Tensor::randn(&[width], 1.0, &mut r).into_data()
}

fn spec(id: usize, name: String, operator: Tensor, cond_width: usize, seed: u64) -> TaskSpec {
    TaskSpec {
        id,
        name,
        operator,
        embedding: task_embedding(seed, id, cond_width),
    }
}

pub fn make_opposing_pair(
    kind: PairKind,
    width: usize,
    strength: f64,
    cond_width: usize,
    seed: u64,
) -> Result<(TaskSpec, TaskSpec)> {
    if !(0.0..1.0).contains(&strength) {
        return Err(Error::Parameter(format!("strength {strength} outside [0, 1)")));
    }
    if width < 2 {
        return Err(Error::Parameter("width must be at least 2".into()));
    }
    if kind == PairKind::ScalePair && width % 2 != 0 {
        return Err(Error::Parameter(format!("scale pair needs even width, got {width}")));
    }
    let (plus, minus) = match kind {
        PairKind::ScalePair => {
            let half = width / 2;
            let diag = |sign: f64| {
                Tensor::from_fn(&[width, width], |i| {
                    let (r, c) = (i / width, i % width);
                    match (r == c, r < half) {
                        (true, true) => 1.0 + sign * strength,
                        (true, false) => 1.0,
                        _ => 0.0,
                    }
                })
            };
            (diag(1.0), diag(-1.0))
        }
        PairKind::RotationPair => {
            let phi = strength.asin();
            let rot = |angle: f64| {
                let mut m = Tensor::eye(width);
                let (c, s) = (angle.cos(), angle.sin());
                for p in 0..width / 2 {
                    let (i, j) = (2 * p, 2 * p + 1);
                    m.set(i, i, c);
                    m.set(i, j, s);
                    m.set(j, i, -s);
                    m.set(j, j, c);
                }
                m
            };
            (rot(phi), rot(-phi))
        }
    };
    let tag = match kind {
        PairKind::ScalePair => "scale",
        PairKind::RotationPair => "rotate",
    };
    Ok((
        spec(0, format!("{tag}+"), plus, cond_width, seed),
        spec(1, format!("{tag}-"), minus, cond_width, seed),
    ))
}

/// Tasks `I + δ·P_t` with `P_t` projecting onto disjoint coordinate blocks.
pub fn make_separated(count: usize, width: usize, strength: f64, cond_width: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if count == 0 || width < count {
        return Err(Error::Parameter(format!("cannot place {count} disjoint blocks in width {width}")));
    }
    let block = width / count;
    Ok((0..count)
        .map(|t| {
            let op = Tensor::from_fn(&[width, width], |i| {
                let (r, c) = (i / width, i % width);
                if r != c {
                    0.0
                } else if r >= t * block && r < (t + 1) * block {
                    1.0 + strength
                } else {
                    1.0
                }
            });
            spec(t, format!("block{t}"), op, cond_width, seed)
        })
        .collect())
}

/// A spectrum of tasks grouped into clusters of shared edit directions.
///
/// Cluster `2k+1` uses the negated direction of cluster `2k` when `opposed`,
/// which yields the positive-block / negative-block structure of a
/// conflict matrix.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub tasks: Vec<TaskSpec>,
    pub clusters: Vec<usize>,
}

pub fn make_spectrum(
    count: usize,
    clusters: usize,
    width: usize,
    strength: f64,
    jitter: f64,
    opposed: bool,
    cond_width: usize,
    seed: u64,
) -> Result<Spectrum> {
    if clusters == 0 || clusters > count {
        return Err(Error::Parameter(format!("{clusters} clusters for {count} tasks")));
    }
    let mut r = rng::seeded(seed, stream::TASKS);
    let unit = |t: Tensor| {
        let n = t.sq_norm().sqrt();
        t.scale(1.0 / n)
    };
    let mut directions: Vec<Tensor> = Vec::with_capacity(clusters);
    for c in 0..clusters {
        if opposed && c % 2 == 1 {
            let prev = directions[c - 1].scale(-1.0);
            directions.push(prev);
        } else {
            directions.push(unit(Tensor::randn(&[width, width], 1.0, &mut r)));
        }
    }
    let mut tasks = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for t in 0..count {
        let c = t * clusters / count;
        let noise = unit(Tensor::randn(&[width, width], 1.0, &mut r)).scale(jitter);
        let dir = unit(directions[c].add(&noise)?);
        let op = Tensor::eye(width).add(&dir.scale(strength))?;
        tasks.push(spec(t, format!("c{c}t{t}"), op, cond_width, seed));
        labels.push(c);
    }
    Ok(Spectrum { tasks, clusters: labels })
}

/// Closed-form compromise losses for an opposing pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompromiseBound {
    /// Per-task loss of the pointwise-mean operator; no static operator does
    /// better on a balanced mixture.
    pub per_task: f64,
    /// Loss of an operator specialized to one task when applied to the other.
    pub cross_task: f64,
}

pub fn compromise_oracle(pair: (&TaskSpec, &TaskSpec), backbone: &FrozenBackbone) -> Result<CompromiseBound> {
    if !backbone.config().is_linear_mode() {
        return Err(Error::Contract(
            "compromise bound holds only for a single identity-activated layer".into(),
        ));
    }
    let diff = pair.0.operator.sub(&pair.1.operator)?;
    let per_task = diff.scale(0.5).sq_norm();
    Ok(CompromiseBound {
        per_task,
        cross_task: diff.sq_norm(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub task: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Instance {
    pub fn new(task: &TaskSpec, x: Vec<f64>) -> Self {
        let w = x.len();
        let y = Tensor::new(vec![1, w], x.clone())
            .and_then(|xt| xt.matmul(&task.operator))
            .expect("operator width matches input")
            .into_data();
        Self { task: task.id, x, y }
    }

    pub fn x_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.x.len()], self.x.clone()).expect("row")
    }

    pub fn y_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.y.len()], self.y.clone()).expect("row")
    }
}

/// Draws `per_task` Gaussian inputs for every task, interleaved task by task
/// (`t0, t1, .., t0, t1, ..`).
pub fn sample_balanced(tasks: &[TaskSpec], per_task: usize, rng: &mut rng::Rng) -> Vec<Instance> {
    let w = tasks[0].operator.shape()[0];
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for _ in 0..per_task {
        for t in tasks {
            let x = Tensor::randn(&[w], 1.0, rng).into_data();
            out.push(Instance::new(t, x));
        }
    }
    out
}

/// Same `x` draws reused across every task: sample `k` of task `i` and task
/// `j` share an input.
pub fn sample_shared_inputs(tasks: &[TaskSpec], per_task: usize, rng: &mut rng::Rng) -> Vec<Instance> {
    let w = tasks[0].operator.shape()[0];
    let xs: Vec<Vec<f64>> = (0..per_task)
        .map(|_| Tensor::randn(&[w], 1.0, rng).into_data())
        .collect();
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for x in &xs {
        for t in tasks {
            out.push(Instance::new(t, x.clone()));
        }
    }
    out
}

/// Maps an instance to its condition tokens: the task's instruction
/// embedding and a fixed random linear sketch of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionFeaturizer {
    sketch: Tensor,
    width: usize,
}

impl ConditionFeaturizer {
    pub fn new(input_width: usize, cond_width: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed, stream::FEATURIZER);
        Self {
            sketch: Tensor::randn(&[input_width, cond_width], 1.0 / (input_width as f64).sqrt(), &mut r),
            width: cond_width,
        }
    }

    pub fn cond_width(&self) -> usize {
        self.width
    }

    /// `[2 × c]`: instruction token, then input sketch token.
    pub fn featurize(&self, instance: &Instance, task: &TaskSpec) -> Tensor {
        assert_eq!(instance.task, task.id);
        let sketch = instance.x_tensor().matmul(&self.sketch).expect("sketch width");
        let mut data = task.embedding.clone();
        data.extend_from_slice(sketch.data());
        Tensor::new(vec![2, self.width], data).expect("condition shape")
    }
}

/// Writes `task_id,x0..,y0..` rows.
pub fn write_dataset_csv<W: Write>(out: &mut W, data: &[Instance]) -> Result<()> {
    let w = data.first().map_or(0, |i| i.x.len());
    let mut header = vec!["task_id".to_string()];
    header.extend((0..w).map(|i| format!("x{i}")));
    header.extend((0..w).map(|i| format!("y{i}")));
    writeln!(out, "{}", header.join(","))?;
    for inst in data {
        let mut row = vec![inst.task.to_string()];
        row.extend(inst.x.iter().chain(&inst.y).map(|v| format!("{v:?}")));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_dataset_csv<R: BufRead>(input: R) -> Result<Vec<Instance>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parameter("empty dataset".into()))??;
    let cols = header.split(',').count();
    if cols < 3 || (cols - 1) % 2 != 0 {
        return Err(Error::Parameter(format!("bad dataset header `{header}`")));
    }
    let w = (cols - 1) / 2;
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Parameter(format!("row {}: {} fields, expected {cols}", n + 1, fields.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parameter(format!("row {}: `{s}`: {e}", n + 1)))
        };
        let task = fields[0]
            .parse::<usize>()
            .map_err(|e| Error::Parameter(format!("row {}: task id: {e}", n + 1)))?;
        let vals: Vec<f64> = fields[1..].iter().map(|s| parse(s)).collect::<Result<_>>()?;
        out.push(Instance {
            task,
            x: vals[..w].to_vec(),
            y: vals[w..].to_vec(),
        });
    }
    Ok(out)
}

/// Uniformly random derangement (no fixed points) of `0..n`, `n >= 2`.
pub fn derangement(n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    assert!(n >= 2, "derangement needs at least two items");
    loop {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            p.swap(i, j);
        }
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}
