//! Free-running evaluation, path decoding and the generalization bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_prompt, target, Columns, EmbeddingScheme, Stage, Task};
use crate::error::{Error, Result};
use crate::grad::Sample;
use crate::linalg::argmax;
use crate::model::{rollout, Params};
use crate::trees::{Label, Tree};

/// `1/2 ||O - O_hat||_F^2` with `O_hat` from a free-running rollout.
pub fn test_loss(params: &Params, tree: &Tree, perm_seed: u64) -> Result<f64> {
    Ok(evaluate_tree(params, tree, perm_seed)?.0)
}

/// Loss, rollout outputs and target of one tree.
fn evaluate_tree(params: &Params, tree: &Tree, perm_seed: u64) -> Result<(f64, Columns, Columns)> {
    let scheme = params.scheme();
    let prompt = embed_prompt(&scheme, tree, perm_seed)?;
    let tgt = target(&scheme, tree)?;
    let out = rollout(params, &prompt, tgt.columns.len());
    Ok((0.5 * out.dist_sq(&tgt.columns), out, tgt.columns))
}

/// Per-block argmax decoding of a sequence of output columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedPath {
    /// goal to root
    pub g2r: Vec<Label>,
    /// root to goal (forward task only)
    pub r2g: Vec<Label>,
    /// stage of every column (forward task only)
    pub stages: Vec<Stage>,
    /// 1-based index of the first column decoded as `s_f`
    pub stage_flip_step: Option<usize>,
    /// some block's top entry was below twice the runner-up
    pub low_confidence: bool,
}

fn decode_block(block: &[f64], low: &mut bool) -> usize {
    let i = argmax(block);
    let runner = block
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if block.len() > 1 && block[i] < 2.0 * runner {
        *low = true;
    }
    i
}

/// Backward: `[y_1, x_1, ..., x_K]`. Forward with `K = 2m` columns:
/// `g2r = [x_1, y_1, ..., y_m]`, `r2g = [x_{m+1}, y_{m+1}, ..., y_{2m}]`.
pub fn decode_path(outputs: &Columns, scheme: &EmbeddingScheme) -> DecodedPath {
    let mut low = false;
    let mut node = |b: &[f64]| scheme.coord_label(decode_block(b, &mut low));
    let k = outputs.len();
    let mut d = DecodedPath {
        g2r: Vec::new(),
        r2g: Vec::new(),
        stages: Vec::new(),
        stage_flip_step: None,
        low_confidence: false,
    };
    match scheme.task {
        Task::Backward => {
            if k > 0 {
                d.g2r.push(node(scheme.y(outputs.col(0))));
            }
            for c in outputs.iter() {
                d.g2r.push(node(scheme.x(c)));
            }
        }
        Task::Forward => {
            let m = k / 2;
            for (i, c) in outputs.iter().enumerate() {
                let path = if i < m { &mut d.g2r } else { &mut d.r2g };
                if i == 0 || i == m {
                    path.push(node(scheme.x(c)));
                }
                path.push(node(scheme.y(c)));
            }
            for c in outputs.iter() {
                d.stages.push(Stage::from_index(decode_block(scheme.z(c), &mut low)));
            }
            d.stage_flip_step = d.stages.iter().position(|&s| s == Stage::Forward).map(|i| i + 1);
        }
    }
    d.low_confidence = low;
    d
}

/// Outcome of one test tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tree_id: usize,
    pub n_nodes: usize,
    pub path_len: usize,
    pub test_loss: f64,
    pub exact_match: bool,
    pub stage_flip_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub task: Task,
    pub rows: Vec<ReportRow>,
    pub mean_loss: f64,
    pub exact_match_rate: f64,
}

/// Evaluates one tree: free-running loss and exact decoding of every block
/// (including stages) against the decoded target.
pub fn evaluate(params: &Params, tree_id: usize, sample: &Sample) -> Result<ReportRow> {
    let (loss, out, tgt) = evaluate_tree(params, &sample.tree, sample.perm_seed)?;
    let scheme = params.scheme();
    let got = decode_path(&out, &scheme);
    let want = decode_path(&tgt, &scheme);
    Ok(ReportRow {
        tree_id,
        n_nodes: sample.tree.n_nodes(),
        path_len: sample.tree.path_len(),
        test_loss: loss,
        exact_match: got.g2r == want.g2r && got.r2g == want.r2g && got.stages == want.stages,
        stage_flip_step: got.stage_flip_step,
    })
}

/// Evaluates every corpus tree; rows are ordered by tree id.
pub fn generalization_report(params: &Params, corpus: &[Sample]) -> Result<TestReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let rows: Vec<ReportRow> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate(params, i, s))
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    Ok(TestReport {
        task: params.task(),
        mean_loss: rows.iter().map(|r| r.test_loss).sum::<f64>() / n,
        exact_match_rate: rows.iter().filter(|r| r.exact_match).count() as f64 / n,
        rows,
    })
}

/// Mean free-running loss over a corpus.
pub fn corpus_test_loss(params: &Params, corpus: &[Sample]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let losses: Vec<f64> = corpus
        .par_iter()
        .map(|s| test_loss(params, &s.tree, s.perm_seed))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Size of the training trees the bound is stated against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainShape {
    pub task: Task,
    /// training path length
    pub m: usize,
    /// training node count
    pub n: usize,
}

/// Right-hand side of the test-loss bound for a tree with `n_t` nodes and
/// path length `m_t`.
pub fn bound_rhs(shape: &TrainShape, n_t: usize, m_t: usize, eps: f64) -> f64 {
    let (n, m) = (shape.n as f64, shape.m as f64);
    let (nt, mt) = (n_t as f64, m_t as f64);
    match shape.task {
        Task::Backward => {
            let r = (nt + mt - 1.0) / (n + m - 2.0);
            4.0 * (r * r).max(1.0) * (mt / m) * eps
        }
        Task::Forward => {
            let r1 = (nt + 2.0 * mt - 1.0) / (n + 2.0 * m - 1.0);
            let r2 = nt / n;
            4.0 * (r1 * r1).max(r2 * r2).max(1.0) * eps
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub tree_id: usize,
    pub rhs: f64,
    pub ok: bool,
}

/// Checks every report row against the bound with training loss `eps`.
pub fn bound_check(report: &TestReport, eps: f64, shape: &TrainShape) -> Result<Vec<BoundRow>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("training loss must be positive, got {eps}")));
    }
    if report.task != shape.task {
        return Err(Error::TaskMismatch {
            expected: shape.task.to_string(),
            found: report.task.to_string(),
        });
    }
    Ok(report
        .rows
        .iter()
        .map(|r| {
            let rhs = bound_rhs(shape, r.n_nodes, r.path_len, eps);
            BoundRow {
                tree_id: r.tree_id,
                rhs,
                ok: r.test_loss <= rhs,
            }
        })
        .collect())
}

/// Writes `tree_id,n_nodes,path_len,test_loss,exact_match,stage_flip_step,bound_rhs,bound_ok`.
pub fn write_report_csv(report: &TestReport, bounds: &[BoundRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "tree_id",
        "n_nodes",
        "path_len",
        "test_loss",
        "exact_match",
        "stage_flip_step",
        "bound_rhs",
        "bound_ok",
    ])?;
    for (r, b) in report.rows.iter().zip(bounds) {
        w.write_record([
            r.tree_id.to_string(),
            r.n_nodes.to_string(),
            r.path_len.to_string(),
            r.test_loss.to_string(),
            r.exact_match.to_string(),
            r.stage_flip_step.map(|s| s.to_string()).unwrap_or_default(),
            b.rhs.to_string(),
            b.ok.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
