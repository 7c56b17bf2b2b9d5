// SPDX-License-Identifier: Apache-2.0

//! Query-time scoring: two forward passes per (example, query) pair and no
//! gradients.
//!
//! Symmetric readout: `s = [F(theta* + d+) - F(theta* + d-)] * N / (2 eps)`,
//! bias `O((eps/N)^2)`. Single-trajectory readout mirrors `d+`:
//! `s = [F(theta* + d+) - F(theta* - d+)] * N / (2 eps)`, bias `O(eps/N)`.
//! Both estimate `-g_q^T S_T(H_lambda) g_b`; pass `per_example` to divide by
//! `N` and land on the usual influence-function scale.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::counters::{self, PassCounts};
use crate::model::{ModelSpec, ParameterVector, Query, Scratch};
use crate::simulator::{InfluenceImprint, Variant};
use crate::store::ImprintStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub value: f64,
    pub example_id: u64,
    pub query_id: u64,
    pub config_hash: u64,
    pub variant: Variant,
    pub forward_passes_used: u64,
}

fn check_fresh(spec: &ModelSpec, imprint: &InfluenceImprint, theta_star: &ParameterVector) -> Result<()> {
    spec.check_params(theta_star)?;
    if imprint.spec_hash != spec.hash() {
        return Err(Error::Stale {
            what: "imprint model spec",
            expected: spec.hash(),
            found: imprint.spec_hash,
        });
    }
    if imprint.theta_star_hash != theta_star.content_hash() {
        return Err(Error::Stale {
            what: "imprint reference parameters",
            expected: theta_star.content_hash(),
            found: imprint.theta_star_hash,
        });
    }
    if imprint.delta_plus.len() != theta_star.len() {
        return Err(Error::Dimension {
            context: "imprint displacement",
            expected: theta_star.len(),
            actual: imprint.delta_plus.len(),
        });
    }
    Ok(())
}

fn finite_difference(
    spec: &ModelSpec,
    imprint: &InfluenceImprint,
    q: &Query,
    theta_star: &ParameterVector,
    variant: Variant,
    minus: &[f64],
    mirror: bool,
) -> Result<AttributionScore> {
    let mut scratch = Scratch::new(spec);
    let (value, passes) = counters::measure(|| {
        let plus = theta_star.offset(&imprint.delta_plus);
        let other: Vec<f64> = if mirror {
            theta_star.values().iter().zip(minus).map(|(t, d)| t - d).collect()
        } else {
            theta_star.offset(minus)
        };
        let f_plus = spec.query_raw(&plus, q, &mut scratch);
        let f_minus = spec.query_raw(&other, q, &mut scratch);
        (f_plus - f_minus) * imprint.n as f64 / (2.0 * imprint.config.epsilon)
    });
    if !value.is_finite() {
        return Err(Error::Instability {
            step: imprint.config.steps as usize,
            spectral_radius: None,
        });
    }
    Ok(AttributionScore {
        value,
        example_id: imprint.example_id,
        query_id: q.id,
        config_hash: imprint.config.hash(),
        variant,
        forward_passes_used: passes.forward,
    })
}

/// Symmetric readout from both stored trajectories.
pub fn score_symmetric(
    spec: &ModelSpec,
    imprint: &InfluenceImprint,
    q: &Query,
    theta_star: &ParameterVector,
) -> Result<AttributionScore> {
    check_fresh(spec, imprint, theta_star)?;
    spec.check_query(q)?;
    let Some(minus) = imprint.delta_minus.as_deref() else {
        return Err(Error::Config(format!(
            "example {} was simulated with variant single; the symmetric readout needs both trajectories",
            imprint.example_id
        )));
    };
    finite_difference(spec, imprint, q, theta_star, Variant::Pair, minus, false)
}

/// Single-trajectory readout: mirrors `delta_plus`, ignoring any stored
/// `delta_minus`.
pub fn score_single(
    spec: &ModelSpec,
    imprint: &InfluenceImprint,
    q: &Query,
    theta_star: &ParameterVector,
) -> Result<AttributionScore> {
    check_fresh(spec, imprint, theta_star)?;
    spec.check_query(q)?;
    finite_difference(spec, imprint, q, theta_star, Variant::Single, &imprint.delta_plus, true)
}

pub fn score(
    spec: &ModelSpec,
    imprint: &InfluenceImprint,
    q: &Query,
    theta_star: &ParameterVector,
    variant: Variant,
) -> Result<AttributionScore> {
    match variant {
        Variant::Pair => score_symmetric(spec, imprint, q, theta_star),
        Variant::Single => score_single(spec, imprint, q, theta_star),
    }
}

/// `|B| x |Q|` scores, rows keyed by example id and columns by query id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub example_ids: Vec<u64>,
    pub query_ids: Vec<u64>,
    /// Row-major; `None` marks a failed cell.
    pub cells: Vec<Option<f64>>,
    pub failures: Vec<CellFailure>,
    pub variant: Variant,
    pub per_example: bool,
    /// Forward passes spent on successful cells.
    pub forward_passes: u64,
    /// Backward passes observed on the scoring threads. Always zero for
    /// tables built by [`attribute_matrix`]; not persisted in CSV.
    pub gradient_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub example_id: u64,
    pub query_id: u64,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    example_id: u64,
    query_id: u64,
    score: f64,
    variant: Variant,
    forward_passes: u64,
}

impl ScoreTable {
    pub fn rows(&self) -> usize {
        self.example_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.query_ids.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.cols() + col]
    }

    pub fn get(&self, example_id: u64, query_id: u64) -> Option<f64> {
        let r = self.example_ids.iter().position(|&e| e == example_id)?;
        let c = self.query_ids.iter().position(|&q| q == query_id)?;
        self.cell(r, c)
    }

    /// Scores of every example for query column `col`; fails on failed cells.
    pub fn column(&self, col: usize) -> Result<Vec<f64>> {
        (0..self.rows())
            .map(|r| {
                self.cell(r, col).ok_or_else(|| {
                    Error::Config(format!(
                        "score for example {} and query {} is missing",
                        self.example_ids[r], self.query_ids[col]
                    ))
                })
            })
            .collect()
    }

    /// CSV `example_id,query_id,score,variant,forward_passes`, one row per
    /// successful cell in row-major order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for (r, &example_id) in self.example_ids.iter().enumerate() {
            for (c, &query_id) in self.query_ids.iter().enumerate() {
                if let Some(score) = self.cell(r, c) {
                    wtr.serialize(CsvRow {
                        example_id,
                        query_id,
                        score,
                        variant: self.variant,
                        forward_passes: 2,
                    })?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::io("<score csv>", e))?;
        Ok(())
    }

    /// Reads a CSV written by [`ScoreTable::write_csv`]. Row and column
    /// order follow first appearance; absent cells are failed cells.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv_from(file)
    }

    pub fn read_csv_from<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows: Vec<CsvRow> = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec?);
        }
        if rows.is_empty() {
            return Err(Error::Empty("score table"));
        }
        let mut example_ids = Vec::new();
        let mut query_ids = Vec::new();
        let mut ex_pos = HashMap::new();
        let mut q_pos = HashMap::new();
        for row in &rows {
            ex_pos.entry(row.example_id).or_insert_with(|| {
                example_ids.push(row.example_id);
                example_ids.len() - 1
            });
            q_pos.entry(row.query_id).or_insert_with(|| {
                query_ids.push(row.query_id);
                query_ids.len() - 1
            });
        }
        let variant = rows[0].variant;
        let mut cells = vec![None; example_ids.len() * query_ids.len()];
        let mut forward_passes = 0;
        for row in &rows {
            if row.variant != variant {
                return Err(Error::Corrupt {
                    what: "score table",
                    detail: "mixed variants".into(),
                });
            }
            let slot = &mut cells[ex_pos[&row.example_id] * query_ids.len() + q_pos[&row.query_id]];
            if slot.replace(row.score).is_some() {
                return Err(Error::Corrupt {
                    what: "score table",
                    detail: format!("duplicate cell ({}, {})", row.example_id, row.query_id),
                });
            }
            forward_passes += row.forward_passes;
        }
        Ok(Self {
            example_ids,
            query_ids,
            cells,
            failures: Vec::new(),
            variant,
            per_example: false,
            forward_passes,
            gradient_evaluations: 0,
        })
    }
}

/// Scores every stored imprint against every query. Cell failures (for
/// example a stale imprint) are recorded, not fatal.
pub fn attribute_matrix(
    spec: &ModelSpec,
    store: &ImprintStore,
    queries: &[Query],
    theta_star: &ParameterVector,
    variant: Variant,
    per_example: bool,
    workers: usize,
) -> Result<ScoreTable> {
    if store.is_empty() {
        return Err(Error::Empty("imprint store"));
    }
    if queries.is_empty() {
        return Err(Error::Empty("query list"));
    }
    let imprints: Vec<&InfluenceImprint> = store.imprints().collect();
    let score_row = |imp: &&InfluenceImprint| {
        counters::measure(|| {
            queries
                .iter()
                .map(|q| score(spec, imp, q, theta_star, variant))
                .collect::<Vec<_>>()
        })
    };
    let rows: Vec<(Vec<Result<AttributionScore>>, PassCounts)> = if workers <= 1 {
        imprints.iter().map(score_row).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| imprints.par_iter().map(score_row).collect())
    };
    let mut table = ScoreTable {
        example_ids: imprints.iter().map(|i| i.example_id).collect(),
        query_ids: queries.iter().map(|q| q.id).collect(),
        cells: Vec::with_capacity(imprints.len() * queries.len()),
        failures: Vec::new(),
        variant,
        per_example,
        forward_passes: 0,
        gradient_evaluations: 0,
    };
    for (imp, (row, passes)) in imprints.iter().zip(rows) {
        table.gradient_evaluations += passes.backward;
        for (q, cell) in queries.iter().zip(row) {
            match cell {
                Ok(s) => {
                    table.forward_passes += s.forward_passes_used;
                    let v = if per_example { s.value / imp.n as f64 } else { s.value };
                    table.cells.push(Some(v));
                }
                Err(e) => {
                    table.failures.push(CellFailure {
                        example_id: imp.example_id,
                        query_id: q.id,
                        message: e.to_string(),
                    });
                    table.cells.push(None);
                }
            }
        }
    }
    Ok(table)
}
