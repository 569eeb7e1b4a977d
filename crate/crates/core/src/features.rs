//! User-level flow graph and the ten per-user features.
//!
//! Column order of the feature matrix:
//!
//! 0. `avg_in`: mean satoshi received per receiving transaction
//! 1. `avg_out`: mean satoshi sent per sending transaction
//! 2. `total_sent`
//! 3. `total_received`
//! 4. `std_received`: population std of per-transaction received totals
//! 5. `std_sent`
//! 6. `nb_in_in`: mean in-degree of distinct in-neighbors
//! 7. `nb_in_out`: mean out-degree of distinct in-neighbors
//! 8. `nb_out_in`: mean in-degree of distinct out-neighbors
//! 9. `nb_out_out`: mean out-degree of distinct out-neighbors
//!
//! Degrees count edge instances: a transaction with input users `I` and
//! output users `O` contributes one edge `u → v` for every `u ∈ I`, `v ∈ O`,
//! `u ≠ v`. Self-flows count toward amounts but never toward structure.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::contraction::AddressUserMap;
use crate::error::{Error, Result};
use crate::ingest::FlowRecord;

pub const N_FEATURES: usize = 10;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "avg_in",
    "avg_out",
    "total_sent",
    "total_received",
    "std_received",
    "std_sent",
    "nb_in_in",
    "nb_in_out",
    "nb_out_in",
    "nb_out_out",
];

/// Directed multigraph over contracted users.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserGraph {
    /// Ascending user ids; all other per-user vectors are indexed alike.
    users: Vec<u64>,
    /// Per-transaction received totals, in ascending tx order.
    received: Vec<Vec<u128>>,
    sent: Vec<Vec<u128>>,
    in_degree: Vec<u64>,
    out_degree: Vec<u64>,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
    n_edges: u64,
}

/// Sorts `(tx, user, value)` triples and merges same-user rows within a transaction.
fn coalesce(mut rows: Vec<(u64, u64, u128)>) -> Vec<(u64, u64, u128)> {
    rows.sort_unstable_by_key(|&(tx, user, _)| (tx, user));
    let mut out: Vec<(u64, u64, u128)> = Vec::with_capacity(rows.len());
    for (tx, user, value) in rows {
        match out.last_mut() {
            Some(last) if last.0 == tx && last.1 == user => last.2 += value,
            _ => out.push((tx, user, value)),
        }
    }
    out
}

/// Splits rows sorted by tx into per-transaction slices.
fn by_tx(rows: &[(u64, u64, u128)]) -> impl Iterator<Item = &[(u64, u64, u128)]> {
    rows.chunk_by(|a, b| a.0 == b.0)
}

pub fn build_user_graph<I, O>(inputs: I, outputs: O, map: &AddressUserMap) -> UserGraph
where
    I: IntoIterator<Item = FlowRecord>,
    O: IntoIterator<Item = FlowRecord>,
{
    let resolve = |r: FlowRecord| (r.tx_id, map.resolve(r.addr_id), r.value as u128);
    let ins = coalesce(inputs.into_iter().map(resolve).collect());
    let outs = coalesce(outputs.into_iter().map(resolve).collect());

    let mut users: Vec<u64> = ins.iter().chain(&outs).map(|r| r.1).collect();
    users.sort_unstable();
    users.dedup();
    let idx = |u: u64| users.binary_search(&u).expect("user collected above");

    let n = users.len();
    let mut graph = UserGraph {
        received: vec![Vec::new(); n],
        sent: vec![Vec::new(); n],
        in_degree: vec![0; n],
        out_degree: vec![0; n],
        in_neighbors: vec![Vec::new(); n],
        out_neighbors: vec![Vec::new(); n],
        n_edges: 0,
        users: Vec::new(),
    };
    for &(_, u, v) in &ins {
        graph.sent[idx(u)].push(v);
    }
    for &(_, u, v) in &outs {
        graph.received[idx(u)].push(v);
    }

    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut in_txs = by_tx(&ins).peekable();
    for out_tx in by_tx(&outs) {
        let tx = out_tx[0].0;
        while in_txs.peek().is_some_and(|t| t[0].0 < tx) {
            in_txs.next();
        }
        let Some(in_tx) = in_txs.peek().filter(|t| t[0].0 == tx) else {
            continue;
        };
        for &(_, src, _) in *in_tx {
            for &(_, dst, _) in out_tx {
                if src != dst {
                    edges.push((idx(src), idx(dst)));
                }
            }
        }
    }

    graph.n_edges = edges.len() as u64;
    for &(s, d) in &edges {
        graph.out_degree[s] += 1;
        graph.in_degree[d] += 1;
    }
    edges.sort_unstable();
    edges.dedup();
    for &(s, d) in &edges {
        graph.out_neighbors[s].push(d);
        graph.in_neighbors[d].push(s);
    }
    for list in graph.in_neighbors.iter_mut() {
        list.sort_unstable();
    }
    graph.users = users;
    graph
}

impl UserGraph {
    pub fn users(&self) -> &[u64] {
        &self.users
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_edges(&self) -> u64 {
        self.n_edges
    }

    pub fn index_of(&self, user: u64) -> Option<usize> {
        self.users.binary_search(&user).ok()
    }

    pub fn in_degree(&self, i: usize) -> u64 {
        self.in_degree[i]
    }

    pub fn out_degree(&self, i: usize) -> u64 {
        self.out_degree[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_neighbors[i]
    }

    pub fn total_received(&self, i: usize) -> u128 {
        self.received[i].iter().sum()
    }

    pub fn total_sent(&self, i: usize) -> u128 {
        self.sent[i].iter().sum()
    }

    /// `(avg_in, avg_out, total_sent, total_received, std_received, std_sent)`.
    pub fn amount_features(&self, i: usize) -> [f64; 6] {
        let (avg_in, total_in, std_in) = moments(&self.received[i]);
        let (avg_out, total_out, std_out) = moments(&self.sent[i]);
        [avg_in, avg_out, total_out, total_in, std_in, std_out]
    }

    /// `(nb_in_in, nb_in_out, nb_out_in, nb_out_out)`.
    pub fn neighborhood_features(&self, i: usize) -> [f64; 4] {
        let mean_of = |nbrs: &[usize], deg: &[u64]| {
            if nbrs.is_empty() {
                0.0
            } else {
                nbrs.iter().map(|&j| deg[j]).sum::<u64>() as f64 / nbrs.len() as f64
            }
        };
        let ins = &self.in_neighbors[i];
        let outs = &self.out_neighbors[i];
        [
            mean_of(ins, &self.in_degree),
            mean_of(ins, &self.out_degree),
            mean_of(outs, &self.in_degree),
            mean_of(outs, &self.out_degree),
        ]
    }

    pub fn feature_row(&self, i: usize) -> [f64; N_FEATURES] {
        let mut row = [0.0; N_FEATURES];
        row[..6].copy_from_slice(&self.amount_features(i));
        row[6..].copy_from_slice(&self.neighborhood_features(i));
        row
    }
}

/// `(mean, total, population std)` of integer amounts; all zero when empty.
fn moments(values: &[u128]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len() as f64;
    let total: u128 = values.iter().sum();
    let mean = total as f64 / n;
    let ss: f64 = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum();
    (mean, total as f64, (ss / n).sqrt())
}

/// Feature table with one row per user, rows in ascending user id order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub user_ids: Vec<u64>,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.user_ids.len()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "user_id,{}", FEATURE_NAMES.join(","))?;
        for (user, row) in self.user_ids.iter().zip(self.values.rows()) {
            write!(out, "{user}")?;
            for v in row {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn read_csv<R: BufRead>(reader: R, source_name: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let expected_header = format!("user_id,{}", FEATURE_NAMES.join(","));
        match lines.next() {
            Some(Ok(h)) if h == expected_header => {}
            Some(Err(e)) => return Err(Error::io(source_name, e)),
            _ => return Err(Error::parse(source_name, 1, "missing or unexpected header")),
        }
        let mut user_ids = Vec::new();
        let mut flat = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(|e| Error::io(source_name, e))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != N_FEATURES + 1 {
                return Err(Error::parse(source_name, line_no, "wrong column count"));
            }
            let user = fields[0]
                .parse::<u64>()
                .map_err(|e| Error::parse(source_name, line_no, format!("user_id: {e}")))?;
            if user_ids.last().is_some_and(|&prev| prev >= user) {
                return Err(Error::parse(source_name, line_no, "user ids must be strictly ascending"));
            }
            user_ids.push(user);
            for f in &fields[1..] {
                let v = f
                    .parse::<f64>()
                    .map_err(|e| Error::parse(source_name, line_no, format!("{f:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(source_name, line_no, "non-finite feature value"));
                }
                flat.push(v);
            }
        }
        let values = Array2::from_shape_vec((user_ids.len(), N_FEATURES), flat)
            .expect("row lengths checked");
        Ok(FeatureMatrix { user_ids, values })
    }
}

pub fn assemble_feature_matrix(graph: &UserGraph) -> FeatureMatrix {
    let rows: Vec<[f64; N_FEATURES]> = (0..graph.n_users())
        .into_par_iter()
        .map(|i| graph.feature_row(i))
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    FeatureMatrix {
        user_ids: graph.users.clone(),
        values: Array2::from_shape_vec((graph.n_users(), N_FEATURES), flat)
            .expect("rows have N_FEATURES columns"),
    }
}

pub fn load_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::read_csv(BufReader::new(file), &path.display().to_string())
}
