//! Address → user contraction.
//!
//! A map is either loaded verbatim from `contraction.tsv` or derived from the
//! input side of the transaction stream with the common-input-ownership rule:
//! all addresses spent together in one transaction belong to one user, closed
//! transitively. Derived user ids are the smallest address id in each class.
//! Addresses the map does not know resolve to themselves.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::FlowRecord;

/// Union-find over dense indices with union by size and path compression.
#[derive(Debug, Clone, Default)]
pub struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSets {
    pub fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    /// Adds a singleton set and returns its index.
    pub fn push(&mut self) -> usize {
        let id = self.parent.len();
        self.parent.push(id);
        self.size.push(1);
        id
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Merges the sets containing `a` and `b`. Returns false if they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionSource {
    Derived,
    Loaded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressUserMap {
    users: HashMap<u64, u64>,
    source: ContractionSource,
}

impl AddressUserMap {
    /// A map with no entries: every address is its own user.
    pub fn identity() -> Self {
        AddressUserMap {
            users: HashMap::new(),
            source: ContractionSource::Loaded,
        }
    }

    pub fn source(&self) -> ContractionSource {
        self.source
    }

    pub fn resolve(&self, addr_id: u64) -> u64 {
        self.users.get(&addr_id).copied().unwrap_or(addr_id)
    }

    /// Number of explicitly mapped addresses.
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Distinct user ids among the explicitly mapped addresses.
    pub fn n_users(&self) -> usize {
        self.users.values().collect::<HashSet<_>>().len()
    }

    /// Distinct user ids the given addresses resolve to.
    pub fn n_users_over(&self, addresses: &[u64]) -> usize {
        addresses
            .iter()
            .map(|&a| self.resolve(a))
            .collect::<HashSet<_>>()
            .len()
    }

    /// Writes `addr_id \t user_id` rows for `addresses` in ascending address order.
    pub fn write_tsv<W: Write>(&self, mut out: W, addresses: &[u64]) -> std::io::Result<()> {
        let mut sorted = addresses.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for a in sorted {
            writeln!(out, "{}\t{}", a, self.resolve(a))?;
        }
        out.flush()
    }

    pub fn parse<R: BufRead>(reader: R, source_name: &str) -> Result<Self> {
        let mut users = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(source_name, e))?;
            let fields: Vec<&str> = line.split('\t').collect();
            let parsed = match fields.as_slice() {
                [a, u] if is_decimal(a) && is_decimal(u) => a.parse::<u64>().ok().zip(u.parse::<u64>().ok()),
                _ => None,
            };
            let Some((addr, user)) = parsed else {
                return Err(Error::parse(
                    source_name,
                    line_no,
                    "expected addr_id<TAB>user_id as unsigned decimal integers",
                ));
            };
            if let Some(prev) = users.insert(addr, user) {
                if prev != user {
                    return Err(Error::Validation(format!(
                        "{source_name}:{line_no}: address {addr} mapped to both {prev} and {user}"
                    )));
                }
            }
        }
        Ok(AddressUserMap {
            users,
            source: ContractionSource::Loaded,
        })
    }
}

fn is_decimal(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

pub fn load_contraction(path: &Path) -> Result<AddressUserMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    AddressUserMap::parse(BufReader::new(file), &path.display().to_string())
}

/// Derives the common-input-ownership contraction from input-side records.
///
/// Records need not be grouped by transaction: each address is joined with
/// the first address seen for its transaction.
pub fn build_contraction<I>(inputs: I) -> AddressUserMap
where
    I: IntoIterator<Item = FlowRecord>,
{
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut addrs: Vec<u64> = Vec::new();
    let mut first_in_tx: HashMap<u64, usize> = HashMap::new();
    let mut sets = DisjointSets::default();

    for rec in inputs {
        let idx = *index.entry(rec.addr_id).or_insert_with(|| {
            addrs.push(rec.addr_id);
            sets.push()
        });
        let anchor = *first_in_tx.entry(rec.tx_id).or_insert(idx);
        sets.union(anchor, idx);
    }
    drop(first_in_tx);
    drop(index);

    let mut class_min: HashMap<usize, u64> = HashMap::new();
    for (i, &a) in addrs.iter().enumerate() {
        let root = sets.find(i);
        class_min
            .entry(root)
            .and_modify(|m| *m = (*m).min(a))
            .or_insert(a);
    }
    let users = addrs
        .iter()
        .enumerate()
        .map(|(i, &a)| (a, class_min[&sets.find(i)]))
        .collect();
    AddressUserMap {
        users,
        source: ContractionSource::Derived,
    }
}
