//! Cluster summaries, theft-catalog matching and report files.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::AssignmentTable;
use crate::contraction::AddressUserMap;
use crate::error::{Error, Result};
use crate::ingest::{DatasetStats, TheftCatalog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub label: u32,
    pub size: usize,
    pub mean_distance: f64,
    pub max_distance: f64,
    pub share: f64,
}

/// One summary per label `0..=k`, empty clusters included.
pub fn summarize(assignments: &AssignmentTable, k: usize) -> Vec<ClusterSummary> {
    let n = assignments.labels.len();
    let mut sizes = vec![0usize; k + 1];
    let mut sums = vec![0.0f64; k + 1];
    let mut maxes = vec![0.0f64; k + 1];
    for (&l, &d) in assignments.labels.iter().zip(&assignments.distances) {
        let l = l as usize;
        sizes[l] += 1;
        sums[l] += d;
        maxes[l] = maxes[l].max(d);
    }
    (0..=k)
        .map(|l| ClusterSummary {
            label: l as u32,
            size: sizes[l],
            mean_distance: if sizes[l] > 0 { sums[l] / sizes[l] as f64 } else { 0.0 },
            max_distance: maxes[l],
            share: if n > 0 { sizes[l] as f64 / n as f64 } else { 0.0 },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TheftMatch {
    pub case_id: u32,
    pub case_name: String,
    pub addr_id: u64,
    pub user_id: u64,
    /// `None` when the user is not a row of the clustered matrix.
    pub label: Option<u32>,
    pub flagged: bool,
    pub absent: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub users: usize,
    pub addresses: usize,
    pub cases: usize,
}

impl MatchCounts {
    pub fn from_matches(matches: &[TheftMatch]) -> Self {
        let flagged = || matches.iter().filter(|m| m.flagged);
        MatchCounts {
            users: flagged().map(|m| m.user_id).collect::<HashSet<_>>().len(),
            addresses: flagged().map(|m| m.addr_id).collect::<HashSet<_>>().len(),
            cases: flagged().map(|m| m.case_id).collect::<HashSet<_>>().len(),
        }
    }
}

/// Resolves every catalog address to its user and that user's label.
///
/// `user_ids` must be ascending and aligned with `assignments`.
pub fn match_catalog(
    catalog: &TheftCatalog,
    map: &AddressUserMap,
    user_ids: &[u64],
    assignments: &AssignmentTable,
    flag_labels: &BTreeSet<u32>,
) -> (Vec<TheftMatch>, MatchCounts) {
    let matches: Vec<TheftMatch> = catalog
        .entries()
        .iter()
        .map(|e| {
            let user_id = map.resolve(e.addr_id);
            let label = user_ids
                .binary_search(&user_id)
                .ok()
                .map(|i| assignments.labels[i]);
            TheftMatch {
                case_id: e.case_id,
                case_name: e.case_name.clone(),
                addr_id: e.addr_id,
                user_id,
                label,
                flagged: label.is_some_and(|l| flag_labels.contains(&l)),
                absent: label.is_none(),
            }
        })
        .collect();
    let counts = MatchCounts::from_matches(&matches);
    (matches, counts)
}

/// Stage counts recorded by the pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLog {
    pub input_rows: u64,
    pub output_rows: u64,
    pub transactions: u64,
    pub addresses_before_wipe: u64,
    pub addresses_after_wipe: u64,
    pub wiped_addresses: u64,
    pub users_after_contraction: Option<u64>,
}

impl StageLog {
    pub fn from_stats(stats: &DatasetStats, users: Option<u64>) -> Self {
        StageLog {
            input_rows: stats.n_input_rows,
            output_rows: stats.n_output_rows,
            transactions: stats.n_distinct_transactions,
            addresses_before_wipe: stats.n_universe_addresses,
            addresses_after_wipe: stats.n_distinct_addresses,
            wiped_addresses: stats.n_wiped_addresses,
            users_after_contraction: users,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub k: usize,
    pub alpha: f64,
    pub n_starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub trim_count: usize,
    pub n_rows: usize,
    pub flag_labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub config: ReportConfig,
    pub stages: StageLog,
    pub summaries: Vec<ClusterSummary>,
    pub counts: MatchCounts,
    pub matches: Vec<TheftMatch>,
}

impl AnomalyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn write_matches_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "case_id,case_name,addr_id,user_id,label,flagged")?;
        for m in &self.matches {
            let label = m.label.map_or_else(|| "absent".to_string(), |l| l.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.case_id,
                csv_field(&m.case_name),
                m.addr_id,
                m.user_id,
                label,
                m.flagged
            )?;
        }
        out.flush()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `user_id,label,distance` rows, one per clustered user. Used for both
/// `assignments.csv` and `dispersion.csv`.
pub fn write_dispersion_csv<W: Write>(
    mut out: W,
    user_ids: &[u64],
    assignments: &AssignmentTable,
) -> std::io::Result<()> {
    writeln!(out, "user_id,label,distance")?;
    for ((u, l), d) in user_ids
        .iter()
        .zip(&assignments.labels)
        .zip(&assignments.distances)
    {
        writeln!(out, "{u},{l},{d:?}")?;
    }
    out.flush()
}

pub fn read_dispersion_csv<R: BufRead>(
    reader: R,
    source_name: &str,
) -> Result<(Vec<u64>, AssignmentTable)> {
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(h)) if h == "user_id,label,distance" => {}
        Some(Err(e)) => return Err(Error::io(source_name, e)),
        _ => return Err(Error::parse(source_name, 1, "missing or unexpected header")),
    }
    let mut users = Vec::new();
    let mut labels = Vec::new();
    let mut distances = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(source_name, e))?;
        let bad = |m: String| Error::parse(source_name, line_no, m);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected user_id,label,distance".into()));
        }
        users.push(f[0].parse::<u64>().map_err(|e| bad(format!("user_id: {e}")))?);
        labels.push(f[1].parse::<u32>().map_err(|e| bad(format!("label: {e}")))?);
        distances.push(f[2].parse::<f64>().map_err(|e| bad(format!("distance: {e}")))?);
    }
    Ok((users, AssignmentTable { labels, distances }))
}

pub fn load_dispersion_csv(path: &Path) -> Result<(Vec<u64>, AssignmentTable)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dispersion_csv(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TheftCaseEntry;

    fn table(labels: Vec<u32>, distances: Vec<f64>) -> AssignmentTable {
        AssignmentTable { labels, distances }
    }

    #[test]
    fn summaries_cover_every_label() {
        let s = summarize(&table(vec![1, 1, 1, 0], vec![1.0, 0.0, 1.0, 99.0]), 1);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].size, s[1].size), (1, 3));
        assert_eq!((s[0].share, s[1].share), (0.25, 0.75));
        assert_eq!(s[0].max_distance, 99.0);
        assert!((s[1].mean_distance - 2.0 / 3.0).abs() < 1e-15);

        let s = summarize(&table(vec![1, 2, 2], vec![0.0; 3]), 3);
        assert_eq!(s.iter().map(|c| c.size).collect::<Vec<_>>(), vec![0, 1, 2, 0]);
        let total: f64 = s.iter().map(|c| c.share).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    fn linode_catalog() -> TheftCatalog {
        let addrs = [924292, 1095327, 2000790, 2021669, 2720178, 4941747, 5679585];
        TheftCatalog::from_entries(
            addrs
                .iter()
                .map(|&a| TheftCaseEntry {
                    case_id: 14,
                    case_name: "Linode Hacks".into(),
                    addr_id: a,
                })
                .collect(),
        )
        .unwrap()
    }

    fn linode_map() -> AddressUserMap {
        let text: String = [924292, 1095327, 2000790, 2021669, 2720178, 4941747, 5679585]
            .iter()
            .map(|a| format!("{a}\t135\n"))
            .collect();
        AddressUserMap::parse(text.as_bytes(), "mem").unwrap()
    }

    #[test]
    fn addresses_of_one_user_count_once() {
        let flags = BTreeSet::from([0]);
        let (matches, counts) = match_catalog(
            &linode_catalog(),
            &linode_map(),
            &[135, 200],
            &table(vec![0, 1], vec![5.0, 0.1]),
            &flags,
        );
        assert_eq!(matches.len(), 7);
        assert!(matches.iter().all(|m| m.flagged && m.user_id == 135));
        assert_eq!(
            counts,
            MatchCounts {
                users: 1,
                addresses: 7,
                cases: 1
            }
        );
    }

    #[test]
    fn flag_rule_and_absent_users() {
        let catalog = TheftCatalog::parse(
            "14\tLinode Hacks\t924292\n23\tBitfloor Theft\t818018\n3\tStefan thomas loss\t5\n".as_bytes(),
            "mem",
        )
        .unwrap();
        let map = AddressUserMap::parse("924292\t135\n818018\t1914\n".as_bytes(), "mem").unwrap();
        let (matches, counts) = match_catalog(
            &catalog,
            &map,
            &[135, 1914],
            &table(vec![0, 3], vec![1.0, 1.0]),
            &BTreeSet::from([0]),
        );
        assert_eq!(matches.len(), catalog.len());
        let absent: Vec<_> = matches.iter().filter(|m| m.absent).collect();
        assert_eq!(absent.len(), 1);
        assert_eq!(absent[0].addr_id, 5);
        assert_eq!(absent[0].label, None);
        let bitfloor = matches.iter().find(|m| m.case_id == 23).unwrap();
        assert_eq!(bitfloor.label, Some(3));
        assert!(!bitfloor.flagged);
        assert_eq!(counts, MatchCounts { users: 1, addresses: 1, cases: 1 });

        let (_, counts) = match_catalog(
            &catalog,
            &map,
            &[135, 1914],
            &table(vec![0, 3], vec![1.0, 1.0]),
            &BTreeSet::from([0, 3]),
        );
        assert_eq!(counts, MatchCounts { users: 2, addresses: 2, cases: 2 });
    }

    #[test]
    fn report_json_round_trip() {
        let (matches, counts) = match_catalog(
            &linode_catalog(),
            &linode_map(),
            &[135],
            &table(vec![0], vec![0.3]),
            &BTreeSet::from([0]),
        );
        let report = AnomalyReport {
            config: ReportConfig {
                k: 8,
                alpha: 0.01,
                n_starts: 10,
                max_iter: 100,
                tol: 1e-9,
                seed: 7,
                trim_count: 1,
                n_rows: 1,
                flag_labels: vec![0],
            },
            stages: StageLog::default(),
            summaries: summarize(&table(vec![0], vec![0.3]), 8),
            counts,
            matches,
        };
        let text = report.to_json();
        assert_eq!(AnomalyReport::from_json(&text).unwrap(), report);
        assert!(text.contains("\"users\": 1"));
        let mut csv = Vec::new();
        report.write_matches_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.contains("14,Linode Hacks,924292,135,0,true"));
    }

    #[test]
    fn dispersion_round_trip() {
        let t = table(vec![0, 2, 1], vec![0.1 + 0.2, 1.0 / 3.0, 0.0]);
        let mut buf = Vec::new();
        write_dispersion_csv(&mut buf, &[3, 9, 11], &t).unwrap();
        let (users, back) = read_dispersion_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(users, vec![3, 9, 11]);
        assert_eq!(back, t);
    }
}
