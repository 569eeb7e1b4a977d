//! Streaming loaders for the on-disk dataset.
//!
//! All inputs are headerless, tab-separated, LF-terminated ASCII:
//!
//! | file          | row                                   |
//! |---------------|---------------------------------------|
//! | `txin.tsv`    | `tx_id \t addr_id \t value_satoshi`   |
//! | `txout.tsv`   | `tx_id \t addr_id \t value_satoshi`   |
//! | `addresses.tsv` | `addr_id`                           |
//! | `thefts.tsv`  | `case_id \t case_name \t addr_id`     |
//!
//! Blank lines are rejected everywhere. Flow files are read lazily, one line
//! at a time, so memory does not depend on file size.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Input,
    Output,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Input => "txin",
            Side::Output => "txout",
        }
    }
}

/// One flow edge: `addr_id` spends (input side) or receives (output side)
/// `value` satoshi in transaction `tx_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowRecord {
    pub tx_id: u64,
    pub addr_id: u64,
    pub value: u64,
}

impl FlowRecord {
    pub fn new(tx_id: u64, addr_id: u64, value: u64) -> Self {
        FlowRecord {
            tx_id,
            addr_id,
            value,
        }
    }
}

/// Parses an unsigned decimal field. Signs, whitespace and empty fields are rejected.
fn parse_unsigned(field: &str, what: &str) -> std::result::Result<u64, String> {
    if field.is_empty() {
        return Err(format!("empty {what} field"));
    }
    if field.starts_with('-') {
        return Err(format!("negative {what} {field:?}"));
    }
    if !field.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("{what} {field:?} is not an unsigned decimal integer"));
    }
    field
        .parse::<u64>()
        .map_err(|e| format!("{what} {field:?}: {e}"))
}

fn parse_flow_line(line: &str) -> std::result::Result<FlowRecord, String> {
    let mut fields = line.split('\t');
    let (Some(tx), Some(addr), Some(value), None) =
        (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(format!(
            "expected 3 tab-separated fields, found {}",
            line.split('\t').count()
        ));
    };
    Ok(FlowRecord {
        tx_id: parse_unsigned(tx, "tx_id")?,
        addr_id: parse_unsigned(addr, "addr_id")?,
        value: parse_unsigned(value, "value")?,
    })
}

/// Lazy, single-pass reader over a flow file. Yields records in file order.
pub struct FlowReader<R> {
    lines: std::io::Lines<R>,
    source_name: String,
    line_no: usize,
    rows: u64,
    failed: bool,
}

impl<R: BufRead> FlowReader<R> {
    pub fn new(reader: R, source_name: impl Into<String>) -> Self {
        FlowReader {
            lines: reader.lines(),
            source_name: source_name.into(),
            line_no: 0,
            rows: 0,
            failed: false,
        }
    }

    /// Rows successfully parsed so far.
    pub fn rows_read(&self) -> u64 {
        self.rows
    }
}

impl<R: BufRead> Iterator for FlowReader<R> {
    type Item = Result<FlowRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let line = self.lines.next()?;
        self.line_no += 1;
        let result = match line {
            Err(e) => Err(Error::io(&self.source_name, e)),
            Ok(line) if line.is_empty() => {
                Err(Error::parse(&self.source_name, self.line_no, "blank line"))
            }
            Ok(line) => parse_flow_line(&line)
                .map_err(|msg| Error::parse(&self.source_name, self.line_no, msg)),
        };
        match &result {
            Ok(_) => self.rows += 1,
            Err(_) => self.failed = true,
        }
        Some(result)
    }
}

pub fn load_flow_records(path: &Path, side: Side) -> Result<FlowReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(FlowReader::new(
        BufReader::new(file),
        format!("{} ({})", path.display(), side.as_str()),
    ))
}

pub fn write_flow_records<W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = FlowRecord>,
) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}\t{}\t{}", r.tx_id, r.addr_id, r.value)?;
    }
    out.flush()
}

/// Reads an `addresses.tsv` universe file.
pub fn load_address_universe(path: &Path) -> Result<HashSet<u64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut universe = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            return Err(Error::parse(&name, i + 1, "blank line"));
        }
        let addr = parse_unsigned(&line, "addr_id").map_err(|m| Error::parse(&name, i + 1, m))?;
        universe.insert(addr);
    }
    Ok(universe)
}

/// Row and address counts for the ingest stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_input_rows: u64,
    pub n_output_rows: u64,
    /// Size of the address universe before wiping.
    pub n_universe_addresses: u64,
    /// Addresses retained after wiping.
    pub n_distinct_addresses: u64,
    pub n_distinct_transactions: u64,
    pub n_wiped_addresses: u64,
}

/// Removes addresses that never occur in an input or output row.
///
/// Without an explicit universe the universe is the set of addresses seen in
/// the streams, so nothing is wiped. An explicit universe must cover every
/// address the streams mention. Returns the retained addresses in ascending order.
pub fn wipe_addresses<I, O>(
    universe: Option<&HashSet<u64>>,
    inputs: I,
    outputs: O,
) -> Result<(Vec<u64>, DatasetStats)>
where
    I: IntoIterator<Item = Result<FlowRecord>>,
    O: IntoIterator<Item = Result<FlowRecord>>,
{
    let mut stats = DatasetStats::default();
    let mut seen = HashSet::new();
    let mut txs = HashSet::new();
    for rec in inputs {
        let rec = rec?;
        stats.n_input_rows += 1;
        seen.insert(rec.addr_id);
        txs.insert(rec.tx_id);
    }
    for rec in outputs {
        let rec = rec?;
        stats.n_output_rows += 1;
        seen.insert(rec.addr_id);
        txs.insert(rec.tx_id);
    }
    stats.n_distinct_transactions = txs.len() as u64;
    drop(txs);

    if let Some(universe) = universe {
        if let Some(stray) = seen.iter().filter(|a| !universe.contains(a)).min() {
            return Err(Error::Validation(format!(
                "address {stray} occurs in the flow files but not in the address universe"
            )));
        }
        stats.n_universe_addresses = universe.len() as u64;
    } else {
        stats.n_universe_addresses = seen.len() as u64;
    }
    stats.n_distinct_addresses = seen.len() as u64;
    stats.n_wiped_addresses = stats.n_universe_addresses - stats.n_distinct_addresses;

    let mut retained: Vec<u64> = seen.into_iter().collect();
    retained.sort_unstable();
    Ok((retained, stats))
}

/// A known theft, hack, fraud or loss case and one implicated address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TheftCaseEntry {
    pub case_id: u32,
    pub case_name: String,
    pub addr_id: u64,
}

/// Catalog of theft cases, kept sorted by `(case_id, addr_id)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TheftCatalog {
    entries: Vec<TheftCaseEntry>,
}

impl TheftCatalog {
    pub fn from_entries(mut entries: Vec<TheftCaseEntry>) -> Result<Self> {
        entries.sort_by_key(|e| (e.case_id, e.addr_id));
        let mut names: BTreeMap<u32, &str> = BTreeMap::new();
        for pair in entries.windows(2) {
            if pair[0].case_id == pair[1].case_id && pair[0].addr_id == pair[1].addr_id {
                return Err(Error::Validation(format!(
                    "duplicate theft catalog entry (case {}, address {})",
                    pair[0].case_id, pair[0].addr_id
                )));
            }
        }
        for e in &entries {
            if e.case_id == 0 {
                return Err(Error::Validation("theft case ids must be positive".into()));
            }
            if e.case_name.contains('\t') || e.case_name.contains('\n') {
                return Err(Error::Validation(format!(
                    "case {} name contains a tab or newline",
                    e.case_id
                )));
            }
            match names.insert(e.case_id, &e.case_name) {
                Some(prev) if prev != e.case_name => {
                    return Err(Error::Validation(format!(
                        "case {} has conflicting names {prev:?} and {:?}",
                        e.case_id, e.case_name
                    )))
                }
                _ => {}
            }
        }
        Ok(TheftCatalog { entries })
    }

    pub fn parse<R: BufRead>(reader: R, source_name: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(source_name, e))?;
            if line.is_empty() {
                return Err(Error::parse(source_name, line_no, "blank line"));
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    source_name,
                    line_no,
                    format!(
                        "expected case_id, case_name, addr_id separated by tabs, found {} fields",
                        fields.len()
                    ),
                ));
            }
            let case_id = parse_unsigned(fields[0], "case_id")
                .and_then(|v| {
                    u32::try_from(v)
                        .ok()
                        .filter(|&v| v > 0)
                        .ok_or_else(|| format!("case_id {v} must be in 1..=u32::MAX"))
                })
                .map_err(|m| Error::parse(source_name, line_no, m))?;
            let addr_id = parse_unsigned(fields[2], "addr_id")
                .map_err(|m| Error::parse(source_name, line_no, m))?;
            entries.push(TheftCaseEntry {
                case_id,
                case_name: fields[1].to_string(),
                addr_id,
            });
        }
        Self::from_entries(entries)
    }

    pub fn entries(&self) -> &[TheftCaseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Case id → (name, addresses).
    pub fn cases(&self) -> BTreeMap<u32, (&str, Vec<u64>)> {
        let mut cases: BTreeMap<u32, (&str, Vec<u64>)> = BTreeMap::new();
        for e in &self.entries {
            cases
                .entry(e.case_id)
                .or_insert_with(|| (&e.case_name, Vec::new()))
                .1
                .push(e.addr_id);
        }
        cases
    }

    pub fn n_cases(&self) -> usize {
        self.cases().len()
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.case_id, e.case_name, e.addr_id)?;
        }
        out.flush()
    }
}

pub fn load_theft_catalog(path: &Path) -> Result<TheftCatalog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    TheftCatalog::parse(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_all(text: &str) -> Vec<Result<FlowRecord>> {
        FlowReader::new(text.as_bytes(), "mem").collect()
    }

    #[test]
    fn parses_a_flow_line() {
        let recs = read_all("7\t42\t5000000000\n");
        assert_eq!(recs.len(), 1);
        assert_eq!(
            recs[0].as_ref().unwrap(),
            &FlowRecord::new(7, 42, 5_000_000_000)
        );
    }

    #[test]
    fn negative_value_is_a_parse_error_on_line_one() {
        let recs = read_all("7\t42\t-1\n");
        match &recs[0] {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(*line, 1);
                assert!(message.contains("negative"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn reports_the_failing_line_number_and_stops() {
        let recs = read_all("1\t2\t3\n1\t2\n4\t5\t6\n");
        assert_eq!(recs.len(), 2);
        assert!(recs[0].is_ok());
        assert!(matches!(recs[1], Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn rejects_signs_blank_lines_and_garbage() {
        for bad in ["+1\t2\t3", "1\t2\t3.5", "1\t \t3", "1\t2\t3\t4", "x\t2\t3"] {
            let recs = read_all(&format!("{bad}\n"));
            assert!(recs[0].is_err(), "{bad:?} should fail");
        }
        let recs = read_all("1\t2\t3\n\n");
        assert!(matches!(recs[1], Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_input_is_an_empty_stream() {
        assert!(read_all("").is_empty());
    }

    #[test]
    fn counts_rows() {
        let mut reader = FlowReader::new("1\t1\t1\n2\t2\t2\n3\t3\t3\n".as_bytes(), "mem");
        let n = reader.by_ref().filter(|r| r.is_ok()).count();
        assert_eq!(n, 3);
        assert_eq!(reader.rows_read(), 3);
        let (_, stats) = wipe_addresses(
            None,
            read_all("1\t1\t1\n2\t2\t2\n3\t3\t3\n"),
            std::iter::empty(),
        )
        .unwrap();
        assert_eq!(stats.n_input_rows, 3);
    }

    #[test]
    fn duplicate_flow_rows_are_kept() {
        let recs = read_all("1\t2\t3\n1\t2\t3\n");
        assert_eq!(recs.len(), 2);
    }

    #[test]
    fn wipe_with_explicit_universe() {
        let universe: HashSet<u64> = [1, 2, 3].into();
        let (retained, stats) = wipe_addresses(
            Some(&universe),
            read_all("10\t1\t5\n"),
            read_all("10\t2\t5\n"),
        )
        .unwrap();
        assert_eq!(retained, vec![1, 2]);
        assert_eq!(stats.n_wiped_addresses, 1);
        assert_eq!(stats.n_universe_addresses, 3);
        assert_eq!(stats.n_distinct_addresses, 2);
        assert_eq!(stats.n_distinct_transactions, 1);
    }

    #[test]
    fn wipe_with_derived_universe() {
        let (retained, stats) =
            wipe_addresses(None, read_all("1\t9\t5\n"), read_all("1\t5\t5\n")).unwrap();
        assert_eq!(retained, vec![5, 9]);
        assert_eq!(stats.n_wiped_addresses, 0);
    }

    #[test]
    fn wipe_rejects_addresses_outside_universe() {
        let universe: HashSet<u64> = [1].into();
        let err = wipe_addresses(Some(&universe), read_all("1\t2\t5\n"), std::iter::empty());
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn wipe_propagates_parse_errors() {
        let err = wipe_addresses(None, read_all("1\t2\n"), std::iter::empty());
        assert!(matches!(err, Err(Error::Parse { .. })));
    }

    #[test]
    fn theft_catalog_lines() {
        let text = "14\tLinode Hacks\t924292\n23\tBitfloor Theft\t818018\n";
        let cat = TheftCatalog::parse(text.as_bytes(), "mem").unwrap();
        assert_eq!(
            cat.entries()[0],
            TheftCaseEntry {
                case_id: 14,
                case_name: "Linode Hacks".into(),
                addr_id: 924292
            }
        );
        assert_eq!(
            cat.entries()[1],
            TheftCaseEntry {
                case_id: 23,
                case_name: "Bitfloor Theft".into(),
                addr_id: 818018
            }
        );
        assert_eq!(cat.n_cases(), 2);
    }

    #[test]
    fn empty_theft_catalog() {
        let cat = TheftCatalog::parse("".as_bytes(), "mem").unwrap();
        assert!(cat.is_empty());
        assert_eq!(cat.n_cases(), 0);
    }

    #[test]
    fn theft_catalog_rejects_duplicates_and_tabs() {
        let dup = "14\tLinode Hacks\t1\n14\tLinode Hacks\t1\n";
        assert!(matches!(
            TheftCatalog::parse(dup.as_bytes(), "mem"),
            Err(Error::Validation(_))
        ));
        let tab = "14\tLinode\tHacks\t1\n";
        assert!(matches!(
            TheftCatalog::parse(tab.as_bytes(), "mem"),
            Err(Error::Parse { line: 1, .. })
        ));
        let zero = "0\tNothing\t1\n";
        assert!(TheftCatalog::parse(zero.as_bytes(), "mem").is_err());
    }

    #[test]
    fn theft_catalog_groups_by_case() {
        let text = "14\tLinode Hacks\t924292\n14\tLinode Hacks\t1095327\n1\tStone Man Loss\t882066\n";
        let cat = TheftCatalog::parse(text.as_bytes(), "mem").unwrap();
        let cases = cat.cases();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[&14].1, vec![924292, 1095327]);
        assert_eq!(cases[&1].0, "Stone Man Loss");
    }
}
