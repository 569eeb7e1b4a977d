//! Seeded synthetic transaction data with injected anomalous users.
//!
//! Background users send log-uniform amounts to random users. Anomalous users
//! send amounts scaled by `anomaly_scale` to other anomalous users, and every
//! such payment is spent from all of their addresses in equal parts, so each
//! address carries only a fraction of the user's volume. The generator also
//! writes the true contraction, a theft catalog with one case per anomalous
//! user and a ground-truth file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_flow_records, FlowRecord, TheftCaseEntry, TheftCatalog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_background_users: usize,
    pub n_anomalous_users: usize,
    /// Inclusive range of sending transactions per user.
    pub txs_per_user: (u32, u32),
    /// Inclusive log-uniform bounds of background payment amounts, in satoshi.
    pub amount_range: (u64, u64),
    pub anomaly_scale: f64,
    pub addresses_per_anomalous_user: (u32, u32),
    pub addresses_per_background_user: (u32, u32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_background_users: 1000,
            n_anomalous_users: 10,
            txs_per_user: (2, 6),
            amount_range: (100_000, 10_000_000),
            anomaly_scale: 100.0,
            addresses_per_anomalous_user: (4, 4),
            addresses_per_background_user: (1, 1),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_background_users == 0 || self.n_anomalous_users == 0 {
            return bad("user counts must be positive");
        }
        let (lo, hi) = self.txs_per_user;
        if lo == 0 || lo > hi {
            return bad("txs_per_user must be a non-empty range starting at 1 or more");
        }
        let (lo, hi) = self.amount_range;
        if lo == 0 || lo > hi {
            return bad("amount_range must be a non-empty range of positive amounts");
        }
        if !(self.anomaly_scale.is_finite() && self.anomaly_scale > 1.0) {
            return bad("anomaly_scale must be greater than 1");
        }
        let (lo, hi) = self.addresses_per_anomalous_user;
        if lo < 2 || lo > hi {
            return bad("anomalous users need at least 2 addresses");
        }
        let (lo, hi) = self.addresses_per_background_user;
        if lo == 0 || lo > hi {
            return bad("background users need at least 1 address");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAddresses {
    pub user_id: u64,
    pub anomalous: bool,
    pub addresses: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub anomalous_users: Vec<u64>,
    pub users: Vec<UserAddresses>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub txin: Vec<FlowRecord>,
    pub txout: Vec<FlowRecord>,
    /// `(addr_id, user_id)` for every address, ascending by address.
    pub contraction: Vec<(u64, u64)>,
    pub truth: GroundTruth,
    pub catalog: TheftCatalog,
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (u64, u64)) -> f64 {
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (a + (b - a) * rng.random::<f64>()).exp()
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut kinds: Vec<bool> = std::iter::repeat_n(false, config.n_background_users)
        .chain(std::iter::repeat_n(true, config.n_anomalous_users))
        .collect();
    kinds.shuffle(&mut rng);

    let mut next_addr = 1u64;
    let users: Vec<UserAddresses> = kinds
        .iter()
        .map(|&anomalous| {
            let (lo, hi) = if anomalous {
                config.addresses_per_anomalous_user
            } else {
                config.addresses_per_background_user
            };
            let m = rng.random_range(lo..=hi) as u64;
            let addresses: Vec<u64> = (next_addr..next_addr + m).collect();
            next_addr += m;
            UserAddresses {
                user_id: addresses[0],
                anomalous,
                addresses,
            }
        })
        .collect();
    let all: Vec<usize> = (0..users.len()).collect();
    let anomalous: Vec<usize> = all.iter().copied().filter(|&i| users[i].anomalous).collect();

    let mut txin = Vec::new();
    let mut txout = Vec::new();
    let mut tx_id = 0u64;
    for (ui, user) in users.iter().enumerate() {
        let n_txs = rng.random_range(config.txs_per_user.0..=config.txs_per_user.1);
        for t in 0..n_txs {
            tx_id += 1;
            let mut amount = log_uniform(&mut rng, config.amount_range);
            if user.anomalous {
                amount *= config.anomaly_scale;
            }
            let m = user.addresses.len() as u64;
            let mut amount = (amount.round() as u64).max(m);

            // Inputs: anomalous users and a background user's first payment
            // spend from every address in equal parts.
            if user.anomalous || t == 0 {
                amount -= amount % m;
                for &a in &user.addresses {
                    txin.push(FlowRecord::new(tx_id, a, amount / m));
                }
            } else {
                let a = *user.addresses.choose(&mut rng).expect("non-empty");
                txin.push(FlowRecord::new(tx_id, a, amount));
            }

            let pool = if user.anomalous && anomalous.len() > 1 {
                &anomalous
            } else {
                &all
            };
            let n_recipients = rng.random_range(1..=2u64).min(amount);
            let mut remaining = amount;
            for r in 0..n_recipients {
                let to = loop {
                    let c = *pool.choose(&mut rng).expect("non-empty");
                    if c != ui {
                        break c;
                    }
                };
                let value = if r + 1 == n_recipients {
                    remaining
                } else {
                    rng.random_range(1..remaining)
                };
                remaining -= value;
                let a = *users[to].addresses.choose(&mut rng).expect("non-empty");
                txout.push(FlowRecord::new(tx_id, a, value));
            }
        }
    }

    let contraction: Vec<(u64, u64)> = users
        .iter()
        .flat_map(|u| u.addresses.iter().map(move |&a| (a, u.user_id)))
        .collect();
    let entries = users
        .iter()
        .filter(|u| u.anomalous)
        .enumerate()
        .flat_map(|(case, u)| {
            u.addresses.iter().map(move |&a| TheftCaseEntry {
                case_id: case as u32 + 1,
                case_name: format!("Synthetic case {}", case + 1),
                addr_id: a,
            })
        })
        .collect();
    let truth = GroundTruth {
        anomalous_users: users.iter().filter(|u| u.anomalous).map(|u| u.user_id).collect(),
        users,
    };
    Ok(SynthData {
        txin,
        txout,
        contraction,
        truth,
        catalog: TheftCatalog::from_entries(entries)?,
    })
}

impl SynthData {
    /// Writes `txin.tsv`, `txout.tsv`, `contraction.tsv`, `thefts.tsv` and
    /// `ground_truth.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            File::create(&path)
                .map(BufWriter::new)
                .map_err(|e| Error::io(path, e))
        };
        let io = |name: &str| {
            let path = dir.join(name);
            move |e| Error::io(path, e)
        };
        write_flow_records(create("txin.tsv")?, self.txin.iter().copied()).map_err(io("txin.tsv"))?;
        write_flow_records(create("txout.tsv")?, self.txout.iter().copied()).map_err(io("txout.tsv"))?;
        let mut out = create("contraction.tsv")?;
        for (a, u) in &self.contraction {
            writeln!(out, "{a}\t{u}").map_err(io("contraction.tsv"))?;
        }
        out.flush().map_err(io("contraction.tsv"))?;
        self.catalog.write(create("thefts.tsv")?).map_err(io("thefts.tsv"))?;
        let mut out = create("ground_truth.json")?;
        serde_json::to_writer_pretty(&mut out, &self.truth).expect("ground truth serializes");
        writeln!(out).and_then(|_| out.flush()).map_err(io("ground_truth.json"))?;
        Ok(())
    }
}
