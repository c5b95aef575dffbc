//! Synthetic workload generation and the line-oriented trace format.
//!
//! Accounts are `a0..aN`, shared objects `s0..sM`, and the fee sink `fees`.
//! Popularity follows a power law with configurable exponent. Contract
//! transactions pay a unit fee per payer into the sink, keeping the total
//! owned value invariant for conserving workloads. Trace lines are
//!
//! ```text
//! <id> <payment|contract> <payer:amt[,..]> <payee:amt[,..]|-> <sops|-> @<submit_ns>
//! ```
//!
//! where shared operations are `key:assign:v`, `key:incr:a`, `key:decr:a`,
//! or `key:read`, joined by `;`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::domain::{Amount, Object, ObjectKey, OpKind, OpSpec, TimeNs, Transaction, TxId};
use crate::execution::ObjectStore;
use crate::sim::config::{WorkloadSection, SEC};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

pub struct Workload {
    pub genesis: ObjectStore,
    pub txs: Vec<Arc<Transaction>>,
}

/// Power-law sampler over `0..n` with exponent `skew` (0 = uniform).
struct Popularity {
    cdf: Vec<f64>,
}

impl Popularity {
    fn new(n: usize, skew: f64) -> Self {
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for k in 0..n {
            acc += 1.0 / ((k + 1) as f64).powf(skew);
            cdf.push(acc);
        }
        for v in &mut cdf {
            *v /= acc;
        }
        Popularity { cdf }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|c| *c < u).min(self.cdf.len() - 1)
    }
}

pub fn account_key(i: usize) -> ObjectKey {
    ObjectKey::new(format!("a{i}"))
}

pub fn shared_key(i: usize) -> ObjectKey {
    ObjectKey::new(format!("s{i}"))
}

pub const FEE_SINK: &str = "fees";

/// Build the genesis object store for a workload spec. Insolvent accounts
/// are chosen deterministically from the seed.
pub fn genesis_store(spec: &WorkloadSection, seed: u64) -> ObjectStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut store = ObjectStore::default();
    for i in 0..spec.accounts {
        let balance = if rng.random::<f64>() < spec.insolvent_fraction {
            spec.insolvent_balance
        } else {
            spec.initial_balance
        };
        store.insert(Object::owned(account_key(i), balance));
    }
    store.insert(Object::owned(FEE_SINK, 0));
    for i in 0..spec.shared_objects.max(1) {
        store.insert(Object::shared(shared_key(i), 100));
    }
    store
}

/// Deterministic transaction list: exact payment proportion via error
/// diffusion, power-law account choice, constant-rate submission times.
pub fn generate(spec: &WorkloadSection, seed: u64) -> Workload {
    let genesis = genesis_store(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pop = Popularity::new(spec.accounts, spec.skew);
    let shared_pop = Popularity::new(spec.shared_objects.max(1), spec.skew);
    let period = SEC / spec.submit_rate_tps.max(1);
    let mut txs = Vec::with_capacity(spec.total_txs);
    let mut diffusion = 0.0;
    for i in 0..spec.total_txs {
        let submit = (i as u64 + 1) * period;
        diffusion += spec.payment_proportion;
        let is_payment = diffusion >= 1.0 - 1e-12;
        if is_payment {
            diffusion -= 1.0;
        }
        let multi = rng.random::<f64>() < spec.multi_payer_fraction;
        let payer1 = pop.sample(&mut rng);
        let ops = if is_payment {
            let payee = distinct(&pop, &mut rng, &[payer1]);
            let a1 = rng.random_range(1..=spec.max_amount);
            if multi {
                let payer2 = distinct(&pop, &mut rng, &[payer1, payee]);
                let a2 = rng.random_range(1..=spec.max_amount);
                vec![
                    OpSpec::decrement(account_key(payer1), a1),
                    OpSpec::decrement(account_key(payer2), a2),
                    OpSpec::increment(account_key(payee), a1 + a2),
                ]
            } else {
                vec![
                    OpSpec::decrement(account_key(payer1), a1),
                    OpSpec::increment(account_key(payee), a1),
                ]
            }
        } else {
            let mut ops = vec![OpSpec::decrement(account_key(payer1), 1)];
            let mut fee = 1;
            if multi {
                let payer2 = distinct(&pop, &mut rng, &[payer1]);
                ops.push(OpSpec::decrement(account_key(payer2), 1));
                fee += 1;
            }
            ops.push(OpSpec::increment(FEE_SINK, fee));
            let count = rng.random_range(1..=3usize);
            let mut used = Vec::new();
            for _ in 0..count {
                let mut target = shared_pop.sample(&mut rng);
                let mut guard = 0;
                while used.contains(&target) && guard < 16 {
                    target = shared_pop.sample(&mut rng);
                    guard += 1;
                }
                if used.contains(&target) {
                    continue;
                }
                used.push(target);
                let key = shared_key(target);
                match rng.random_range(0..4u8) {
                    0 => ops.push(OpSpec::assign(key, rng.random_range(0..=100))),
                    1 => ops.push(OpSpec::increment(key, rng.random_range(1..=5))),
                    2 => ops.push(OpSpec::decrement(key, rng.random_range(1..=5))),
                    _ => ops.push(OpSpec::read(key)),
                }
            }
            ops
        };
        txs.push(Arc::new(Transaction::signed(TxId(i as u64), ops, submit, &genesis)));
    }
    Workload { genesis, txs }
}

fn distinct(pop: &Popularity, rng: &mut ChaCha8Rng, exclude: &[usize]) -> usize {
    loop {
        let v = pop.sample(rng);
        if !exclude.contains(&v) {
            return v;
        }
    }
}

// ---------------------------------------------------------------------------
// Trace format
// ---------------------------------------------------------------------------

pub fn write_trace(path: &Path, txs: &[Arc<Transaction>], store: &ObjectStore) -> Result<(), TraceError> {
    use crate::domain::{ObjectType, ObjectTypes};
    let mut out = String::new();
    for tx in txs {
        let mut payers = Vec::new();
        let mut payees = Vec::new();
        let mut sops = Vec::new();
        for op in &tx.ops {
            match (store.object_type(&op.target), op.kind) {
                (Some(ObjectType::Owned), OpKind::Decrement) => {
                    payers.push(format!("{}:{}", op.target, op.amount));
                }
                (Some(ObjectType::Owned), OpKind::Increment) => {
                    payees.push(format!("{}:{}", op.target, op.amount));
                }
                (Some(ObjectType::Shared), kind) => {
                    let body = match kind {
                        OpKind::Assign => format!("{}:assign:{}", op.target, op.amount),
                        OpKind::Increment => format!("{}:incr:{}", op.target, op.amount),
                        OpKind::Decrement => format!("{}:decr:{}", op.target, op.amount),
                        OpKind::Read => format!("{}:read", op.target),
                    };
                    sops.push(body);
                }
                _ => {}
            }
        }
        let kind = match tx.kind {
            crate::domain::TxKind::Payment => "payment",
            crate::domain::TxKind::Contract => "contract",
        };
        out.push_str(&format!(
            "{} {} {} {} {} @{}\n",
            tx.id.0,
            kind,
            join_or_dash(payers),
            join_or_dash(payees),
            if sops.is_empty() { "-".to_string() } else { sops.join(";") },
            tx.submit_time,
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn join_or_dash(parts: Vec<String>) -> String {
    if parts.is_empty() {
        "-".to_string()
    } else {
        parts.join(",")
    }
}

/// Parse a trace back into transactions. Operation order is canonical:
/// payer decrements, owned increments, then shared operations, matching the
/// generator's output so a round trip is the identity.
pub fn read_trace(path: &Path, store: &ObjectStore) -> Result<Vec<Arc<Transaction>>, TraceError> {
    let text = fs::read_to_string(path)?;
    let mut txs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |detail: &str| TraceError::Parse { line: lineno + 1, detail: detail.into() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse("expected 6 fields"));
        }
        let id: u64 = fields[0].parse().map_err(|_| parse("bad id"))?;
        let mut ops = Vec::new();
        if fields[2] != "-" {
            for part in fields[2].split(',') {
                let (key, amount) = split_amount(part).ok_or_else(|| parse("bad payer"))?;
                ops.push(OpSpec::decrement(key, amount));
            }
        }
        if fields[3] != "-" {
            for part in fields[3].split(',') {
                let (key, amount) = split_amount(part).ok_or_else(|| parse("bad payee"))?;
                ops.push(OpSpec::increment(key, amount));
            }
        }
        if fields[4] != "-" {
            for part in fields[4].split(';') {
                let bits: Vec<&str> = part.split(':').collect();
                match bits.as_slice() {
                    [key, "read"] => ops.push(OpSpec::read(*key)),
                    [key, "assign", v] => ops.push(OpSpec::assign(
                        *key,
                        v.parse::<Amount>().map_err(|_| parse("bad assign"))?,
                    )),
                    [key, "incr", v] => ops.push(OpSpec::increment(
                        *key,
                        v.parse::<Amount>().map_err(|_| parse("bad incr"))?,
                    )),
                    [key, "decr", v] => ops.push(OpSpec::decrement(
                        *key,
                        v.parse::<Amount>().map_err(|_| parse("bad decr"))?,
                    )),
                    _ => return Err(parse("bad shared op")),
                }
            }
        }
        let submit: TimeNs = fields[5]
            .strip_prefix('@')
            .ok_or_else(|| parse("missing @time"))?
            .parse()
            .map_err(|_| parse("bad time"))?;
        txs.push(Arc::new(Transaction::signed(TxId(id), ops, submit, store)));
    }
    Ok(txs)
}

fn split_amount(part: &str) -> Option<(ObjectKey, Amount)> {
    let (key, amount) = part.rsplit_once(':')?;
    Some((ObjectKey::new(key), amount.parse().ok()?))
}

/// Kind counts of a generated list.
pub fn kind_counts(txs: &[Arc<Transaction>]) -> BTreeMap<crate::domain::TxKind, usize> {
    let mut counts = BTreeMap::new();
    for tx in txs {
        *counts.entry(tx.kind).or_insert(0) += 1;
    }
    counts
}
