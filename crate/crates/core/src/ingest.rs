//! Raw ledger parsing: CSV block records into typed [`InteractionRecord`]s.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder, MAX_LEN};
use crate::error::{Error, Result};

pub const LEDGER_HEADER: [&str; 8] = [
    "blockNumber",
    "timestamp",
    "from",
    "to",
    "fromIsContract",
    "toIsContract",
    "callingFunction",
    "value",
];

const WEI_PER_ETHER: u128 = 1_000_000_000_000_000_000;
const ETHER_DECIMALS: usize = 18;

/// Amount in wei, held as 128-bit fixed point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Wei(pub u128);

impl Wei {
    pub const ZERO: Wei = Wei(0);

    pub fn checked_add(self, other: Wei) -> Option<Wei> {
        self.0.checked_add(other.0).map(Wei)
    }

    /// Lossy conversion used only when amounts enter float feature vectors.
    pub fn as_ether_f64(self) -> f64 {
        let whole = (self.0 / WEI_PER_ETHER) as f64;
        let frac = (self.0 % WEI_PER_ETHER) as f64 / WEI_PER_ETHER as f64;
        whole + frac
    }

    pub fn parse(text: &str, unit: ValueUnit) -> std::result::Result<Wei, String> {
        let text = text.trim();
        if text.is_empty() {
            return Err("empty value".into());
        }
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (text, None),
        };
        let digits_only = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
        if !digits_only(int_part) || frac_part.is_some_and(|f| !digits_only(f)) {
            return Err(format!("non-numeric value {text:?}"));
        }
        let whole: u128 = int_part.parse().map_err(|_| format!("value {text:?} out of range"))?;
        match unit {
            ValueUnit::Wei => {
                if frac_part.is_some_and(|f| f.bytes().any(|b| b != b'0')) {
                    return Err(format!("fractional wei amount {text:?}"));
                }
                Ok(Wei(whole))
            }
            ValueUnit::Ether => {
                let frac = frac_part.unwrap_or("");
                let significant = frac.trim_end_matches('0');
                if significant.len() > ETHER_DECIMALS {
                    return Err(format!("more than 18 decimals in {text:?}"));
                }
                let mut frac_wei: u128 = 0;
                for b in significant.bytes() {
                    frac_wei = frac_wei * 10 + u128::from(b - b'0');
                }
                frac_wei *= 10u128.pow((ETHER_DECIMALS - significant.len()) as u32);
                whole
                    .checked_mul(WEI_PER_ETHER)
                    .and_then(|w| w.checked_add(frac_wei))
                    .map(Wei)
                    .ok_or_else(|| format!("value {text:?} out of range"))
            }
        }
    }

    /// Shortest exact decimal rendering in the given unit.
    pub fn format(self, unit: ValueUnit) -> String {
        match unit {
            ValueUnit::Wei => self.0.to_string(),
            ValueUnit::Ether => {
                let whole = self.0 / WEI_PER_ETHER;
                let frac = self.0 % WEI_PER_ETHER;
                if frac == 0 {
                    whole.to_string()
                } else {
                    let f = format!("{frac:018}");
                    format!("{whole}.{}", f.trim_end_matches('0'))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueUnit {
    Wei,
    #[default]
    Ether,
}

impl FromStr for ValueUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wei" => Ok(ValueUnit::Wei),
            "ether" | "eth" => Ok(ValueUnit::Ether),
            other => Err(Error::Config(format!("unknown value unit {other:?}"))),
        }
    }
}

/// One parsed transaction or contract call.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub block_number: u64,
    pub timestamp: u64,
    pub from_account: String,
    pub to_account: String,
    pub from_is_contract: bool,
    pub to_is_contract: bool,
    pub calling_function: Option<String>,
    pub value: Wei,
}

impl InteractionRecord {
    pub fn is_contract_call(&self) -> bool {
        self.calling_function.is_some()
    }

    pub fn is_transaction(&self) -> bool {
        self.calling_function.is_none()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParseOptions {
    pub strict: bool,
    pub unit: ValueUnit,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            strict: false,
            unit: ValueUnit::Ether,
        }
    }
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<InteractionRecord>,
    pub accepted: u64,
    pub rejected: u64,
    /// Row errors in file order; empty in strict mode (the first error is returned instead).
    pub errors: Vec<Error>,
}

fn parse_bool(field: &str) -> Option<bool> {
    match field.trim() {
        "true" | "True" | "TRUE" | "1" => Some(true),
        "false" | "False" | "FALSE" | "0" => Some(false),
        _ => None,
    }
}

fn parse_row(row: &csv::StringRecord, unit: ValueUnit) -> std::result::Result<InteractionRecord, String> {
    if row.len() != LEDGER_HEADER.len() {
        return Err(format!("expected {} fields, found {}", LEDGER_HEADER.len(), row.len()));
    }
    let block_number = row[0]
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("non-numeric blockNumber {:?}", &row[0]))?;
    let timestamp = row[1]
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("non-numeric timestamp {:?}", &row[1]))?;
    let from_account = row[2].trim();
    let to_account = row[3].trim();
    if from_account.is_empty() || to_account.is_empty() {
        return Err("empty account id".into());
    }
    let from_is_contract = parse_bool(&row[4]).ok_or_else(|| format!("unparsable fromIsContract {:?}", &row[4]))?;
    let to_is_contract = parse_bool(&row[5]).ok_or_else(|| format!("unparsable toIsContract {:?}", &row[5]))?;
    let function = row[6].trim();
    let calling_function = if function.is_empty() {
        None
    } else if !to_is_contract {
        return Err(format!("callingFunction {function:?} on a non-contract receiver"));
    } else {
        Some(function.to_string())
    };
    let value = Wei::parse(&row[7], unit)?;
    Ok(InteractionRecord {
        block_number,
        timestamp,
        from_account: from_account.to_string(),
        to_account: to_account.to_string(),
        from_is_contract,
        to_is_contract,
        calling_function,
        value,
    })
}

/// Streaming reader over a header-bearing ledger CSV.
///
/// Yields `(row_number, result)`; row numbers count data rows from 1, header excluded.
pub struct RecordReader<R: Read> {
    inner: csv::Reader<R>,
    row: csv::StringRecord,
    row_number: u64,
    unit: ValueUnit,
}

impl<R: Read> RecordReader<R> {
    pub fn new(source: R, unit: ValueUnit) -> Result<Self> {
        let mut inner = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(source);
        let headers = inner.headers().map_err(|e| Error::format("ledger", e.to_string()))?;
        let found: Vec<&str> = headers.iter().map(str::trim).collect();
        if found != LEDGER_HEADER {
            return Err(Error::format(
                "ledger",
                format!("unexpected header {found:?}, expected {LEDGER_HEADER:?}"),
            ));
        }
        Ok(Self {
            inner,
            row: csv::StringRecord::new(),
            row_number: 0,
            unit,
        })
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<InteractionRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let read = self.inner.read_record(&mut self.row);
        self.row_number += 1;
        let line = self.row_number;
        match read {
            Ok(false) => None,
            Ok(true) => Some(parse_row(&self.row, self.unit).map_err(|reason| Error::MalformedRow { line, reason })),
            Err(e) => Some(Err(Error::MalformedRow {
                line,
                reason: e.to_string(),
            })),
        }
    }
}

/// Parses every data row. In strict mode the first bad row aborts; otherwise bad rows are
/// skipped, counted, and their errors collected.
pub fn parse_records<R: Read>(source: R, options: ParseOptions) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for item in RecordReader::new(source, options.unit)? {
        match item {
            Ok(rec) => {
                out.records.push(rec);
                out.accepted += 1;
            }
            Err(e) if options.strict => return Err(e),
            Err(e) => {
                out.rejected += 1;
                out.errors.push(e);
            }
        }
    }
    Ok(out)
}

/// Opens a ledger file, transparently decompressing `.gz`.
pub fn open_ledger(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    let reader = BufReader::with_capacity(1 << 20, file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

/// Writes records in canonical ledger CSV form (the inverse of [`parse_records`]).
pub fn write_ledger_csv<W: Write>(out: W, records: &[InteractionRecord], unit: ValueUnit) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LEDGER_HEADER).map_err(csv_io)?;
    for r in records {
        w.write_record([
            r.block_number.to_string().as_str(),
            r.timestamp.to_string().as_str(),
            &r.from_account,
            &r.to_account,
            if r.from_is_contract { "true" } else { "false" },
            if r.to_is_contract { "true" } else { "false" },
            r.calling_function.as_deref().unwrap_or(""),
            &r.value.format(unit),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format("csv", format!("{other:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Eoa,
    Ca,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Eoa => "EOA",
            Role::Ca => "CA",
        })
    }
}

const SEEN_EOA: u8 = 1;
const SEEN_CA: u8 = 2;

/// Account roles accumulated from records. Merging is a bitwise OR of observed flags,
/// so shards can be folded in any order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoleMap {
    flags: BTreeMap<String, u8>,
}

impl RoleMap {
    pub fn observe(&mut self, account: &str, is_contract: bool) {
        let bit = if is_contract { SEEN_CA } else { SEEN_EOA };
        match self.flags.get_mut(account) {
            Some(f) => *f |= bit,
            None => {
                self.flags.insert(account.to_string(), bit);
            }
        }
    }

    pub fn merge(&mut self, other: &RoleMap) {
        for (k, v) in &other.flags {
            *self.flags.entry(k.clone()).or_insert(0) |= v;
        }
    }

    pub fn get(&self, account: &str) -> Option<Role> {
        self.flags.get(account).map(|&f| Self::resolve(f))
    }

    fn resolve(flags: u8) -> Role {
        if flags & SEEN_CA != 0 {
            Role::Ca
        } else {
            Role::Eoa
        }
    }

    /// Number of accounts flagged both as contract and as non-contract (resolved to CA).
    pub fn conflicts(&self) -> usize {
        self.flags.values().filter(|&&f| f == SEEN_EOA | SEEN_CA).count()
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Role)> {
        self.flags.iter().map(|(k, &f)| (k.as_str(), Self::resolve(f)))
    }
}

pub fn account_roles(records: &[InteractionRecord]) -> RoleMap {
    let mut roles = RoleMap::default();
    for r in records {
        roles.observe(&r.from_account, r.from_is_contract);
        roles.observe(&r.to_account, r.to_is_contract);
    }
    if roles.conflicts() > 0 {
        log::warn!(
            "{} accounts carry conflicting contract flags; resolved as CA",
            roles.conflicts()
        );
    }
    roles
}

const RECORDS_MAGIC: &[u8; 4] = b"BGCR";
const RECORDS_VERSION: u32 = 1;

/// Binary records file: interned account and function tables followed by fixed-layout rows.
///
/// ```text
/// "BGCR" u32:version
/// u64:n_accounts  { str }*
/// u64:n_functions { str }*
/// u64:n_records   { u64:block u64:ts u32:from u32:to u8:flags [u32:function] u128:wei }*
/// flags: bit0 fromIsContract, bit1 toIsContract, bit2 has function
/// ```
pub fn write_records_bin(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let mut accounts: BTreeMap<&str, u32> = BTreeMap::new();
    let mut functions: BTreeMap<&str, u32> = BTreeMap::new();
    for r in records {
        accounts.insert(&r.from_account, 0);
        accounts.insert(&r.to_account, 0);
        if let Some(f) = &r.calling_function {
            functions.insert(f, 0);
        }
    }
    for (i, v) in accounts.values_mut().enumerate() {
        *v = i as u32;
    }
    for (i, v) in functions.values_mut().enumerate() {
        *v = i as u32;
    }
    let mut enc = Encoder::new(BufWriter::new(File::create(path)?));
    enc.header(RECORDS_MAGIC, RECORDS_VERSION)?;
    enc.len(accounts.len())?;
    for a in accounts.keys() {
        enc.str(a)?;
    }
    enc.len(functions.len())?;
    for f in functions.keys() {
        enc.str(f)?;
    }
    enc.len(records.len())?;
    for r in records {
        enc.u64(r.block_number)?;
        enc.u64(r.timestamp)?;
        enc.u32(accounts[r.from_account.as_str()])?;
        enc.u32(accounts[r.to_account.as_str()])?;
        let flags = u8::from(r.from_is_contract)
            | (u8::from(r.to_is_contract) << 1)
            | (u8::from(r.calling_function.is_some()) << 2);
        enc.u8(flags)?;
        if let Some(f) = &r.calling_function {
            enc.u32(functions[f.as_str()])?;
        }
        enc.u128(r.value.0)?;
    }
    enc.finish()?;
    Ok(())
}

pub fn read_records_bin(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut dec = Decoder::new(file, path.display().to_string());
    dec.header(RECORDS_MAGIC, RECORDS_VERSION)?;
    let n_accounts = dec.len(MAX_LEN)?;
    let accounts: Vec<String> = (0..n_accounts).map(|_| dec.str()).collect::<Result<_>>()?;
    let n_functions = dec.len(MAX_LEN)?;
    let functions: Vec<String> = (0..n_functions).map(|_| dec.str()).collect::<Result<_>>()?;
    let n = dec.len(MAX_LEN)?;
    let mut records = Vec::with_capacity(n.min(1 << 24));
    let lookup = |table: &[String], i: u32, dec: &Decoder<_>| {
        table
            .get(i as usize)
            .cloned()
            .ok_or_else(|| dec.err(format!("string index {i} out of range")))
    };
    for _ in 0..n {
        let block_number = dec.u64()?;
        let timestamp = dec.u64()?;
        let from = dec.u32()?;
        let to = dec.u32()?;
        let flags = dec.u8()?;
        let calling_function = if flags & 4 != 0 {
            let f = dec.u32()?;
            Some(lookup(&functions, f, &dec)?)
        } else {
            None
        };
        let value = Wei(dec.u128()?);
        records.push(InteractionRecord {
            block_number,
            timestamp,
            from_account: lookup(&accounts, from, &dec)?,
            to_account: lookup(&accounts, to, &dec)?,
            from_is_contract: flags & 1 != 0,
            to_is_contract: flags & 2 != 0,
            calling_function,
            value,
        });
    }
    dec.expect_eof()?;
    Ok(records)
}
