//! NetFlow ingestion: CSV parsing, the 14-feature flow record, canonical JSON
//! serialization and class-balanced build/eval splits.
//!
//! Any NetFlow CSV export can be bound to the fixed feature schema through a
//! [`SchemaMap`], which names the source column for each canonical feature and
//! for the label.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{self, BufReader, Read};
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Canonical feature names, in schema order.
pub const FEATURE_NAMES: [&str; 14] = [
    "src_ip",
    "dst_ip",
    "dst_port",
    "protocol",
    "in_bytes",
    "out_bytes",
    "in_pkts",
    "out_pkts",
    "flow_duration_ms",
    "avg_iat_src_to_dst",
    "avg_iat_dst_to_src",
    "throughput_src_to_dst",
    "throughput_dst_to_src",
    "tcp_flags_aggregate",
];

/// Features with a numeric value, in schema order. Used by rule induction.
pub const NUMERIC_FEATURES: [&str; 11] = [
    "dst_port",
    "in_bytes",
    "out_bytes",
    "in_pkts",
    "out_pkts",
    "flow_duration_ms",
    "avg_iat_src_to_dst",
    "avg_iat_dst_to_src",
    "throughput_src_to_dst",
    "throughput_dst_to_src",
    "tcp_flags_aggregate",
];

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("input is empty (no header record)")]
    EmptyFile,
    #[error("mapped column `{0}` is absent from the header")]
    MissingColumn(String),
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: unparseable {field} address `{value}`")]
    UnparseableIp {
        line: u64,
        field: &'static str,
        value: String,
    },
    #[error("protocol number {0} is outside 0..=255")]
    OutOfRange(i64),
    #[error("class `{0}` has no rows in the input")]
    EmptyClass(String),
    #[error("invalid class set: {0}")]
    InvalidClassSet(String),
    #[error("flow id {0} listed in the manifest is not present in the dataset")]
    UnknownFlowId(u64),
    #[error("invalid flow record: {0}")]
    InvalidRecord(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("cannot open dataset {path}: {source}")]
    OpenDataset { path: std::path::PathBuf, source: io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Binds each canonical feature (and the label) to a source column name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaMap {
    pub src_ip: String,
    pub dst_ip: String,
    pub dst_port: String,
    pub protocol: String,
    pub in_bytes: String,
    pub out_bytes: String,
    pub in_pkts: String,
    pub out_pkts: String,
    pub flow_duration_ms: String,
    pub avg_iat_src_to_dst: String,
    pub avg_iat_dst_to_src: String,
    pub throughput_src_to_dst: String,
    pub throughput_dst_to_src: String,
    pub tcp_flags_aggregate: String,
    pub label: String,
}

impl SchemaMap {
    /// Source columns carry the canonical names; the label column is `label`.
    pub fn identity() -> Self {
        let mut cols = FEATURE_NAMES.iter().map(|s| s.to_string());
        let mut next = || cols.next().unwrap();
        SchemaMap {
            src_ip: next(),
            dst_ip: next(),
            dst_port: next(),
            protocol: next(),
            in_bytes: next(),
            out_bytes: next(),
            in_pkts: next(),
            out_pkts: next(),
            flow_duration_ms: next(),
            avg_iat_src_to_dst: next(),
            avg_iat_dst_to_src: next(),
            throughput_src_to_dst: next(),
            throughput_dst_to_src: next(),
            tcp_flags_aggregate: next(),
            label: "label".to_string(),
        }
    }

    /// Column names used by the University of Queensland NetFlow exports.
    pub fn uq_netflow() -> Self {
        SchemaMap {
            src_ip: "IPV4_SRC_ADDR".into(),
            dst_ip: "IPV4_DST_ADDR".into(),
            dst_port: "L4_DST_PORT".into(),
            protocol: "PROTOCOL".into(),
            in_bytes: "IN_BYTES".into(),
            out_bytes: "OUT_BYTES".into(),
            in_pkts: "IN_PKTS".into(),
            out_pkts: "OUT_PKTS".into(),
            flow_duration_ms: "FLOW_DURATION_MILLISECONDS".into(),
            avg_iat_src_to_dst: "SRC_TO_DST_IAT_AVG".into(),
            avg_iat_dst_to_src: "DST_TO_SRC_IAT_AVG".into(),
            throughput_src_to_dst: "SRC_TO_DST_AVG_THROUGHPUT".into(),
            throughput_dst_to_src: "DST_TO_SRC_AVG_THROUGHPUT".into(),
            tcp_flags_aggregate: "TCP_FLAGS".into(),
            label: "Attack".into(),
        }
    }

    /// Source column for a canonical feature name.
    pub fn column_for(&self, feature: &str) -> Option<&str> {
        let col = match feature {
            "src_ip" => &self.src_ip,
            "dst_ip" => &self.dst_ip,
            "dst_port" => &self.dst_port,
            "protocol" => &self.protocol,
            "in_bytes" => &self.in_bytes,
            "out_bytes" => &self.out_bytes,
            "in_pkts" => &self.in_pkts,
            "out_pkts" => &self.out_pkts,
            "flow_duration_ms" => &self.flow_duration_ms,
            "avg_iat_src_to_dst" => &self.avg_iat_src_to_dst,
            "avg_iat_dst_to_src" => &self.avg_iat_dst_to_src,
            "throughput_src_to_dst" => &self.throughput_src_to_dst,
            "throughput_dst_to_src" => &self.throughput_dst_to_src,
            "tcp_flags_aggregate" => &self.tcp_flags_aggregate,
            "label" => &self.label,
            _ => return None,
        };
        Some(col.as_str())
    }

    fn mapped_columns(&self) -> impl Iterator<Item = &str> {
        FEATURE_NAMES
            .iter()
            .chain(std::iter::once(&"label"))
            .map(move |f| self.column_for(f).expect("canonical name"))
    }
}

impl Default for SchemaMap {
    fn default() -> Self {
        Self::identity()
    }
}

// ---------------------------------------------------------------------------
// Class labels

/// A traffic class. Comparison is case-insensitive on the name.
#[derive(Clone, Debug)]
pub enum ClassLabel {
    /// Member of the configured class set, in its canonical casing.
    Known(String),
    /// Anything else: off-schema agent output or a dataset label outside the set.
    Unknown(String),
}

impl ClassLabel {
    pub fn unknown() -> Self {
        ClassLabel::Unknown("UNKNOWN".to_string())
    }

    /// The literal text: class name or the unknown payload.
    pub fn name(&self) -> &str {
        match self {
            ClassLabel::Known(s) | ClassLabel::Unknown(s) => s,
        }
    }

    pub fn is_known(&self) -> bool {
        matches!(self, ClassLabel::Known(_))
    }
}

impl PartialEq for ClassLabel {
    fn eq(&self, other: &Self) -> bool {
        self.is_known() == other.is_known() && self.name().eq_ignore_ascii_case(other.name())
    }
}

impl Eq for ClassLabel {}

impl Hash for ClassLabel {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.is_known().hash(state);
        self.name().to_ascii_lowercase().hash(state);
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Known(s) => f.write_str(s),
            ClassLabel::Unknown(s) if s.eq_ignore_ascii_case("UNKNOWN") => f.write_str("UNKNOWN"),
            ClassLabel::Unknown(s) => write!(f, "UNKNOWN({s})"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelRepr {
    Known(String),
    Unknown { unknown: String },
}

impl Serialize for ClassLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ClassLabel::Known(n) => LabelRepr::Known(n.clone()),
            ClassLabel::Unknown(t) => LabelRepr::Unknown { unknown: t.clone() },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match LabelRepr::deserialize(d)? {
            LabelRepr::Known(n) => ClassLabel::Known(n),
            LabelRepr::Unknown { unknown } => ClassLabel::Unknown(unknown),
        })
    }
}

/// The configured set of target classes, in a fixed order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    pub fn new<I, S>(names: I) -> Result<Self, FlowError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(|s| s.into().trim().to_string()).collect();
        if names.is_empty() {
            return Err(FlowError::InvalidClassSet("empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(FlowError::InvalidClassSet("blank class name".into()));
            }
            if n.eq_ignore_ascii_case("unknown") {
                return Err(FlowError::InvalidClassSet("`Unknown` is reserved".into()));
            }
            if names[..i].iter().any(|m| m.eq_ignore_ascii_case(n)) {
                return Err(FlowError::InvalidClassSet(format!("duplicate class `{n}`")));
            }
        }
        Ok(ClassSet { names })
    }

    pub fn nf_bot_iot() -> Self {
        Self::new(["Benign", "DDoS", "DoS", "Reconnaissance"]).unwrap()
    }

    pub fn nf_ton_iot() -> Self {
        Self::new([
            "Benign",
            "Scanning",
            "DDoS",
            "Backdoor",
            "DoS",
            "Injection",
            "Password",
            "XSS",
            "MITM",
        ])
        .unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn labels(&self) -> impl Iterator<Item = ClassLabel> + '_ {
        self.names.iter().map(|n| ClassLabel::Known(n.clone()))
    }

    /// Trim, match case-insensitively, and return the canonical label.
    pub fn resolve(&self, text: &str) -> ClassLabel {
        let t = text.trim();
        match self.names.iter().find(|n| n.eq_ignore_ascii_case(t)) {
            Some(n) => ClassLabel::Known(n.clone()),
            None => ClassLabel::Unknown(t.to_string()),
        }
    }

    pub fn index_of(&self, label: &ClassLabel) -> Option<usize> {
        match label {
            ClassLabel::Known(n) => self.names.iter().position(|m| m.eq_ignore_ascii_case(n)),
            ClassLabel::Unknown(_) => None,
        }
    }

    pub fn contains(&self, label: &ClassLabel) -> bool {
        self.index_of(label).is_some()
    }
}

impl Serialize for ClassSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        ClassSet::new(names).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Records

/// The normalized 14-feature flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRecord {
    pub src_ip: String,
    pub dst_ip: String,
    pub dst_port: u16,
    pub protocol: String,
    pub in_bytes: u64,
    pub out_bytes: u64,
    pub in_pkts: u64,
    pub out_pkts: u64,
    pub flow_duration_ms: u64,
    pub avg_iat_src_to_dst: f64,
    pub avg_iat_dst_to_src: f64,
    pub throughput_src_to_dst: f64,
    pub throughput_dst_to_src: f64,
    pub tcp_flags_aggregate: u8,
}

impl FlowRecord {
    /// All-zero record with the given protocol and `0.0.0.0` addresses.
    pub fn zeroed(protocol: &str) -> Self {
        FlowRecord {
            src_ip: "0.0.0.0".into(),
            dst_ip: "0.0.0.0".into(),
            dst_port: 0,
            protocol: protocol.into(),
            in_bytes: 0,
            out_bytes: 0,
            in_pkts: 0,
            out_pkts: 0,
            flow_duration_ms: 0,
            avg_iat_src_to_dst: 0.0,
            avg_iat_dst_to_src: 0.0,
            throughput_src_to_dst: 0.0,
            throughput_dst_to_src: 0.0,
            tcp_flags_aggregate: 0,
        }
    }

    /// Value of a numeric feature by canonical name.
    pub fn numeric(&self, feature: &str) -> Option<f64> {
        Some(match feature {
            "dst_port" => self.dst_port as f64,
            "in_bytes" => self.in_bytes as f64,
            "out_bytes" => self.out_bytes as f64,
            "in_pkts" => self.in_pkts as f64,
            "out_pkts" => self.out_pkts as f64,
            "flow_duration_ms" => self.flow_duration_ms as f64,
            "avg_iat_src_to_dst" => self.avg_iat_src_to_dst,
            "avg_iat_dst_to_src" => self.avg_iat_dst_to_src,
            "throughput_src_to_dst" => self.throughput_src_to_dst,
            "throughput_dst_to_src" => self.throughput_dst_to_src,
            "tcp_flags_aggregate" => self.tcp_flags_aggregate as f64,
            _ => return None,
        })
    }

    /// Numeric features in schema order.
    pub fn numeric_features(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        NUMERIC_FEATURES
            .iter()
            .map(move |f| (*f, self.numeric(f).unwrap()))
    }

    /// Check the post-normalization invariants.
    pub fn validate(&self) -> Result<(), FlowError> {
        for (name, ip) in [("src_ip", &self.src_ip), ("dst_ip", &self.dst_ip)] {
            if ip.parse::<Ipv4Addr>().is_err() {
                return Err(FlowError::InvalidRecord(format!("{name} `{ip}` is not dotted-quad")));
            }
        }
        if canonical_protocol(&self.protocol).as_deref() != Some(self.protocol.as_str()) {
            return Err(FlowError::InvalidRecord(format!(
                "protocol `{}` is not canonical",
                self.protocol
            )));
        }
        for (name, v) in self.numeric_features() {
            if !v.is_finite() || v < 0.0 {
                return Err(FlowError::InvalidRecord(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Parse canonical JSON back into a validated record.
    pub fn from_json(text: &str) -> Result<Self, FlowError> {
        let rec: FlowRecord = serde_json::from_str(text)?;
        rec.validate()?;
        Ok(rec)
    }
}

/// A flow with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFlow {
    pub flow_id: u64,
    pub record: FlowRecord,
    pub label: ClassLabel,
}

// ---------------------------------------------------------------------------
// Protocol mapping

/// Map an IANA protocol number to its categorical name.
pub fn normalize_protocol(proto_number: i64) -> Result<String, FlowError> {
    match proto_number {
        6 => Ok("TCP".into()),
        17 => Ok("UDP".into()),
        1 => Ok("ICMP".into()),
        n @ 0..=255 => Ok(format!("PROTO_{n}")),
        n => Err(FlowError::OutOfRange(n)),
    }
}

/// Canonical protocol for a textual value: a number, `tcp`/`udp`/`icmp` in any
/// case, or `PROTO_<n>`.
fn canonical_protocol(text: &str) -> Option<String> {
    let t = text.trim();
    if let Ok(n) = t.parse::<i64>() {
        return normalize_protocol(n).ok();
    }
    if let Ok(x) = t.parse::<f64>() {
        if x.fract() == 0.0 {
            return normalize_protocol(x as i64).ok();
        }
        return None;
    }
    let upper = t.to_ascii_uppercase();
    match upper.as_str() {
        "TCP" => Some("TCP".into()),
        "UDP" => Some("UDP".into()),
        "ICMP" => Some("ICMP".into()),
        _ => upper
            .strip_prefix("PROTO_")
            .and_then(|n| n.parse::<i64>().ok())
            .and_then(|n| normalize_protocol(n).ok()),
    }
}

// ---------------------------------------------------------------------------
// CSV parsing

/// One CSV record with the header it was read under.
#[derive(Clone, Debug)]
pub struct RawFlowRow {
    header: Arc<[String]>,
    values: Vec<String>,
    pub line_number: u64,
}

impl RawFlowRow {
    pub fn new(header: Arc<[String]>, values: Vec<String>, line_number: u64) -> Self {
        RawFlowRow {
            header,
            values,
            line_number,
        }
    }

    /// (column name, value) pairs in file order.
    pub fn columns(&self) -> impl Iterator<Item = (&str, &str)> {
        self.header.iter().map(String::as_str).zip(self.values.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, column: &str) -> Option<&str> {
        self.header.iter().position(|h| h == column).map(|i| self.values[i].as_str())
    }
}

/// Lazy reader over the data records of a flow CSV.
pub struct FlowCsvReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    header: Arc<[String]>,
}

impl<R: Read> FlowCsvReader<R> {
    pub fn header(&self) -> &[String] {
        &self.header
    }
}

impl<R: Read> Iterator for FlowCsvReader<R> {
    type Item = Result<RawFlowRow, FlowError>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = match self.records.next()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e.into())),
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != self.header.len() {
            return Some(Err(FlowError::RaggedRow {
                line,
                expected: self.header.len(),
                found: rec.len(),
            }));
        }
        let values = rec.iter().map(str::to_string).collect();
        Some(Ok(RawFlowRow::new(self.header.clone(), values, line)))
    }
}

/// Read the header and validate the schema map against it. Data records are
/// yielded lazily; ragged records surface as `RaggedRow` items.
pub fn parse_flow_csv<R: Read>(input: R, schema: &SchemaMap) -> Result<FlowCsvReader<R>, FlowError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(FlowError::EmptyFile);
    }
    for col in schema.mapped_columns() {
        if !header.iter().any(|h| h == col) {
            return Err(FlowError::MissingColumn(col.to_string()));
        }
    }
    Ok(FlowCsvReader {
        records: rdr.into_records(),
        header: header.into(),
    })
}

/// Open a dataset file; `.gz` files are decompressed on the fly.
pub fn open_dataset(path: &Path) -> Result<Box<dyn Read>, FlowError> {
    let file = File::open(path).map_err(|source| FlowError::OpenDataset { path: path.to_path_buf(), source })?;
    let file = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(flate2::read::MultiGzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

// ---------------------------------------------------------------------------
// Normalization

/// Why a row was not turned into a flow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: String,
}

/// Counters collected while ingesting a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestionReport {
    pub rows_read: u64,
    pub rows_accepted: u64,
    pub rows_rejected: u64,
    /// Values replaced by zero (negative, non-numeric, missing or out of range).
    pub normalized_values: u64,
    pub normalized_by_field: BTreeMap<String, u64>,
    /// Rows whose label is outside the class set, by literal label.
    pub off_schema_labels: BTreeMap<String, u64>,
    /// First rejections, capped at [`IngestionReport::MAX_REJECTIONS`].
    pub rejections: Vec<Rejection>,
}

impl IngestionReport {
    pub const MAX_REJECTIONS: usize = 1000;

    fn count_normalized(&mut self, field: &str) {
        self.normalized_values += 1;
        *self.normalized_by_field.entry(field.to_string()).or_default() += 1;
    }

    fn reject(&mut self, line: u64, reason: String) {
        self.rows_rejected += 1;
        if self.rejections.len() < Self::MAX_REJECTIONS {
            self.rejections.push(Rejection { line, reason });
        }
    }
}

fn cell<'a>(row: &'a RawFlowRow, schema: &SchemaMap, feature: &str) -> &'a str {
    schema
        .column_for(feature)
        .and_then(|c| row.get(c))
        .unwrap_or("")
        .trim()
}

fn parse_ip(row: &RawFlowRow, schema: &SchemaMap, field: &'static str) -> Result<String, FlowError> {
    let raw = cell(row, schema, field);
    let cleaned = raw.trim_matches(|c: char| c == '"' || c == '\'' || c.is_whitespace());
    cleaned
        .parse::<Ipv4Addr>()
        .map(|ip| ip.to_string())
        .map_err(|_| FlowError::UnparseableIp {
            line: row.line_number,
            field,
            value: raw.to_string(),
        })
}

fn parse_nonneg(text: &str) -> Option<f64> {
    let v = text.parse::<f64>().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v)
}

fn int_field(row: &RawFlowRow, schema: &SchemaMap, field: &str, max: u64, report: &mut IngestionReport) -> u64 {
    let text = cell(row, schema, field);
    let parsed = text
        .parse::<u64>()
        .ok()
        .or_else(|| parse_nonneg(text).map(|v| v.round()).filter(|v| *v <= u64::MAX as f64).map(|v| v as u64));
    match parsed {
        Some(v) if v <= max => v,
        _ => {
            report.count_normalized(field);
            0
        }
    }
}

fn real_field(row: &RawFlowRow, schema: &SchemaMap, field: &str, report: &mut IngestionReport) -> f64 {
    match parse_nonneg(cell(row, schema, field)) {
        Some(v) => v,
        None => {
            report.count_normalized(field);
            0.0
        }
    }
}

/// Build the normalized 14-feature record from a raw row. Invalid numeric
/// values become zero and are counted in `report`; bad addresses reject the row.
pub fn select_and_normalize(
    row: &RawFlowRow,
    schema: &SchemaMap,
    report: &mut IngestionReport,
) -> Result<FlowRecord, FlowError> {
    let src_ip = parse_ip(row, schema, "src_ip")?;
    let dst_ip = parse_ip(row, schema, "dst_ip")?;
    let protocol = match canonical_protocol(cell(row, schema, "protocol")) {
        Some(p) => p,
        None => {
            report.count_normalized("protocol");
            normalize_protocol(0)?
        }
    };
    Ok(FlowRecord {
        src_ip,
        dst_ip,
        dst_port: int_field(row, schema, "dst_port", u16::MAX as u64, report) as u16,
        protocol,
        in_bytes: int_field(row, schema, "in_bytes", u64::MAX, report),
        out_bytes: int_field(row, schema, "out_bytes", u64::MAX, report),
        in_pkts: int_field(row, schema, "in_pkts", u64::MAX, report),
        out_pkts: int_field(row, schema, "out_pkts", u64::MAX, report),
        flow_duration_ms: int_field(row, schema, "flow_duration_ms", u64::MAX, report),
        avg_iat_src_to_dst: real_field(row, schema, "avg_iat_src_to_dst", report),
        avg_iat_dst_to_src: real_field(row, schema, "avg_iat_dst_to_src", report),
        throughput_src_to_dst: real_field(row, schema, "throughput_src_to_dst", report),
        throughput_dst_to_src: real_field(row, schema, "throughput_dst_to_src", report),
        tcp_flags_aggregate: int_field(row, schema, "tcp_flags_aggregate", u8::MAX as u64, report) as u8,
    })
}

/// Read a whole dataset into labeled flows. `flow_id` is the zero-based data
/// record index, so ids are stable across runs even when rows are rejected.
pub fn load_labeled_flows<R: Read>(
    input: R,
    schema: &SchemaMap,
    classes: &ClassSet,
) -> Result<(Vec<LabeledFlow>, IngestionReport), FlowError> {
    let reader = parse_flow_csv(input, schema)?;
    let mut report = IngestionReport::default();
    let mut flows = Vec::new();
    for (idx, item) in reader.enumerate() {
        report.rows_read += 1;
        let row = match item {
            Ok(row) => row,
            Err(e @ FlowError::RaggedRow { line, .. }) => {
                report.reject(line, e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        let label = classes.resolve(cell(&row, schema, "label"));
        if !label.is_known() {
            *report.off_schema_labels.entry(label.name().to_string()).or_default() += 1;
            report.reject(row.line_number, format!("label `{}` outside class set", label.name()));
            continue;
        }
        match select_and_normalize(&row, schema, &mut report) {
            Ok(record) => {
                report.rows_accepted += 1;
                flows.push(LabeledFlow {
                    flow_id: idx as u64,
                    record,
                    label,
                });
            }
            Err(e @ FlowError::UnparseableIp { .. }) => report.reject(row.line_number, e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok((flows, report))
}

// ---------------------------------------------------------------------------
// Canonical JSON

/// Real formatting: at most six fractional digits, trailing zeros trimmed.
pub fn format_real(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return "0".to_string();
    }
    let mut s = format!("{x:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Single-line JSON with keys in schema order. Equal records give identical bytes.
pub fn to_canonical_json(r: &FlowRecord) -> String {
    let quote = |s: &str| serde_json::to_string(s).expect("string serialization");
    let mut out = String::with_capacity(384);
    out.push('{');
    let mut first = true;
    let mut field = |key: &str, val: String| {
        if !first {
            out.push(',');
        }
        first = false;
        out.push('"');
        out.push_str(key);
        out.push_str("\":");
        out.push_str(&val);
    };
    field("src_ip", quote(&r.src_ip));
    field("dst_ip", quote(&r.dst_ip));
    field("dst_port", r.dst_port.to_string());
    field("protocol", quote(&r.protocol));
    field("in_bytes", r.in_bytes.to_string());
    field("out_bytes", r.out_bytes.to_string());
    field("in_pkts", r.in_pkts.to_string());
    field("out_pkts", r.out_pkts.to_string());
    field("flow_duration_ms", r.flow_duration_ms.to_string());
    field("avg_iat_src_to_dst", format_real(r.avg_iat_src_to_dst));
    field("avg_iat_dst_to_src", format_real(r.avg_iat_dst_to_src));
    field("throughput_src_to_dst", format_real(r.throughput_src_to_dst));
    field("throughput_dst_to_src", format_real(r.throughput_dst_to_src));
    field("tcp_flags_aggregate", r.tcp_flags_aggregate.to_string());
    out.push('}');
    out
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplitCount {
    pub class: String,
    pub available: u64,
    pub build: u64,
    pub eval: u64,
    /// Rows missing to satisfy both quotas.
    pub deficit: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub build_set: Vec<LabeledFlow>,
    pub eval_set: Vec<LabeledFlow>,
    pub seed: u64,
    pub per_class_quota_build: u64,
    pub per_class_quota_eval: u64,
    pub class_counts: Vec<ClassSplitCount>,
}

/// Serializable description of a split: what `sample` writes to disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub quota_build: u64,
    pub quota_eval: u64,
    pub per_class_quota_build: u64,
    pub per_class_quota_eval: u64,
    pub classes: Vec<ClassSplitCount>,
    pub build_ids: Vec<u64>,
    pub eval_ids: Vec<u64>,
}

impl DatasetSplit {
    pub fn manifest(&self, quota_build: u64, quota_eval: u64) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            quota_build,
            quota_eval,
            per_class_quota_build: self.per_class_quota_build,
            per_class_quota_eval: self.per_class_quota_eval,
            classes: self.class_counts.clone(),
            build_ids: self.build_set.iter().map(|f| f.flow_id).collect(),
            eval_ids: self.eval_set.iter().map(|f| f.flow_id).collect(),
        }
    }
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization")
    }

    /// Materialize the build and eval sets, in manifest order.
    pub fn select(&self, flows: &[LabeledFlow]) -> Result<(Vec<LabeledFlow>, Vec<LabeledFlow>), FlowError> {
        let by_id: std::collections::HashMap<u64, &LabeledFlow> = flows.iter().map(|f| (f.flow_id, f)).collect();
        let pick = |ids: &[u64]| -> Result<Vec<LabeledFlow>, FlowError> {
            ids.iter()
                .map(|id| by_id.get(id).map(|f| (*f).clone()).ok_or(FlowError::UnknownFlowId(*id)))
                .collect()
        };
        Ok((pick(&self.build_ids)?, pick(&self.eval_ids)?))
    }
}

/// Per-class uniform sampling without replacement into disjoint build and eval
/// sets. Quotas are totals, split evenly across classes. A class short of rows
/// fills build first, gives the remainder to eval, and records the deficit.
/// Both output sets are shuffled so classes interleave.
pub fn stratified_split(
    flows: &[LabeledFlow],
    classes: &ClassSet,
    quota_build: u64,
    quota_eval: u64,
    seed: u64,
) -> Result<DatasetSplit, FlowError> {
    let k = classes.len() as u64;
    let per_build = quota_build / k;
    let per_eval = quota_eval / k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut build_set = Vec::new();
    let mut eval_set = Vec::new();
    let mut class_counts = Vec::with_capacity(classes.len());
    for label in classes.labels() {
        let mut members: Vec<&LabeledFlow> = flows.iter().filter(|f| f.label == label).collect();
        if members.is_empty() {
            return Err(FlowError::EmptyClass(label.name().to_string()));
        }
        members.shuffle(&mut rng);
        let available = members.len() as u64;
        let nb = per_build.min(available);
        let ne = per_eval.min(available - nb);
        build_set.extend(members[..nb as usize].iter().map(|f| (*f).clone()));
        eval_set.extend(members[nb as usize..(nb + ne) as usize].iter().map(|f| (*f).clone()));
        class_counts.push(ClassSplitCount {
            class: label.name().to_string(),
            available,
            build: nb,
            eval: ne,
            deficit: (per_build + per_eval).saturating_sub(available),
        });
    }
    build_set.shuffle(&mut rng);
    eval_set.shuffle(&mut rng);

    Ok(DatasetSplit {
        build_set,
        eval_set,
        seed,
        per_class_quota_build: per_build,
        per_class_quota_eval: per_eval,
        class_counts,
    })
}
