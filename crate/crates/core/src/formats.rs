//! On-disk artifacts.
//!
//! Models, ensembles, posteriors and datasets are JSON documents tagged with
//! a `format` name and `version`; floats are written in shortest round-trip
//! form so weights reload bit-exactly. Calibration tables and score traces
//! are CSV with a single `#` header line of `key=value` fields.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conformal::{CalibrationTable, ConformalError};
use crate::snn::{neg_log, Architecture, InputSequence, ModelParams, ScoreTrace, SnnError};
use crate::training::{Ensemble, EnsembleKind, TrainError, VariationalPosterior};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("expected a {expected} file, found {found}")]
    WrongKind { expected: &'static str, found: String },
    #[error("unsupported {kind} version {found} (this build reads version {FORMAT_VERSION})")]
    Version { kind: &'static str, found: u32 },
    #[error("bad header: {0}")]
    Header(String),
    #[error("bad record: {0}")]
    Record(String),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// Hash of the canonical JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    short_hash(&serde_json::to_vec(value).expect("serializable config"))
}

pub fn architecture_hash(arch: &Architecture) -> String {
    config_hash(arch)
}

/// Hash of the architecture and every member's weight bits.
pub fn ensemble_hash(ensemble: &Ensemble) -> String {
    let mut bytes = serde_json::to_vec(ensemble.architecture()).expect("serializable architecture");
    for m in &ensemble.members {
        for w in &m.weights {
            bytes.extend_from_slice(&w.to_bits().to_le_bytes());
        }
    }
    short_hash(&bytes)
}

fn check_kind(expected: &'static str, found: &str, version: u32) -> Result<()> {
    if found != expected {
        return Err(FormatError::WrongKind {
            expected,
            found: found.to_string(),
        });
    }
    if version != FORMAT_VERSION {
        return Err(FormatError::Version {
            kind: expected,
            found: version,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub weights: Vec<f64>,
}

impl ModelFile {
    const KIND: &'static str = "spikecp-model";

    pub fn new(model: &ModelParams) -> Self {
        Self {
            format: Self::KIND.into(),
            version: FORMAT_VERSION,
            architecture: model.architecture.clone(),
            weights: model.weights.clone(),
        }
    }

    pub fn into_model(self) -> Result<ModelParams> {
        check_kind(Self::KIND, &self.format, self.version)?;
        Ok(ModelParams::new(self.architecture, self.weights)?)
    }
}

pub fn write_model<W: Write>(model: &ModelParams, w: W) -> Result<()> {
    serde_json::to_writer(w, &ModelFile::new(model))?;
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<ModelParams> {
    let file: ModelFile = serde_json::from_reader(r)?;
    file.into_model()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub format: String,
    pub version: u32,
    pub kind: EnsembleKind,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub architecture_hash: String,
    pub members: Vec<ModelFile>,
}

impl EnsembleFile {
    const KIND: &'static str = "spikecp-ensemble";

    pub fn new(ensemble: &Ensemble, config_hash: &str) -> Self {
        Self {
            format: Self::KIND.into(),
            version: FORMAT_VERSION,
            kind: ensemble.kind,
            seeds: ensemble.seeds.clone(),
            config_hash: config_hash.into(),
            architecture_hash: architecture_hash(ensemble.architecture()),
            members: ensemble.members.iter().map(ModelFile::new).collect(),
        }
    }

    pub fn into_ensemble(self) -> Result<Ensemble> {
        check_kind(Self::KIND, &self.format, self.version)?;
        let members = self
            .members
            .into_iter()
            .map(ModelFile::into_model)
            .collect::<Result<Vec<_>>>()?;
        let ensemble = Ensemble::new(self.kind, self.seeds, members)?;
        if architecture_hash(ensemble.architecture()) != self.architecture_hash {
            return Err(FormatError::Header(
                "architecture hash does not match the stored architecture".into(),
            ));
        }
        Ok(ensemble)
    }
}

pub fn write_ensemble<W: Write>(ensemble: &Ensemble, config_hash: &str, w: W) -> Result<()> {
    serde_json::to_writer(w, &EnsembleFile::new(ensemble, config_hash))?;
    Ok(())
}

/// Reads an ensemble and the config hash it was written with.
pub fn read_ensemble<R: Read>(r: R) -> Result<(Ensemble, String)> {
    let file: EnsembleFile = serde_json::from_reader(r)?;
    let hash = file.config_hash.clone();
    Ok((file.into_ensemble()?, hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub architecture_hash: String,
    pub architecture: Architecture,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl PosteriorFile {
    const KIND: &'static str = "spikecp-posterior";
}

pub fn write_posterior<W: Write>(post: &VariationalPosterior, config_hash: &str, w: W) -> Result<()> {
    let file = PosteriorFile {
        format: PosteriorFile::KIND.into(),
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        architecture_hash: architecture_hash(&post.architecture),
        architecture: post.architecture.clone(),
        mu: post.mu.clone(),
        rho: post.rho.clone(),
    };
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn read_posterior<R: Read>(r: R) -> Result<(VariationalPosterior, String)> {
    let file: PosteriorFile = serde_json::from_reader(r)?;
    check_kind(PosteriorFile::KIND, &file.format, file.version)?;
    if architecture_hash(&file.architecture) != file.architecture_hash {
        return Err(FormatError::Header(
            "architecture hash does not match the stored architecture".into(),
        ));
    }
    Ok((
        VariationalPosterior::new(file.architecture, file.mu, file.rho)?,
        file.config_hash,
    ))
}

/// Time samples of one example: binary rows as `0`/`1` strings, otherwise raw values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Samples {
    Bits(Vec<String>),
    Values(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExampleRecord {
    label: Option<usize>,
    #[serde(flatten)]
    samples: Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    config_hash: String,
    steps: usize,
    channels: usize,
    examples: Vec<ExampleRecord>,
}

const DATASET_KIND: &str = "spikecp-dataset";

pub fn write_dataset<W: Write>(data: &[InputSequence], config_hash: &str, w: W) -> Result<()> {
    let (steps, channels) = data.first().map_or((0, 0), |x| (x.steps(), x.channels()));
    let examples = data
        .iter()
        .map(|x| {
            let samples = if x.is_binary() {
                Samples::Bits(
                    (0..x.steps())
                        .map(|t| x.row(t).iter().map(|&v| if v == 1.0 { '1' } else { '0' }).collect())
                        .collect(),
                )
            } else {
                Samples::Values((0..x.steps()).map(|t| x.row(t).to_vec()).collect())
            };
            ExampleRecord {
                label: x.label(),
                samples,
            }
        })
        .collect();
    let file = DatasetFile {
        format: DATASET_KIND.into(),
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        steps,
        channels,
        examples,
    };
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<(Vec<InputSequence>, String)> {
    let file: DatasetFile = serde_json::from_reader(r)?;
    check_kind(DATASET_KIND, &file.format, file.version)?;
    let data = file
        .examples
        .into_iter()
        .enumerate()
        .map(|(i, ex)| {
            let rows: Vec<Vec<f64>> = match ex.samples {
                Samples::Bits(rows) => rows
                    .iter()
                    .map(|row| {
                        row.chars()
                            .map(|ch| match ch {
                                '0' => Ok(0.0),
                                '1' => Ok(1.0),
                                other => Err(FormatError::Record(format!("example {i}: bad spike '{other}'"))),
                            })
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<_>>()?,
                Samples::Values(rows) => rows,
            };
            let x = InputSequence::from_rows(rows, ex.label)?;
            if x.steps() != file.steps || x.channels() != file.channels {
                return Err(FormatError::Record(format!(
                    "example {i} is {}x{}, header says {}x{}",
                    x.steps(),
                    x.channels(),
                    file.steps,
                    file.channels
                )));
            }
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((data, file.config_hash))
}

/// Merging exponents are stored as numbers when finite and as `"inf"` /
/// `"-inf"` otherwise, since JSON has no infinities.
pub mod exponent_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &f64, s: S) -> Result<S::Ok, S::Error> {
        if r.is_finite() {
            s.serialize_f64(*r)
        } else {
            s.serialize_str(&super::format_exponent(*r))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => super::parse_exponent(&t).map_err(D::Error::custom),
        }
    }
}

/// Parses a merging exponent: a float, or `inf` / `-inf` (also `infinity`, `+inf`).
pub fn parse_exponent(raw: &str) -> std::result::Result<f64, String> {
    let s = raw.trim().to_ascii_lowercase();
    match s.as_str() {
        "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        _ => match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("'{raw}' is not a number or +/-inf")),
        },
    }
}

pub fn format_exponent(r: f64) -> String {
    if r == f64::INFINITY {
        "inf".into()
    } else if r == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{r}")
    }
}

/// Ordered `key=value` fields of a CSV header line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Header {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl Header {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| FormatError::Header(format!("missing field '{key}'")))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| FormatError::Header(format!("field '{key}' has bad value '{raw}'")))
    }

    pub fn write_line<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "# {}", self.kind)?;
        for (k, v) in &self.fields {
            write!(w, " {k}={v}")?;
        }
        writeln!(w)?;
        Ok(())
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let body = line
            .trim_end()
            .strip_prefix("# ")
            .ok_or_else(|| FormatError::Header("first line must start with '# '".into()))?;
        let mut parts = body.split(' ');
        let kind = parts.next().unwrap_or_default().to_string();
        let fields = parts
            .map(|p| {
                p.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| FormatError::Header(format!("'{p}' is not key=value")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kind, fields })
    }

    /// Reads the header line and hands back a reader over the remaining CSV.
    pub fn read_from<R: Read>(r: R, expected_kind: &'static str) -> Result<(Self, BufReader<R>)> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header = Self::parse_line(&line)?;
        if header.kind != expected_kind {
            return Err(FormatError::WrongKind {
                expected: expected_kind,
                found: header.kind,
            });
        }
        let version: u32 = header.parse_field("version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version {
                kind: expected_kind,
                found: version,
            });
        }
        Ok((header, reader))
    }
}

fn join_usize(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn split_usize(raw: &str) -> Result<Vec<usize>> {
    raw.split(';')
        .map(|v| {
            v.parse()
                .map_err(|_| FormatError::Header(format!("bad integer list '{raw}'")))
        })
        .collect()
}

/// Provenance carried by calibration and trace files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub architecture_hash: String,
    pub ensemble_hash: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn of(ensemble: &Ensemble, config_hash: &str) -> Self {
        Self {
            architecture_hash: architecture_hash(ensemble.architecture()),
            ensemble_hash: ensemble_hash(ensemble),
            config_hash: config_hash.into(),
        }
    }

    fn extend(&self, header: Header) -> Header {
        header
            .with("architecture_hash", &self.architecture_hash)
            .with("ensemble_hash", &self.ensemble_hash)
            .with("config_hash", &self.config_hash)
    }

    fn from_header(header: &Header) -> Result<Self> {
        Ok(Self {
            architecture_hash: header.get("architecture_hash")?.into(),
            ensemble_hash: header.get("ensemble_hash")?.into(),
            config_hash: header.get("config_hash")?.into(),
        })
    }
}

const CALIBRATION_KIND: &str = "spikecp-calibration";
const TRACE_KIND: &str = "spikecp-trace";

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationRow {
    model: usize,
    checkpoint: usize,
    example: usize,
    label: usize,
    class: usize,
    confidence: f64,
    loss: f64,
}

pub fn write_calibration<W: Write>(table: &CalibrationTable, prov: &Provenance, mut w: W) -> Result<()> {
    let header = Header::new(CALIBRATION_KIND)
        .with("version", FORMAT_VERSION)
        .with("n_cal", table.len())
        .with("models", table.num_models())
        .with("classes", table.num_classes())
        .with("checkpoints", join_usize(table.checkpoints()));
    prov.extend(header).write_line(&mut w)?;
    let mut csv = csv::Writer::from_writer(w);
    for k in 0..table.num_models() {
        for (t, &time) in table.checkpoints().iter().enumerate() {
            for i in 0..table.len() {
                let f = table.confidence(k, t, i);
                let s = table.losses(k, t, i);
                for c in 0..table.num_classes() {
                    csv.serialize(CalibrationRow {
                        model: k,
                        checkpoint: time,
                        example: i,
                        label: table.labels()[i],
                        class: c,
                        confidence: f[c],
                        loss: s[c],
                    })?;
                }
            }
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn read_calibration<R: Read>(r: R) -> Result<(CalibrationTable, Provenance)> {
    let (header, rest) = Header::read_from(r, CALIBRATION_KIND)?;
    let n: usize = header.parse_field("n_cal")?;
    let models: usize = header.parse_field("models")?;
    let classes: usize = header.parse_field("classes")?;
    let checkpoints = split_usize(header.get("checkpoints")?)?;
    let prov = Provenance::from_header(&header)?;
    let t_len = checkpoints.len();
    let total = models * t_len * n * classes;
    let mut confidences = vec![f64::NAN; total];
    let mut labels = vec![usize::MAX; n];
    let mut seen = 0usize;
    for row in csv::Reader::from_reader(rest).deserialize() {
        let row: CalibrationRow = row?;
        let t = checkpoints
            .iter()
            .position(|&c| c == row.checkpoint)
            .ok_or_else(|| FormatError::Record(format!("unknown checkpoint {}", row.checkpoint)))?;
        if row.model >= models || row.example >= n || row.class >= classes {
            return Err(FormatError::Record(format!(
                "row (model {}, example {}, class {}) outside the declared shape",
                row.model, row.example, row.class
            )));
        }
        if labels[row.example] != usize::MAX && labels[row.example] != row.label {
            return Err(FormatError::Record(format!("example {} has two labels", row.example)));
        }
        labels[row.example] = row.label;
        let at = ((row.model * t_len + t) * n + row.example) * classes + row.class;
        if !confidences[at].is_nan() {
            return Err(FormatError::Record("duplicate row".into()));
        }
        if neg_log(row.confidence).to_bits() != row.loss.to_bits() {
            return Err(FormatError::Record(format!(
                "loss {} does not match confidence {}",
                row.loss, row.confidence
            )));
        }
        confidences[at] = row.confidence;
        seen += 1;
    }
    if seen != total {
        return Err(FormatError::Record(format!("expected {total} rows, found {seen}")));
    }
    let table = CalibrationTable::from_parts(checkpoints, models, classes, labels, confidences)?;
    Ok((table, prov))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    model: usize,
    checkpoint: usize,
    class: usize,
    count: u32,
    confidence: f64,
    loss: f64,
}

/// Writes the member traces of one input.
pub fn write_traces<W: Write>(traces: &[ScoreTrace], prov: &Provenance, mut w: W) -> Result<()> {
    let first = traces
        .first()
        .ok_or_else(|| FormatError::Record("no traces to write".into()))?;
    let header = Header::new(TRACE_KIND)
        .with("version", FORMAT_VERSION)
        .with("models", traces.len())
        .with("classes", first.num_classes())
        .with("checkpoints", join_usize(&first.checkpoints));
    prov.extend(header).write_line(&mut w)?;
    let mut csv = csv::Writer::from_writer(w);
    for (k, tr) in traces.iter().enumerate() {
        for (t, &time) in tr.checkpoints.iter().enumerate() {
            for c in 0..tr.num_classes() {
                csv.serialize(TraceRow {
                    model: k,
                    checkpoint: time,
                    class: c,
                    count: tr.counts[t][c],
                    confidence: tr.confidences[t][c],
                    loss: tr.losses[t][c],
                })?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn read_traces<R: Read>(r: R) -> Result<(Vec<ScoreTrace>, Provenance)> {
    let (header, rest) = Header::read_from(r, TRACE_KIND)?;
    let models: usize = header.parse_field("models")?;
    let classes: usize = header.parse_field("classes")?;
    let checkpoints = split_usize(header.get("checkpoints")?)?;
    let prov = Provenance::from_header(&header)?;
    let t_len = checkpoints.len();
    let mut counts = vec![vec![vec![0u32; classes]; t_len]; models];
    let mut conf = vec![vec![vec![f64::NAN; classes]; t_len]; models];
    let mut seen = 0;
    for row in csv::Reader::from_reader(rest).deserialize() {
        let row: TraceRow = row?;
        let t = checkpoints
            .iter()
            .position(|&c| c == row.checkpoint)
            .ok_or_else(|| FormatError::Record(format!("unknown checkpoint {}", row.checkpoint)))?;
        if row.model >= models || row.class >= classes {
            return Err(FormatError::Record("row outside the declared shape".into()));
        }
        counts[row.model][t][row.class] = row.count;
        conf[row.model][t][row.class] = row.confidence;
        seen += 1;
    }
    if seen != models * t_len * classes {
        return Err(FormatError::Record(format!(
            "expected {} rows, found {seen}",
            models * t_len * classes
        )));
    }
    let traces = counts
        .into_iter()
        .zip(conf)
        .map(|(c, f)| ScoreTrace::from_confidences(checkpoints.clone(), c, f))
        .collect();
    Ok((traces, prov))
}
