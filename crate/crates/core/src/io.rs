//! Versioned JSON interchange files, CSV emitters and a schema validator.
//!
//! Every JSON document is an object carrying `"schema": "<kind>/1"` next to
//! its own fields. Floats are written in shortest round-trip form.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::asymptotics::{BoundRow, DichotomyReport, Verdict};
use crate::error::{Error, Result};
use crate::kernels::{AttentionKernel, Kernel, LayerLogitModel, MaskKind, MaskSpec, IMPORT_TOL};
use crate::metrics::{ComparisonResult, ContentFit};
use crate::rollout::{MixingSchedule, RolloutConfig, RolloutResult, Variant};
use crate::stochastic_order::{MonotonicityReport, PositionDistribution};

pub const SCHEMA_VERSION: u32 = 1;
const CHECK_TOL: f64 = 1e-9;

/// A typed interchange document.
pub trait Document: Sized {
    const KIND: &'static str;

    fn to_fields(&self) -> Result<Value>;

    fn from_fields(v: Value) -> Result<Self>;
}

pub fn schema_tag(kind: &str) -> String {
    format!("{kind}/{SCHEMA_VERSION}")
}

pub fn to_json<D: Document>(doc: &D) -> Result<String> {
    let mut obj = Map::new();
    obj.insert("schema".into(), Value::String(schema_tag(D::KIND)));
    match doc.to_fields()? {
        Value::Object(fields) => obj.extend(fields),
        _ => return Err(Error::invariant("document fields must form an object")),
    }
    let mut s = serde_json::to_string_pretty(&Value::Object(obj))?;
    s.push('\n');
    Ok(s)
}

fn split_schema(text: &str) -> Result<(String, Value)> {
    let mut v: Value = serde_json::from_str(text)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Malformed("top-level JSON value must be an object".into()))?;
    let tag = match obj.remove("schema") {
        Some(Value::String(s)) => s,
        Some(other) => {
            return Err(Error::SchemaMismatch {
                expected: "a \"<kind>/<version>\" string".into(),
                found: other.to_string(),
            })
        }
        None => {
            return Err(Error::SchemaMismatch {
                expected: "a schema tag".into(),
                found: "<missing>".into(),
            })
        }
    };
    Ok((tag, v))
}

pub fn from_json<D: Document>(text: &str) -> Result<D> {
    let (tag, fields) = split_schema(text)?;
    let want = schema_tag(D::KIND);
    if tag != want {
        return Err(Error::SchemaMismatch {
            expected: want,
            found: tag,
        });
    }
    D::from_fields(fields)
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| with_path(path, e))
}

pub fn save<D: Document>(path: impl AsRef<Path>, doc: &D) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(doc)?).map_err(|e| with_path(path, e))
}

pub fn load<D: Document>(path: impl AsRef<Path>) -> Result<D> {
    from_json(&read_file(path.as_ref())?)
}

fn plain<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn parse<T: DeserializeOwned>(v: Value) -> Result<T> {
    Ok(serde_json::from_value(v)?)
}

fn check_unit(name: &'static str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value: x,
            range: "[0, 1]",
        })
    }
}

impl Document for PositionDistribution {
    const KIND: &'static str = "distribution";

    fn to_fields(&self) -> Result<Value> {
        plain(self)
    }

    fn from_fields(v: Value) -> Result<Self> {
        parse(v)
    }
}

impl Document for MonotonicityReport {
    const KIND: &'static str = "monotonicity-report";

    fn to_fields(&self) -> Result<Value> {
        plain(self)
    }

    fn from_fields(v: Value) -> Result<Self> {
        let r: Self = parse(v)?;
        if r.violations > r.total_triples {
            return Err(Error::invariant("more violations than triples"));
        }
        check_unit("violation_fraction", r.violation_fraction)?;
        if r.mean_conditional_gap < 0.0 || r.max_gap < 0.0 || r.mean_conditional_gap > r.max_gap + CHECK_TOL {
            return Err(Error::invariant("gap statistics are inconsistent"));
        }
        Ok(r)
    }
}

impl Document for ComparisonResult {
    const KIND: &'static str = "comparison";

    fn to_fields(&self) -> Result<Value> {
        plain(self)
    }

    fn from_fields(v: Value) -> Result<Self> {
        let r: Self = parse(v)?;
        if !(-1.0..=1.0).contains(&r.spearman) {
            return Err(Error::OutOfRange {
                name: "spearman",
                value: r.spearman,
                range: "[-1, 1]",
            });
        }
        check_unit("wasserstein", r.wasserstein)?;
        if r.n < 2 {
            return Err(Error::invariant("comparison needs n >= 2"));
        }
        Ok(r)
    }
}

impl Document for ContentFit {
    const KIND: &'static str = "content-fit";

    fn to_fields(&self) -> Result<Value> {
        plain(self)
    }

    fn from_fields(v: Value) -> Result<Self> {
        let r: Self = parse(v)?;
        check_unit("within_diag_similarity", r.within_diag_similarity)?;
        check_unit("within_offdiag_similarity", r.within_offdiag_similarity)?;
        if r.bins < 2 {
            return Err(Error::invariant("content fit needs at least two bins"));
        }
        Ok(r)
    }
}

impl Document for DichotomyReport {
    const KIND: &'static str = "dichotomy-report";

    fn to_fields(&self) -> Result<Value> {
        plain(self)
    }

    fn from_fields(v: Value) -> Result<Self> {
        let r: Self = parse(v)?;
        if !(r.epsilon > 0.0 && r.epsilon <= 1.0) {
            return Err(Error::OutOfRange {
                name: "epsilon",
                value: r.epsilon,
                range: "(0, 1]",
            });
        }
        if r.diag_lower_bound.len() != r.n || r.observed_diag.len() != r.n {
            return Err(Error::DimensionMismatch {
                context: "dichotomy diagonal vectors",
                expected: r.n,
                found: r.diag_lower_bound.len().min(r.observed_diag.len()),
            });
        }
        for &b in r.diag_lower_bound.iter().chain(&r.observed_diag) {
            check_unit("diagonal bound", b)?;
        }
        check_unit("p_n1", r.p_n1)?;
        for row in &r.checkpoints {
            check_unit("checkpoint bound", row.bound)?;
        }
        if r.verdict == Verdict::Collapse && r.p_n1 < 1.0 - r.collapse_tol {
            return Err(Error::invariant("collapse verdict without P_n1 near 1"));
        }
        Ok(r)
    }
}

#[derive(Serialize, Deserialize)]
struct KernelDoc {
    n: usize,
    mask: MaskKind,
    rows: Vec<Vec<f64>>,
}

fn dense(rows: Vec<Vec<f64>>, n: usize, context: &'static str) -> Result<Array2<f64>> {
    if rows.len() != n {
        return Err(Error::DimensionMismatch {
            context,
            expected: n,
            found: rows.len(),
        });
    }
    if let Some(r) = rows.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch {
            context,
            expected: n,
            found: r.len(),
        });
    }
    Ok(Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("checked shape"))
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl Document for AttentionKernel {
    const KIND: &'static str = "kernel";

    fn to_fields(&self) -> Result<Value> {
        plain(&KernelDoc {
            n: self.n(),
            mask: self.mask().kind(),
            rows: rows_of(self.matrix()),
        })
    }

    fn from_fields(v: Value) -> Result<Self> {
        let doc: KernelDoc = parse(v)?;
        let mask = MaskSpec::new(doc.mask, doc.n)?;
        AttentionKernel::with_tolerance(dense(doc.rows, doc.n, "kernel rows")?, mask, IMPORT_TOL)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScheduleSpec {
    List(Vec<f64>),
    Constant { constant: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    n: usize,
    mask: MaskKind,
    depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<LayerLogitModel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer_template: Option<LayerLogitModel>,
    schedule: ScheduleSpec,
    variant: Variant,
}

impl Document for RolloutConfig {
    const KIND: &'static str = "rollout-config";

    fn to_fields(&self) -> Result<Value> {
        let layers = self.raw_layers();
        let shared = layers.windows(2).all(|w| w[0] == w[1]);
        plain(&ConfigDoc {
            n: self.mask().n(),
            mask: self.mask().kind(),
            depth: self.depth(),
            layers: (!shared).then(|| layers.to_vec()),
            layer_template: shared.then(|| layers[0].clone()),
            schedule: ScheduleSpec::List(self.raw_schedule().lambdas().to_vec()),
            variant: self.variant(),
        })
    }

    fn from_fields(v: Value) -> Result<Self> {
        let doc: ConfigDoc = parse(v)?;
        let mask = MaskSpec::new(doc.mask, doc.n)?;
        let schedule = match doc.schedule {
            ScheduleSpec::List(l) => MixingSchedule::new(l)?,
            ScheduleSpec::Constant { constant } => MixingSchedule::constant(doc.depth, constant)?,
        };
        if schedule.depth() != doc.depth {
            return Err(Error::DimensionMismatch {
                context: "config schedule vs depth",
                expected: doc.depth,
                found: schedule.depth(),
            });
        }
        let layers = match (doc.layers, doc.layer_template) {
            (Some(l), None) => l,
            (None, Some(t)) => vec![t; doc.depth],
            _ => {
                return Err(Error::Malformed(
                    "config needs exactly one of \"layers\" or \"layer_template\"".into(),
                ))
            }
        };
        RolloutConfig::new(mask, layers, schedule, doc.variant)
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryDoc {
    n: usize,
    depth: usize,
    config_digest: String,
    /// `rows[t-1]` is `p^(t)`.
    rows: Vec<Vec<f64>>,
    #[serde(default, rename = "final", skip_serializing_if = "Option::is_none")]
    final_matrix: Option<Vec<Vec<f64>>>,
}

impl Document for RolloutResult {
    const KIND: &'static str = "trajectory";

    fn to_fields(&self) -> Result<Value> {
        plain(&TrajectoryDoc {
            n: self.n(),
            depth: self.depth(),
            config_digest: self.config_digest().to_owned(),
            rows: self.trajectory().iter().map(|d| d.probs().to_vec()).collect(),
            final_matrix: self.final_matrix().ok().map(rows_of),
        })
    }

    fn from_fields(v: Value) -> Result<Self> {
        let doc: TrajectoryDoc = parse(v)?;
        if doc.rows.len() != doc.depth {
            return Err(Error::DimensionMismatch {
                context: "trajectory depth",
                expected: doc.depth,
                found: doc.rows.len(),
            });
        }
        let trajectory = doc
            .rows
            .into_iter()
            .map(PositionDistribution::new)
            .collect::<Result<Vec<_>>>()?;
        if let Some(d) = trajectory.iter().find(|d| d.n() != doc.n) {
            return Err(Error::DimensionMismatch {
                context: "trajectory row length",
                expected: doc.n,
                found: d.n(),
            });
        }
        let final_matrix = doc
            .final_matrix
            .map(|rows| dense(rows, doc.n, "final matrix"))
            .transpose()?;
        RolloutResult::from_parts(final_matrix, trajectory, doc.config_digest)
    }
}

/// Per-layer residual mixing coefficients measured on a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub model_id: String,
    pub dataset_id: String,
    pub depth: usize,
    pub sequence_length: usize,
    pub lambdas: MixingSchedule,
}

impl ScheduleFile {
    pub fn new(model_id: String, dataset_id: String, sequence_length: usize, lambdas: MixingSchedule) -> Result<Self> {
        let f = Self {
            model_id,
            dataset_id,
            depth: lambdas.depth(),
            sequence_length,
            lambdas,
        };
        f.check()?;
        Ok(f)
    }

    fn check(&self) -> Result<()> {
        if self.depth != self.lambdas.depth() {
            return Err(Error::DimensionMismatch {
                context: "schedule file depth",
                expected: self.depth,
                found: self.lambdas.depth(),
            });
        }
        if self.sequence_length == 0 {
            return Err(Error::invariant("sequence_length must be positive"));
        }
        Ok(())
    }
}

impl Document for ScheduleFile {
    const KIND: &'static str = "schedule";

    fn to_fields(&self) -> Result<Value> {
        plain(self)
    }

    fn from_fields(v: Value) -> Result<Self> {
        let f: Self = parse(v)?;
        f.check()?;
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GradientAttribution,
    Synthetic,
    Other,
}

/// Externally measured influence of each input position on the last token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredProfile {
    pub model_id: String,
    pub dataset_id: String,
    pub n: usize,
    pub influence: PositionDistribution,
    pub provenance: Provenance,
}

impl MeasuredProfile {
    pub fn new(model_id: String, dataset_id: String, influence: PositionDistribution, provenance: Provenance) -> Self {
        Self {
            model_id,
            dataset_id,
            n: influence.n(),
            influence,
            provenance,
        }
    }
}

impl Document for MeasuredProfile {
    const KIND: &'static str = "measured-profile";

    fn to_fields(&self) -> Result<Value> {
        plain(self)
    }

    fn from_fields(v: Value) -> Result<Self> {
        let p: Self = parse(v)?;
        if p.n != p.influence.n() {
            return Err(Error::DimensionMismatch {
                context: "measured profile n",
                expected: p.n,
                found: p.influence.n(),
            });
        }
        Ok(p)
    }
}

/// One pre-softmax logit matrix; off-mask entries are `null` on disk and NaN in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix {
    pub model_id: Option<String>,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub mask: MaskSpec,
    pub logits: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct LogitDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<usize>,
    n: usize,
    mask: MaskKind,
    logits: Vec<Vec<Option<f64>>>,
}

impl Document for LogitMatrix {
    const KIND: &'static str = "logit-matrix";

    fn to_fields(&self) -> Result<Value> {
        let n = self.mask.n();
        let mut rows = Vec::with_capacity(n);
        for i in 1..=n {
            let mut row = Vec::with_capacity(n);
            for j in 1..=n {
                let v = self.logits[[i - 1, j - 1]];
                if self.mask.admits(i, j) {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: "admissible logits",
                            row: i,
                            col: j,
                        });
                    }
                    row.push(Some(v));
                } else {
                    row.push(v.is_finite().then_some(v));
                }
            }
            rows.push(row);
        }
        plain(&LogitDoc {
            model_id: self.model_id.clone(),
            layer: self.layer,
            head: self.head,
            n,
            mask: self.mask.kind(),
            logits: rows,
        })
    }

    fn from_fields(v: Value) -> Result<Self> {
        let doc: LogitDoc = parse(v)?;
        let mask = MaskSpec::new(doc.mask, doc.n)?;
        let rows: Vec<Vec<f64>> = doc
            .logits
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
            .collect();
        let logits = dense(rows, doc.n, "logit rows")?;
        for i in 1..=doc.n {
            for j in mask.admissible(i) {
                if !logits[[i - 1, j - 1]].is_finite() {
                    return Err(Error::NonFinite {
                        context: "admissible logits",
                        row: i,
                        col: j,
                    });
                }
            }
        }
        Ok(Self {
            model_id: doc.model_id,
            layer: doc.layer,
            head: doc.head,
            mask,
            logits,
        })
    }
}

/// Load a position profile from a distribution, measured-profile or trajectory
/// file (the trajectory contributes its last row).
pub fn load_profile(path: impl AsRef<Path>) -> Result<PositionDistribution> {
    let text = read_file(path.as_ref())?;
    let (tag, _) = split_schema(&text)?;
    match tag.as_str() {
        t if t == schema_tag(PositionDistribution::KIND) => from_json(&text),
        t if t == schema_tag(MeasuredProfile::KIND) => Ok(from_json::<MeasuredProfile>(&text)?.influence),
        t if t == schema_tag(RolloutResult::KIND) => Ok(from_json::<RolloutResult>(&text)?.last_row().clone()),
        _ => Err(Error::SchemaMismatch {
            expected: "distribution/1, measured-profile/1 or trajectory/1".into(),
            found: tag,
        }),
    }
}

pub const TRAJECTORY_HEADER: [&str; 3] = ["depth", "position", "mass"];
pub const BOUNDS_HEADER: [&str; 5] = ["T", "sum_lambda", "bound", "observed_diag_min", "P_n1"];
const METRIC_COLUMNS: [&str; 2] = ["spearman", "wasserstein"];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

/// Long-format trajectory: one row per (depth, position).
pub fn write_trajectory_csv(path: impl AsRef<Path>, result: &RolloutResult) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(TRAJECTORY_HEADER)?;
    for (t, d) in result.trajectory().iter().enumerate() {
        for (j, p) in d.probs().iter().enumerate() {
            w.write_record([(t + 1).to_string(), (j + 1).to_string(), p.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a long-format trajectory CSV back into per-depth distributions.
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Vec<PositionDistribution>> {
    let mut r = csv::Reader::from_path(path)?;
    expect_header(r.headers()?, &TRAJECTORY_HEADER)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t: usize = field(&rec, 0)?;
        let j: usize = field(&rec, 1)?;
        let p: f64 = field(&rec, 2)?;
        if t == rows.len() + 1 {
            rows.push(Vec::new());
        }
        if t != rows.len() {
            return Err(Error::Malformed(format!("depth {t} out of order")));
        }
        let row = rows.last_mut().expect("checked depth");
        if j != row.len() + 1 {
            return Err(Error::Malformed(format!("position {j} out of order at depth {t}")));
        }
        row.push(p);
    }
    if rows.is_empty() {
        return Err(Error::Malformed("trajectory CSV has no rows".into()));
    }
    let n = rows[0].len();
    rows.into_iter()
        .map(|r| {
            if r.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "trajectory CSV row",
                    expected: n,
                    found: r.len(),
                });
            }
            PositionDistribution::new(r)
        })
        .collect()
}

pub fn write_bounds_csv(path: impl AsRef<Path>, rows: &[BoundRow]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(BOUNDS_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bounds_csv(path: impl AsRef<Path>) -> Result<Vec<BoundRow>> {
    let mut r = csv::Reader::from_path(path)?;
    expect_header(r.headers()?, &BOUNDS_HEADER)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<BoundRow>, _>>()?;
    for row in &rows {
        check_unit("bound", row.bound)?;
        check_unit("observed_diag_min", row.observed_diag_min)?;
        check_unit("P_n1", row.p_n1)?;
    }
    Ok(rows)
}

/// One table row: a label and the per-variant comparisons available for it.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub results: Vec<(Variant, ComparisonResult)>,
}

fn comparison_header() -> Vec<String> {
    let mut h = vec!["config".to_owned()];
    for v in Variant::ALL {
        for m in METRIC_COLUMNS {
            h.push(format!("{}_{m}", v.code()));
        }
    }
    h
}

/// Rows are configs; columns are variant a/b/c times metric. Missing cells are empty.
pub fn write_comparison_table(path: impl AsRef<Path>, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(comparison_header())?;
    for row in rows {
        let mut rec = vec![row.label.clone()];
        for v in Variant::ALL {
            match row.results.iter().find(|(rv, _)| *rv == v) {
                Some((_, c)) => {
                    rec.push(c.spearman.to_string());
                    rec.push(c.wasserstein.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::Malformed(format!("missing column {}", i + 1)))?;
    raw.parse()
        .map_err(|_| Error::Malformed(format!("cannot parse {raw:?} in column {}", i + 1)))
}

fn expect_header<S: AsRef<str>>(h: &csv::StringRecord, want: &[S]) -> Result<()> {
    if h.iter().eq(want.iter().map(|s| s.as_ref())) {
        Ok(())
    } else {
        Err(Error::SchemaMismatch {
            expected: want.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join(","),
            found: h.iter().collect::<Vec<_>>().join(","),
        })
    }
}

fn validate_comparison_csv(path: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    expect_header(r.headers()?, &comparison_header())?;
    for rec in r.records() {
        let rec = rec?;
        for (k, raw) in rec.iter().enumerate().skip(1) {
            if raw.is_empty() {
                continue;
            }
            let x: f64 = field(&rec, k)?;
            let ok = if k % 2 == 1 { (-1.0..=1.0).contains(&x) } else { (0.0..=1.0).contains(&x) };
            if !ok {
                return Err(Error::invariant(format!("metric {x} out of range in column {}", k + 1)));
            }
        }
    }
    Ok(())
}

/// Check any interchange file against its schema and invariants.
/// Returns the schema kind (or CSV layout) that was recognised.
pub fn validate(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let text = read_file(path)?;
    if !text.trim_start().starts_with('{') {
        return validate_csv(path, &text);
    }
    let (tag, _) = split_schema(&text)?;
    macro_rules! dispatch {
        ($($t:ty),*) => {
            $(if tag == schema_tag(<$t>::KIND) {
                from_json::<$t>(&text)?;
                return Ok(<$t>::KIND.to_owned());
            })*
        };
    }
    dispatch!(
        AttentionKernel,
        PositionDistribution,
        MonotonicityReport,
        RolloutConfig,
        RolloutResult,
        ScheduleFile,
        MeasuredProfile,
        LogitMatrix,
        ComparisonResult,
        ContentFit,
        DichotomyReport
    );
    Err(Error::SchemaMismatch {
        expected: "a known <kind>/1 schema".into(),
        found: tag,
    })
}

fn validate_csv(path: &Path, text: &str) -> Result<String> {
    if text.contains('\r') {
        return Err(Error::Malformed("CSV must use LF line endings".into()));
    }
    let header = text.lines().next().unwrap_or_default();
    if header == TRAJECTORY_HEADER.join(",") {
        read_trajectory_csv(path)?;
        Ok("trajectory-csv".into())
    } else if header == BOUNDS_HEADER.join(",") {
        read_bounds_csv(path)?;
        Ok("bounds-csv".into())
    } else if header == comparison_header().join(",") {
        validate_comparison_csv(path)?;
        Ok("comparison-csv".into())
    } else {
        Err(Error::SchemaMismatch {
            expected: "a JSON document or a known CSV header".into(),
            found: header.to_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{uniform_kernel, ContentModel};
    use crate::rollout::{run_rollout, RolloutOptions};

    fn roundtrip<D: Document + PartialEq + std::fmt::Debug>(d: &D) {
        let text = to_json(d).unwrap();
        assert!(text.contains(&format!("\"schema\": \"{}/1\"", D::KIND)));
        let back: D = from_json(&text).unwrap();
        assert_eq!(&back, d);
    }

    #[test]
    fn simple_documents_roundtrip() {
        roundtrip(&PositionDistribution::new(vec![0.1, 0.2, 0.7]).unwrap());
        roundtrip(&uniform_kernel(MaskSpec::sliding(5, 2).unwrap()));
        roundtrip(&ComparisonResult {
            spearman: -0.25,
            wasserstein: 0.1 + 0.2,
            n: 4,
        });
        roundtrip(
            &ScheduleFile::new("m".into(), "d".into(), 128, MixingSchedule::linear(7, 0.9, 0.1).unwrap())
                .unwrap(),
        );
        roundtrip(&MeasuredProfile::new(
            "m".into(),
            "d".into(),
            PositionDistribution::uniform(3).unwrap(),
            Provenance::Synthetic,
        ));
    }

    #[test]
    fn config_forms() {
        let text = r#"{"schema":"rollout-config/1","n":4,"mask":{"kind":"causal"},"depth":3,
            "layer_template":{"bias":{"kind":"alibi","slopes":[0.5]},"content":{"u":0,"delta":1}},
            "schedule":{"constant":0.25},"variant":"c"}"#;
        let cfg: RolloutConfig = from_json(text).unwrap();
        assert_eq!(cfg.depth(), 3);
        assert_eq!(cfg.raw_schedule().lambdas(), &[0.25; 3]);
        assert_eq!(cfg.layer(2).content(), ContentModel::new(0.0, 1.0).unwrap());
        roundtrip(&cfg);

        let both = text.replace("\"layer_template\"", "\"layers\":[],\"layer_template\"");
        assert!(from_json::<RolloutConfig>(&both).is_err());
        let short = text.replace("{\"constant\":0.25}", "[0.1,0.2]");
        assert!(from_json::<RolloutConfig>(&short).is_err());
    }

    #[test]
    fn trajectory_roundtrip_with_and_without_final() {
        let cfg = RolloutConfig::homogeneous(
            MaskSpec::causal(4).unwrap(),
            LayerLogitModel::alibi(vec![0.7], ContentModel::zero()).unwrap(),
            MixingSchedule::constant(3, 0.6).unwrap(),
            Variant::ResidualAware,
        )
        .unwrap();
        for opts in [RolloutOptions::default(), RolloutOptions::full()] {
            let res = run_rollout(&cfg, opts).unwrap();
            let back: RolloutResult = from_json(&to_json(&res).unwrap()).unwrap();
            assert_eq!(back.trajectory(), res.trajectory());
            assert_eq!(back.config_digest(), res.config_digest());
            assert_eq!(back.final_matrix().ok(), res.final_matrix().ok());
        }
    }

    #[test]
    fn load_errors() {
        let err = from_json::<ScheduleFile>(
            r#"{"schema":"schedule/1","model_id":"m","dataset_id":"d","depth":2,"sequence_length":4,"lambdas":[0.5,1.2]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("lambda = 1.2"), "{err}");
        let err = from_json::<MeasuredProfile>(
            r#"{"schema":"measured-profile/1","model_id":"m","dataset_id":"d","n":2,"influence":{"n":2,"probs":[0.5,0.3]},"provenance":"synthetic"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("sum"), "{err}");
        assert!(matches!(
            from_json::<PositionDistribution>(r#"{"schema":"distribution/2","n":1,"probs":[1]}"#),
            Err(Error::SchemaMismatch { .. })
        ));
        assert!(matches!(
            from_json::<PositionDistribution>(r#"{"n":1,"probs":[1]}"#),
            Err(Error::SchemaMismatch { .. })
        ));
        assert!(matches!(
            from_json::<PositionDistribution>(r#"{"schema":"kernel/1","n":1,"probs":[1]}"#),
            Err(Error::SchemaMismatch { .. })
        ));
        assert!(from_json::<PositionDistribution>("[1]").is_err());
        assert!(from_json::<PositionDistribution>("{").is_err());
    }

    #[test]
    fn kernel_import_tolerance() {
        let ok = r#"{"schema":"kernel/1","n":2,"mask":{"kind":"causal"},"rows":[[1,0],[0.5,0.5000000001]]}"#;
        assert!(from_json::<AttentionKernel>(ok).is_ok());
        let bad = ok.replace("0.5000000001", "0.50001");
        assert!(from_json::<AttentionKernel>(&bad).is_err());
        let off_mask = ok.replace("[[1,0]", "[[0.9,0.1]");
        assert!(from_json::<AttentionKernel>(&off_mask).is_err());
    }

    #[test]
    fn logit_nulls_off_mask_only() {
        let text = r#"{"schema":"logit-matrix/1","n":2,"mask":{"kind":"causal"},"logits":[[1.5,null],[0.5,1.5]]}"#;
        let m: LogitMatrix = from_json(text).unwrap();
        assert!(m.logits[[0, 1]].is_nan());
        let back: LogitMatrix = from_json(&to_json(&m).unwrap()).unwrap();
        assert_eq!(back.logits[[1, 0]], 0.5);
        let bad = text.replace("[0.5,1.5]", "[null,1.5]");
        assert!(from_json::<LogitMatrix>(&bad).is_err());
    }

    #[test]
    fn csv_files_validate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RolloutConfig::homogeneous(
            MaskSpec::causal(3).unwrap(),
            LayerLogitModel::content_only(ContentModel::zero()),
            MixingSchedule::constant(2, 0.5).unwrap(),
            Variant::ResidualAware,
        )
        .unwrap();
        let res = run_rollout(&cfg, RolloutOptions::default()).unwrap();
        let traj = dir.path().join("traj.csv");
        write_trajectory_csv(&traj, &res).unwrap();
        assert_eq!(validate(&traj).unwrap(), "trajectory-csv");
        assert_eq!(read_trajectory_csv(&traj).unwrap(), res.trajectory());

        let table = dir.path().join("table.csv");
        write_comparison_table(
            &table,
            &[ComparisonRow {
                label: "toy".into(),
                results: vec![(
                    Variant::ResidualAware,
                    ComparisonResult {
                        spearman: 0.5,
                        wasserstein: 0.25,
                        n: 3,
                    },
                )],
            }],
        )
        .unwrap();
        assert_eq!(validate(&table).unwrap(), "comparison-csv");
        let body = fs::read_to_string(&table).unwrap();
        assert!(body.starts_with("config,a_spearman,a_wasserstein,b_spearman"));
        assert!(body.contains("toy,,,0.5,0.25,,\n"));

        let junk = dir.path().join("junk.csv");
        fs::write(&junk, "x,y\n1,2\n").unwrap();
        assert!(validate(&junk).is_err());
        let crlf = dir.path().join("crlf.csv");
        fs::write(&crlf, "depth,position,mass\r\n1,1,1\r\n").unwrap();
        assert!(validate(&crlf).is_err());
    }
}
