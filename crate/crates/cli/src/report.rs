//! Report artifacts: deterministic JSON, CSV tables and run directories.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use pathmfg_core::{FlowOfMeasures, Path as StatePath, TimeGrid};
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// One contracted check in a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    /// `"le"` when the check is `value ≤ limit`, `"ge"` for `value ≥ limit`.
    pub relation: &'static str,
    pub pass: bool,
}

/// A JSON report under construction.
#[derive(Debug, Clone, Default)]
pub struct Report {
    fields: Map<String, Value>,
    assertions: Vec<Assertion>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut r = Self::default();
        r.fields.insert("command".into(), Value::String(command.into()));
        r
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("report values serialize");
        self.fields.insert(key.into(), value);
    }

    /// `value ≤ limit`; NaN fails.
    pub fn at_most(&mut self, name: &str, value: f64, limit: f64) {
        self.push(name, value, limit, "le", value <= limit);
    }

    /// `value ≥ limit`; NaN fails.
    pub fn at_least(&mut self, name: &str, value: f64, limit: f64) {
        self.push(name, value, limit, "ge", value >= limit);
    }

    /// A yes/no check recorded as `1 ≥ 1` or `0 ≥ 1`.
    pub fn holds(&mut self, name: &str, ok: bool) {
        self.push(name, if ok { 1.0 } else { 0.0 }, 1.0, "ge", ok);
    }

    fn push(&mut self, name: &str, value: f64, limit: f64, relation: &'static str, pass: bool) {
        self.assertions.push(Assertion {
            name: name.into(),
            value,
            limit,
            relation,
            pass,
        });
    }

    pub fn assertions(&self) -> &[Assertion] {
        &self.assertions
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    /// Moves another report's fields under `key` and its assertions here,
    /// prefixed with `key/`.
    pub fn absorb(&mut self, key: &str, other: Report) {
        let passed = other.passed();
        let mut fields = other.fields;
        fields.remove("command");
        fields.insert("passed".into(), Value::Bool(passed));
        self.fields.insert(key.into(), Value::Object(fields));
        for mut a in other.assertions {
            a.name = format!("{key}/{}", a.name);
            self.assertions.push(a);
        }
    }

    /// Moves another report's fields and assertions here unchanged.
    pub fn merge(&mut self, other: Report) {
        let mut fields = other.fields;
        fields.remove("command");
        self.fields.extend(fields);
        self.assertions.extend(other.assertions);
    }

    pub fn to_value(&self) -> Value {
        let mut fields = self.fields.clone();
        fields.insert(
            "assertions".into(),
            serde_json::to_value(&self.assertions).expect("assertions serialize"),
        );
        fields.insert("passed".into(), Value::Bool(self.passed()));
        Value::Object(fields)
    }
}

/// Pretty printing with every float in `{:.16e}` form (17 significant digits).
struct FixedFloats<'a>(PrettyFormatter<'a>);

impl Formatter for FixedFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes with sorted keys and fixed float formatting. Non-finite floats
/// have already become `null` in the value tree.
pub fn to_json_bytes(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloats(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser).expect("writing to memory");
    out.push(b'\n');
    out
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn content_hash(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest.iter() {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Creates `<root>/<command>-<UTC timestamp>`, adding `-2`, `-3`, … if taken.
pub fn run_directory(root: &Path, command: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let base = format!("{command}-{stamp}");
    let mut candidate = root.join(&base);
    let mut n = 1;
    loop {
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                n += 1;
                candidate = root.join(format!("{base}-{n}"));
            }
            Err(e) => return Err(e),
        }
    }
}

pub fn write_json(path: &Path, value: &Value) -> io::Result<()> {
    fs::write(path, to_json_bytes(value))
}

fn csv_error(e: csv::Error) -> io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => io::Error::other(format!("{other:?}")),
    }
}

/// Writes a header and rows of numbers in shortest round-trip form.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(csv_error)?;
    }
    w.flush()
}

fn coords(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Long-format flow: `t,w,x1..xd`, one row per particle and node.
pub fn write_flow(path: &Path, flow: &FlowOfMeasures) -> io::Result<()> {
    let grid = flow.grid();
    let mut header = vec!["t".to_string(), "w".to_string()];
    header.extend(coords("x", flow.dim()));
    let rows = flow.snapshots().iter().enumerate().flat_map(|(i, m)| {
        let t = grid.time(i);
        m.iter().map(move |(x, w)| {
            let mut row = vec![t, w];
            row.extend_from_slice(x);
            row
        })
    });
    write_table(path, &header, rows)
}

/// `t,x1..xd,u1..uk`; the control columns are empty at the final node.
pub fn write_path(path: &Path, grid: &TimeGrid, p: &StatePath) -> io::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend(coords("x", p.state_dim()));
    header.extend(coords("u", p.control_dim()));
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(&header).map_err(csv_error)?;
    for node in p.start_node()..=p.end_node() {
        let mut row: Vec<String> = vec![format!("{:?}", grid.time(node))];
        row.extend(p.state(node).iter().map(|v| format!("{v:?}")));
        if node < p.end_node() {
            row.extend(p.control(node).iter().map(|v| format!("{v:?}")));
        } else {
            row.extend(std::iter::repeat_n(String::new(), p.control_dim()));
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()
}
