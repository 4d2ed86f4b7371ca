//! On-disk formats.
//!
//! * EMB1 vector tables: 8-byte magic `EMB1\0\0\0\0`, little-endian `u32`
//!   dimension, `u64` record count, then per record a `u32` id length, the
//!   UTF-8 id, and `dim` little-endian `f64` values.
//! * Label manifests: CSV with header `id,label`.
//! * Certification records: CSV `id,score,d_hat,d_lower,radius`, radius −1
//!   for rejected samples.
//! * Recall curves: CSV `r,recall_at_1_r`.
//!
//! CSV files may open with `#` comment lines (provenance); readers skip
//! them. Floats are written with 17 significant digits and `.` as decimal
//! separator, lines end in `\n`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::certify::{CertificationRecord, Score, REJECTED_RADIUS};
use crate::embedding::{InputVector, LabeledSample};
use crate::error::Error;
use crate::eval::{CertificateView, RecallCurve};

pub const EMB1_MAGIC: [u8; 8] = *b"EMB1\0\0\0\0";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("{path}")]
    Invalid {
        path: String,
        #[source]
        source: Error,
    },
}

impl FormatError {
    fn malformed(path: &str, reason: impl Into<String>) -> Self {
        FormatError::Malformed {
            path: path.to_string(),
            reason: reason.into(),
        }
    }

    /// Whether the failure came from the filesystem rather than the content.
    pub fn is_io(&self) -> bool {
        matches!(self, FormatError::Io { .. })
    }
}

fn io_err(path: &str) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_string(),
        source,
    }
}

fn csv_err(path: &str, e: csv::Error) -> FormatError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => FormatError::Io {
                path: path.to_string(),
                source,
            },
            _ => unreachable!("io error kind checked above"),
        }
    } else {
        FormatError::malformed(path, e.to_string())
    }
}

/// Formats a float with 17 significant digits, in positional notation when
/// the exponent is in [−5, 17) and scientific notation otherwise.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0.0000000000000000".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.16e}");
    let exp: i32 = sci[sci.find('e').expect("exponent present") + 1..]
        .parse()
        .expect("integer exponent");
    if (-5..17).contains(&exp) {
        format!("{v:.*}", (16 - exp) as usize)
    } else {
        sci
    }
}

/// Rows of an EMB1 table.
#[derive(Debug, Clone, PartialEq)]
pub struct Emb1Table {
    pub dim: usize,
    pub rows: Vec<(String, Vec<f64>)>,
}

pub fn write_emb1<W: Write>(mut w: W, dim: usize, rows: &[(String, Vec<f64>)]) -> io::Result<()> {
    let dim32 = u32::try_from(dim).map_err(|_| io::Error::other("dimension exceeds u32"))?;
    w.write_all(&EMB1_MAGIC)?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    for (id, values) in rows {
        if values.len() != dim {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!(
                    "row `{id}` has {} values, table dimension is {dim}",
                    values.len()
                ),
            ));
        }
        let len = u32::try_from(id.len()).map_err(|_| io::Error::other("id too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    path: &str,
    what: &str,
) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::malformed(path, format!("truncated while reading {what}"))
        } else {
            io_err(path)(e)
        }
    })
}

/// Reads an EMB1 stream; `path` only labels errors.
pub fn read_emb1<R: Read>(mut r: R, path: &str) -> Result<Emb1Table, FormatError> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, path, "magic")?;
    if magic != EMB1_MAGIC {
        return Err(FormatError::malformed(path, "not an EMB1 file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b4, path, "dimension")?;
    let dim = u32::from_le_bytes(b4) as usize;
    if dim == 0 {
        return Err(FormatError::malformed(path, "dimension is 0"));
    }
    read_exact_or(&mut r, &mut b8, path, "record count")?;
    let count = u64::from_le_bytes(b8);
    let mut rows = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut values_buf = vec![0u8; dim * 8];
    for i in 0..count {
        read_exact_or(&mut r, &mut b4, path, "id length")?;
        let mut id = vec![0u8; u32::from_le_bytes(b4) as usize];
        read_exact_or(&mut r, &mut id, path, "id")?;
        let id = String::from_utf8(id)
            .map_err(|_| FormatError::malformed(path, format!("record {i}: id is not UTF-8")))?;
        read_exact_or(&mut r, &mut values_buf, path, "values")?;
        let values = values_buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        rows.push((id, values));
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(Emb1Table { dim, rows }),
        Ok(_) => Err(FormatError::malformed(
            path,
            "trailing bytes after last record",
        )),
        Err(e) => Err(io_err(path)(e)),
    }
}

pub fn load_emb1(path: &Path) -> Result<Emb1Table, FormatError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(io_err(&p))?;
    read_emb1(BufReader::new(file), &p)
}

pub fn save_emb1(path: &Path, dim: usize, rows: &[(String, Vec<f64>)]) -> Result<(), FormatError> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(io_err(&p))?;
    write_emb1(BufWriter::new(file), dim, rows).map_err(io_err(&p))
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn expect_header(
    rdr: &mut csv::Reader<impl Read>,
    want: &[&str],
    path: &str,
) -> Result<(), FormatError> {
    let header = rdr.headers().map_err(|e| csv_err(path, e))?;
    let got: Vec<&str> = header.iter().collect();
    if got != want {
        return Err(FormatError::malformed(
            path,
            format!(
                "expected header {}, found {}",
                want.join(","),
                got.join(",")
            ),
        ));
    }
    Ok(())
}

/// Reads an `id,label` manifest into an id → label map (ids unique).
pub fn read_labels<R: Read>(r: R, path: &str) -> Result<Vec<(String, String)>, FormatError> {
    let mut rdr = csv_reader(r);
    expect_header(&mut rdr, &["id", "label"], path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push((row[0].to_string(), row[1].to_string()));
    }
    Ok(out)
}

pub fn write_labels<W: Write>(w: W, rows: &[(String, String)]) -> io::Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(["id", "label"])?;
    for (id, label) in rows {
        wtr.write_record([id, label])?;
    }
    wtr.flush()
}

/// Joins an EMB1 table of inputs with its label manifest. Sample order
/// follows the table.
pub fn load_samples(inputs: &Path, labels: &Path) -> Result<Vec<LabeledSample>, FormatError> {
    let table = load_emb1(inputs)?;
    let lp = labels.display().to_string();
    let file = File::open(labels).map_err(io_err(&lp))?;
    let label_rows = read_labels(BufReader::new(file), &lp)?;
    let mut by_id: HashMap<String, String> = HashMap::with_capacity(label_rows.len());
    for (id, label) in label_rows {
        if by_id.insert(id.clone(), label).is_some() {
            return Err(FormatError::malformed(&lp, format!("duplicate id `{id}`")));
        }
    }
    let ip = inputs.display().to_string();
    let mut samples = Vec::with_capacity(table.rows.len());
    for (id, values) in table.rows {
        let label = by_id
            .remove(&id)
            .ok_or_else(|| FormatError::malformed(&lp, format!("no label for id `{id}`")))?;
        let input = InputVector::new(values).map_err(|e| FormatError::Invalid {
            path: ip.clone(),
            source: e.for_sample(&id),
        })?;
        samples.push(LabeledSample { id, label, input });
    }
    Ok(samples)
}

pub const RECORD_HEADER: [&str; 5] = ["id", "score", "d_hat", "d_lower", "radius"];

/// A row of a records file.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub id: String,
    pub score: Score,
    pub d_hat: f64,
    pub d_lower: f64,
    pub radius: f64,
}

impl CertificateView for RecordRow {
    fn d_hat(&self) -> f64 {
        self.d_hat
    }

    fn d_lower(&self) -> f64 {
        self.d_lower
    }

    fn radius(&self) -> Option<f64> {
        (self.radius != REJECTED_RADIUS).then_some(self.radius)
    }
}

fn write_comments<W: Write>(w: &mut W, comments: &[String]) -> io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    Ok(())
}

pub fn write_records<W: Write>(
    mut w: W,
    records: &[CertificationRecord],
    comments: &[String],
) -> io::Result<()> {
    write_comments(&mut w, comments)?;
    let mut wtr = csv_writer(w);
    wtr.write_record(RECORD_HEADER)?;
    for r in records {
        wtr.write_record([
            r.id.clone(),
            r.score().as_str().to_string(),
            fmt_f64(r.d_hat),
            fmt_f64(r.d_lower),
            fmt_f64(r.radius_encoded()),
        ])?;
    }
    wtr.flush()
}

/// Reads a records file, returning the rows and the `#` comment lines.
pub fn read_records<R: Read>(
    r: R,
    path: &str,
) -> Result<(Vec<RecordRow>, Vec<String>), FormatError> {
    let mut text = String::new();
    BufReader::new(r)
        .read_to_string(&mut text)
        .map_err(io_err(path))?;
    let comments = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .collect();
    let mut rdr = csv_reader(text.as_bytes());
    expect_header(&mut rdr, &RECORD_HEADER, path)?;
    let mut rows = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let bad =
            |what: &str| FormatError::malformed(path, format!("row {}: bad {what}", line + 1));
        let num = |i: usize, what: &str| -> Result<f64, FormatError> {
            row[i].parse::<f64>().map_err(|_| bad(what))
        };
        let score = Score::parse(&row[1]).ok_or_else(|| bad("score"))?;
        let radius = num(4, "radius")?;
        let certified = score == Score::One;
        if certified != (radius > 0.0) || (!certified && radius != REJECTED_RADIUS) {
            return Err(bad("score/radius combination"));
        }
        rows.push(RecordRow {
            id: row[0].to_string(),
            score,
            d_hat: num(2, "d_hat")?,
            d_lower: num(3, "d_lower")?,
            radius,
        });
    }
    Ok((rows, comments))
}

pub const NEIGHBOR_HEADER: [&str; 6] = [
    "id",
    "label",
    "nn_same",
    "nn_same_distance",
    "nn_other",
    "nn_other_distance",
];

/// Per-record provenance: the two neighbors that define each margin.
pub fn write_neighbors<W: Write>(
    mut w: W,
    records: &[CertificationRecord],
    comments: &[String],
) -> io::Result<()> {
    write_comments(&mut w, comments)?;
    let mut wtr = csv_writer(w);
    wtr.write_record(NEIGHBOR_HEADER)?;
    for r in records {
        wtr.write_record([
            r.id.clone(),
            r.label.clone(),
            r.nn_same.id.clone(),
            fmt_f64(r.nn_same.distance),
            r.nn_other.id.clone(),
            fmt_f64(r.nn_other.distance),
        ])?;
    }
    wtr.flush()
}

pub fn write_curve<W: Write>(mut w: W, curve: &RecallCurve, comments: &[String]) -> io::Result<()> {
    write_comments(&mut w, comments)?;
    let mut wtr = csv_writer(w);
    wtr.write_record(["r", "recall_at_1_r"])?;
    for (r, v) in curve.radii.iter().zip(&curve.values) {
        wtr.write_record([fmt_f64(*r), fmt_f64(*v)])?;
    }
    wtr.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{CertParams, Outcome};
    use crate::margin::Neighbor;
    use proptest::prelude::*;

    #[test]
    fn float_format() {
        assert_eq!(fmt_f64(-1.0), "-1.0000000000000000");
        assert_eq!(fmt_f64(0.5), "0.50000000000000000");
        assert_eq!(fmt_f64(0.0), "0.0000000000000000");
        assert_eq!(fmt_f64(1.348_979_500_392_163_5), "1.3489795003921634");
        assert_eq!(fmt_f64(1e-7), "9.9999999999999995e-8");
        assert_eq!(fmt_f64(123.25), "123.25000000000000");
    }

    proptest! {
        #[test]
        fn float_format_round_trips(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
            let s = fmt_f64(v);
            prop_assert_eq!(s.parse::<f64>().unwrap(), v);
            prop_assert!(!s.contains(','));
        }

        #[test]
        fn emb1_round_trips(
            dim in 1usize..5,
            rows in prop::collection::vec(("[a-zA-Z0-9_é-]{0,12}", prop::collection::vec(-1e6f64..1e6, 4)), 0..6),
        ) {
            let rows: Vec<(String, Vec<f64>)> =
                rows.into_iter().map(|(id, v)| (id, v[..dim].to_vec())).collect();
            let mut buf = Vec::new();
            write_emb1(&mut buf, dim, &rows).unwrap();
            let table = read_emb1(buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(table, Emb1Table { dim, rows });
        }
    }

    #[test]
    fn emb1_layout_is_exact() {
        let mut buf = Vec::new();
        write_emb1(&mut buf, 2, &[("ab".into(), vec![1.0, -2.0])]).unwrap();
        let mut want = b"EMB1\0\0\0\0".to_vec();
        want.extend(2u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(1.0f64.to_le_bytes());
        want.extend((-2.0f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn emb1_rejects_corruption() {
        let mut buf = Vec::new();
        write_emb1(&mut buf, 1, &[("a".into(), vec![1.0])]).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_emb1(bad_magic.as_slice(), "m"),
            Err(FormatError::Malformed { .. })
        ));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            read_emb1(truncated, "m"),
            Err(FormatError::Malformed { .. })
        ));
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_emb1(trailing.as_slice(), "m").is_err());
        let mut ragged = Vec::new();
        assert!(write_emb1(&mut ragged, 2, &[("a".into(), vec![1.0])]).is_err());
    }

    fn record(id: &str, d_hat: f64, d_lower: f64, outcome: Outcome) -> CertificationRecord {
        let nb = Neighbor {
            id: "n".into(),
            distance: 0.1,
        };
        CertificationRecord {
            id: id.into(),
            label: "a".into(),
            d_hat,
            d_lower,
            outcome,
            nn_same: nb.clone(),
            nn_other: nb,
            params: CertParams {
                sigma: 0.1,
                n: 10,
                alpha: 0.01,
                f: 1.0,
                k: 2,
                seed: 0,
            },
        }
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![
            record("q,1", 0.5, 0.4, Outcome::Certified { radius: 0.12 }),
            record("q2", 0.2, -0.1, Outcome::Rejected),
            record("q3", -0.2, -0.5, Outcome::Rejected),
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs, &["config_sha256=abc".into()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# config_sha256=abc\nid,score,d_hat,d_lower,radius\n"));
        assert!(!text.contains('\r'));
        assert!(text.contains("q2,rejected,"));
        assert!(text.contains("q3,0,"));
        let (rows, comments) = read_records(buf.as_slice(), "mem").unwrap();
        assert_eq!(comments, vec!["config_sha256=abc"]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].id, "q,1");
        assert_eq!(rows[0].radius(), Some(0.12));
        assert_eq!(rows[1].radius(), None);
        assert_eq!(rows[1].radius, -1.0);
        assert_eq!(rows[2].score, Score::Zero);
        assert_eq!(rows[1].d_lower, -0.1);
    }

    #[test]
    fn records_reject_inconsistent_rows() {
        let text = "id,score,d_hat,d_lower,radius\nq,1,0.5,0.4,-1\n";
        assert!(read_records(text.as_bytes(), "m").is_err());
        let text = "id,score,d_hat,d_lower,radius\nq,maybe,0.5,0.4,0.1\n";
        assert!(read_records(text.as_bytes(), "m").is_err());
        let text = "id,radius\nq,0.1\n";
        assert!(read_records(text.as_bytes(), "m").is_err());
    }

    #[test]
    fn labels_and_samples() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = dir.path().join("x.emb1");
        let labels = dir.path().join("x.csv");
        save_emb1(
            &inputs,
            2,
            &[("b".into(), vec![1.0, 2.0]), ("a".into(), vec![0.0, -1.0])],
        )
        .unwrap();
        let mut f = File::create(&labels).unwrap();
        write_labels(
            &mut f,
            &[("a".into(), "cat".into()), ("b".into(), "dog".into())],
        )
        .unwrap();
        let samples = load_samples(&inputs, &labels).unwrap();
        assert_eq!(samples[0].id, "b");
        assert_eq!(samples[0].label, "dog");
        assert_eq!(samples[1].input.as_slice(), &[0.0, -1.0]);

        std::fs::write(&labels, "id,label\nb,dog\n").unwrap();
        assert!(matches!(
            load_samples(&inputs, &labels),
            Err(FormatError::Malformed { .. })
        ));
        let missing = load_samples(&dir.path().join("nope.emb1"), &labels).unwrap_err();
        assert!(missing.is_io());
    }
}
