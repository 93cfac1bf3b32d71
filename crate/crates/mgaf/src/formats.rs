//! On-disk formats: inertial CSV, DSEQ1 depth sequences, PGM image dumps,
//! feature CSV and NCC tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mgaf_core::data::{DepthRecording, InertialRecording, INERTIAL_CHANNELS};
use mgaf_core::diagnostics::NccTable;
use mgaf_core::fusion::MultimodalFeatures;
use mgaf_core::Matrix2;

use crate::error::{Context, Error, Result};

pub const DSEQ_MAGIC: &[u8; 5] = b"DSEQ1";

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an inertial recording: a `#meta` line, the `ax,ay,az,gx,gy,gz`
/// header, then one sample per row.
pub fn load_inertial_csv(path: &Path) -> Result<InertialRecording> {
    parse_inertial_csv(&read_text(path)?, path)
}

pub fn parse_inertial_csv(text: &str, path: &Path) -> Result<InertialRecording> {
    let mut meta: Option<Meta> = None;
    let mut columns: Option<[usize; 6]> = None;
    let mut seqs: [Vec<f64>; 6] = Default::default();
    let mut row = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim_start();
            if let Some(fields) = rest.strip_prefix("meta") {
                meta = Some(parse_meta(fields, path, lineno + 1)?);
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some(cols) = columns else {
            columns = Some(parse_header(&cells, path)?);
            continue;
        };
        row += 1;
        if cells.len() != 6 {
            return Err(Error::parse(
                path,
                format!("row {row}: expected 6 values, found {}", cells.len()),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse(path, format!("row {row}, column {} ({}): not a number: '{cell}'", c + 1, INERTIAL_CHANNELS[cols[c]]))
            })?;
            seqs[cols[c]].push(v);
        }
    }
    if columns.is_none() {
        return Err(Error::parse(path, "missing header line"));
    }
    let meta = meta.ok_or_else(|| Error::parse(path, "missing '#meta' line"))?;
    InertialRecording::new(meta.rate, seqs, meta.label, meta.subject, meta.trial)
        .context(|| format!("{}", path.display()))
}

fn parse_header(cells: &[&str], path: &Path) -> Result<[usize; 6]> {
    if cells.len() != 6 {
        return Err(Error::parse(
            path,
            format!("expected 6 signal columns, found {}", cells.len()),
        ));
    }
    let mut map = [usize::MAX; 6];
    for (c, name) in cells.iter().enumerate() {
        let Some(k) = INERTIAL_CHANNELS.iter().position(|ch| ch == name) else {
            return Err(Error::parse(path, format!("column {}: unknown signal '{name}'", c + 1)));
        };
        if map.contains(&k) {
            return Err(Error::parse(path, format!("column {}: duplicate signal '{name}'", c + 1)));
        }
        map[c] = k;
    }
    Ok(map)
}

struct Meta {
    label: u32,
    subject: u32,
    trial: u32,
    rate: f64,
}

fn parse_meta(fields: &str, path: &Path, lineno: usize) -> Result<Meta> {
    let (mut label, mut subject, mut trial, mut rate) = (None, None, None, None);
    for kv in fields.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("line {lineno}: malformed meta field '{kv}'")))?;
        let bad = || Error::parse(path, format!("line {lineno}: bad value for '{k}': '{v}'"));
        match k {
            "label" => label = Some(v.parse().map_err(|_| bad())?),
            "subject" => subject = Some(v.parse().map_err(|_| bad())?),
            "trial" => trial = Some(v.parse().map_err(|_| bad())?),
            "rate" => rate = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(Error::parse(path, format!("line {lineno}: unknown meta key '{k}'"))),
        }
    }
    let missing = |k: &str| Error::parse(path, format!("line {lineno}: meta lacks '{k}'"));
    Ok(Meta {
        label: label.ok_or_else(|| missing("label"))?,
        subject: subject.ok_or_else(|| missing("subject"))?,
        trial: trial.ok_or_else(|| missing("trial"))?,
        rate: rate.ok_or_else(|| missing("rate"))?,
    })
}

pub fn inertial_csv_string(r: &InertialRecording) -> String {
    let mut s = format!(
        "#meta label={} subject={} trial={} rate={}\n{}\n",
        r.label,
        r.subject,
        r.trial,
        r.sample_rate(),
        INERTIAL_CHANNELS.join(",")
    );
    let seqs = r.sequences();
    for i in 0..r.len() {
        for (c, seq) in seqs.iter().enumerate() {
            if c > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", seq[i]);
        }
        s.push('\n');
    }
    s
}

pub fn write_inertial_csv(path: &Path, r: &InertialRecording) -> Result<()> {
    write_bytes(path, inertial_csv_string(r).as_bytes())
}

/// Reads a DSEQ1 file. The format carries only the label, so subject and
/// trial come back as 0.
pub fn load_depth_dseq(path: &Path) -> Result<DepthRecording> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dseq(&bytes, path)
}

pub fn decode_dseq(bytes: &[u8], path: &Path) -> Result<DepthRecording> {
    if bytes.len() < DSEQ_MAGIC.len() || &bytes[..DSEQ_MAGIC.len()] != DSEQ_MAGIC {
        return Err(Error::format(path, "bad magic, expected DSEQ1"));
    }
    let header = &bytes[DSEQ_MAGIC.len()..];
    if header.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let (rows, cols, frames, label) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    if rows == 0 || cols == 0 || frames == 0 {
        return Err(Error::format(
            path,
            format!("empty geometry {rows}x{cols}x{frames}"),
        ));
    }
    let frame_bytes = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(4))
        .ok_or_else(|| Error::format(path, "frame size overflows"))?;
    let mut payload = &header[16..];
    let mut out = Vec::with_capacity(frames.min(payload.len() / frame_bytes + 1));
    for f in 0..frames {
        if payload.len() < frame_bytes {
            return Err(Error::format(path, format!("truncated frame {f}")));
        }
        let (chunk, rest) = payload.split_at(frame_bytes);
        let data = chunk
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        out.push(Matrix2::new(rows, cols, data).context(|| format!("{}: frame {f}", path.display()))?);
        payload = rest;
    }
    if !payload.is_empty() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after frame {}", payload.len(), frames - 1),
        ));
    }
    DepthRecording::new(out, label, 0, 0).context(|| format!("{}", path.display()))
}

/// Depth values are stored as f32.
pub fn encode_dseq(d: &DepthRecording) -> Vec<u8> {
    let (rows, cols, frames) = d.dims();
    let mut out = Vec::with_capacity(DSEQ_MAGIC.len() + 16 + rows * cols * frames * 4);
    out.extend_from_slice(DSEQ_MAGIC);
    for v in [rows as u32, cols as u32, frames as u32, d.label] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for frame in d.frames() {
        for &v in frame.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_depth_dseq(path: &Path, d: &DepthRecording) -> Result<()> {
    write_bytes(path, &encode_dseq(d))
}

/// Binary 8-bit PGM of an image in [0, 1]; values outside are clamped.
pub fn write_pgm(path: &Path, img: &Matrix2) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path, &out)
}

/// Feature CSV: a `# stage_offsets=…` comment, a header, then one row per
/// sample with the label first.
pub fn features_csv_string(x: &MultimodalFeatures, labels: &[u32]) -> Result<String> {
    if labels.len() != x.rows() {
        return Err(Error::Config(format!(
            "{} labels for {} feature rows",
            labels.len(),
            x.rows()
        )));
    }
    let join = |v: &[String]| v.join(",");
    let offsets: Vec<String> = x.stage_offsets.iter().map(usize::to_string).collect();
    let mut s = format!(
        "# stage_offsets={} stage_names={} cols={}\nlabel",
        join(&offsets),
        join(&x.stage_names),
        x.cols()
    );
    for c in 0..x.cols() {
        let _ = write!(s, ",f{c}");
    }
    s.push('\n');
    for (r, label) in labels.iter().enumerate() {
        let _ = write!(s, "{label}");
        for v in x.data.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_features(path: &Path, x: &MultimodalFeatures, labels: &[u32]) -> Result<()> {
    write_bytes(path, features_csv_string(x, labels)?.as_bytes())
}

pub fn read_features(path: &Path) -> Result<(MultimodalFeatures, Vec<u32>)> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let comment = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::parse(path, "missing stage_offsets comment"))?;
    let (mut offsets, mut names, mut cols) = (None, None, None);
    for kv in comment.split_whitespace() {
        match kv.split_once('=') {
            Some(("stage_offsets", v)) => {
                offsets = Some(
                    v.split(',')
                        .map(|t| t.parse::<usize>().map_err(|_| Error::parse(path, format!("bad offset '{t}'"))))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            Some(("stage_names", v)) => names = Some(v.split(',').map(String::from).collect::<Vec<_>>()),
            Some(("cols", v)) => cols = Some(v.parse::<usize>().map_err(|_| Error::parse(path, format!("bad cols '{v}'")))?),
            _ => return Err(Error::parse(path, format!("unknown header field '{kv}'"))),
        }
    }
    let (offsets, names, cols) = match (offsets, names, cols) {
        (Some(o), Some(n), Some(c)) => (o, n, c),
        _ => return Err(Error::parse(path, "incomplete header comment")),
    };
    lines
        .next()
        .filter(|l| l.starts_with("label"))
        .ok_or_else(|| Error::parse(path, "missing column header"))?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (r, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default();
        labels.push(
            label
                .parse()
                .map_err(|_| Error::parse(path, format!("row {}: bad label '{label}'", r + 1)))?,
        );
        let before = data.len();
        for (c, cell) in cells.enumerate() {
            data.push(cell.parse::<f64>().map_err(|_| {
                Error::parse(path, format!("row {}, column {}: not a number: '{cell}'", r + 1, c + 2))
            })?);
        }
        if data.len() - before != cols {
            return Err(Error::parse(
                path,
                format!("row {}: expected {cols} features, found {}", r + 1, data.len() - before),
            ));
        }
    }
    let m = Matrix2::new(labels.len(), cols, data).context(|| format!("{}", path.display()))?;
    let x = MultimodalFeatures::new(m, offsets, names).context(|| format!("{}", path.display()))?;
    Ok((x, labels))
}

pub fn ncc_csv_string(t: &NccTable) -> String {
    let mut s = String::from("stage,value\n");
    for (stage, v) in &t.rows {
        let _ = writeln!(s, "{stage},{v}");
    }
    s
}

pub fn write_ncc_csv(path: &Path, t: &NccTable) -> Result<()> {
    write_bytes(path, ncc_csv_string(t).as_bytes())
}
