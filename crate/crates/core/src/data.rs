//! In-memory feature datasets and their CSV file formats.
//!
//! Feature file:
//!
//! ```text
//! # hierloss-features n=40 dim=16 levels=2 classes=2,4
//! split,y1,y2,f1,...,f16
//! train,0,1,0.25,...
//! ```
//!
//! Class-embedding file (one block of `C_l` rows per level, levels 1-based):
//!
//! ```text
//! # hierloss-embeddings dim=16 levels=2 classes=2,4
//! level,class,e1,...,e16
//! 1,0,0.5,...
//! ```
//!
//! Prediction file: `sample_id,pred_1..pred_L,true_1..true_L`.
//!
//! A dataset directory holds `taxonomy.json`, `features.csv` and
//! `embeddings.csv`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::embedspace::Matrix;
use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::taxonomy::{LabelPath, Taxonomy};

/// Features with one ground-truth path per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub features: Matrix,
    pub labels: Vec<LabelPath>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let dim = self.features.dim();
        let mut values = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            values.extend_from_slice(self.features.row(i));
        }
        Samples {
            features: Matrix::from_vec(idx.len(), dim, values).expect("rows copied from a valid matrix"),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

/// Taxonomy, train/validation splits and per-level class embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub train: Samples,
    pub val: Samples,
    pub class_embeds: Vec<Matrix>,
}

pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.features.dim()
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let taxonomy = Taxonomy::load(dir.join(TAXONOMY_FILE))?;
        let (train, val) = read_features(dir.join(FEATURES_FILE), &taxonomy)?;
        let class_embeds = read_class_embeddings(dir.join(EMBEDDINGS_FILE), &taxonomy)?;
        let ds = Dataset {
            taxonomy,
            train,
            val,
            class_embeds,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the three dataset files into an existing directory.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.taxonomy.save(dir.join(TAXONOMY_FILE))?;
        write_features(dir.join(FEATURES_FILE), &self.taxonomy, &self.train, &self.val)?;
        write_class_embeddings(dir.join(EMBEDDINGS_FILE), &self.class_embeds)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = self.taxonomy.level_sizes();
        if self.class_embeds.len() != sizes.len() {
            return Err(Error::DimensionMismatch {
                what: "class embedding levels",
                expected: sizes.len(),
                got: self.class_embeds.len(),
            });
        }
        for (m, &c) in self.class_embeds.iter().zip(&sizes) {
            if m.rows() != c {
                return Err(Error::DimensionMismatch {
                    what: "class embedding rows",
                    expected: c,
                    got: m.rows(),
                });
            }
            if m.dim() != self.dim() {
                return Err(Error::DimensionMismatch {
                    what: "class embedding dim",
                    expected: self.dim(),
                    got: m.dim(),
                });
            }
        }
        if self.train.is_empty() {
            return Err(Error::invalid("dataset", "training split is empty"));
        }
        if self.val.features.dim() != self.dim() && !self.val.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "validation feature dim",
                expected: self.dim(),
                got: self.val.features.dim(),
            });
        }
        for p in self.train.labels.iter().chain(&self.val.labels) {
            self.taxonomy.check_path(p)?;
        }
        Ok(())
    }
}

fn format_err(kind: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(kind: &'static str, path: &Path, line: &str, magic: &str) -> Result<BTreeMap<String, String>> {
    let rest = line
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|l| l.strip_prefix(magic))
        .ok_or_else(|| format_err(kind, path, format!("first line must start with `# {magic}`")))?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format_err(kind, path, format!("bad header field {kv:?}")))
        })
        .collect()
}

fn header_usize(kind: &'static str, path: &Path, h: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    h.get(key)
        .ok_or_else(|| format_err(kind, path, format!("header lacks {key}")))?
        .parse()
        .map_err(|_| format_err(kind, path, format!("header {key} is not an integer")))
}

fn header_sizes(kind: &'static str, path: &Path, h: &BTreeMap<String, String>) -> Result<Vec<usize>> {
    h.get("classes")
        .ok_or_else(|| format_err(kind, path, "header lacks classes"))?
        .split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| format_err(kind, path, "header classes must be integers"))
        })
        .collect()
}

fn split_first_line<'a>(kind: &'static str, path: &Path, text: &'a str) -> Result<(&'a str, &'a str)> {
    text.split_once('\n')
        .map(|(a, b)| (a.trim_end_matches('\r'), b))
        .ok_or_else(|| format_err(kind, path, "missing header line"))
}

fn sizes_string(sizes: &[usize]) -> String {
    sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v:?}")
}

/// Writes both splits into a single feature file.
pub fn write_features(path: impl AsRef<Path>, taxonomy: &Taxonomy, train: &Samples, val: &Samples) -> Result<()> {
    let path = path.as_ref();
    let sizes = taxonomy.level_sizes();
    let dim = train.features.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["split".to_string()];
    header.extend((1..=sizes.len()).map(|l| format!("y{l}")));
    header.extend((1..=dim).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (split, s) in [("train", train), ("val", val)] {
        for (row, label) in s.features.iter_rows().zip(&s.labels) {
            let mut rec = vec![split.to_string()];
            rec.extend(label.ids().iter().map(usize::to_string));
            rec.extend(row.iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
    }
    let body =
        String::from_utf8(w.into_inner().map_err(|e| Error::io(path, e.into_error()))?).expect("csv output is utf-8");
    let text = format!(
        "# hierloss-features n={} dim={} levels={} classes={}\n{body}",
        train.len() + val.len(),
        dim,
        sizes.len(),
        sizes_string(&sizes)
    );
    write_text(path, &text)
}

/// Reads a feature file and checks it against `taxonomy`. Returns `(train, val)`.
pub fn read_features(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<(Samples, Samples)> {
    const KIND: &str = "features";
    let path = path.as_ref();
    let text = read_text(path)?;
    let (first, body) = split_first_line(KIND, path, &text)?;
    let h = parse_header(KIND, path, first, "hierloss-features")?;
    let n = header_usize(KIND, path, &h, "n")?;
    let dim = header_usize(KIND, path, &h, "dim")?;
    let levels = header_usize(KIND, path, &h, "levels")?;
    let sizes = header_sizes(KIND, path, &h)?;
    if levels != taxonomy.num_levels() || sizes != taxonomy.level_sizes() {
        return Err(format_err(KIND, path, "header level sizes do not match the taxonomy"));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let mut parts: [(Vec<f64>, Vec<LabelPath>); 2] = Default::default();
    let mut count = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 1 + levels + dim {
            return Err(format_err(
                KIND,
                path,
                format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    rec.len(),
                    1 + levels + dim
                ),
            ));
        }
        let slot = match &rec[0] {
            "train" => 0,
            "val" => 1,
            other => return Err(format_err(KIND, path, format!("unknown split {other:?}"))),
        };
        let ids = (1..=levels)
            .map(|i| rec[i].trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format_err(KIND, path, format!("row {}: bad label", line + 1)))?;
        let label = LabelPath(ids);
        taxonomy.check_path(&label)?;
        for j in 0..dim {
            let v: f64 = rec[1 + levels + j]
                .trim()
                .parse()
                .map_err(|_| format_err(KIND, path, format!("row {}: bad feature value", line + 1)))?;
            parts[slot].0.push(v);
        }
        parts[slot].1.push(label);
        count += 1;
    }
    if count != n {
        return Err(format_err(KIND, path, format!("header says n={n}, found {count} rows")));
    }
    let [(tv, tl), (vv, vl)] = parts;
    Ok((
        Samples {
            features: Matrix::from_vec(tl.len(), dim, tv)?,
            labels: tl,
        },
        Samples {
            features: Matrix::from_vec(vl.len(), dim, vv)?,
            labels: vl,
        },
    ))
}

pub fn write_class_embeddings(path: impl AsRef<Path>, embeds: &[Matrix]) -> Result<()> {
    let path = path.as_ref();
    let dim = embeds.first().map_or(0, Matrix::dim);
    let sizes: Vec<usize> = embeds.iter().map(Matrix::rows).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["level".to_string(), "class".to_string()];
    header.extend((1..=dim).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (l, m) in embeds.iter().enumerate() {
        for (c, row) in m.iter_rows().enumerate() {
            let mut rec = vec![(l + 1).to_string(), c.to_string()];
            rec.extend(row.iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
    }
    let body =
        String::from_utf8(w.into_inner().map_err(|e| Error::io(path, e.into_error()))?).expect("csv output is utf-8");
    let text = format!(
        "# hierloss-embeddings dim={dim} levels={} classes={}\n{body}",
        sizes.len(),
        sizes_string(&sizes)
    );
    write_text(path, &text)
}

pub fn read_class_embeddings(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<Vec<Matrix>> {
    const KIND: &str = "class-embedding";
    let path = path.as_ref();
    let text = read_text(path)?;
    let (first, body) = split_first_line(KIND, path, &text)?;
    let h = parse_header(KIND, path, first, "hierloss-embeddings")?;
    let dim = header_usize(KIND, path, &h, "dim")?;
    let sizes = header_sizes(KIND, path, &h)?;
    if sizes != taxonomy.level_sizes() {
        return Err(format_err(KIND, path, "header level sizes do not match the taxonomy"));
    }
    let mut out: Vec<Matrix> = sizes.iter().map(|&c| Matrix::zeros(c, dim)).collect();
    let mut seen: Vec<Vec<bool>> = sizes.iter().map(|&c| vec![false; c]).collect();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| format_err(KIND, path, format!("row {}: {what}", line + 1));
        if rec.len() != 2 + dim {
            return Err(bad("wrong field count"));
        }
        let level: usize = rec[0].trim().parse().map_err(|_| bad("bad level"))?;
        let class: usize = rec[1].trim().parse().map_err(|_| bad("bad class"))?;
        if level == 0 || level > sizes.len() || class >= sizes[level - 1] {
            return Err(bad("level or class out of range"));
        }
        if std::mem::replace(&mut seen[level - 1][class], true) {
            return Err(bad("duplicate class row"));
        }
        let row = out[level - 1].row_mut(class);
        for j in 0..dim {
            row[j] = rec[2 + j].trim().parse().map_err(|_| bad("bad value"))?;
            if !row[j].is_finite() {
                return Err(bad("non-finite value"));
            }
        }
    }
    if seen.iter().flatten().any(|s| !s) {
        return Err(format_err(KIND, path, "missing class rows"));
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &PredictionSet) -> Result<()> {
    let path = path.as_ref();
    let levels = preds.num_levels();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=levels).map(|l| format!("pred_{l}")));
    header.extend((1..=levels).map(|l| format!("true_{l}")));
    w.write_record(&header)?;
    for (i, (p, t)) in preds.predicted().iter().zip(preds.truth()).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(p.ids().iter().chain(t.ids()).map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a prediction file. A header row is optional.
pub fn read_predictions(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<PredictionSet> {
    const KIND: &str = "prediction";
    let path = path.as_ref();
    let levels = taxonomy.num_levels();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if line == 0 && rec.get(0).is_some_and(|f| f.parse::<u64>().is_err()) {
            continue;
        }
        if rec.len() != 1 + 2 * levels {
            return Err(format_err(
                KIND,
                path,
                format!("row {} has {} fields, expected {}", line + 1, rec.len(), 1 + 2 * levels),
            ));
        }
        let ids = (1..rec.len())
            .map(|i| rec[i].parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format_err(KIND, path, format!("row {}: ids must be integers", line + 1)))?;
        predicted.push(LabelPath(ids[..levels].to_vec()));
        truth.push(LabelPath(ids[levels..].to_vec()));
    }
    PredictionSet::new(taxonomy, predicted, truth)
}
