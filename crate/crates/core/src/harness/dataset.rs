//! JSONL datasets: one record per line, tagged by `kind`.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Demonstration, Featured, Query};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset<S: Scalar = f64> {
    pub demonstrations: Vec<Demonstration<S>>,
    pub queries: Vec<Query<S>>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "")]
enum Record<S: Scalar> {
    Demonstration(Demonstration<S>),
    Query(Query<S>),
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "")]
enum RecordRef<'a, S: Scalar> {
    Demonstration(&'a Demonstration<S>),
    Query(&'a Query<S>),
}

#[derive(Default)]
struct Dims {
    image: Option<usize>,
    text: Option<usize>,
}

impl Dims {
    fn check<S: Scalar>(&mut self, item: &impl Featured<S>) -> std::result::Result<(), String> {
        for (slot, part, f) in [
            (&mut self.image, "image", item.image_feature()),
            (&mut self.text, "text", item.text_feature()),
        ] {
            if let Some(f) = f {
                match slot {
                    Some(d) if *d != f.dim() => {
                        return Err(format!(
                            "{part} feature of {} has dimension {}, expected {d}",
                            item.id(),
                            f.dim()
                        ))
                    }
                    Some(_) => {}
                    None => *slot = Some(f.dim()),
                }
            }
        }
        Ok(())
    }
}

/// Parses JSONL. Blank lines are skipped; errors carry 1-based line numbers.
pub fn parse_dataset<S: Scalar>(reader: impl BufRead) -> Result<Dataset<S>> {
    let mut out = Dataset {
        demonstrations: Vec::new(),
        queries: Vec::new(),
    };
    let mut dims = Dims::default();
    let (mut demo_ids, mut query_ids) = (HashSet::new(), HashSet::new());
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let fail = |message: String| Error::Dataset { line: line_no, message };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record<S> = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        match record {
            Record::Demonstration(d) => {
                dims.check(&d).map_err(fail)?;
                if !demo_ids.insert(d.id.clone()) {
                    return Err(fail(format!("duplicate demonstration id {:?}", d.id)));
                }
                out.demonstrations.push(d);
            }
            Record::Query(q) => {
                dims.check(&q).map_err(fail)?;
                if !query_ids.insert(q.id.clone()) {
                    return Err(fail(format!("duplicate query id {:?}", q.id)));
                }
                out.queries.push(q);
            }
        }
    }
    Ok(out)
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_dataset(BufReader::new(file))
}

/// Demonstrations first, then queries.
pub fn write_dataset<S: Scalar>(dataset: &Dataset<S>, mut w: impl Write) -> Result<()> {
    for d in &dataset.demonstrations {
        serde_json::to_writer(&mut w, &RecordRef::Demonstration(d))?;
        w.write_all(b"\n")?;
    }
    for q in &dataset.queries {
        serde_json::to_writer(&mut w, &RecordRef::Query(q))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset<S: Scalar>(dataset: &Dataset<S>, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}
