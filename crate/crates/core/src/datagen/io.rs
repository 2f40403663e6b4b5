use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{validate_logs, CatalogMatrix, ExposureLog, GeneratedData, GroundTruth, TaskSet};
use crate::error::{Error, Result};

pub const CATALOG_MAGIC: &[u8; 4] = b"GRCT";
pub const CATALOG_VERSION: u32 = 1;

#[derive(Serialize)]
struct LogLineOut<'a> {
    user_id: u64,
    request_id: u64,
    ts: i64,
    item_id: u64,
    labels: IndexMap<&'a str, u8>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLineIn {
    user_id: u64,
    request_id: u64,
    ts: i64,
    item_id: u64,
    labels: IndexMap<String, u8>,
}

#[derive(Serialize)]
struct TruthLineOut<'a> {
    user_id: u64,
    request_id: u64,
    item_id: u64,
    probs: IndexMap<&'a str, f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthLineIn {
    user_id: u64,
    request_id: u64,
    item_id: u64,
    probs: IndexMap<String, f64>,
}

pub fn write_logs(logs: &[ExposureLog], tasks: &TaskSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for log in logs {
        let line = LogLineOut {
            user_id: log.user_id,
            request_id: log.request_id,
            ts: log.ts,
            item_id: log.item_id,
            labels: tasks
                .names()
                .iter()
                .map(String::as_str)
                .zip(log.labels.iter().copied())
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Extracts values in task order, naming the first missing or unknown task.
fn by_task<T: Copy>(
    map: &IndexMap<String, T>,
    tasks: &TaskSet,
    path: &Path,
    line: usize,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(tasks.len());
    for name in tasks.names() {
        match map.get(name) {
            Some(v) => out.push(*v),
            None => return Err(parse_err(path, line, format!("missing label for task `{name}`"))),
        }
    }
    if let Some(extra) = map.keys().find(|k| tasks.index_of(k).is_none()) {
        return Err(parse_err(path, line, format!("unknown task `{extra}`")));
    }
    Ok(out)
}

/// Task names in the order they appear in the first record's labels.
pub fn read_task_names(path: &Path) -> Result<TaskSet> {
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogLineIn =
            serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        return TaskSet::new(rec.labels.into_keys());
    }
    Err(Error::Validation(format!("{} holds no records", path.display())))
}

/// Reads and validates a JSON-lines log file. Blank lines are skipped.
pub fn read_logs(path: &Path, tasks: &TaskSet) -> Result<Vec<ExposureLog>> {
    let reader = BufReader::new(File::open(path)?);
    let mut logs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogLineIn =
            serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let labels = by_task(&rec.labels, tasks, path, lineno)?;
        if let Some((k, v)) = labels.iter().enumerate().find(|(_, v)| **v > 1) {
            return Err(parse_err(
                path,
                lineno,
                format!("label `{}` = {v} is not binary", tasks.names()[k]),
            ));
        }
        logs.push(ExposureLog {
            user_id: rec.user_id,
            request_id: rec.request_id,
            ts: rec.ts,
            item_id: rec.item_id,
            labels,
        });
    }
    validate_logs(&logs, tasks)?;
    Ok(logs)
}

pub fn write_truth(truth: &[GroundTruth], tasks: &TaskSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in truth {
        let line = TruthLineOut {
            user_id: t.user_id,
            request_id: t.request_id,
            item_id: t.item_id,
            probs: tasks
                .names()
                .iter()
                .map(String::as_str)
                .zip(t.probs.iter().copied())
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path, tasks: &TaskSet) -> Result<Vec<GroundTruth>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TruthLineIn =
            serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(GroundTruth {
            user_id: rec.user_id,
            request_id: rec.request_id,
            item_id: rec.item_id,
            probs: by_task(&rec.probs, tasks, path, i + 1)?,
        });
    }
    Ok(out)
}

/// Little-endian: magic, u32 version, u32 rows, u32 dim, row-major f32.
pub fn write_catalog(matrix: &CatalogMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CATALOG_MAGIC)?;
    w.write_all(&CATALOG_VERSION.to_le_bytes())?;
    w.write_all(&(matrix.rows as u32).to_le_bytes())?;
    w.write_all(&(matrix.dim as u32).to_le_bytes())?;
    for v in &matrix.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_catalog(path: &Path) -> Result<CatalogMatrix> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Validation(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CATALOG_MAGIC {
        return Err(bad("not a catalog file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != CATALOG_VERSION {
        return Err(bad("unsupported catalog version"));
    }
    let rows = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let body = &bytes[16..];
    if body.len() != rows * dim * 4 {
        return Err(bad("payload size does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(CatalogMatrix { rows, dim, data })
}

/// Writes `logs.jsonl`, `truth.jsonl`, `catalog.bin` and, when present,
/// `side.bin` into `dir`.
pub fn write_dataset(data: &GeneratedData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_logs(&data.logs, &data.tasks, &dir.join("logs.jsonl"))?;
    write_truth(&data.truth, &data.tasks, &dir.join("truth.jsonl"))?;
    write_catalog(&data.catalog.latents, &dir.join("catalog.bin"))?;
    if let Some(side) = &data.catalog.side {
        write_catalog(side, &dir.join("side.bin"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_logs, GeneratorConfig};

    fn tasks() -> TaskSet {
        TaskSet::default()
    }

    #[test]
    fn missing_task_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs.jsonl");
        std::fs::write(
            &p,
            "{\"user_id\":1,\"request_id\":1,\"ts\":5,\"item_id\":3,\"labels\":{\"click\":1,\"engage\":0}}\n\
             {\"user_id\":1,\"request_id\":2,\"ts\":6,\"item_id\":3,\"labels\":{\"click\":1}}\n",
        )
        .unwrap();
        match read_logs(&p, &tasks()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("engage"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs.jsonl");
        std::fs::write(
            &p,
            "{\"user_id\":1,\"request_id\":1,\"ts\":5,\"item_id\":3,\"labels\":{\"click\":1,\"engage\":0}}\n\
             {\"user_id\":1,\"request_id\":2,\"ts\":6\n",
        )
        .unwrap();
        assert!(matches!(read_logs(&p, &tasks()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn same_request_two_timestamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs.jsonl");
        std::fs::write(
            &p,
            "{\"user_id\":1,\"request_id\":9,\"ts\":5,\"item_id\":3,\"labels\":{\"click\":1,\"engage\":0}}\n\
             {\"user_id\":1,\"request_id\":9,\"ts\":6,\"item_id\":4,\"labels\":{\"click\":0,\"engage\":0}}\n",
        )
        .unwrap();
        assert!(matches!(read_logs(&p, &tasks()), Err(Error::Validation(_))));
    }

    #[test]
    fn field_names_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs.jsonl");
        let log = ExposureLog {
            user_id: 2,
            request_id: 5,
            ts: 100,
            item_id: 7,
            labels: vec![1, 0],
        };
        write_logs(&[log], &tasks(), &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "{\"user_id\":2,\"request_id\":5,\"ts\":100,\"item_id\":7,\"labels\":{\"click\":1,\"engage\":0}}\n"
        );
    }

    #[test]
    fn dataset_round_trip() {
        let config = GeneratorConfig {
            num_users: 100,
            num_items: 200,
            requests_per_user: 50,
            items_per_request: 4,
            side_dim: 4,
            seed: 11,
            ..Default::default()
        };
        let data = generate_logs(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let logs = read_logs(&dir.path().join("logs.jsonl"), &data.tasks).unwrap();
        assert_eq!(logs.len(), 20_000);
        assert_eq!(logs, data.logs);
        let truth = read_truth(&dir.path().join("truth.jsonl"), &data.tasks).unwrap();
        assert_eq!(truth, data.truth);
        assert_eq!(read_catalog(&dir.path().join("catalog.bin")).unwrap(), data.catalog.latents);
        assert_eq!(read_catalog(&dir.path().join("side.bin")).unwrap(), data.catalog.side.unwrap());
    }

    #[test]
    fn catalog_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let m = CatalogMatrix {
            rows: 2,
            dim: 1,
            data: vec![1.0, -2.0],
        };
        write_catalog(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"GRCT");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }
}
