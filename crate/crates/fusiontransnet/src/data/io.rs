//! Dataset directory format.
//!
//! ```text
//! <dir>/
//!   manifest          # modes = taxi,bus,bike / steps = 720
//!   <mode>/
//!     flows.csv       # t,i,j,count — nonzero OD cells
//!     features.csv    # t,node,inflow,outflow[,poi...]
//!     gridmap.csv     # node,p,q — lexicographically increasing (p,q)
//! ```
//!
//! The loader validates everything it reads and reports violations as
//! ingestion errors naming the file, row, and rule.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::error::{FtnError, Result};
use crate::graph::{GridId, ModeId, ModeSeries, ODGraphSnapshot};

fn ingest(file: &Path, row: usize, rule: impl Into<String>) -> FtnError {
    FtnError::Ingestion {
        file: file.display().to_string(),
        row,
        rule: rule.into(),
    }
}

/// Writes a dataset directory, one subdirectory per mode. Zero flow cells
/// are omitted from `flows.csv`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| FtnError::io(dir.display().to_string(), e))?;

    let manifest_path = dir.join("manifest");
    let mode_names: Vec<&str> = dataset.modes.iter().map(|m| m.mode.name.as_str()).collect();
    let manifest = format!(
        "modes = {}\nsteps = {}\n",
        mode_names.join(","),
        dataset.steps()
    );
    fs::write(&manifest_path, manifest)
        .map_err(|e| FtnError::io(manifest_path.display().to_string(), e))?;

    for series in &dataset.modes {
        let mode_dir = dir.join(&series.mode.name);
        fs::create_dir_all(&mode_dir)
            .map_err(|e| FtnError::io(mode_dir.display().to_string(), e))?;

        let write = |name: &str, content: String| -> Result<()> {
            let path = mode_dir.join(name);
            let mut f = fs::File::create(&path)
                .map_err(|e| FtnError::io(path.display().to_string(), e))?;
            f.write_all(content.as_bytes())
                .map_err(|e| FtnError::io(path.display().to_string(), e))
        };

        let mut gridmap = String::from("node,p,q\n");
        for (node, grid) in series.nodes.iter().enumerate() {
            gridmap.push_str(&format!("{node},{},{}\n", grid.p, grid.q));
        }
        write("gridmap.csv", gridmap)?;

        let mut flows = String::from("t,i,j,count\n");
        for snap in &series.snapshots {
            for ((i, j), v) in snap.flow.indexed_iter() {
                if *v != 0.0 {
                    flows.push_str(&format!("{},{i},{j},{v}\n", snap.time_index));
                }
            }
        }
        write("flows.csv", flows)?;

        let extra = series
            .snapshots
            .first()
            .map(|s| s.features.ncols().saturating_sub(2))
            .unwrap_or(0);
        let mut header = String::from("t,node,inflow,outflow");
        for p in 0..extra {
            header.push_str(&format!(",poi{p}"));
        }
        header.push('\n');
        let mut features = header;
        for snap in &series.snapshots {
            for (node, row) in snap.features.rows().into_iter().enumerate() {
                features.push_str(&format!("{},{node}", snap.time_index));
                for v in row.iter() {
                    features.push_str(&format!(",{v}"));
                }
                features.push('\n');
            }
        }
        write("features.csv", features)?;
    }
    Ok(())
}

struct CsvFile {
    path: std::path::PathBuf,
    lines: Vec<(usize, Vec<String>)>,
}

fn read_csv(path: &Path, expected_header: &[&str]) -> Result<CsvFile> {
    let file = fs::File::open(path).map_err(|_| ingest(path, 0, "missing file"))?;
    let reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut header_seen = false;
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line.map_err(|e| FtnError::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<String> = trimmed.split(',').map(|f| f.trim().to_string()).collect();
        if !header_seen {
            let got: Vec<&str> = fields.iter().map(String::as_str).collect();
            if got.len() < expected_header.len()
                || got[..expected_header.len()] != *expected_header
            {
                return Err(ingest(
                    path,
                    row,
                    format!("header must start with '{}'", expected_header.join(",")),
                ));
            }
            header_seen = true;
            continue;
        }
        lines.push((row, fields));
    }
    if !header_seen {
        return Err(ingest(path, 0, "empty file"));
    }
    Ok(CsvFile {
        path: path.to_path_buf(),
        lines,
    })
}

fn parse_usize(file: &CsvFile, row: usize, field: &str, what: &str) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| ingest(&file.path, row, format!("{what} '{field}' is not an index")))
}

fn parse_f64(file: &CsvFile, row: usize, field: &str, what: &str) -> Result<f64> {
    let v = field
        .parse::<f64>()
        .map_err(|_| ingest(&file.path, row, format!("{what} '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(ingest(&file.path, row, format!("{what} must be finite")));
    }
    Ok(v)
}

fn load_manifest(dir: &Path) -> Result<(Vec<String>, usize)> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path).map_err(|_| ingest(&path, 0, "missing file"))?;
    let mut modes = None;
    let mut steps = None;
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ingest(&path, row, "expected 'key = value'"))?;
        match key.trim() {
            "modes" => {
                let names: Vec<String> = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if names.is_empty() {
                    return Err(ingest(&path, row, "no mode names"));
                }
                modes = Some(names);
            }
            "steps" => {
                steps = Some(value.trim().parse::<usize>().map_err(|_| {
                    ingest(&path, row, format!("steps '{}' is not a count", value.trim()))
                })?);
            }
            other => {
                return Err(ingest(&path, row, format!("unknown manifest key '{other}'")));
            }
        }
    }
    let modes = modes.ok_or_else(|| ingest(&path, 0, "manifest is missing 'modes'"))?;
    let steps = steps.ok_or_else(|| ingest(&path, 0, "manifest is missing 'steps'"))?;
    if steps == 0 {
        return Err(ingest(&path, 0, "steps must be positive"));
    }
    Ok((modes, steps))
}

fn load_gridmap(dir: &Path) -> Result<Vec<GridId>> {
    let path = dir.join("gridmap.csv");
    let file = read_csv(&path, &["node", "p", "q"])?;
    let mut nodes = Vec::new();
    for (row, fields) in &file.lines {
        if fields.len() != 3 {
            return Err(ingest(&file.path, *row, "expected 3 columns"));
        }
        let node = parse_usize(&file, *row, &fields[0], "node")?;
        if node != nodes.len() {
            return Err(ingest(
                &file.path,
                *row,
                format!("node ids must be consecutive from 0, got {node}"),
            ));
        }
        let p = parse_usize(&file, *row, &fields[1], "p")? as u32;
        let q = parse_usize(&file, *row, &fields[2], "q")? as u32;
        let grid = GridId { p, q };
        if let Some(last) = nodes.last() {
            if grid <= *last {
                return Err(ingest(
                    &file.path,
                    *row,
                    "grids must be strictly increasing in (p, q) order",
                ));
            }
        }
        nodes.push(grid);
    }
    if nodes.is_empty() {
        return Err(ingest(&path, 0, "gridmap has no nodes"));
    }
    Ok(nodes)
}

fn load_flows(dir: &Path, n: usize, steps: usize) -> Result<Vec<Array2<f64>>> {
    let path = dir.join("flows.csv");
    let file = read_csv(&path, &["t", "i", "j", "count"])?;
    let mut flows = vec![Array2::<f64>::zeros((n, n)); steps];
    let mut seen = std::collections::HashSet::new();
    for (row, fields) in &file.lines {
        if fields.len() != 4 {
            return Err(ingest(&file.path, *row, "expected 4 columns"));
        }
        let t = parse_usize(&file, *row, &fields[0], "t")?;
        if t >= steps {
            return Err(ingest(
                &file.path,
                *row,
                format!("time step {t} outside 0..{steps}"),
            ));
        }
        let i = parse_usize(&file, *row, &fields[1], "i")?;
        let j = parse_usize(&file, *row, &fields[2], "j")?;
        if i >= n || j >= n {
            return Err(ingest(
                &file.path,
                *row,
                format!("node mapped to unknown grid: ({i},{j}) with {n} nodes"),
            ));
        }
        let count = parse_f64(&file, *row, &fields[3], "count")?;
        if count < 0.0 {
            return Err(ingest(
                &file.path,
                *row,
                format!("negative flow {count} at t={t}, i={i}, j={j}"),
            ));
        }
        if !seen.insert((t, i, j)) {
            return Err(ingest(
                &file.path,
                *row,
                format!("duplicate cell t={t}, i={i}, j={j}"),
            ));
        }
        flows[t][(i, j)] = count;
    }
    Ok(flows)
}

fn load_features(dir: &Path, n: usize, steps: usize) -> Result<Vec<Array2<f64>>> {
    let path = dir.join("features.csv");
    let file = read_csv(&path, &["t", "node", "inflow", "outflow"])?;
    let width = file
        .lines
        .first()
        .map(|(_, f)| f.len().saturating_sub(2))
        .unwrap_or(2);
    if width < 2 {
        return Err(ingest(&path, 0, "features need inflow and outflow columns"));
    }
    let mut features = vec![Array2::<f64>::zeros((n, width)); steps];
    let mut seen = vec![false; steps * n];
    for (row, fields) in &file.lines {
        if fields.len() != width + 2 {
            return Err(ingest(&file.path, *row, "ragged row"));
        }
        let t = parse_usize(&file, *row, &fields[0], "t")?;
        if t >= steps {
            return Err(ingest(
                &file.path,
                *row,
                format!("time step {t} outside 0..{steps}"),
            ));
        }
        let node = parse_usize(&file, *row, &fields[1], "node")?;
        if node >= n {
            return Err(ingest(
                &file.path,
                *row,
                format!("node mapped to unknown grid: {node} with {n} nodes"),
            ));
        }
        if seen[t * n + node] {
            return Err(ingest(
                &file.path,
                *row,
                format!("duplicate feature row t={t}, node={node}"),
            ));
        }
        seen[t * n + node] = true;
        for (c, field) in fields[2..].iter().enumerate() {
            features[t][(node, c)] = parse_f64(&file, *row, field, "feature")?;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(ingest(
            &path,
            0,
            format!(
                "missing feature row for t={}, node={} (timestamps must cover every step)",
                missing / n,
                missing % n
            ),
        ));
    }
    Ok(features)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (mode_names, steps) = load_manifest(dir)?;
    let mut modes = Vec::with_capacity(mode_names.len());
    for (index, name) in mode_names.iter().enumerate() {
        let mode_dir = dir.join(name);
        let nodes = load_gridmap(&mode_dir)?;
        let n = nodes.len();
        let flows = load_flows(&mode_dir, n, steps)?;
        let features = load_features(&mode_dir, n, steps)?;

        let flows_path = mode_dir.join("features.csv");
        let snapshots = flows
            .into_iter()
            .zip(features)
            .enumerate()
            .map(|(t, (flow, feat))| {
                // stored inflow/outflow must agree with the flow matrix
                for i in 0..n {
                    let inflow = flow.column(i).sum();
                    let outflow = flow.row(i).sum();
                    if (feat[(i, 0)] - inflow).abs() > 1e-6
                        || (feat[(i, 1)] - outflow).abs() > 1e-6
                    {
                        return Err(ingest(
                            &flows_path,
                            0,
                            format!(
                                "inflow/outflow of node {i} at t={t} disagree with flows.csv"
                            ),
                        ));
                    }
                }
                Ok(ODGraphSnapshot {
                    time_index: t,
                    flow,
                    features: feat,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        modes.push(ModeSeries {
            mode: ModeId {
                name: name.clone(),
                index,
            },
            nodes,
            snapshots,
        });
    }
    let dataset = Dataset { modes };
    dataset.validate()?;
    Ok(dataset)
}
