use std::fmt::Write as _;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

/// First token sequence of the cloud text format header.
pub const CLOUD_HEADER: &str = "# setnet-cloud v1";

/// Renders `# setnet-cloud v1 dims=<m> labels=<0|1>` followed by one point
/// per line. Floats use the shortest decimal form that parses back to the
/// same value.
pub fn render_cloud(cloud: &PointCloud) -> String {
    let labels = cloud.point_labels.as_ref();
    let mut s = String::with_capacity(cloud.len() * 40);
    let _ = writeln!(s, "{CLOUD_HEADER} dims={} labels={}", cloud.dim(), labels.is_some() as u8);
    for i in 0..cloud.len() {
        let coords: Vec<String> = cloud.point(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&coords.join(" "));
        if let Some(l) = labels {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

pub fn write_cloud_file(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render_cloud(cloud))?;
    Ok(())
}

pub fn read_cloud_file(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_cloud(&id, &text)
}

/// Parses the cloud text format. Without a header the dimension is taken
/// from the first data line and no labels are expected.
pub fn parse_cloud(id: &str, text: &str) -> Result<PointCloud> {
    let mut dims: Option<usize> = None;
    let mut with_labels = false;
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut seen_data = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(CLOUD_HEADER) {
            if seen_data || dims.is_some() {
                return Err(err("header after data".into()));
            }
            for field in rest.split_whitespace() {
                match field.split_once('=') {
                    Some(("dims", v)) => {
                        let d: usize = v.parse().map_err(|_| err(format!("bad dims `{v}`")))?;
                        if d == 0 {
                            return Err(err("dims must be positive".into()));
                        }
                        dims = Some(d);
                    }
                    Some(("labels", "0")) => with_labels = false,
                    Some(("labels", "1")) => with_labels = true,
                    _ => return Err(err(format!("unknown header field `{field}`"))),
                }
            }
            if dims.is_none() {
                return Err(err("header lacks dims=".into()));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        seen_data = true;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let d = *dims.get_or_insert(fields.len());
        let expected = d + with_labels as usize;
        if fields.len() != expected {
            return Err(err(format!("expected {expected} columns, found {}", fields.len())));
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| err(format!("bad coordinate `{f}`")))?;
            coords.push(v);
        }
        if with_labels {
            let l: usize = fields[d]
                .parse()
                .map_err(|_| err(format!("bad label `{}`", fields[d])))?;
            labels.push(l);
        }
    }
    let dims = dims.ok_or_else(|| Error::EmptySet("cloud file has no points".into()))?;
    let cloud = PointCloud::new(id, dims, coords)?;
    if with_labels {
        cloud.with_point_labels(labels)
    } else {
        Ok(cloud)
    }
}
