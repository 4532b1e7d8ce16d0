use std::fs;
use std::path::Path;

use super::attention::AttnDistanceReport;
use super::cam::CamGrid;
use super::cost::CostReport;
use crate::error::{Error, Result};

/// ASCII PGM (`P2`) of a map, maxval 255, pixels `round(255·v)`.
pub fn pgm_string(grid: &CamGrid) -> String {
    let mut s = format!("P2\n{} {}\n255\n", grid.w, grid.h);
    for row in grid.values.chunks(grid.w.max(1)) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn export_pgm(grid: &CamGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pgm_string(grid)).map_err(|e| Error::io(path, e))
}

/// Parses an ASCII PGM into `(width, height, maxval, pixels)`.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, u32, Vec<u32>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Format("PGM: missing P2 magic".into()));
    }
    let mut num = |what: &str| -> Result<u32> {
        tokens
            .next()
            .ok_or_else(|| Error::Format(format!("PGM: missing {what}")))?
            .parse()
            .map_err(|_| Error::Format(format!("PGM: {what} is not a number")))
    };
    let w = num("width")? as usize;
    let h = num("height")? as usize;
    let maxval = num("maxval")?;
    let pixels = (0..w * h).map(|_| num("pixel")).collect::<Result<Vec<_>>>()?;
    if let Some(p) = pixels.iter().find(|&&p| p > maxval) {
        return Err(Error::Format(format!("PGM: pixel {p} exceeds maxval {maxval}")));
    }
    if tokens.next().is_some() {
        return Err(Error::Format("PGM: trailing data".into()));
    }
    Ok((w, h, maxval, pixels))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().flexible(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `module,params,macs` with a closing `total` row.
pub fn export_cost_csv(report: &CostReport, path: impl AsRef<Path>) -> Result<()> {
    let header = ["module", "params", "macs"].map(String::from);
    let rows = report
        .rows
        .iter()
        .map(|r| vec![r.name.clone(), r.params.to_string(), r.macs.to_string()])
        .chain(std::iter::once(vec![
            "total".into(),
            report.total_params().to_string(),
            report.total_macs().to_string(),
        ]));
    write_rows(path.as_ref(), &header, rows)
}

/// `layer,grid_h,grid_w,mean_distance,head0,head1,…`, one row per layer. Heads
/// missing from narrower layers are left empty.
pub fn export_attn_csv(report: &AttnDistanceReport, path: impl AsRef<Path>) -> Result<()> {
    let heads = report.layers.iter().map(|l| l.per_head.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["layer", "grid_h", "grid_w", "mean_distance"].map(String::from).to_vec();
    header.extend((0..heads).map(|h| format!("head{h}")));
    let rows = report.layers.iter().map(|l| {
        let mut r = vec![
            l.layer.clone(),
            l.grid.0.to_string(),
            l.grid.1.to_string(),
            l.mean.to_string(),
        ];
        r.extend((0..heads).map(|h| l.per_head.get(h).map(|v| v.to_string()).unwrap_or_default()));
        r
    });
    write_rows(path.as_ref(), &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_rounding() {
        let g = CamGrid {
            h: 2,
            w: 2,
            values: vec![0.0, 1.0, 0.5, 0.25],
            image_id: 0,
            target_class: 0,
        };
        let (w, h, max, px) = parse_pgm(&pgm_string(&g)).unwrap();
        assert_eq!((w, h, max), (2, 2, 255));
        assert_eq!(px, vec![0, 255, 128, 64]);
    }

    #[test]
    fn malformed_pgm() {
        assert!(parse_pgm("P5\n1 1\n255\n0\n").is_err());
        assert!(parse_pgm("P2\n2 1\n255\n0\n").is_err());
        assert!(parse_pgm("P2\n1 1\n255\n300\n").is_err());
    }
}
