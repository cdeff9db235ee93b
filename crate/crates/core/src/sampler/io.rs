use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{ArchiveEntry, ClassRaster, GridHeader, SelectedEntry};
use crate::error::{Error, Result};

const ARCHIVE_HEADER: [&str; 5] = ["id", "lon_min", "lat_min", "lon_max", "lat_max"];

/// Reads an archive CSV with header `id,lon_min,lat_min,lon_max,lat_max`.
pub fn read_archive(path: &Path) -> Result<Vec<ArchiveEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ARCHIVE_HEADER {
        return Err(fail(format!(
            "expected header {}, found {}",
            ARCHIVE_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in rdr.deserialize::<ArchiveEntry>().enumerate() {
        let e = rec.map_err(|e| fail(format!("row {}: {e}", line + 2)))?;
        e.validate().map_err(|e| fail(e.to_string()))?;
        if !seen.insert(e.id.clone()) {
            return Err(fail(format!("duplicate id {:?}", e.id)));
        }
        out.push(e);
    }
    Ok(out)
}

/// Parses GRID1: one JSON header line, then `rows·cols` little-endian u16 codes.
pub fn read_grid<R: BufRead>(r: &mut R) -> Result<ClassRaster> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::Format(format!("reading GRID1 header: {e}")))?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("truncated GRID1 header".into()));
    }
    let header: GridHeader =
        serde_json::from_slice(&line).map_err(|e| Error::Format(format!("invalid GRID1 header: {e}")))?;
    let n = header.rows.checked_mul(header.cols).ok_or_else(|| Error::Format("GRID1 grid too large".into()))?;
    let mut bytes = vec![0u8; n * 2];
    r.read_exact(&mut bytes).map_err(|_| Error::Format(format!("GRID1 payload shorter than {n} codes")))?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after GRID1 payload".into()));
    }
    let codes = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    ClassRaster::new(header, codes).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_grid_file(path: &Path) -> Result<ClassRaster> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_grid(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_grid<W: Write>(w: &mut W, raster: &ClassRaster) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &raster.header)?;
    w.write_all(b"\n")?;
    for c in &raster.codes {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

/// Writes `id,u,v,stratum_fitness` rows.
pub fn write_selection<W: Write>(w: W, selection: &[SelectedEntry]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in selection {
        wtr.serialize(s).map_err(|e| Error::Format(format!("writing selection: {e}")))?;
    }
    wtr.flush().map_err(|e| Error::Format(format!("writing selection: {e}")))
}
