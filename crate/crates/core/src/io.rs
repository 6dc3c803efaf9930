//! File formats shared by every level of the hierarchy.
//!
//! * trajectory CSV — header `t,x1..xd,v1..vd`, one row per sample, values
//!   printed with 17 significant digits so `f64` round-trips exactly; the
//!   same schema is used for molecular-dynamics tagged paths and jump-process
//!   paths, so analysis code is shared;
//! * configuration snapshot — text, header line `N d lambda eps beta seed`
//!   followed by one `x... v...` line per particle;
//! * collision log — one record per collision (time, pair indices, contact
//!   normal, pre/post velocities), as a headered text table or as
//!   little-endian binary.

use std::io::{BufRead, BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vector;
use crate::init::{Configuration, GasParameters};
use crate::md::LogEntry;

fn parse_f64(tok: &str, what: &str) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse(format!("bad {what}: {tok:?}")))
}

/// Header for the shared trajectory schema in `D` dimensions.
fn trajectory_header<const D: usize>() -> String {
    let mut h = String::from("t");
    for a in 1..=D {
        h.push_str(&format!(",x{a}"));
    }
    for a in 1..=D {
        h.push_str(&format!(",v{a}"));
    }
    h
}

/// Write `(time, position, velocity)` samples as CSV.
pub fn write_trajectory_csv<const D: usize>(
    path: impl AsRef<Path>,
    rows: &[(f64, Vector<D>, Vector<D>)],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", trajectory_header::<D>())?;
    for &(t, x, v) in rows {
        write!(w, "{t:.16e}")?;
        for a in 0..D {
            write!(w, ",{:.16e}", x[a])?;
        }
        for a in 0..D {
            write!(w, ",{:.16e}", v[a])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trajectory CSV written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<const D: usize>(
    path: impl AsRef<Path>,
) -> Result<Vec<(f64, Vector<D>, Vector<D>)>> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
    if header.trim() != trajectory_header::<D>() {
        return Err(Error::Parse(format!(
            "trajectory header {header:?} does not match {:?}",
            trajectory_header::<D>()
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 1 + 2 * D {
            return Err(Error::Parse(format!(
                "trajectory row has {} fields, expected {}",
                toks.len(),
                1 + 2 * D
            )));
        }
        let t = parse_f64(toks[0], "time")?;
        let mut x = Vector::<D>([0.0; D]);
        let mut v = Vector::<D>([0.0; D]);
        for a in 0..D {
            x[a] = parse_f64(toks[1 + a], "position")?;
            v[a] = parse_f64(toks[1 + D + a], "velocity")?;
        }
        out.push((t, x, v));
    }
    Ok(out)
}

/// Write a full gas configuration: header `N d lambda eps beta seed`, then
/// one `x... v...` line per particle (tagged particle first is NOT implied;
/// the tagged index rides in the header as the final field).
pub fn write_configuration_snapshot<const D: usize>(
    path: impl AsRef<Path>,
    params: &GasParameters<D>,
    conf: &Configuration<D>,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "{} {} {:.16e} {:.16e} {:.16e} {} {}",
        conf.len(),
        D,
        params.geom.side(),
        params.eps,
        params.beta,
        params.seed,
        conf.tagged_index
    )?;
    for i in 0..conf.len() {
        for a in 0..D {
            if a > 0 {
                write!(w, " ")?;
            }
            write!(w, "{:.16e}", conf.positions[i][a])?;
        }
        for a in 0..D {
            write!(w, " {:.16e}", conf.velocities[i][a])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a configuration snapshot back; returns the parameters it was
/// written with and the configuration.
pub fn read_configuration_snapshot<const D: usize>(
    path: impl AsRef<Path>,
) -> Result<(GasParameters<D>, Configuration<D>)> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty snapshot".into()))??;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 7 {
        return Err(Error::Parse(format!("snapshot header has {} fields, expected 7", toks.len())));
    }
    let n: usize = toks[0].parse().map_err(|_| Error::Parse(format!("bad N: {:?}", toks[0])))?;
    let d: usize = toks[1].parse().map_err(|_| Error::Parse(format!("bad d: {:?}", toks[1])))?;
    if d != D {
        return Err(Error::Parse(format!("snapshot is {d}-dimensional, expected {D}")));
    }
    let side = parse_f64(toks[2], "side")?;
    let eps = parse_f64(toks[3], "eps")?;
    let beta = parse_f64(toks[4], "beta")?;
    let seed: u64 =
        toks[5].parse().map_err(|_| Error::Parse(format!("bad seed: {:?}", toks[5])))?;
    let tagged_index: usize =
        toks[6].parse().map_err(|_| Error::Parse(format!("bad tagged index: {:?}", toks[6])))?;
    let params = GasParameters::<D>::new(n, eps, side, beta, seed)?;
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 * D {
            return Err(Error::Parse(format!(
                "particle row has {} fields, expected {}",
                toks.len(),
                2 * D
            )));
        }
        let mut x = Vector::<D>([0.0; D]);
        let mut v = Vector::<D>([0.0; D]);
        for a in 0..D {
            x[a] = parse_f64(toks[a], "position")?;
            v[a] = parse_f64(toks[D + a], "velocity")?;
        }
        positions.push(x);
        velocities.push(v);
    }
    if positions.len() != n {
        return Err(Error::Parse(format!("snapshot has {} particles, header says {n}", positions.len())));
    }
    if tagged_index >= n {
        return Err(Error::Parse(format!("tagged index {tagged_index} out of range for {n}")));
    }
    Ok((params, Configuration { positions, velocities, tagged_index }))
}

const COLLISION_TEXT_HEADER: &str = "time i j omega v_i_pre v_j_pre v_i_post v_j_post";

/// Write collision records as a headered text table (one line per record,
/// vectors flattened in the header's field order).
pub fn write_collision_log_text<const D: usize>(
    path: impl AsRef<Path>,
    entries: &[LogEntry<D>],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{COLLISION_TEXT_HEADER}")?;
    for e in entries {
        write!(w, "{:.16e} {} {}", e.time, e.i, e.j)?;
        for vec in [e.omega, e.v_i_pre, e.v_j_pre, e.v_i_post, e.v_j_post] {
            for a in 0..D {
                write!(w, " {:.16e}", vec[a])?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Write collision records in binary: little-endian header (u32 dimension,
/// u64 record count), then per record `f64 time, u32 i, u32 j` followed by
/// the five vectors (contact normal, pre/post velocities of both particles)
/// as `f64` components.
pub fn write_collision_log_binary<const D: usize>(
    path: impl AsRef<Path>,
    entries: &[LogEntry<D>],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(D as u32).to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for e in entries {
        w.write_all(&e.time.to_le_bytes())?;
        w.write_all(&e.i.to_le_bytes())?;
        w.write_all(&e.j.to_le_bytes())?;
        for vec in [e.omega, e.v_i_pre, e.v_j_pre, e.v_i_post, e.v_j_post] {
            for a in 0..D {
                w.write_all(&vec[a].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a binary collision log written by [`write_collision_log_binary`].
pub fn read_collision_log_binary<const D: usize>(
    path: impl AsRef<Path>,
) -> Result<Vec<LogEntry<D>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Parse("collision log shorter than its header".into()));
    }
    let d = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if d != D {
        return Err(Error::Parse(format!("collision log is {d}-dimensional, expected {D}")));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let record = 8 + 4 + 4 + 5 * D * 8;
    if bytes.len() != 12 + count * record {
        return Err(Error::Parse(format!(
            "collision log has {} bytes, expected {} for {count} records",
            bytes.len(),
            12 + count * record
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut o = 12;
    let f64_at = |bytes: &[u8], o: &mut usize| {
        let v = f64::from_le_bytes(bytes[*o..*o + 8].try_into().unwrap());
        *o += 8;
        v
    };
    for _ in 0..count {
        let time = f64_at(&bytes, &mut o);
        let i = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let j = u32::from_le_bytes(bytes[o + 4..o + 8].try_into().unwrap());
        o += 8;
        let mut vecs = [Vector::<D>([0.0; D]); 5];
        for vec in vecs.iter_mut() {
            for a in 0..D {
                vec[a] = f64_at(&bytes, &mut o);
            }
        }
        out.push(LogEntry {
            time,
            i,
            j,
            omega: vecs[0],
            v_i_pre: vecs[1],
            v_j_pre: vecs[2],
            v_i_post: vecs[3],
            v_j_post: vecs[4],
        });
    }
    Ok(out)
}

/// Read a text collision log written by [`write_collision_log_text`].
pub fn read_collision_log_text<const D: usize>(
    path: impl AsRef<Path>,
) -> Result<Vec<LogEntry<D>>> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty collision log".into()))??;
    if header.trim() != COLLISION_TEXT_HEADER {
        return Err(Error::Parse(format!("unexpected collision log header {header:?}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 + 5 * D {
            return Err(Error::Parse(format!(
                "collision row has {} fields, expected {}",
                toks.len(),
                3 + 5 * D
            )));
        }
        let time = parse_f64(toks[0], "time")?;
        let i: u32 = toks[1].parse().map_err(|_| Error::Parse(format!("bad i: {:?}", toks[1])))?;
        let j: u32 = toks[2].parse().map_err(|_| Error::Parse(format!("bad j: {:?}", toks[2])))?;
        let mut vecs = [Vector::<D>([0.0; D]); 5];
        for (k, vec) in vecs.iter_mut().enumerate() {
            for a in 0..D {
                vec[a] = parse_f64(toks[3 + k * D + a], "component")?;
            }
        }
        out.push(LogEntry {
            time,
            i,
            j,
            omega: vecs[0],
            v_i_pre: vecs[1],
            v_j_pre: vecs[2],
            v_i_post: vecs[3],
            v_j_post: vecs[4],
        });
    }
    Ok(out)
}
