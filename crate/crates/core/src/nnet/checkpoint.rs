//! Binary checkpoint container.
//!
//! Layout: a text header (`rigsdf-checkpoint 1`, `step`, metadata count and
//! `key=value` lines, tensor count), then per tensor one text line
//! `name group frozen ndim d0 d1 …` followed by the little-endian f64 payload
//! of data, first moment and second moment. Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{Group, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "rigsdf-checkpoint 1";

pub fn write_checkpoint<W: Write>(
    out: W,
    store: &ParamStore,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "step {}", store.step())?;
    writeln!(w, "meta {}", meta.len())?;
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("unencodable metadata key {k:?}")));
        }
        writeln!(w, "{k}={v}")?;
    }
    writeln!(w, "tensors {}", store.len())?;
    for (_, t) in store.tensors() {
        if t.name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "tensor name {:?} has whitespace",
                t.name
            )));
        }
        write!(
            w,
            "{} {} {} {}",
            t.name,
            t.group,
            t.frozen as u8,
            t.shape.len()
        )?;
        for d in &t.shape {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        for buf in [&t.data, &t.m, &t.v] {
            for x in buf.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let mut r = BufReader::new(input);
    let bad = |what: &str| Error::Checkpoint(format!("malformed checkpoint: {what}"));
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of file"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(bad("magic"));
    }
    let step = next_line(&mut r)?
        .strip_prefix("step ")
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| bad("step"))?;
    let n_meta = next_line(&mut r)?
        .strip_prefix("meta ")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| bad("meta count"))?;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let l = next_line(&mut r)?;
        let (k, v) = l.split_once('=').ok_or_else(|| bad("meta entry"))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let n = next_line(&mut r)?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| bad("tensor count"))?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let l = next_line(&mut r)?;
        let mut it = l.split(' ');
        let name = it.next().ok_or_else(|| bad("tensor name"))?.to_string();
        let group = it
            .next()
            .and_then(Group::from_name)
            .ok_or_else(|| bad("tensor group"))?;
        let frozen = match it.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad("frozen flag")),
        };
        let ndim: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("ndim"))?;
        let shape: Vec<usize> = it
            .map(|s| s.parse::<usize>().map_err(|_| bad("shape")))
            .collect::<Result<_>>()?;
        if shape.len() != ndim {
            return Err(bad("shape rank"));
        }
        let len: usize = shape.iter().product();
        let read_vec = |r: &mut BufReader<R>| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let data = read_vec(&mut r)?;
        let m = read_vec(&mut r)?;
        let v = read_vec(&mut r)?;
        store.push_tensor(Tensor {
            name,
            shape,
            group,
            frozen,
            grad: vec![0.0; len],
            data,
            m,
            v,
        })?;
    }
    store.set_step(step);
    Ok((store, meta))
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(f, store, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(f)
}
