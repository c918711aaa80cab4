//! `STBNFLO1` dense flow files.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use stbn_core::warp::FlowField;

use crate::error::{io_err, Result};
use crate::io::{read_dims, read_f32s};

pub const FLOW_MAGIC: &[u8; 8] = b"STBNFLO1";

pub fn write_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut body = || -> std::io::Result<()> {
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&(flow.height() as i32).to_le_bytes())?;
        w.write_all(&(flow.width() as i32).to_le_bytes())?;
        for v in flow.vectors() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let mut r = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let [h, w] = read_dims::<2>(&mut r, FLOW_MAGIC, path)?;
    let data = read_f32s(&mut r, h * w * 2, path)?;
    Ok(FlowField::new(h, w, data.into_iter().map(f64::from).collect())?)
}
