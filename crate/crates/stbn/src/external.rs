//! Flow from an external program.
//!
//! The command template is split on whitespace and `{a}`, `{b}`, `{out}` are
//! substituted in each argument. The tool receives the two frames as 8-bit
//! PNGs and must write an `STBNFLO1` file at `{out}` holding a flow `f` with
//! `a(p) ~ b(p + f(p))`.

use std::path::Path;
use std::process::Command;

use image::{DynamicImage, GrayImage, RgbImage};
use stbn_core::flow::FlowEstimator;
use stbn_core::warp::FlowField;
use stbn_core::Tensor;

use crate::error::Error;
use crate::flowfile::read_flow;

#[derive(Clone, Debug)]
pub struct ExternalFlowAdapter {
    template: Vec<String>,
}

impl ExternalFlowAdapter {
    pub fn new(command: &str) -> crate::Result<Self> {
        let template: Vec<String> = command.split_whitespace().map(str::to_owned).collect();
        if template.is_empty() {
            return Err(Error::External("empty command".into()));
        }
        for p in ["{a}", "{b}", "{out}"] {
            if !template.iter().any(|t| t.contains(p)) {
                return Err(Error::External(format!("command template lacks {p}")));
            }
        }
        Ok(Self { template })
    }

    fn run(&self, a: &Tensor, b: &Tensor) -> crate::Result<FlowField> {
        let dir = tempfile::tempdir().map_err(|e| Error::External(format!("temp dir: {e}")))?;
        let pa = dir.path().join("a.png");
        let pb = dir.path().join("b.png");
        let out = dir.path().join("flow.stbnflo");
        save_frame(a, &pa)?;
        save_frame(b, &pb)?;
        let args: Vec<String> = self
            .template
            .iter()
            .map(|t| {
                t.replace("{a}", &pa.to_string_lossy())
                    .replace("{b}", &pb.to_string_lossy())
                    .replace("{out}", &out.to_string_lossy())
            })
            .collect();
        let status = Command::new(&args[0])
            .args(&args[1..])
            .output()
            .map_err(|e| Error::External(format!("cannot run `{}`: {e}", args[0])))?;
        if !status.status.success() {
            return Err(Error::External(format!(
                "`{}` exited with {}: {}",
                args[0],
                status.status,
                String::from_utf8_lossy(&status.stderr).trim()
            )));
        }
        let flow = read_flow(&out)?;
        if (flow.height(), flow.width()) != (a.h(), a.w()) {
            return Err(Error::External(format!(
                "tool returned a {}x{} flow for {}x{} frames",
                flow.height(),
                flow.width(),
                a.h(),
                a.w()
            )));
        }
        Ok(flow)
    }
}

/// Writes a `[1, C, H, W]` frame as an 8-bit PNG.
pub fn save_frame(frame: &Tensor, path: &Path) -> crate::Result<()> {
    let (c, h, w) = (frame.c(), frame.h(), frame.w());
    let mut px = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                px.push((frame.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, px).expect("sized buffer")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, px).expect("sized buffer")),
        _ => return Err(Error::External(format!("cannot encode {c}-channel frame"))),
    };
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

impl FlowEstimator for ExternalFlowAdapter {
    fn estimate(&self, a: &Tensor, b: &Tensor) -> stbn_core::Result<FlowField> {
        if a.shape() != b.shape() || a.n() != 1 {
            return Err(stbn_core::Error::Shape(format!("flow frames {:?} vs {:?}", a.shape(), b.shape())));
        }
        self.run(a, b).map_err(|e| stbn_core::Error::Flow(e.to_string()))
    }
}
