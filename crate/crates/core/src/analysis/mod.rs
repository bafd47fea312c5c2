//! Parameter and MAC accounting from a traced forward pass, Grad-CAM, and
//! report files.

mod gradcam;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::nn::{Graph, LayerSpec, Mode, TraceRecord};
use crate::tensor::Tensor;

pub use gradcam::{grad_cam, GradCamMap};

/// Stage label of a layer name: its first dotted segment.
pub fn stage_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn is_head(stage: &str) -> bool {
    stage == "head"
}

fn is_aux(stage: &str) -> bool {
    stage == "aux"
}

/// Trainable values owned by one layer.
pub fn layer_params(spec: &LayerSpec) -> usize {
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => out_channels * in_channels * kernel * kernel + if bias { out_channels } else { 0 },
        LayerSpec::DepthwiseConv2d { channels, kernel, .. } => channels * kernel * kernel,
        LayerSpec::BatchNorm { features } => 2 * features,
        LayerSpec::Linear {
            in_features,
            out_features,
            bias,
        } => in_features * out_features + if bias { out_features } else { 0 },
        _ => 0,
    }
}

/// Multiply-accumulates of one layer for a single sample; normalisation,
/// activations, pooling and merges count as zero.
pub fn layer_macs(spec: &LayerSpec, output: &[usize]) -> usize {
    let spatial = if output.len() == 4 { output[2] * output[3] } else { 1 };
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => out_channels * in_channels * kernel * kernel * spatial,
        LayerSpec::DepthwiseConv2d { channels, kernel, .. } => channels * kernel * kernel * spatial,
        LayerSpec::Linear {
            in_features,
            out_features,
            ..
        } => in_features * out_features,
        _ => 0,
    }
}

/// Runs one eval-mode pass at `size x size` (batch 1) and returns every
/// layer call in execution order.
pub fn trace(net: &dyn Network, size: usize) -> Result<Vec<TraceRecord>> {
    let mut g = Graph::tracing();
    let x = g.input(Tensor::zeros(&[1, 3, size, size]));
    net.forward(&mut g, x, Mode::Eval)?;
    Ok(g.take_trace())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub kind: String,
    pub stage: String,
    pub value: usize,
}

/// Ordered stage subtotals plus headline totals. `main_total` covers the
/// backbone and main classifier; the aux branch is reported apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub stages: Vec<(String, usize)>,
    pub backbone_total: usize,
    pub head_total: usize,
    pub aux_total: usize,
}

impl Report {
    fn from_rows(rows: Vec<ReportRow>) -> Self {
        let mut stages: Vec<(String, usize)> = Vec::new();
        for r in &rows {
            match stages.iter_mut().find(|(s, _)| *s == r.stage) {
                Some(e) => e.1 += r.value,
                None => stages.push((r.stage.clone(), r.value)),
            }
        }
        let sum = |f: &dyn Fn(&str) -> bool| stages.iter().filter(|(s, _)| f(s)).map(|(_, v)| v).sum();
        let head_total = sum(&|s| is_head(s));
        let aux_total = sum(&|s| is_aux(s));
        let backbone_total = sum(&|s| !is_head(s) && !is_aux(s));
        Self {
            rows,
            stages,
            backbone_total,
            head_total,
            aux_total,
        }
    }

    pub fn stage(&self, name: &str) -> Option<usize> {
        self.stages.iter().find(|(s, _)| s == name).map(|(_, v)| *v)
    }

    pub fn main_total(&self) -> usize {
        self.backbone_total + self.head_total
    }

    pub fn grand_total(&self) -> usize {
        self.main_total() + self.aux_total
    }
}

pub type ParamReport = Report;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub input_size: usize,
    pub report: Report,
}

impl FlopReport {
    pub const CONVENTION: &'static str = "1 MAC reported as 1 FLOP; BN, activations, pooling and merges are free";
}

/// Per-layer trainable counts grouped by stage.
pub fn count_params(net: &dyn Network) -> Result<ParamReport> {
    let rows = trace(net, 64)?
        .into_iter()
        .filter(|r| layer_params(&r.spec) > 0)
        .map(|r| ReportRow {
            stage: stage_of(&r.name).to_string(),
            kind: r.spec.kind_name().to_string(),
            value: layer_params(&r.spec),
            name: r.name,
        })
        .collect();
    Ok(Report::from_rows(rows))
}

/// Per-layer MACs at `input_size x input_size`, one sample.
pub fn count_macs(net: &dyn Network, input_size: usize) -> Result<FlopReport> {
    let rows = trace(net, input_size)?
        .into_iter()
        .filter(|r| layer_macs(&r.spec, &r.output) > 0)
        .map(|r| ReportRow {
            stage: stage_of(&r.name).to_string(),
            kind: r.spec.kind_name().to_string(),
            value: layer_macs(&r.spec, &r.output),
            name: r.name,
        })
        .collect();
    Ok(FlopReport {
        input_size,
        report: Report::from_rows(rows),
    })
}

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_rows(report: &Report, value_col: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["name", "kind", "stage", value_col])?;
    for r in &report.rows {
        w.write_record([r.name.as_str(), &r.kind, &r.stage, &r.value.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV with columns `name,kind,stage,count`.
pub fn write_param_csv(report: &ParamReport, path: &Path) -> Result<()> {
    write_rows(report, "count", path)
}

/// CSV with columns `name,kind,stage,macs`.
pub fn write_flop_csv(report: &FlopReport, path: &Path) -> Result<()> {
    write_rows(&report.report, "macs", path)
}

/// Parses a report CSV written by [`write_param_csv`] or [`write_flop_csv`].
pub fn read_report_csv(path: &Path) -> Result<Report> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Format(format!("expected 4 columns in {}", path.display())));
        }
        rows.push(ReportRow {
            name: rec[0].to_string(),
            kind: rec[1].to_string(),
            stage: rec[2].to_string(),
            value: rec[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad count {:?}", &rec[3])))?,
        });
    }
    Ok(Report::from_rows(rows))
}

/// 8-bit binary PGM of a `(H, W)` map in `[0, 1]`.
pub fn write_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = map.matrix_dims()?;
    let mut f = std::io::BufWriter::new(create(path)?);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Header `(width, height)` and pixels of a PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format(format!("{} is not an 8-bit P5 PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data))
}

/// One CSV row per map row.
pub fn write_map_csv(map: &Tensor, path: &Path) -> Result<()> {
    let (_, w) = map.matrix_dims()?;
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    for row in map.data().chunks(w) {
        wr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

/// Writes `<prefix>.pgm` (normalised map) and `<prefix>.csv` (raw map).
pub fn write_gradcam(cam: &GradCamMap, dir: &Path, prefix: &str) -> Result<()> {
    write_pgm(&cam.normalized, &dir.join(format!("{prefix}.pgm")))?;
    write_map_csv(&cam.raw, &dir.join(format!("{prefix}.csv")))
}

/// Writes `params.csv` and `flops.csv` under `dir`.
pub fn emit_reports(params: &ParamReport, flops: &FlopReport, dir: &Path, prefix: &str) -> Result<()> {
    write_param_csv(params, &dir.join(format!("{prefix}_params.csv")))?;
    write_flop_csv(flops, &dir.join(format!("{prefix}_flops.csv")))
}
