//! Per-epoch metrics CSV.

use std::path::Path;

use super::engine::EpochMetrics;
use crate::error::{Error, Result};
use crate::network::{Head, NetKind};

pub const METRICS_HEADER: [&str; 10] = [
    "epoch", "net", "head", "split", "loss", "accuracy", "l_hard", "l_fd", "l_rd", "l_sd",
];

/// Eight rows per epoch: (teacher, student) x (train, val) x (main, aux).
/// Loss components are filled on the student train rows only.
pub fn metrics_rows(history: &[EpochMetrics]) -> Vec<[String; 10]> {
    let mut rows = Vec::with_capacity(history.len() * 8);
    for m in history {
        for net in [NetKind::Teacher, NetKind::Student] {
            for split in ["train", "val"] {
                let nm = match (net, split) {
                    (NetKind::Teacher, "train") => m.teacher_train,
                    (NetKind::Teacher, _) => m.teacher_val,
                    (NetKind::Student, "train") => m.student_train,
                    (NetKind::Student, _) => m.student_val,
                };
                for head in Head::BOTH {
                    let h = nm.head(head);
                    let comps = if net == NetKind::Student && split == "train" {
                        let c = &m.components;
                        [c.hard, c.feature, c.response, c.self_distill].map(|v| v.to_string())
                    } else {
                        Default::default()
                    };
                    let [a, b, c, d] = comps;
                    rows.push([
                        m.epoch.to_string(),
                        net.as_str().to_string(),
                        head.as_str().to_string(),
                        split.to_string(),
                        h.loss.to_string(),
                        h.accuracy.to_string(),
                        a,
                        b,
                        c,
                        d,
                    ]);
                }
            }
        }
    }
    rows
}

pub fn write_metrics_csv(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    w.write_record(METRICS_HEADER)?;
    for row in metrics_rows(history) {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
