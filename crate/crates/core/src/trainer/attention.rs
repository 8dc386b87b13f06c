//! Per-query attention grids of the last decoder layer and the refiner's
//! support attention, written as CSV and grayscale PNG.

use std::fmt::Write as _;
use std::path::Path;

use crate::datamodel::{ImageAnnotation, ImageData};
use crate::error::{Error, Result};
use crate::model::{HoiModel, ModelAssets, OaSource};
use crate::nnkit::Tensor;

use super::image_gt_pairs;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub grid: (usize, usize),
    /// `N_q x H*W`, rows sum to one.
    pub decoder: Tensor,
    /// `N_q x K`, absent when K = 0.
    pub refiner: Option<Tensor>,
    pub selected: Vec<usize>,
}

impl AttentionDump {
    /// Attention of query `q` as `H` rows of `W` values.
    pub fn query_grid(&self, q: usize) -> Vec<Vec<f64>> {
        self.decoder.row(q).chunks(self.grid.1).map(<[f64]>::to_vec).collect()
    }
}

fn check_stochastic(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let s: f64 = t.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Diverged(format!("{what} row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// Writes `query_{q}.csv` and `query_{q}.png` per query (PNG scaled so the
/// row maximum is white), plus `refiner.csv` with one column per selected pair.
pub fn dump_attention(
    model: &HoiModel,
    assets: &ModelAssets,
    ann: &ImageAnnotation,
    oracle: bool,
    out_dir: &Path,
) -> Result<AttentionDump> {
    let gt = image_gt_pairs(ann, &assets.vocabulary);
    let oa = if oracle { OaSource::Oracle(&gt) } else { OaSource::Predicted };
    let (_, trace) = model.predict(ann.id, &ann.image, assets, oa)?;
    let decoder = trace
        .decoder_attention
        .ok_or_else(|| Error::Config("the model has no decoder layers".into()))?;
    check_stochastic(&decoder, "decoder attention")?;
    if let Some(r) = &trace.refiner_attention {
        check_stochastic(r, "refiner attention")?;
    }
    let dump = AttentionDump {
        grid: trace.grid,
        decoder,
        refiner: trace.refiner_attention,
        selected: trace.selected,
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = dump.grid;
    for q in 0..dump.decoder.rows() {
        let grid = dump.query_grid(q);
        let mut csv = String::new();
        for row in &grid {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(csv, "{}", cells.join(","));
        }
        let path = out_dir.join(format!("query_{q}.csv"));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

        let max = dump.decoder.row(q).iter().copied().fold(0.0, f64::max);
        let mut img = ImageData::blank(w, h, 1);
        for (y, row) in grid.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                let level = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
                img.fill_rect(x, y, x + 1, y + 1, &[level]);
            }
        }
        img.write_png(&out_dir.join(format!("query_{q}.png")))?;
    }
    if let Some(r) = &dump.refiner {
        let header: Vec<String> = dump.selected.iter().map(|&p| assets.vocabulary.pair_key(p)).collect();
        let mut csv = format!("query,{}\n", header.join(","));
        for q in 0..r.rows() {
            let cells: Vec<String> = r.row(q).iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(csv, "{q},{}", cells.join(","));
        }
        let path = out_dir.join("refiner.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(dump)
}
