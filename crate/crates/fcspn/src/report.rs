//! CSV tables, palettes and PPM rendering.

use std::fmt::Write as _;
use std::path::Path;

use fcspn_core::data::{LabelMap, SplitCell, SplitMask};
use fcspn_core::metrics::Report;
use fcspn_core::train::LossRecord;

use crate::error::{io_err, FormatError, Result};

pub const LOSS_HEADER: &str = "epoch,step,focal,l2,total";

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_HEADER}\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{:e},{:e},{:e}", r.epoch, r.step, r.focal, r.l2, r.total);
    }
    out
}

/// Per-class accuracy rows, then OA, AA and kappa x 100, all in percent.
pub fn metrics_csv(report: &Report) -> String {
    let mut out = String::from("class_id,name,accuracy\n");
    for row in &report.classes {
        let _ = writeln!(out, "{},{},{:.4}", row.class_id, csv_field(&row.name), row.accuracy);
    }
    for (name, v) in [("OA", report.oa), ("AA", report.aa), ("kappa", report.kappa)] {
        let _ = writeln!(out, "{name},,{v:.4}");
    }
    out
}

/// Per-class train and test counts.
pub fn split_csv(labels: &LabelMap, split: &SplitMask) -> String {
    let train = split.class_counts(labels, SplitCell::Train);
    let test = split.class_counts(labels, SplitCell::Test);
    let mut out = String::from("class_id,name,train,test\n");
    for (k, name) in labels.class_names().iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", k + 1, csv_field(name), train[k], test[k]);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaletteEntry {
    pub class_id: u16,
    pub rgb: [u8; 3],
    pub name: String,
}

/// Colors by class id; id 0 (unlabeled) is black unless listed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub entries: Vec<PaletteEntry>,
}

const BASE_COLORS: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

impl Palette {
    /// Distinct colors for `names.len()` classes, cycling with darkening past 16.
    pub fn generate(names: &[String]) -> Self {
        let entries = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let base = BASE_COLORS[k % BASE_COLORS.len()];
                let shade = 1.0 / (1 + k / BASE_COLORS.len()) as f64;
                PaletteEntry {
                    class_id: k as u16 + 1,
                    rgb: base.map(|v| (v as f64 * shade) as u8),
                    name: name.clone(),
                }
            })
            .collect();
        Self { entries }
    }

    pub fn color(&self, id: u16) -> [u8; 3] {
        self.entries
            .iter()
            .find(|e| e.class_id == id)
            .map_or([0, 0, 0], |e| e.rgb)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,r,g,b,name\n");
        for e in &self.entries {
            let [r, g, b] = e.rgb;
            let _ = writeln!(out, "{},{r},{g},{b},{}", e.class_id, csv_field(&e.name));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("class_id")) {
                continue;
            }
            let bad = |what: &str| FormatError::Invalid(format!("palette line {}: {what}", i + 1));
            let fields: Vec<&str> = line.splitn(5, ',').collect();
            if fields.len() < 4 {
                return Err(bad("expected class_id,r,g,b,name"));
            }
            let class_id = fields[0].trim().parse().map_err(|_| bad("bad class id"))?;
            let mut rgb = [0u8; 3];
            for (c, f) in rgb.iter_mut().zip(&fields[1..4]) {
                *c = f.trim().parse().map_err(|_| bad("color component must be 0..=255"))?;
            }
            let name = fields.get(4).map_or("", |s| s.trim()).trim_matches('"').to_string();
            entries.push(PaletteEntry { class_id, rgb, name });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Binary P6 image of a label map.
pub fn render_ppm(labels: &LabelMap, palette: &Palette) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.cols(), labels.rows()).into_bytes();
    out.reserve(labels.ids().len() * 3);
    for &id in labels.ids() {
        out.extend_from_slice(&palette.color(id));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}
