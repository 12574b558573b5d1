//! Segmentation metrics, seed aggregation and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::app::AppVariant;
use crate::dataset::{DatasetKind, Mask};
use crate::error::{Error, Result};
use crate::models::{Architecture, EncoderKind};
use crate::weights::WeightScheme;

/// Placeholder for table cells without data.
pub const MISSING_CELL: &str = "—";

fn check_same_shape(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// What to do with an image whose prediction and ground truth are both empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyIou {
    /// Count it as perfect agreement (1.0).
    #[default]
    One,
    /// Leave it out of the dataset mean.
    Skip,
}

/// Foreground IoU; 1.0 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn pixel_accuracy(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if gt.is_empty() {
        return Err(Error::InvalidInput("pixel accuracy of an empty mask".into()));
    }
    let same = pred.data.iter().zip(&gt.data).filter(|(p, g)| p == g).count();
    Ok(same as f64 / gt.len() as f64)
}

/// Which classes enter the IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouClasses {
    #[default]
    Foreground,
    /// Mean of background and foreground IoU.
    ClassMean,
}

/// How per-image counts become one dataset IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouAggregate {
    /// Mean of per-image IoUs.
    #[default]
    PerImage,
    /// One ratio over intersections and unions summed across images.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IouOptions {
    pub empty: EmptyIou,
    pub classes: IouClasses,
    pub aggregate: IouAggregate,
}

// [intersection, union] for background then foreground.
fn class_counts(pred: &Mask, gt: &Mask) -> Result<[[usize; 2]; 2]> {
    check_same_shape(pred, gt)?;
    let mut c = [[0usize; 2]; 2];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        c[0][0] += (p == 0 && g == 0) as usize;
        c[0][1] += (p == 0 || g == 0) as usize;
        c[1][0] += (p & g) as usize;
        c[1][1] += (p | g) as usize;
    }
    Ok(c)
}

// Mean over the selected classes; classes with an empty union count as 1.0,
// or drop out under `EmptyIou::Skip`. None when everything dropped out.
fn score(counts: &[[usize; 2]; 2], opts: IouOptions) -> Option<f64> {
    let classes: &[usize] = match opts.classes {
        IouClasses::Foreground => &[1],
        IouClasses::ClassMean => &[0, 1],
    };
    let vals: Vec<f64> = classes
        .iter()
        .filter_map(|&k| {
            let [inter, union] = counts[k];
            match (union, opts.empty) {
                (0, EmptyIou::Skip) => None,
                (0, EmptyIou::One) => Some(1.0),
                _ => Some(inter as f64 / union as f64),
            }
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Dataset IoU and mean per-image pixel accuracy over paired masks.
pub fn dataset_scores(preds: &[Mask], gts: &[Mask], opts: IouOptions) -> Result<(f64, f64)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::InvalidInput(format!(
            "need equally many non-zero predictions and masks, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let (mut iou_sum, mut iou_n, mut acc_sum) = (0.0, 0usize, 0.0);
    let mut pooled = [[0usize; 2]; 2];
    for (p, g) in preds.iter().zip(gts) {
        let c = class_counts(p, g)?;
        for k in 0..2 {
            pooled[k][0] += c[k][0];
            pooled[k][1] += c[k][1];
        }
        if let Some(v) = score(&c, opts) {
            iou_sum += v;
            iou_n += 1;
        }
        acc_sum += pixel_accuracy(p, g)?;
    }
    let mean_iou = match opts.aggregate {
        IouAggregate::PerImage if iou_n == 0 => 1.0,
        IouAggregate::PerImage => iou_sum / iou_n as f64,
        IouAggregate::Pooled => score(&pooled, opts).unwrap_or(1.0),
    };
    Ok((mean_iou, acc_sum / preds.len() as f64))
}

/// Mean and Student-t confidence half-width at `level`.
pub fn mean_ci(values: &[f64], level: f64) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "a confidence interval needs at least 2 values, got {n}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level {level} outside (0, 1)")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: DatasetKind,
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub weight_scheme: WeightScheme,
    pub app_variant: AppVariant,
    pub seed: u64,
    pub test_iou: f64,
    pub test_pixel_accuracy: f64,
}

impl ResultRow {
    pub fn key(&self) -> GroupKey {
        GroupKey {
            dataset: self.dataset,
            architecture: self.architecture,
            encoder: self.encoder,
            weight_scheme: self.weight_scheme,
            app_variant: self.app_variant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub dataset: DatasetKind,
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub weight_scheme: WeightScheme,
    pub app_variant: AppVariant,
}

pub fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub key: GroupKey,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_iou: f64,
    /// `None` when fewer than two seeds succeeded.
    pub ci_half_width: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn from_seeds(key: GroupKey, mut per_seed: Vec<(u64, f64)>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::InvalidInput("report needs at least one seed".into()));
        }
        per_seed.sort_by_key(|(s, _)| *s);
        let values: Vec<f64> = per_seed.iter().map(|(_, v)| *v).collect();
        let (mean_iou, ci_half_width) = match mean_ci(&values, 0.95) {
            Ok((m, h)) => (m, Some(h)),
            Err(_) => (values[0], None),
        };
        Ok(Self {
            key,
            n: per_seed.len(),
            per_seed,
            mean_iou,
            ci_half_width,
        })
    }
}

/// Groups result rows into one report per configuration.
pub fn aggregate(rows: &[ResultRow]) -> Vec<MetricReport> {
    let mut groups: BTreeMap<GroupKey, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.key()).or_default().push((r.seed, r.test_iou));
    }
    groups
        .into_iter()
        .map(|(k, v)| MetricReport::from_seeds(k, v).expect("groups are non-empty"))
        .collect()
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    dataset: DatasetKind,
    architecture: Architecture,
    encoder: EncoderKind,
    weight_scheme: WeightScheme,
    app_variant: AppVariant,
    mean_iou: f64,
    ci_half_width: Option<f64>,
    n: usize,
}

pub fn write_summary(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(SummaryRow {
            dataset: r.key.dataset,
            architecture: r.key.architecture,
            encoder: r.key.encoder,
            weight_scheme: r.key.weight_scheme,
            app_variant: r.key.app_variant,
            mean_iou: r.mean_iou,
            ci_half_width: r.ci_half_width,
            n: r.n,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableLayout {
    /// Rows are encoders; one block per (dataset, architecture, scheme).
    ByEncoder,
    /// Rows are weight schemes; one block per (dataset, architecture, encoder).
    ByScheme,
}

pub const VARIANT_COLUMNS: [(AppVariant, &str); 3] = [
    (AppVariant::None, "Baseline (w/o APP)"),
    (AppVariant::Relu, "w/ ReLU APP"),
    (AppVariant::Gelu, "w/ GELU APP"),
];

/// A rendered table block: a title plus rows of optional cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TableBlock {
    pub title: String,
    pub row_header: String,
    pub rows: Vec<(String, [Option<f64>; 3])>,
}

/// Lays reports out as blocks, dataset outermost. Tiny-encoder rows are kept
/// only for the synthetic dataset.
pub fn table_blocks(reports: &[MetricReport], layout: TableLayout) -> Vec<TableBlock> {
    type Cells = BTreeMap<String, [Option<f64>; 3]>;
    let mut blocks: BTreeMap<(DatasetKind, Architecture, String), Cells> = BTreeMap::new();
    let mut row_order: BTreeMap<String, usize> = BTreeMap::new();
    for r in reports {
        let k = r.key;
        if k.encoder == EncoderKind::Tiny && k.dataset != DatasetKind::Synthetic {
            continue;
        }
        let (group, row, order) = match layout {
            TableLayout::ByEncoder => (
                format!("weight_scheme={}", k.weight_scheme),
                k.encoder.to_string(),
                k.encoder as usize,
            ),
            TableLayout::ByScheme => (
                format!("encoder={}", k.encoder),
                k.weight_scheme.to_string(),
                k.weight_scheme as usize,
            ),
        };
        row_order.insert(row.clone(), order);
        let col = VARIANT_COLUMNS
            .iter()
            .position(|(v, _)| *v == k.app_variant)
            .expect("every variant has a column");
        blocks
            .entry((k.dataset, k.architecture, group))
            .or_default()
            .entry(row)
            .or_insert([None; 3])[col] = Some(r.mean_iou);
    }
    blocks
        .into_iter()
        .map(|((dataset, arch, group), cells)| {
            let mut rows: Vec<_> = cells.into_iter().collect();
            rows.sort_by_key(|(name, _)| row_order[name]);
            TableBlock {
                title: format!("dataset={dataset} architecture={arch} {group}"),
                row_header: match layout {
                    TableLayout::ByEncoder => "encoder".into(),
                    TableLayout::ByScheme => "weight_scheme".into(),
                },
                rows,
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| MISSING_CELL.to_string())
}

/// Delimited text: per block a `# title` line, a header, rows, and a blank line.
pub fn emit_table(reports: &[MetricReport], layout: TableLayout) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to tabulate".into()));
    }
    let mut out = String::new();
    for block in table_blocks(reports, layout) {
        let _ = writeln!(out, "# {}", block.title);
        let headers: Vec<&str> = VARIANT_COLUMNS.iter().map(|(_, h)| *h).collect();
        let _ = writeln!(out, "{},{}", block.row_header, headers.join(","));
        for (name, cells) in &block.rows {
            let cells: Vec<String> = cells.iter().map(|c| cell(*c)).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses the output of [`emit_table`] back into blocks.
pub fn parse_table(text: &str) -> Result<Vec<TableBlock>> {
    let mut blocks = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let title = line
            .strip_prefix("# ")
            .ok_or_else(|| Error::Format(format!("expected a block title, got `{line}`")))?;
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("block without header".into()))?;
        let row_header = header.split(',').next().unwrap_or_default().to_string();
        let mut rows = Vec::new();
        while let Some(l) = lines.peek() {
            if l.trim().is_empty() {
                break;
            }
            let parts: Vec<&str> = l.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("row `{l}` does not have 4 fields")));
            }
            let mut cells = [None; 3];
            for (c, p) in cells.iter_mut().zip(&parts[1..]) {
                *c = if *p == MISSING_CELL {
                    None
                } else {
                    Some(p.parse::<f64>().map_err(|e| Error::Format(format!("cell `{p}`: {e}")))?)
                };
            }
            rows.push((parts[0].to_string(), cells));
            lines.next();
        }
        blocks.push(TableBlock {
            title: title.to_string(),
            row_header,
            rows,
        });
    }
    Ok(blocks)
}

/// Fixed-width text rendering of the same blocks.
pub fn render_grid(reports: &[MetricReport], layout: TableLayout) -> String {
    let mut out = String::new();
    for block in table_blocks(reports, layout) {
        let mut table: Vec<Vec<String>> = vec![std::iter::once(block.row_header.clone())
            .chain(VARIANT_COLUMNS.iter().map(|(_, h)| h.to_string()))
            .collect()];
        for (name, cells) in &block.rows {
            table.push(std::iter::once(name.clone()).chain(cells.iter().map(|c| cell(*c))).collect());
        }
        let widths: Vec<usize> = (0..4)
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let rule: String = widths
            .iter()
            .map(|w| "-".repeat(w + 2))
            .collect::<Vec<_>>()
            .join("+");
        let _ = writeln!(out, "{}", block.title);
        let _ = writeln!(out, "+{rule}+");
        for (i, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!(" {s}{} ", " ".repeat(w - s.chars().count())))
                .collect();
            let _ = writeln!(out, "|{}|", cells.join("|"));
            if i == 0 {
                let _ = writeln!(out, "+{rule}+");
            }
        }
        let _ = writeln!(out, "+{rule}+");
        out.push('\n');
    }
    out
}

const BAR_COLORS: [[u8; 3]; 3] = [[120, 120, 120], [52, 120, 200], [220, 120, 40]];

/// Bar chart of mean IoU: one group per encoder, one bar per APP variant
/// (grey baseline, blue ReLU, orange GELU), with 0.1 gridlines.
pub fn plot_bars(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut encoders: Vec<EncoderKind> = reports.iter().map(|r| r.key.encoder).collect();
    encoders.sort();
    encoders.dedup();
    let (bar, gap, pad, height) = (18u32, 24u32, 30u32, 240u32);
    let groups = encoders.len().max(1) as u32;
    let width = pad * 2 + groups * (3 * bar + gap);
    let total_h = height + pad * 2;
    let mut img = image::RgbImage::from_pixel(width, total_h, image::Rgb([255, 255, 255]));
    for tick in 0..=10 {
        let y = pad + height - tick * height / 10;
        for x in pad..width - pad {
            img.put_pixel(x, y, image::Rgb([225, 225, 225]));
        }
    }
    for (gi, enc) in encoders.iter().enumerate() {
        for (vi, (variant, _)) in VARIANT_COLUMNS.iter().enumerate() {
            let vals: Vec<f64> = reports
                .iter()
                .filter(|r| r.key.encoder == *enc && r.key.app_variant == *variant)
                .map(|r| r.mean_iou)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let v = (vals.iter().sum::<f64>() / vals.len() as f64).clamp(0.0, 1.0);
            let h = (v * height as f64).round() as u32;
            let x0 = pad + gi as u32 * (3 * bar + gap) + gap / 2 + vi as u32 * bar;
            for x in x0..x0 + bar - 2 {
                for y in (pad + height - h)..(pad + height) {
                    img.put_pixel(x, y, image::Rgb(BAR_COLORS[vi]));
                }
            }
        }
    }
    for x in pad..width - pad {
        img.put_pixel(x, pad + height, image::Rgb([0, 0, 0]));
    }
    img.save(path)?;
    Ok(())
}
