//! Variant and teacher-count sweeps over one manifest.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::dataset::{split_protocol, Manifest, ProtocolId, SplitPart};
use crate::error::{Error, Result};
use crate::trainer::{train, TrainConfig, Variant};

use super::metrics::{compute_metrics, MetricsReport};
use super::score::score_split;

/// What to sweep. Empty lists fall back to the base config.
///
/// Text form: `;`-separated `key=values` clauses, e.g.
/// `variants=full,wo_ukm; g=1..8; protocols=p1,p2.1,p2.2`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sweep {
    pub variants: Vec<Variant>,
    pub teachers: Vec<usize>,
    pub protocols: Vec<ProtocolId>,
}

fn parse_counts(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad teacher count list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut sweep = Sweep::default();
        for clause in s.split(';').map(str::trim).filter(|c| !c.is_empty()) {
            let (key, values) =
                clause.split_once('=').ok_or_else(|| Error::Config(format!("sweep clause `{clause}` lacks `=`")))?;
            let list = || values.split(',').map(str::trim).filter(|v| !v.is_empty());
            match key.trim().to_ascii_lowercase().as_str() {
                "variants" | "variant" => sweep.variants = list().map(str::parse).collect::<Result<_>>()?,
                "g" | "teachers" | "num_teachers" => sweep.teachers = parse_counts(values)?,
                "protocols" | "protocol" => sweep.protocols = list().map(str::parse).collect::<Result<_>>()?,
                other => return Err(Error::Config(format!("unknown sweep key `{other}`"))),
            }
        }
        if sweep.variants.is_empty() && sweep.teachers.is_empty() {
            return Err(Error::Config("sweep names neither variants nor teacher counts".into()));
        }
        Ok(sweep)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub protocol: ProtocolId,
    pub variant: Variant,
    pub num_teachers: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub report: MetricsReport,
}

/// Trains and evaluates every combination of the sweep, protocols outermost.
/// All runs share the base seed and the same manifest.
pub fn run_ablation(base: &TrainConfig, sweep: &Sweep, manifest: &Manifest) -> Result<Vec<AblationRow>> {
    let variants = if sweep.variants.is_empty() { vec![base.variant] } else { sweep.variants.clone() };
    let teachers = if sweep.teachers.is_empty() { vec![base.num_teachers] } else { sweep.teachers.clone() };
    let protocols = if sweep.protocols.is_empty() { vec![ProtocolId::P1] } else { sweep.protocols.clone() };
    let mut rows = Vec::new();
    for &protocol in &protocols {
        let split = split_protocol(manifest, protocol, None)?;
        for &variant in &variants {
            for &g in &teachers {
                let config = TrainConfig { variant, num_teachers: g, ..base.clone() };
                log::info!("ablation: {protocol} {variant} G={g}");
                let outcome = train(manifest, &split, &config)?;
                let dev = score_split(&outcome.best, manifest, &split, SplitPart::Eval, config.execution)?;
                let test = score_split(&outcome.best, manifest, &split, SplitPart::Test, config.execution)?;
                rows.push(AblationRow {
                    protocol,
                    variant,
                    num_teachers: g,
                    seed: config.seed,
                    best_epoch: outcome.best.epoch,
                    report: compute_metrics(&dev, &test)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Tab-separated table, one row per run.
pub fn table_to_text(rows: &[AblationRow]) -> String {
    let mut s = String::from("protocol\tvariant\tg\tseed\tbest_epoch\tthreshold\tapcer\tbpcer\tacer\tacc\tauc\teer\n");
    for r in rows {
        let m = &r.report;
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
            r.protocol, r.variant, r.num_teachers, r.seed, r.best_epoch, m.threshold, m.apcer, m.bpcer, m.acer, m.acc, m.auc, m.eer
        )
        .expect("string write");
    }
    s
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Protocol 2 summary: ACER mean ± std over P2.1 and P2.2 per `(variant, G)`.
/// Only configurations evaluated on both sub-protocols appear.
pub fn protocol2_summary(rows: &[AblationRow]) -> Vec<(Variant, usize, f64, f64)> {
    let mut keys: Vec<(Variant, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.variant, r.num_teachers)) {
            keys.push((r.variant, r.num_teachers));
        }
    }
    keys.into_iter()
        .filter_map(|(v, g)| {
            let acer = |p: ProtocolId| {
                rows.iter().find(|r| r.protocol == p && r.variant == v && r.num_teachers == g).map(|r| r.report.acer)
            };
            let (a, b) = (acer(ProtocolId::P2_1)?, acer(ProtocolId::P2_2)?);
            let (m, s) = mean_std(&[a, b]);
            Some((v, g, m, s))
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// ACER and AUC against the teacher count, one polyline per
/// `(protocol, variant, metric)`.
pub fn plot_svg(rows: &[AblationRow]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    if rows.is_empty() {
        return format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\"/>\n");
    }
    let (g_min, g_max) = rows
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), r| (lo.min(r.num_teachers), hi.max(r.num_teachers)));
    let span = g_max.saturating_sub(g_min).max(1) as f64;
    let x = |g: usize| pad + (g.saturating_sub(g_min)) as f64 / span * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v.clamp(0.0, 1.0) * (h - 2.0 * pad);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{pad} {} H{} M{pad} {} V{pad}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad,
        h - pad
    )
    .unwrap();
    for g in g_min..=g_max.max(g_min) {
        writeln!(s, r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{g}</text>"#, x(g), h - pad + 16.0).unwrap();
    }
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        writeln!(s, r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{tick}</text>"#, pad - 6.0, y(tick) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">teacher groups G</text>"#, w / 2.0, h - 10.0).unwrap();

    let mut series: Vec<(ProtocolId, Variant)> = Vec::new();
    for r in rows {
        if !series.contains(&(r.protocol, r.variant)) {
            series.push((r.protocol, r.variant));
        }
    }
    let mut legend = 0;
    for (i, &(p, v)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<&AblationRow> = rows.iter().filter(|r| r.protocol == p && r.variant == v).collect();
        pts.sort_by_key(|r| r.num_teachers);
        for (metric, dash, value) in [
            ("acer", "", (|r: &AblationRow| r.report.acer) as fn(&AblationRow) -> f64),
            ("auc", r#" stroke-dasharray="5,3""#, |r: &AblationRow| r.report.auc),
        ] {
            let path: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", x(r.num_teachers), y(value(r)))).collect();
            writeln!(s, r#"<polyline points="{}" stroke="{colour}" fill="none"{dash}/>"#, path.join(" ")).unwrap();
            for r in &pts {
                writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#, x(r.num_teachers), y(value(r))).unwrap();
            }
            writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" fill="{colour}">{p} {v} {metric}</text>"#,
                w - pad - 170.0,
                pad + 14.0 * legend as f64
            )
            .unwrap();
            legend += 1;
        }
    }
    s.push_str("</svg>\n");
    s
}
