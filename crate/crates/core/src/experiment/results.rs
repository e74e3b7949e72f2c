//! Result rows and their CSV, JSON, and text renderings.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever a column is added, removed, or reinterpreted.
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

pub const RESULTS_HEADER: [&str; 7] = [
    "scenario",
    "gating_mode",
    "transport",
    "k",
    "seed",
    "accuracy",
    "mean_routing_entropy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    /// `naive` or `channel_aware`.
    pub gating_mode: String,
    /// `ideal`, `analog`, or `digital`.
    pub transport: String,
    pub k: usize,
    pub seed: u64,
    pub accuracy: f64,
    /// Mean gate entropy in nats.
    pub mean_routing_entropy: f64,
}

#[derive(Serialize, Deserialize)]
struct ResultsJson {
    schema_version: u32,
    rows: Vec<ResultRow>,
}

pub fn write_results_csv<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(RESULTS_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("writing results", e))?;
    Ok(())
}

pub fn read_results_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Decode(format!("unexpected results header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn results_to_json(rows: &[ResultRow]) -> String {
    let doc = ResultsJson {
        schema_version: RESULTS_SCHEMA_VERSION,
        rows: rows.to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("rows always serialize")
}

pub fn results_from_json(text: &str) -> Result<Vec<ResultRow>> {
    let doc: ResultsJson =
        serde_json::from_str(text).map_err(|e| Error::Decode(format!("results JSON: {e}")))?;
    if doc.schema_version != RESULTS_SCHEMA_VERSION {
        return Err(Error::Decode(format!(
            "results schema version {} (expected {RESULTS_SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    Ok(doc.rows)
}

/// Writes `<stem>.csv`, `<stem>.json`, and `<stem>.txt` into `dir`.
pub fn save_results(dir: &Path, stem: &str, rows: &[ResultRow]) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let f = std::fs::File::create(&csv_path)
        .map_err(|e| Error::io(format!("creating {}", csv_path.display()), e))?;
    write_results_csv(std::io::BufWriter::new(f), rows)?;
    for (ext, body) in [("json", results_to_json(rows)), ("txt", render_table(rows))] {
        let p = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |a| format!("{:.1}", 100.0 * a))
}

/// Base/naive/channel-aware accuracy table, one line per
/// (scenario, transport, K, seed). Base accuracy comes from the matching
/// ideal-transport rows when present. Accuracies are percentages.
pub fn render_table(rows: &[ResultRow]) -> String {
    type Key = (String, usize, u64);
    let mut base: BTreeMap<Key, f64> = BTreeMap::new();
    let mut cells: BTreeMap<(Key, String), [Option<f64>; 2]> = BTreeMap::new();
    for r in rows {
        let key = (r.scenario.clone(), r.k, r.seed);
        let slot = usize::from(r.gating_mode != "naive");
        if r.transport == "ideal" {
            if slot == 0 {
                base.insert(key, r.accuracy);
            }
            continue;
        }
        cells.entry((key, r.transport.clone())).or_default()[slot] = Some(r.accuracy);
    }
    let head = [
        "Scenario",
        "Transport",
        "K",
        "Seed",
        "Base Acc.",
        "Naive Gating",
        "Channel-Aware Gating",
        "Gain",
    ];
    let mut lines: Vec<[String; 8]> = vec![head.map(String::from)];
    for (((scenario, k, seed), transport), [naive, aw]) in &cells {
        let gain = naive.zip(*aw).map(|(n, a)| format!("{:+.1}", 100.0 * (a - n)));
        lines.push([
            scenario.clone(),
            transport.clone(),
            k.to_string(),
            seed.to_string(),
            pct(base.get(&(scenario.clone(), *k, *seed)).copied()),
            pct(*naive),
            pct(*aw),
            gain.unwrap_or_else(|| "-".into()),
        ]);
    }
    if cells.is_empty() {
        for ((scenario, k, seed), acc) in &base {
            let dash = || "-".to_string();
            lines.push([
                scenario.clone(),
                "ideal".into(),
                k.to_string(),
                seed.to_string(),
                pct(Some(*acc)),
                dash(),
                dash(),
                dash(),
            ]);
        }
    }
    let widths: Vec<usize> = (0..8)
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cols: Vec<String> = l
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| {
                if c < 2 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        out.push_str(cols.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: &str, transport: &str, acc: f64) -> ResultRow {
        ResultRow {
            scenario: "heterogeneous".into(),
            gating_mode: mode.into(),
            transport: transport.into(),
            k: 8,
            seed: 1,
            accuracy: acc,
            mean_routing_entropy: 0.125,
        }
    }

    fn sample() -> Vec<ResultRow> {
        vec![
            row("naive", "ideal", 0.99),
            row("channel_aware", "ideal", 0.985),
            row("naive", "analog", 0.75),
            row("channel_aware", "analog", 1.0 / 3.0),
        ]
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scenario,gating_mode,transport,k,seed,accuracy,mean_routing_entropy\n"));
        assert_eq!(read_results_csv(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn empty_csv_still_has_header() {
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &[]).unwrap();
        assert!(read_results_csv(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn json_round_trip_checks_version() {
        let text = results_to_json(&sample());
        assert_eq!(results_from_json(&text).unwrap(), sample());
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(results_from_json(&bumped).is_err());
    }

    #[test]
    fn table_layout() {
        let t = render_table(&sample());
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("Base Acc.") && lines[0].contains("Channel-Aware Gating"));
        assert_eq!(lines.len(), 3);
        assert!(lines[2].contains("99.0") && lines[2].contains("75.0") && lines[2].contains("33.3"));
        assert!(lines[2].contains("-41.7"));
    }
}
