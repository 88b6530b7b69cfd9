//! Summary and communication tables over a directory of metrics files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use codream::metrics::{comm_report, MetricsRecord};

/// Population mean and standard deviation (divide by n).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn metrics_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_records(dir: &Path) -> codream::Result<Vec<MetricsRecord>> {
    metrics_files(dir)?
        .iter()
        .map(|p| {
            let f = std::fs::File::open(p)?;
            MetricsRecord::read_jsonl(BufReader::new(f), &p.display().to_string())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub client: (f64, f64),
    pub server: Option<(f64, f64)>,
}

pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut by_method: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let entry = by_method.entry(r.header.method.as_str()).or_default();
        if let Some(a) = r.final_client_accuracy() {
            entry.0.push(a);
        }
        if let Some(a) = r.final_server_accuracy() {
            entry.1.push(a);
        }
    }
    by_method
        .into_iter()
        .map(|(method, (client, server))| SummaryRow {
            method: method.to_string(),
            runs: client.len(),
            client: mean_std(&client),
            server: (!server.is_empty()).then(|| mean_std(&server)),
        })
        .collect()
}

fn pair(v: (f64, f64)) -> String {
    format!("{:.4}({:.4})", v.0, v.1)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method,runs,client_accuracy,client_accuracy_mean,client_accuracy_std_population,\
         server_accuracy,server_accuracy_mean,server_accuracy_std_population\n",
    );
    for r in rows {
        let (server, sm, ss) = match r.server {
            Some(s) => (pair(s), format!("{:.6}", s.0), format!("{:.6}", s.1)),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{},{}",
            r.method,
            r.runs,
            pair(r.client),
            r.client.0,
            r.client.1,
            server,
            sm,
            ss
        )
        .expect("write to string");
    }
    out
}

/// One row per (method, architectures); byte counts averaged over seeds.
pub fn comm_csv(records: &[MetricsRecord]) -> String {
    let mut groups: BTreeMap<(String, String), Vec<codream::metrics::CommRow>> = BTreeMap::new();
    for r in records {
        let row = comm_report(r);
        groups
            .entry((row.method.clone(), row.architectures.clone()))
            .or_default()
            .push(row);
    }
    let mut out = String::from("method,architectures,max_param_count,rounds,clients,bytes_per_round_per_client,total_bytes\n");
    for ((method, arch), rows) in groups {
        let per: Vec<f64> = rows.iter().map(|r| r.bytes_per_round_per_client).collect();
        let total: Vec<f64> = rows.iter().map(|r| r.total_bytes as f64).collect();
        let first = &rows[0];
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            method,
            arch,
            first.max_param_count,
            first.rounds,
            first.clients,
            mean_std(&per).0,
            mean_std(&total).0
        )
        .expect("write to string");
    }
    out
}
