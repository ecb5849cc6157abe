//! CSV and text renderings of metric, training and energy results.

use std::fmt::Write;

use evsnn_core::energy::{OpCountReport, OpMode};
use evsnn_core::eval::{MetricReport, PrPoint};
use evsnn_core::training::StepRecord;

pub fn loss_trace_csv(trace: &[StepRecord]) -> String {
    let mut s = String::from("step,loss,skipped_queries\n");
    for r in trace {
        writeln!(s, "{},{:?},{}", r.step, r.loss, r.skipped_queries).unwrap();
    }
    s
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("tau,precision,recall\n");
    for p in points {
        writeln!(s, "{:?},{:?},{:?}", p.tau, p.precision, p.recall).unwrap();
    }
    s
}

/// One row per threshold φ: recall at each N, F1-max and counts.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("phi");
    if let Some(r) = reports.first() {
        for (n, _) in &r.recall {
            write!(s, ",recall@{n}").unwrap();
        }
    }
    s.push_str(",f1_max,queries,skipped\n");
    for r in reports {
        write!(s, "{:?}", r.phi).unwrap();
        for (_, v) in &r.recall {
            write!(s, ",{v:?}").unwrap();
        }
        writeln!(s, ",{:?},{},{}", r.f1_max, r.queries, r.skipped).unwrap();
    }
    s
}

pub fn metrics_table(reports: &[MetricReport]) -> String {
    let mut s = String::new();
    write!(s, "{:>8}", "phi (m)").unwrap();
    if let Some(r) = reports.first() {
        for (n, _) in &r.recall {
            write!(s, " {:>10}", format!("R@{n} (%)")).unwrap();
        }
    }
    writeln!(s, " {:>8}", "F1-max").unwrap();
    for r in reports {
        write!(s, "{:>8.1}", r.phi).unwrap();
        for (_, v) in &r.recall {
            write!(s, " {:>10.2}", 100.0 * v).unwrap();
        }
        writeln!(s, " {:>8.4}", r.f1_max).unwrap();
    }
    if let Some(r) = reports.first() {
        writeln!(s, "queries: {} ({} without pose skipped)", r.queries, r.skipped).unwrap();
    }
    s
}

fn mode_label(mode: &OpMode) -> String {
    match mode {
        OpMode::SnnStatic { rate } => format!("{} (assumed firing rate {rate})", mode.as_str()),
        _ => mode.as_str().to_string(),
    }
}

pub fn energy_csv(r: &OpCountReport) -> String {
    let mut s = String::from("layer,params,ac,mac\n");
    for l in &r.layers {
        writeln!(s, "{},{},{:?},{:?}", l.name, l.params, l.ac, l.mac).unwrap();
    }
    writeln!(s, "total,{},{:?},{:?}", r.params, r.ac, r.mac).unwrap();
    writeln!(s, "energy_mj,{:?}", r.energy_mj).unwrap();
    s
}

/// Summary row in the layout `T | Params(M) | O_AC(G) | O_MAC(G) | Energy(mJ)`,
/// followed by per-layer counts.
pub fn energy_table(r: &OpCountReport) -> String {
    let mut s = String::new();
    writeln!(s, "mode: {}", mode_label(&r.mode)).unwrap();
    writeln!(s, "{:>3} {:>10} {:>12} {:>12} {:>12}", "T", "Params(M)", "O_AC(G)", "O_MAC(G)", "Energy(mJ)").unwrap();
    writeln!(
        s,
        "{:>3} {:>10.4} {:>12.6} {:>12.6} {:>12.6}",
        r.steps,
        r.params as f64 / 1e6,
        r.ac / 1e9,
        r.mac / 1e9,
        r.energy_mj
    )
    .unwrap();
    writeln!(s, "energy: {:.3} mJ", r.energy_mj).unwrap();
    if !r.layers.is_empty() {
        writeln!(s, "\n{:<28} {:>10} {:>14} {:>14}", "layer", "params", "AC", "MAC").unwrap();
        for l in &r.layers {
            writeln!(s, "{:<28} {:>10} {:>14.0} {:>14.0}", l.name, l.params, l.ac, l.mac).unwrap();
        }
    }
    s.push_str("note: batch-norm, pooling and bias additions are not counted.\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use evsnn_core::energy::energy_from_counts;

    #[test]
    fn loss_trace_header_and_rows() {
        let t = [StepRecord { step: 0, loss: 0.5, skipped_queries: 1, cache_staleness: 2 }, StepRecord { step: 1, loss: 0.25, skipped_queries: 1, cache_staleness: 4 }];
        assert_eq!(loss_trace_csv(&t), "step,loss,skipped_queries\n0,0.5,1\n1,0.25,1\n");
    }

    #[test]
    fn pr_header() {
        let p = [PrPoint { tau: 0.5, precision: 1.0, recall: 0.25 }];
        assert_eq!(pr_csv(&p), "tau,precision,recall\n0.5,1.0,0.25\n");
    }

    #[test]
    fn metrics_csv_columns() {
        let r = MetricReport { phi: 75.0, recall: vec![(1, 0.5), (5, 1.0)], pr: vec![], f1_max: 0.6, queries: 4, skipped: 0 };
        assert_eq!(metrics_csv(&[r]), "phi,recall@1,recall@5,f1_max,queries,skipped\n75.0,0.5,1.0,0.6,4,0\n");
    }

    #[test]
    fn energy_table_prints_three_decimals() {
        let r = OpCountReport {
            mode: OpMode::Ann,
            steps: 1,
            layers: vec![],
            ac: 0.0,
            mac: 4.38e9,
            params: 0,
            energy_mj: energy_from_counts(0.0, 4.38e9),
        };
        assert!(energy_table(&r).contains("energy: 20.148 mJ"));
    }
}
