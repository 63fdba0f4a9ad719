use std::io::Write;

use rayon::prelude::*;

use super::{analyze_dataset, evaluate, DirectOffloader, PipelineConfig, PipelineError, Server};
use crate::attention::AttentionMethod;
use crate::dataset::Dataset;
use crate::gate::{EntropyMeasure, GateSpec};
use crate::selection::SelectionRule;
use crate::vit::ModelWeights;

pub const SWEEP_COLUMNS: [&str; 7] =
    ["delta_sum", "eta", "offload_rate", "mean_patches_offloaded", "cost_ratio", "accuracy", "pareto"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub delta_sums: Vec<f64>,
    pub etas: Vec<f64>,
    pub measure: EntropyMeasure,
    pub attention: AttentionMethod,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub delta_sum: f64,
    pub eta: f64,
    pub offload_rate: f64,
    /// Mean patches per offloaded image, 0 when nothing was offloaded.
    pub mean_patches_offloaded: f64,
    pub cost_ratio: f64,
    pub accuracy: f64,
    pub pareto: bool,
}

/// Evaluates every `(delta_sum, eta)` pair with attention-sum selection.
/// Rows come out `delta_sum`-major in the order given, whatever order the
/// grid points were computed in.
pub fn sweep(
    cfg: &SweepConfig,
    client: &ModelWeights,
    server: &Server,
    dataset: &Dataset,
) -> Result<Vec<SweepRow>, PipelineError> {
    let analyses = analyze_dataset(dataset, client, cfg.attention);
    let truth: Vec<Option<u32>> = dataset.images.iter().map(|im| im.label).collect();
    let points: Vec<(f64, f64)> = cfg.delta_sums.iter().flat_map(|&d| cfg.etas.iter().map(move |&e| (d, e))).collect();

    let mut rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(delta_sum, eta)| {
            let pc = PipelineConfig {
                rule: SelectionRule::SumThreshold(delta_sum),
                gate: GateSpec { measure: cfg.measure, eta },
                attention: cfg.attention,
                fail_fast: true,
            };
            let out = evaluate(&pc, &analyses, &truth, &mut DirectOffloader::new(server))?;
            let s = out.ledger.summary();
            Ok(SweepRow {
                delta_sum,
                eta,
                offload_rate: s.offload_rate,
                mean_patches_offloaded: if s.offloaded == 0 { 0.0 } else { s.patches_sent as f64 / s.offloaded as f64 },
                cost_ratio: s.cost_ratio,
                accuracy: out.accuracy(),
                pareto: false,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    mark_pareto(&mut rows);
    Ok(rows)
}

/// A row is on the frontier unless another row is both cheaper and more
/// accurate.
pub fn mark_pareto(rows: &mut [SweepRow]) {
    let flags: Vec<bool> =
        rows.iter().map(|r| !rows.iter().any(|o| o.cost_ratio < r.cost_ratio && o.accuracy > r.accuracy)).collect();
    for (r, f) in rows.iter_mut().zip(flags) {
        r.pareto = f;
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.delta_sum.to_string(),
            r.eta.to_string(),
            r.offload_rate.to_string(),
            r.mean_patches_offloaded.to_string(),
            r.cost_ratio.to_string(),
            r.accuracy.to_string(),
            u8::from(r.pareto).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cost: f64, acc: f64) -> SweepRow {
        SweepRow {
            delta_sum: 0.0,
            eta: 0.0,
            offload_rate: 0.0,
            mean_patches_offloaded: 0.0,
            cost_ratio: cost,
            accuracy: acc,
            pareto: false,
        }
    }

    #[test]
    fn pareto_flags() {
        let mut rows = vec![row(0.2, 0.8), row(0.3, 0.7), row(0.5, 0.9), row(0.5, 0.85), row(0.1, 0.5)];
        mark_pareto(&mut rows);
        let flags: Vec<bool> = rows.iter().map(|r| r.pareto).collect();
        // (0.3, 0.7) loses to (0.2, 0.8); (0.5, 0.85) has no strictly cheaper+better row.
        assert_eq!(flags, vec![true, false, true, true, true]);
    }

    #[test]
    fn csv_header_and_format() {
        let mut buf = Vec::new();
        write_sweep_csv(&[SweepRow { pareto: true, ..row(1.0, 0.5) }], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "delta_sum,eta,offload_rate,mean_patches_offloaded,cost_ratio,accuracy,pareto\n0,0,0,0,1,0.5,1\n"
        );
    }
}
