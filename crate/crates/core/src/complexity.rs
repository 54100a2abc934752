//! Parameter and FLOP accounting, latency and throughput measurement.
//!
//! Convention: one multiply-accumulate is two FLOPs. Convolutions and the two
//! attention matrix products are counted as MACs; everything applied per
//! element (bias adds, norms, activations, pooling, residual and gating
//! products, softmax) is counted as one FLOP per element in a separate column.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::M2ANet;
use crate::nn::{LayerKind, LayerSpec};
use crate::tensor::{numel, Shape, Tensor};

pub const FLOPS_PER_MAC: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
    /// `FLOPS_PER_MAC · macs`.
    pub flops: u64,
    pub elementwise_flops: u64,
    pub output: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub elementwise_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    pub threads: usize,
    /// Median seconds per batch.
    pub latency: f64,
    /// Images per second over all timed repetitions.
    pub throughput: f64,
    pub samples: Vec<f64>,
    pub low_confidence: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub model: String,
    pub input: Shape,
    pub rows: Vec<LayerCost>,
    pub totals: Totals,
    pub file_size: u64,
    pub bench: Option<BenchResult>,
}

/// Trainable scalars in one layer.
pub fn layer_params(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv {
            c_in,
            c_out,
            kernel,
            groups,
            bias,
            ..
        } => (c_out * (c_in / groups) * kernel * kernel + if bias { c_out } else { 0 }) as u64,
        LayerKind::BatchNorm { channels } => 2 * channels as u64,
        _ => 0,
    }
}

/// Multiply-accumulates of one layer for the given input/output shapes.
pub fn layer_macs(spec: &LayerSpec) -> u64 {
    match spec.kind {
        LayerKind::Conv {
            c_in,
            kernel,
            groups,
            ..
        } => (numel(spec.output) * (c_in / groups) * kernel * kernel) as u64,
        LayerKind::Attention {
            heads,
            head_dim,
            tokens,
        } => (2 * spec.input[0] * heads * tokens * tokens * head_dim) as u64,
        _ => 0,
    }
}

/// Per-element work of one layer.
pub fn layer_elementwise(spec: &LayerSpec) -> u64 {
    let out = numel(spec.output) as u64;
    match spec.kind {
        LayerKind::Conv { bias, .. } => {
            if bias {
                out
            } else {
                0
            }
        }
        LayerKind::BatchNorm { .. } | LayerKind::Activation(_) | LayerKind::Elementwise => out,
        LayerKind::AvgPool => numel(spec.input) as u64,
        LayerKind::Attention { heads, tokens, .. } => {
            (spec.input[0] * heads * tokens * tokens) as u64
        }
    }
}

fn kind_label(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv { .. } => "conv",
        LayerKind::BatchNorm { .. } => "batchnorm",
        LayerKind::Activation(_) => "activation",
        LayerKind::AvgPool => "avgpool",
        LayerKind::Elementwise => "elementwise",
        LayerKind::Attention { .. } => "attention",
    }
}

pub fn cost_rows(specs: &[LayerSpec]) -> Vec<LayerCost> {
    specs
        .iter()
        .map(|s| {
            let macs = layer_macs(s);
            LayerCost {
                name: s.name.clone(),
                kind: kind_label(&s.kind),
                params: layer_params(&s.kind),
                macs,
                flops: FLOPS_PER_MAC * macs,
                elementwise_flops: layer_elementwise(s),
                output: s.output,
            }
        })
        .collect()
}

pub fn totals(rows: &[LayerCost]) -> Totals {
    rows.iter().fold(
        Totals {
            params: 0,
            macs: 0,
            flops: 0,
            elementwise_flops: 0,
        },
        |t, r| Totals {
            params: t.params + r.params,
            macs: t.macs + r.macs,
            flops: t.flops + r.flops,
            elementwise_flops: t.elementwise_flops + r.elementwise_flops,
        },
    )
}

/// Total trainable parameters as derived from the architecture description.
pub fn count_params(model: &M2ANet) -> Result<u64> {
    let s = model.config.input_size;
    let rows = cost_rows(&model.describe([1, 3, s, s])?);
    Ok(totals(&rows).params)
}

/// Per-layer costs for one forward pass over `input`.
pub fn count_flops(model: &M2ANet, input: Shape) -> Result<Vec<LayerCost>> {
    Ok(cost_rows(&model.describe(input)?))
}

/// Static part of the report: per-layer rows, totals and checkpoint size.
pub fn analyze(model: &M2ANet, batch: usize) -> Result<ComplexityReport> {
    let s = model.config.input_size;
    let input = [batch, 3, s, s];
    let rows = count_flops(model, input)?;
    Ok(ComplexityReport {
        model: model.config.variant.clone(),
        input,
        totals: totals(&rows),
        rows,
        file_size: checkpoint::to_bytes(model)?.len() as u64,
        bench: None,
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Times inference-mode forward passes on a random batch inside a dedicated
/// pool of `threads` workers (1 by default in the CLI).
pub fn bench(
    model: &M2ANet,
    batch: usize,
    warmup: usize,
    reps: usize,
    threads: usize,
) -> Result<BenchResult> {
    if reps == 0 || batch == 0 || threads == 0 {
        return Err(Error::Config(
            "bench needs reps, batch and threads ≥ 1".into(),
        ));
    }
    let s = model.config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::uniform([batch, 3, s, s], 0.0, 1.0, &mut rng);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..warmup {
            model.predict(&input)?;
        }
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            model.predict(&input)?;
            samples.push(t.elapsed().as_secs_f64());
        }
        let total: f64 = samples.iter().sum();
        Ok(BenchResult {
            batch,
            warmup,
            reps,
            threads,
            latency: median(&samples),
            throughput: (batch * reps) as f64 / total,
            low_confidence: reps < 3,
            samples,
        })
    })
}

/// Compact human form: 1234567 → "1.23m", 2420000000 → "2.42G".
pub fn human(v: u64) -> String {
    let v = v as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}m", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}k", v / 1e3)
    } else {
        format!("{v}")
    }
}

fn human_bytes(v: u64) -> String {
    format!("{:.2} MB", v as f64 / (1024.0 * 1024.0))
}

impl ComplexityReport {
    pub fn with_bench(mut self, bench: BenchResult) -> Self {
        self.bench = Some(bench);
        self
    }

    /// Summary line in the column order `Model, #Params, #FLOPs, File size,
    /// Latency, Throughput`, followed by per-layer rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (lat, thr) = match &self.bench {
            Some(b) => (
                format!(
                    "{:.4}s{}",
                    b.latency,
                    if b.low_confidence { "*" } else { "" }
                ),
                format!("{:.1}", b.throughput),
            ),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>10} {:>12} {:>12} {:>16}",
            "Model", "#Params", "#FLOPs", "File size", "Latency", "Throughput img/s"
        );
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>10} {:>12} {:>12} {:>16}",
            self.model,
            human(self.totals.params),
            human(self.totals.flops / self.input[0].max(1) as u64),
            human_bytes(self.file_size),
            lat,
            thr
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "FLOPs = {FLOPS_PER_MAC} x MACs per image at {}x{}; elementwise work listed separately.",
            self.input[2], self.input[3]
        );
        if let Some(b) = &self.bench {
            let _ = writeln!(
                out,
                "bench: batch {}, warmup {}, reps {}, threads {}, median latency{}",
                b.batch,
                b.warmup,
                b.reps,
                b.threads,
                if b.low_confidence {
                    " (* low confidence: fewer than 3 reps)"
                } else {
                    ""
                }
            );
        }
        let _ = writeln!(out);
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let _ = writeln!(
            out,
            "{:<width$} {:<11} {:>9} {:>14} {:>14} {:>12}  output",
            "layer", "kind", "params", "MACs", "FLOPs", "elementwise"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$} {:<11} {:>9} {:>14} {:>14} {:>12}  {:?}",
                r.name, r.kind, r.params, r.macs, r.flops, r.elementwise_flops, r.output
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "{:<width$} {:<11} {:>9} {:>14} {:>14} {:>12}",
            "total", "", t.params, t.macs, t.flops, t.elementwise_flops
        );
        out
    }

    /// Per-layer CSV; the final row carries totals and the model-level columns.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer",
            "kind",
            "params",
            "macs",
            "flops",
            "elementwise_flops",
            "output",
            "file_size_bytes",
            "latency_s",
            "throughput_img_s",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.kind.to_string(),
                r.params.to_string(),
                r.macs.to_string(),
                r.flops.to_string(),
                r.elementwise_flops.to_string(),
                format!(
                    "{}x{}x{}x{}",
                    r.output[0], r.output[1], r.output[2], r.output[3]
                ),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        let t = &self.totals;
        let (lat, thr) = self
            .bench
            .as_ref()
            .map_or((String::new(), String::new()), |b| {
                (b.latency.to_string(), b.throughput.to_string())
            });
        w.write_record([
            "total".to_string(),
            self.model.clone(),
            t.params.to_string(),
            t.macs.to_string(),
            t.flops.to_string(),
            t.elementwise_flops.to_string(),
            String::new(),
            self.file_size.to_string(),
            lat,
            thr,
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}
