//! Timed allreduce runs on random integer-valued buffers, checked against a
//! direct sum and reported as CSV rows.

use std::io::Write;
use std::time::Instant;

use super::{
    allreduce, predict_bytes, predict_steps, Algorithm, CostModel, Topology, TransportKind,
    ELEM_BYTES,
};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const BENCH_HEADER: &str = "algo,p,buffer_bytes,steps,payload_bytes,padding_bytes,wall_seconds";
pub const ANALYTIC_HEADER: &str = "predicted_steps,predicted_payload_bytes,model_seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub algo: Algorithm,
    pub p: usize,
    pub buffer_bytes: u64,
    pub steps: usize,
    pub payload_bytes: u64,
    pub padding_bytes: u64,
    pub wall_seconds: f64,
    pub predicted_steps: usize,
    pub predicted_payload_bytes: f64,
    pub model_seconds: f64,
}

/// `p` buffers of `len` small random integers, so every summation order is exact.
pub fn integer_buffers(seed: u64, p: usize, len: usize) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..p)
        .map(|_| Tensor::from_vec((0..len).map(|_| rng.below(2001) as f64 - 1000.0).collect()))
        .collect()
}

/// Elementwise sum, accumulated in input order.
pub fn direct_sum(buffers: &[Tensor]) -> Vec<f64> {
    let mut out = vec![0.0; buffers.first().map_or(0, Tensor::len)];
    for b in buffers {
        for (o, v) in out.iter_mut().zip(b.data()) {
            *o += v;
        }
    }
    out
}

/// Run one allreduce of `buffer_bytes` per server and verify every output.
pub fn bench_allreduce(
    algo: Algorithm,
    p: usize,
    buffer_bytes: u64,
    transport: TransportKind,
    cost: CostModel,
    seed: u64,
) -> Result<BenchRow> {
    if !buffer_bytes.is_multiple_of(ELEM_BYTES) {
        return Err(Error::config(
            "sizes",
            format!("{buffer_bytes} is not a multiple of {ELEM_BYTES} bytes"),
        ));
    }
    let predicted_steps = predict_steps(algo, p)?;
    let len = (buffer_bytes / ELEM_BYTES) as usize;
    let topology = Topology::new(p, 1)?;
    let buffers = integer_buffers(seed, p, len);
    let expect = direct_sum(&buffers);
    let start = Instant::now();
    let (outputs, report) = allreduce(algo, &topology, &buffers, transport)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    if outputs.iter().any(|o| o.data() != expect.as_slice()) {
        return Err(Error::config(
            "algo",
            format!("{algo} on p={p} disagrees with the direct sum"),
        ));
    }
    Ok(BenchRow {
        algo,
        p,
        buffer_bytes,
        steps: report.max_steps(),
        payload_bytes: report.max_payload_sent(),
        padding_bytes: report.max_padding_sent(),
        wall_seconds,
        predicted_steps,
        predicted_payload_bytes: predict_bytes(p, buffer_bytes as f64),
        model_seconds: cost.seconds(algo, p, buffer_bytes as f64)?,
    })
}

pub fn write_bench_csv<W: Write>(
    rows: &[BenchRow],
    comments: &[String],
    analytic: bool,
    mut out: W,
) -> std::io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    if analytic {
        writeln!(out, "{BENCH_HEADER},{ANALYTIC_HEADER}")?;
    } else {
        writeln!(out, "{BENCH_HEADER}")?;
    }
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{},{:.16e}",
            r.algo, r.p, r.buffer_bytes, r.steps, r.payload_bytes, r.padding_bytes, r.wall_seconds
        )?;
        if analytic {
            write!(
                out,
                ",{},{:.16e},{:.16e}",
                r.predicted_steps, r.predicted_payload_bytes, r.model_seconds
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}
