//! Allreduce over simulated servers.
//!
//! A collective runs in three phases: the `g` worker buffers of each server
//! are summed locally, the `p` server buffers are allreduced with one of the
//! interchangeable algorithms, and the result is broadcast back to the
//! workers. Only phase two crosses the (simulated) network and is counted.

pub mod bench;
pub mod exec;
pub mod schedule;
pub mod transport;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use exec::{execute_rank, run_threaded, run_threaded_tasks, simulate, CollectiveRun};
pub use schedule::{build as build_schedule, Schedule};
pub use transport::{
    channel_mesh, tcp_mesh, ChannelEndpoint, Endpoint, LinkCounters, Mailbox, Message, TcpEndpoint,
    ELEM_BYTES,
};

/// Buffer size at which local reduction switches from the host-copy path to
/// the kernel path.
pub const LOCAL_KERNEL_THRESHOLD_BYTES: u64 = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Ring,
    HalvingDoubling,
    BinaryBlocks,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [
        Algorithm::Ring,
        Algorithm::HalvingDoubling,
        Algorithm::BinaryBlocks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ring => "ring",
            Algorithm::HalvingDoubling => "hd",
            Algorithm::BinaryBlocks => "blocks",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" | "bucket" => Ok(Algorithm::Ring),
            "hd" | "halving-doubling" => Ok(Algorithm::HalvingDoubling),
            "blocks" | "binary-blocks" => Ok(Algorithm::BinaryBlocks),
            other => Err(Error::UnknownAlgorithm(other.to_string())),
        }
    }
}

/// Which executor moves the messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    /// Single thread, deterministic round-robin over ranks.
    #[default]
    Simulated,
    /// One thread per rank, in-process channels.
    Channel,
    /// One thread per rank, loopback TCP sockets.
    Tcp,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Simulated => "simulated",
            TransportKind::Channel => "channel",
            TransportKind::Tcp => "tcp",
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" => Ok(TransportKind::Simulated),
            "channel" => Ok(TransportKind::Channel),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(Error::config(
                "engine.transport",
                format!("unknown transport `{other}` (simulated, channel, tcp)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub servers: usize,
    pub gpus_per_server: usize,
}

impl Topology {
    pub fn new(servers: usize, gpus_per_server: usize) -> Result<Self> {
        if servers == 0 {
            return Err(Error::config("engine.servers", "must be at least 1"));
        }
        if gpus_per_server == 0 {
            return Err(Error::config(
                "engine.gpus_per_server",
                "must be at least 1",
            ));
        }
        Ok(Self {
            servers,
            gpus_per_server,
        })
    }

    pub fn workers(&self) -> usize {
        self.servers * self.gpus_per_server
    }
}

/// How the intra-server phases are carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalStrategy {
    Kernel,
    Copy,
}

impl LocalStrategy {
    pub fn for_bytes(bytes: u64, threshold: u64) -> Self {
        if bytes >= threshold {
            LocalStrategy::Kernel
        } else {
            LocalStrategy::Copy
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerTraffic {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub padding_sent: u64,
    pub padding_received: u64,
    pub steps: usize,
}

impl ServerTraffic {
    pub fn payload_sent(&self) -> u64 {
        self.bytes_sent - self.padding_sent
    }

    pub fn payload_received(&self) -> u64 {
        self.bytes_received - self.padding_received
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficReport {
    pub algo: Algorithm,
    pub p: usize,
    /// Unpadded buffer size.
    pub buffer_bytes: u64,
    pub rounds: usize,
    pub servers: Vec<ServerTraffic>,
    pub local_strategy: Option<LocalStrategy>,
}

impl TrafficReport {
    pub fn max_steps(&self) -> usize {
        self.servers.iter().map(|s| s.steps).max().unwrap_or(0)
    }

    pub fn max_payload_sent(&self) -> u64 {
        self.servers
            .iter()
            .map(ServerTraffic::payload_sent)
            .max()
            .unwrap_or(0)
    }

    pub fn max_padding_sent(&self) -> u64 {
        self.servers
            .iter()
            .map(|s| s.padding_sent)
            .max()
            .unwrap_or(0)
    }

    pub fn total_sent(&self) -> u64 {
        self.servers.iter().map(|s| s.bytes_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.servers.iter().map(|s| s.bytes_received).sum()
    }
}

/// Elementwise sum of the buffers, folded left to right.
pub fn local_reduce(buffers: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = buffers.split_first().ok_or(Error::EmptyBatch)?;
    let mut acc = first.clone();
    for b in rest {
        acc.add_assign(b)?;
    }
    Ok(acc)
}

pub fn local_broadcast(result: &Tensor, g: usize) -> Vec<Tensor> {
    vec![result.clone(); g]
}

/// Per-server bytes sent (and received) by a bandwidth-optimal allreduce.
pub fn predict_bytes(p: usize, b: f64) -> f64 {
    2.0 * (p as f64 - 1.0) * b / p as f64
}

/// Communication rounds of the schedule `algo` runs on `p` servers.
pub fn predict_steps(algo: Algorithm, p: usize) -> Result<usize> {
    if p == 0 {
        return Err(Error::config("engine.servers", "must be at least 1"));
    }
    let lg = |q: usize| q.trailing_zeros() as usize;
    match algo {
        Algorithm::Ring => Ok(2 * (p - 1)),
        Algorithm::HalvingDoubling if !p.is_power_of_two() => Err(Error::NotPowerOfTwo(p)),
        Algorithm::HalvingDoubling => Ok(2 * lg(p)),
        Algorithm::BinaryBlocks => {
            let big = schedule::blocks(p)[0];
            Ok(2 * lg(big) + if p.is_power_of_two() { 0 } else { 2 })
        }
    }
}

/// Peak network rate, in bits per second, needed to allreduce every
/// parameter once per backward pass.
pub fn bandwidth_requirement(param_count: f64, bytes_per_param: f64, backprop_seconds: f64) -> f64 {
    2.0 * param_count * bytes_per_param * 8.0 / backprop_seconds
}

/// Latency/bandwidth cost model: every round costs `latency` seconds, and the
/// per-server payload moves at `bandwidth` bytes per second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub latency: f64,
    pub bandwidth: f64,
}

impl Default for CostModel {
    /// 5 us per round over a 10 Gbit/s link.
    fn default() -> Self {
        Self {
            latency: 5e-6,
            bandwidth: 1.25e9,
        }
    }
}

impl CostModel {
    pub fn seconds(&self, algo: Algorithm, p: usize, b: f64) -> Result<f64> {
        Ok(predict_steps(algo, p)? as f64 * self.latency + predict_bytes(p, b) / self.bandwidth)
    }
}

fn check_servers(topology: &Topology, buffers: &[Tensor]) -> Result<()> {
    if buffers.len() != topology.servers {
        return Err(Error::config(
            "engine.servers",
            format!("{} buffers for {} servers", buffers.len(), topology.servers),
        ));
    }
    if let Some(b) = buffers.iter().find(|b| b.shape() != buffers[0].shape()) {
        return Err(Error::ShapeMismatch {
            left: buffers[0].shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Inter-server allreduce: `buffers[i]` is server `i`'s input; every output
/// holds the elementwise sum.
pub fn allreduce(
    algo: Algorithm,
    topology: &Topology,
    buffers: &[Tensor],
    transport: TransportKind,
) -> Result<(Vec<Tensor>, TrafficReport)> {
    check_servers(topology, buffers)?;
    let shape = buffers[0].shape().to_vec();
    let sched = schedule::build(algo, topology.servers, buffers[0].len())?;
    let inputs: Vec<Vec<f64>> = buffers.iter().map(|b| b.data().to_vec()).collect();
    let (outputs, report) = match transport {
        TransportKind::Simulated => simulate(&sched, &inputs)?,
        TransportKind::Channel => run_threaded(&sched, &inputs, &mut channel_mesh(sched.p))?,
        TransportKind::Tcp => run_threaded(&sched, &inputs, &mut tcp_mesh(sched.p)?)?,
    };
    let outputs = outputs
        .into_iter()
        .map(|o| Tensor::new(o, shape.clone()))
        .collect::<Result<_>>()?;
    Ok((outputs, report))
}

pub fn allreduce_ring(
    topology: &Topology,
    buffers: &[Tensor],
) -> Result<(Vec<Tensor>, TrafficReport)> {
    allreduce(Algorithm::Ring, topology, buffers, TransportKind::Simulated)
}

pub fn allreduce_halving_doubling(
    topology: &Topology,
    buffers: &[Tensor],
) -> Result<(Vec<Tensor>, TrafficReport)> {
    allreduce(
        Algorithm::HalvingDoubling,
        topology,
        buffers,
        TransportKind::Simulated,
    )
}

pub fn allreduce_binary_blocks(
    topology: &Topology,
    buffers: &[Tensor],
) -> Result<(Vec<Tensor>, TrafficReport)> {
    allreduce(
        Algorithm::BinaryBlocks,
        topology,
        buffers,
        TransportKind::Simulated,
    )
}

/// Full three-phase allreduce over `p·g` worker buffers, ordered server by
/// server.
pub fn hierarchical_allreduce(
    algo: Algorithm,
    topology: &Topology,
    workers: &[Tensor],
    transport: TransportKind,
    kernel_threshold: u64,
) -> Result<(Vec<Tensor>, TrafficReport)> {
    let g = topology.gpus_per_server;
    if workers.len() != topology.workers() {
        return Err(Error::config(
            "engine.k",
            format!(
                "{} worker buffers for {} workers",
                workers.len(),
                topology.workers()
            ),
        ));
    }
    let server_sums: Vec<Tensor> = workers.chunks(g).map(local_reduce).collect::<Result<_>>()?;
    let (reduced, mut report) = allreduce(algo, topology, &server_sums, transport)?;
    report.local_strategy = Some(LocalStrategy::for_bytes(
        report.buffer_bytes,
        kernel_threshold,
    ));
    let out = reduced.iter().flat_map(|r| local_broadcast(r, g)).collect();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn topo(p: usize) -> Topology {
        Topology::new(p, 1).unwrap()
    }

    fn tensors(rows: &[&[f64]]) -> Vec<Tensor> {
        rows.iter().map(|r| Tensor::from_vec(r.to_vec())).collect()
    }

    fn random_buffers(seed: u64, p: usize, len: usize, integer: bool) -> Vec<Tensor> {
        let mut rng = Rng::new(seed);
        (0..p)
            .map(|_| {
                Tensor::from_vec(
                    (0..len)
                        .map(|_| {
                            if integer {
                                rng.below(2001) as f64 - 1000.0
                            } else {
                                rng.normal()
                            }
                        })
                        .collect(),
                )
            })
            .collect()
    }

    /// Direct elementwise sum, accumulated in compensated form.
    fn direct_sum(buffers: &[Tensor]) -> Vec<f64> {
        let len = buffers[0].len();
        (0..len)
            .map(|i| {
                let mut s = 0.0f64;
                let mut c = 0.0f64;
                for b in buffers {
                    let y = b.data()[i] - c;
                    let t = s + y;
                    c = (t - s) - y;
                    s = t;
                }
                s
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn local_phases() {
        let s = local_reduce(&tensors(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
        let x = Tensor::from_vec(vec![0.5, -1.25]);
        assert_eq!(local_reduce(std::slice::from_ref(&x)).unwrap(), x);
        assert!(local_reduce(&[]).is_err());
        assert!(local_reduce(&[Tensor::zeros(&[2]), Tensor::zeros(&[3])]).is_err());
        let copies = local_broadcast(&x, 3);
        assert_eq!(copies.len(), 3);
        assert!(copies.iter().all(|c| c.checksum() == x.checksum()));
        assert_eq!(local_broadcast(&x, 1), vec![x.clone()]);
        let g = 4;
        let reduced = local_reduce(&local_broadcast(&x, g)).unwrap();
        let bc = local_broadcast(&reduced, g);
        assert!(bc.iter().all(|t| t.data() == [2.0, -5.0]));
    }

    #[test]
    fn local_reduce_matches_fold() {
        let bufs = random_buffers(5, 8, 64, false);
        let s = local_reduce(&bufs).unwrap();
        assert!(close(s.data(), &direct_sum(&bufs), 1e-12));
    }

    #[test]
    fn ring_examples() {
        let bufs = tensors(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]);
        let (out, rep) = allreduce_ring(&topo(4), &bufs).unwrap();
        assert!(out.iter().all(|o| o.data() == [16.0, 20.0]));
        assert_eq!(rep.max_steps(), 6);
        let (_, rep) = allreduce_ring(&topo(4), &random_buffers(1, 4, 128, false)).unwrap();
        assert!(rep
            .servers
            .iter()
            .all(|s| s.bytes_sent == 1536 && s.padding_sent == 0));
    }

    #[test]
    fn hd_examples() {
        let bufs = tensors(&[&[1.0, 2.0], &[10.0, 20.0]]);
        let (out, rep) = allreduce_halving_doubling(&topo(2), &bufs).unwrap();
        assert!(out.iter().all(|o| o.data() == [11.0, 22.0]));
        assert_eq!(rep.max_steps(), 2);
        let (_, rep) =
            allreduce_halving_doubling(&topo(32), &random_buffers(2, 32, 64, true)).unwrap();
        assert_eq!(rep.max_steps(), 10);
        let (_, rep) =
            allreduce_halving_doubling(&topo(4), &random_buffers(1, 4, 128, false)).unwrap();
        assert!(rep.servers.iter().all(|s| s.bytes_sent == 1536));
        let err =
            allreduce_halving_doubling(&topo(3), &random_buffers(1, 3, 8, false)).unwrap_err();
        assert_eq!(err, Error::NotPowerOfTwo(3));
        assert!(err.to_string().contains("blocks"));
    }

    #[test]
    fn hd_reduce_scatter_leaves_each_server_a_reduced_chunk() {
        let p = 8;
        let bufs = random_buffers(4, p, 64, true);
        let sched = build_schedule(Algorithm::HalvingDoubling, p, 64).unwrap();
        let mut half = sched.clone();
        for prog in &mut half.programs {
            prog.truncate(3);
        }
        let inputs: Vec<Vec<f64>> = bufs.iter().map(|b| b.data().to_vec()).collect();
        let (mid, _) = simulate(&half, &inputs).unwrap();
        let sum = direct_sum(&bufs);
        let mut covered = [false; 64];
        for (r, buf) in mid.iter().enumerate() {
            let own = schedule::owned_after_reduce_scatter(r, p, 64);
            assert_eq!(own.len(), 8);
            assert_eq!(&buf[own.clone()], &sum[own.clone()]);
            covered[own].iter_mut().for_each(|c| *c = true);
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn blocks_examples() {
        let bufs = tensors(&[&[1.0], &[2.0], &[3.0]]);
        let (out, _) = allreduce_binary_blocks(&topo(3), &bufs).unwrap();
        assert!(out.iter().all(|o| o.data() == [6.0]));
        let bufs = random_buffers(8, 4, 40, false);
        let (a, ra) = allreduce_binary_blocks(&topo(4), &bufs).unwrap();
        let (b, rb) = allreduce_halving_doubling(&topo(4), &bufs).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.servers, rb.servers);
    }

    #[test]
    fn short_buffers_are_padded() {
        let bufs = random_buffers(3, 5, 2, true);
        for algo in [Algorithm::Ring, Algorithm::BinaryBlocks] {
            let (out, rep) = allreduce(algo, &topo(5), &bufs, TransportKind::Simulated).unwrap();
            let sum = direct_sum(&bufs);
            assert!(out.iter().all(|o| o.data() == sum.as_slice()));
            assert!(rep.max_padding_sent() > 0);
        }
    }

    #[test]
    fn single_server_is_silent() {
        let bufs = random_buffers(3, 1, 10, false);
        for algo in Algorithm::ALL {
            let (out, rep) = allreduce(algo, &topo(1), &bufs, TransportKind::Simulated).unwrap();
            assert_eq!(out, bufs);
            assert_eq!(rep.total_sent(), 0);
            assert_eq!(rep.max_steps(), 0);
        }
    }

    #[test]
    fn transports_agree() {
        for p in [3usize, 4, 6] {
            let bufs = random_buffers(p as u64, p, 50, false);
            for algo in [Algorithm::Ring, Algorithm::BinaryBlocks] {
                let sim = allreduce(algo, &topo(p), &bufs, TransportKind::Simulated).unwrap();
                let ch = allreduce(algo, &topo(p), &bufs, TransportKind::Channel).unwrap();
                let tcp = allreduce(algo, &topo(p), &bufs, TransportKind::Tcp).unwrap();
                assert_eq!(sim, ch);
                assert_eq!(sim, tcp);
            }
        }
    }

    #[test]
    fn prediction_formulas() {
        assert_eq!(predict_bytes(32, 100e6), 193.75e6);
        assert_eq!(predict_bytes(1, 12345.0), 0.0);
        assert_eq!(predict_bytes(4, 1024.0), 1536.0);
        assert_eq!(predict_steps(Algorithm::Ring, 32).unwrap(), 62);
        assert_eq!(predict_steps(Algorithm::HalvingDoubling, 32).unwrap(), 10);
        assert_eq!(predict_steps(Algorithm::Ring, 1).unwrap(), 0);
        assert_eq!(predict_steps(Algorithm::BinaryBlocks, 6).unwrap(), 6);
        assert_eq!(predict_steps(Algorithm::BinaryBlocks, 8).unwrap(), 6);
        assert!(predict_steps(Algorithm::HalvingDoubling, 6).is_err());
        assert_eq!(bandwidth_requirement(25e6, 4.0, 0.125), 12.8e9);
        assert_eq!(
            bandwidth_requirement(25e6, 4.0, 0.25),
            bandwidth_requirement(25e6, 4.0, 0.125) / 2.0
        );
    }

    #[test]
    fn cost_model_favors_hd_when_latency_bound() {
        let m = CostModel {
            latency: 1e-4,
            bandwidth: 1e9,
        };
        let small = 4.0 * 1e3;
        assert!(
            m.seconds(Algorithm::HalvingDoubling, 32, small).unwrap()
                < m.seconds(Algorithm::Ring, 32, small).unwrap()
        );
    }

    #[test]
    fn hierarchical_phases() {
        let t = Topology::new(3, 2).unwrap();
        let workers: Vec<Tensor> = (0..6)
            .map(|i| Tensor::from_vec(vec![i as f64; 4]))
            .collect();
        let (out, rep) = hierarchical_allreduce(
            Algorithm::BinaryBlocks,
            &t,
            &workers,
            TransportKind::Simulated,
            1 << 18,
        )
        .unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|o| o.data() == [15.0; 4]));
        assert_eq!(rep.local_strategy, Some(LocalStrategy::Copy));
        assert_eq!(
            LocalStrategy::for_bytes(256 * 1024, LOCAL_KERNEL_THRESHOLD_BYTES),
            LocalStrategy::Kernel
        );
    }

    #[test]
    fn algorithm_names_parse() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!(matches!(
            "tree".parse::<Algorithm>(),
            Err(Error::UnknownAlgorithm(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn algorithms_agree_with_direct_sum(p in 1usize..=9, extra in 0usize..4096, seed in any::<u64>()) {
            let len = p + extra % (4097 - p);
            let real = random_buffers(seed, p, len, false);
            let sum = direct_sum(&real);
            let ints = random_buffers(seed, p, len, true);
            let int_sum = direct_sum(&ints);
            let mut int_results = Vec::new();
            for algo in Algorithm::ALL {
                if algo == Algorithm::HalvingDoubling && !p.is_power_of_two() {
                    continue;
                }
                let (out, _) = allreduce(algo, &topo(p), &real, TransportKind::Simulated).unwrap();
                for o in &out {
                    prop_assert!(close(o.data(), &sum, 1e-12));
                }
                let (out, _) = allreduce(algo, &topo(p), &ints, TransportKind::Simulated).unwrap();
                prop_assert!(out.iter().all(|o| o.data() == int_sum.as_slice()));
                int_results.push(out);
            }
            for w in int_results.windows(2) {
                prop_assert_eq!(&w[0], &w[1]);
            }
        }

        #[test]
        fn traffic_matches_prediction(lg in 0u32..4, chunks in 1usize..64, p_ring in 1usize..=9) {
            let p = 1usize << lg;
            let len = p * chunks;
            let b = (len as u64 * ELEM_BYTES) as f64;
            let (_, rep) = allreduce(Algorithm::HalvingDoubling, &topo(p), &random_buffers(1, p, len, false), TransportKind::Simulated).unwrap();
            for s in &rep.servers {
                prop_assert_eq!(s.payload_sent() as f64, predict_bytes(p, b));
                prop_assert_eq!(s.payload_received() as f64, predict_bytes(p, b));
                prop_assert_eq!(s.steps, predict_steps(Algorithm::HalvingDoubling, p).unwrap());
            }
            let len = p_ring * chunks;
            let b = (len as u64 * ELEM_BYTES) as f64;
            let (_, rep) = allreduce(Algorithm::Ring, &topo(p_ring), &random_buffers(2, p_ring, len, false), TransportKind::Simulated).unwrap();
            for s in &rep.servers {
                prop_assert_eq!(s.payload_sent() as f64, predict_bytes(p_ring, b));
                prop_assert_eq!(s.padding_sent, 0);
                prop_assert_eq!(s.steps, predict_steps(Algorithm::Ring, p_ring).unwrap());
            }
        }

        #[test]
        fn padded_traffic_is_declared(p in 2usize..=9, len in 1usize..200) {
            let (_, rep) = allreduce(Algorithm::Ring, &topo(p), &random_buffers(3, p, len, false), TransportKind::Simulated).unwrap();
            let padded = len.div_ceil(p) * p;
            let gross = predict_bytes(p, (padded as u64 * ELEM_BYTES) as f64);
            for s in &rep.servers {
                prop_assert_eq!(s.bytes_sent as f64, gross);
            }
            let total_padding: u64 = rep.servers.iter().map(|s| s.padding_sent).sum();
            let expected_padding = 2 * (p as u64 - 1) * ((padded - len) as u64) * ELEM_BYTES;
            prop_assert_eq!(total_padding, expected_padding);
        }

        #[test]
        fn sent_equals_received(p in 1usize..=9, len in 1usize..300, algo_ix in 0usize..3) {
            let algo = Algorithm::ALL[algo_ix];
            prop_assume!(algo != Algorithm::HalvingDoubling || p.is_power_of_two());
            let (_, rep) = allreduce(algo, &topo(p), &random_buffers(4, p, len, false), TransportKind::Simulated).unwrap();
            prop_assert_eq!(rep.total_sent(), rep.total_received());
            let pad_s: u64 = rep.servers.iter().map(|s| s.padding_sent).sum();
            let pad_r: u64 = rep.servers.iter().map(|s| s.padding_received).sum();
            prop_assert_eq!(pad_s, pad_r);
        }
    }
}
