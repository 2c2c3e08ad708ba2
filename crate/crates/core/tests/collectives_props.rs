//! Property tests for reduction schedules, the cost simulator and
//! distributed decoding.

use proptest::prelude::*;
use tree_attn::attention::{attention_naive, AttentionInput};
use tree_attn::decode::{decode, model_decode, shard_kv, DecodeOptions, DecodeShape, ExecMode};
use tree_attn::numerics::seeded_random_tensor;
use tree_attn::reduction::{ceil_log2, tree_reduce, Phase, ReductionSchedule, Strategy as Allreduce, Tier, TransferOp};
use tree_attn::sim::{comm_volume_formula, peak_memory_formula, simulate_schedule, Algo, Topology};
use tree_attn::{DType, Ratio};

fn strategy() -> impl Strategy<Value = Allreduce> {
    prop_oneof![Just(Allreduce::TreeBinary), Just(Allreduce::Ring), Just(Allreduce::Hierarchical)]
}

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 1usize..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn allreduce_leaves_the_total_everywhere(s in strategy(), (nodes, g) in shape(), len in 1usize..20, seed in any::<u64>()) {
        let p = nodes * g;
        let sched = ReductionSchedule::allreduce(s, nodes, g, len);
        let mut bufs: Vec<Vec<u64>> = (0..p)
            .map(|w| (0..len).map(|j| seed.wrapping_mul(31).wrapping_add((w * 1009 + j) as u64)).collect())
            .collect();
        let want: Vec<u64> = (0..len).map(|j| bufs.iter().fold(0u64, |acc, b| acc.wrapping_add(b[j]))).collect();
        sched.execute(&mut bufs, |a, b| a.wrapping_add(*b)).unwrap();
        for b in &bufs {
            prop_assert_eq!(b, &want);
        }
    }

    #[test]
    fn allreduce_moves_two_p_minus_one_payloads(s in strategy(), (nodes, g) in shape(), len in 1usize..40) {
        let p = nodes * g;
        let sched = ReductionSchedule::allreduce(s, nodes, g, len);
        prop_assert_eq!(sched.total_elems(), 2 * (p - 1) * len);
        let topo = Topology::with_shape(nodes, g).unwrap();
        let cost = simulate_schedule(&sched, &topo).unwrap();
        prop_assert_eq!(cost.elems_total(), (2 * (p - 1) * len) as u64);
        prop_assert_eq!(cost.rounds as usize, sched.round_count());
    }

    #[test]
    fn round_counts_follow_the_strategy((nodes, g) in shape()) {
        let p = nodes * g;
        let tree = ReductionSchedule::allreduce(Allreduce::TreeBinary, nodes, g, 4);
        prop_assert_eq!(tree.reduce_rounds(), ceil_log2(p));
        prop_assert_eq!(tree.round_count(), 2 * ceil_log2(p));
        prop_assert_eq!(ReductionSchedule::allreduce(Allreduce::Ring, nodes, g, 4).round_count(), 2 * (p - 1));
        let hier = ReductionSchedule::allreduce(Allreduce::Hierarchical, nodes, g, 4);
        prop_assert_eq!(hier.count_rounds(Phase::Reduce, Some(Tier::Intra)), g - 1);
        prop_assert_eq!(hier.count_rounds(Phase::Reduce, Some(Tier::Inter)), ceil_log2(nodes));
        prop_assert_eq!(hier.round_count(), 2 * (g - 1) + 2 * ceil_log2(nodes));
    }

    #[test]
    fn tree_reduce_keeps_operand_order(p in 1usize..70) {
        let items: Vec<Vec<usize>> = (0..p).map(|i| vec![i]).collect();
        let out = tree_reduce(&items, |a, b| a.iter().chain(b).copied().collect(), Vec::new());
        prop_assert_eq!(out.value, (0..p).collect::<Vec<_>>());
        prop_assert_eq!(out.rounds, ceil_log2(p));
    }

    #[test]
    fn simulated_time_is_sum_of_slowest_transfers(s in strategy(), (nodes, g) in shape(), len in 1usize..5000) {
        let topo = Topology::with_shape(nodes, g).unwrap();
        let sched = ReductionSchedule::allreduce(s, nodes, g, len);
        let mut want = 0.0;
        for round in &sched.rounds {
            let mut slowest: f64 = 0.0;
            for t in &round.transfers {
                let link = if t.src / g == t.dst / g { topo.intra } else { topo.inter };
                slowest = slowest.max(link.latency_s + (t.segment.len() as f64 * 2.0) / link.bandwidth_bps);
            }
            want += slowest;
        }
        let got = simulate_schedule(&sched, &topo).unwrap().sim_time_s;
        prop_assert!((got - want).abs() <= 1e-15 * want.max(1.0));
    }

    #[test]
    fn tree_schedules_combine_lower_index_on_the_left((nodes, g) in shape()) {
        let sched = ReductionSchedule::allreduce(Allreduce::TreeBinary, nodes, g, 3);
        for t in sched.rounds.iter().flat_map(|r| &r.transfers) {
            if let TransferOp::Combine { received_left } = t.op {
                prop_assert_eq!(received_left, t.src < t.dst);
            }
        }
    }

    #[test]
    fn topology_config_round_trips(nodes in 1usize..64, g in 1usize..16, bw in 1e6f64..1e13, lat in 0.0f64..1e-3, bytes in 1u64..9) {
        let mut t = Topology::with_shape(nodes, g).unwrap();
        t.intra.bandwidth_bps = bw;
        t.inter.latency_s = lat;
        t.element_bytes = bytes;
        prop_assert_eq!(Topology::from_config_str(&t.to_config_string()).unwrap(), t);
    }
}

fn decode_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, u64, Allreduce)> {
    (1usize..4, 1usize..6, 1usize..3, 1usize..5, 1usize..7, 0usize..80, any::<u64>(), strategy())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_is_exact_for_any_topology((nodes, g, b, h, d, extra, seed, s) in decode_case()) {
        let p = nodes * g;
        let n = p + extra;
        let q = seeded_random_tensor(&[b, h, 1, d], seed, 1.0).unwrap();
        let k = seeded_random_tensor(&[b, h, n, d], seed ^ 1, 1.0).unwrap();
        let v = seeded_random_tensor(&[b, h, n, d], seed ^ 2, 1.0).unwrap();
        let want = attention_naive(&AttentionInput::new(q.clone(), k.clone(), v.clone())).unwrap();
        let topo = Topology::with_shape(nodes, g).unwrap();
        let cache = shard_kv(&k, &v, p).unwrap();
        let opts = DecodeOptions { allreduce: s, ..Default::default() };
        for algo in [Algo::Tree, Algo::Ring] {
            let r = decode(algo, &q, &cache, &topo, &opts).unwrap();
            prop_assert!(r.output.max_abs_diff(&want).unwrap() <= 1e-10 * want.max_abs().max(1.0));
            let threaded = decode(algo, &q, &cache, &topo, &DecodeOptions { exec: ExecMode::Threaded, ..opts }).unwrap();
            prop_assert_eq!(&threaded.output, &r.output);
            let modelled = model_decode(algo, &DecodeShape { batch: b, heads: h, seq_len: n, head_dim: d }, &topo, &opts).unwrap();
            prop_assert_eq!(&modelled, &r.report);
        }
    }

    #[test]
    fn counters_match_closed_forms((nodes, g, b, h, d, extra, _seed, s) in decode_case(), n_scale in 1usize..50) {
        let p = nodes * g;
        let n = p * n_scale + extra;
        let shape = DecodeShape { batch: b, heads: h, seq_len: n, head_dim: d };
        let topo = Topology::with_shape(nodes, g).unwrap();
        let opts = DecodeOptions { allreduce: s, ..Default::default() };
        let (bu, hid, hu, pu) = (b as u64, (h * d) as u64, h as u64, p as u64);
        let t_max = n.div_ceil(p) as u64;

        let tree = model_decode(Algo::Tree, &shape, &topo, &opts).unwrap();
        prop_assert_eq!(Ratio::new(tree.cost.elems_total(), pu), comm_volume_formula(Algo::Tree, bu, Ratio::new(n as u64, pu), hid, hu, pu));
        prop_assert_eq!(tree.comm_volume, comm_volume_formula(Algo::Tree, bu, Ratio::new(n as u64, pu), hid, hu, pu));
        prop_assert_eq!(tree.cost.peak_elems_per_worker, peak_memory_formula(Algo::Tree, bu, t_max, hid, hu));

        let ring = model_decode(Algo::Ring, &shape, &topo, &opts).unwrap();
        prop_assert_eq!(Ratio::from(ring.cost.elems_total()), comm_volume_formula(Algo::Ring, bu, Ratio::new(n as u64, pu), hid, hu, pu) * (pu - 1));
        if p >= 2 {
            prop_assert_eq!(ring.cost.peak_elems_per_worker, peak_memory_formula(Algo::Ring, bu, t_max, hid, hu));
        }
    }
}

#[test]
fn tree_volume_does_not_depend_on_sequence_length() {
    for (nodes, g) in [(1, 8), (2, 8), (3, 5)] {
        let topo = Topology::with_shape(nodes, g).unwrap();
        let volume = |n| {
            let shape = DecodeShape { batch: 1, heads: 16, seq_len: n, head_dim: 128 };
            model_decode(Algo::Tree, &shape, &topo, &DecodeOptions::default()).unwrap().cost.elems_total()
        };
        assert_eq!(volume(64), volume(1024));
        assert_eq!(volume(64), volume(1 << 20));
    }
}

#[test]
fn bf16_decode_stays_within_tolerance() {
    let (b, h, n, d) = (1, 4, 256, 32);
    let scale = (d as f64).powf(-0.25);
    let q = seeded_random_tensor(&[b, h, 1, d], 5, scale).unwrap().with_dtype(DType::Bf16);
    let k = seeded_random_tensor(&[b, h, n, d], 6, scale).unwrap().with_dtype(DType::Bf16);
    let v = seeded_random_tensor(&[b, h, n, d], 7, 1.0).unwrap().with_dtype(DType::Bf16);
    let want = attention_naive(&AttentionInput::new(q.with_dtype(DType::F64), k.with_dtype(DType::F64), v.with_dtype(DType::F64))).unwrap();
    let topo = Topology::with_shape(2, 4).unwrap();
    let cache = shard_kv(&k, &v, 8).unwrap();
    for algo in [Algo::Tree, Algo::Ring] {
        let r = decode(algo, &q, &cache, &topo, &DecodeOptions::default()).unwrap();
        assert_eq!(r.output.dtype(), DType::Bf16);
        assert!(r.output.max_abs_diff(&want).unwrap() <= 2e-2 * want.max_abs(), "{algo}");
    }
}
