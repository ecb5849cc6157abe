use evsnn_core::descriptor::{ssd_extract, FeatureMaps};
use evsnn_core::energy::measure_ops;
use evsnn_core::eval::{f1, f1_max, match_descriptors, pr_curve, recall_at_n, RECALL_NS};
use evsnn_core::event::{
    geo_distance, slice_volumes, synth_dataset, Event, EventStream, EventVolume, GeoPose, Resolution, SynthConfig,
};
use evsnn_core::repr::{build_mcs_tensor, build_ts_map, SmlpEncoder};
use evsnn_core::rng::Stream;
use evsnn_core::snn::lif::{forward_sequence, LifParams};
use evsnn_core::snn::{ConvGeom, Graph, Mode, ParamStore};
use evsnn_core::training::{mine_triplets, triplet_loss, DescriptorCache, TrainConfig};
use evsnn_core::{SpikeTensor, Tensor};
use proptest::prelude::*;

const RES: Resolution = Resolution { width: 8, height: 6 };

fn event_strategy(max_t: u64) -> impl Strategy<Value = Event> {
    (0..max_t, 0..RES.width, 0..RES.height, prop::bool::ANY).prop_map(|(t, x, y, p)| Event::new(t, x, y, if p { 1 } else { -1 }))
}

fn stream_strategy() -> impl Strategy<Value = EventStream> {
    prop::collection::vec(event_strategy(2_000_000), 0..60).prop_map(|es| EventStream::new(es, RES).unwrap().0)
}

fn spikes(dims: [usize; 4], bits: &[bool]) -> SpikeTensor {
    let mut t = SpikeTensor::zeros(dims).unwrap();
    for (i, &b) in bits.iter().enumerate().take(t.len()) {
        t.set_flat(i, b);
    }
    t
}

fn planar(a: f64, b: f64) -> GeoPose {
    GeoPose::planar(0, a, b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slicing_partitions_the_stream(stream in stream_strategy(), interval_ms in 1u64..700) {
        let vols = slice_volumes(&stream, interval_ms as f64 / 1000.0, &[]).unwrap();
        let mut seen = Vec::new();
        for w in vols.windows(2) {
            prop_assert!(w[0].t_end() <= w[1].t_start());
        }
        for v in &vols {
            prop_assert!(v.t_end() > v.t_start());
            for e in v.events() {
                prop_assert!(v.t_start() <= e.t && e.t < v.t_end());
            }
            seen.extend_from_slice(v.events());
        }
        prop_assert_eq!(seen.as_slice(), stream.events());
    }

    #[test]
    fn geographic_distance_is_a_metric(
        p in (-89.0f64..89.0, -179.0f64..179.0),
        q in (-89.0f64..89.0, -179.0f64..179.0),
        r in (-89.0f64..89.0, -179.0f64..179.0),
    ) {
        let g = |(a, b): (f64, f64)| GeoPose::geographic(0, a, b).unwrap();
        let (p, q, r) = (g(p), g(q), g(r));
        let d = |a: &GeoPose, b: &GeoPose| geo_distance(a, b).unwrap();
        prop_assert!(d(&p, &q) >= 0.0);
        prop_assert!((d(&p, &q) - d(&q, &p)).abs() <= 1e-6 * d(&p, &q).max(1.0));
        prop_assert!(d(&p, &r) <= (d(&p, &q) + d(&q, &r)) * (1.0 + 1e-6) + 1e-6);
    }

    #[test]
    fn planar_distance_is_a_metric(p in (-1e4f64..1e4, -1e4f64..1e4), q in (-1e4f64..1e4, -1e4f64..1e4), r in (-1e4f64..1e4, -1e4f64..1e4)) {
        let (p, q, r) = (planar(p.0, p.1), planar(q.0, q.1), planar(r.0, r.1));
        let d = |a: &GeoPose, b: &GeoPose| geo_distance(a, b).unwrap();
        prop_assert_eq!(d(&p, &q), d(&q, &p));
        prop_assert!(d(&p, &r) <= (d(&p, &q) + d(&q, &r)) * (1.0 + 1e-6));
    }

    #[test]
    fn mcs_binarization_is_monotone(
        base in prop::collection::vec(event_strategy(1_000_000), 2..30),
        extra in prop::collection::vec(event_strategy(1_000_000), 1..20),
        seed in any::<u64>(),
    ) {
        let enc = SmlpEncoder::new("smlp", 8, 4, LifParams::default());
        let mut store = ParamStore::new();
        enc.register(&mut store, &mut Stream::new(seed)).unwrap();
        // Anchor both ends so that added events never change the normalization.
        let mut events = base;
        events.push(Event::new(0, 0, 0, 1));
        events.push(Event::new(999_999, 1, 1, -1));
        let vol = |mut es: Vec<Event>| {
            es.sort_by_key(|e| e.t);
            EventVolume::new(es, 0, 1_000_000, RES, None).unwrap()
        };
        let before = build_mcs_tensor(&vol(events.clone()), &enc, &store).unwrap().tensor;
        events.extend(extra);
        let after = build_mcs_tensor(&vol(events), &enc, &store).unwrap().tensor;
        for i in 0..before.len() {
            prop_assert!(!before.get_flat(i) || after.get_flat(i));
        }
    }

    #[test]
    fn ts_map_depends_only_on_latest_event_per_pixel(events in prop::collection::vec(event_strategy(1_000_000), 1..40), shuffle_seed in any::<u64>()) {
        let mut es = events;
        es.sort_by_key(|e| e.t);
        es.dedup_by_key(|e| e.t);
        let vol = EventVolume::new(es.clone(), 0, 1_000_000, RES, None).unwrap();
        let full = build_ts_map(&vol, 0.05).unwrap();
        // Keep only the latest event per (polarity, pixel), in shuffled order.
        let mut latest: Vec<Event> = Vec::new();
        for e in es.iter().rev() {
            if !latest.iter().any(|l| l.x == e.x && l.y == e.y && l.p == e.p) {
                latest.push(*e);
            }
        }
        Stream::new(shuffle_seed).shuffle(&mut latest);
        latest.sort_by_key(|e| e.t);
        let reduced = build_ts_map(&EventVolume::new(latest, 0, 1_000_000, RES, None).unwrap(), 0.05).unwrap();
        prop_assert_eq!(full.values(), reduced.values());
        prop_assert!(full.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn lif_spikes_are_binary_and_reset_is_hard(input in prop::collection::vec(-2.0f64..3.0, 4 * 5)) {
        let p = LifParams::default();
        let (mut h, mut s) = (vec![0.0; 20], vec![0.0; 20]);
        forward_sequence(&p, &input, 4, false, &mut h, &mut s);
        for i in 0..20 {
            prop_assert!(s[i] == 0.0 || s[i] == 1.0);
            prop_assert_eq!(s[i] == 1.0, h[i] >= p.v_threshold);
            // After a spike the membrane restarts from zero: the next step sees only its input.
            if s[i] == 1.0 && i + 5 < 20 {
                prop_assert_eq!(h[i + 5], input[i + 5]);
            }
        }
    }

    #[test]
    fn ssd_identities(a in prop::collection::vec(any::<bool>(), 2 * 3 * 4 * 5), b in prop::collection::vec(any::<bool>(), 2 * 3 * 4 * 5)) {
        let dims = [2, 3, 4, 5];
        let (m, t) = (spikes(dims, &a), spikes(dims, &b));
        let [x1, x2, x3] = ssd_extract(&FeatureMaps { mcs: m.clone(), tss: t.clone() }).unwrap();
        for i in 0..m.len() {
            let v = |s: &SpikeTensor| s.get_flat(i) as u8;
            prop_assert_eq!(v(&x1) + v(&x2), v(&m));
            prop_assert_eq!(v(&x1) + v(&x3), v(&t));
            prop_assert_eq!(v(&x2) * v(&x3), 0);
            prop_assert_eq!(v(&x1) + v(&x2) + v(&x3), v(&m) | v(&t));
        }
    }

    #[test]
    fn matching_ignores_global_rescaling(
        q in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
        d in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..8),
        scale in 0.01f64..100.0,
    ) {
        let qp = vec![None; q.len()];
        let dp = vec![None; d.len()];
        let s = |v: &[Vec<f64>]| -> Vec<Vec<f64>> { v.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect() };
        let a = match_descriptors(&q, &qp, &d, &dp).unwrap();
        let b = match_descriptors(&s(&q), &qp, &s(&d), &dp).unwrap();
        for (x, y) in a.queries.iter().zip(&b.queries) {
            prop_assert_eq!(x.ranking[0], y.ranking[0]);
        }
    }

    #[test]
    fn triplet_loss_monotone(
        q in prop::collection::vec(-1.0f64..1.0, 5),
        pos in prop::collection::vec(-1.0f64..1.0, 5),
        negs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 1..6),
        which in 0usize..6,
        stretch in 1.0f64..3.0,
    ) {
        let away = |v: &[f64]| -> Vec<f64> { q.iter().zip(v).map(|(a, b)| a + (b - a) * stretch).collect() };
        let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let base = triplet_loss(&q, &pos, &refs, 0.1).unwrap();
        // Moving one negative away from the query never increases the loss.
        let k = which % negs.len();
        let moved = away(&negs[k]);
        let mut refs2 = refs.clone();
        refs2[k] = &moved;
        prop_assert!(triplet_loss(&q, &pos, &refs2, 0.1).unwrap() <= base + 1e-12);
        // Moving the positive away never decreases it.
        prop_assert!(triplet_loss(&q, &away(&pos), &refs, 0.1).unwrap() >= base - 1e-12);
    }

    #[test]
    fn mined_negatives_lie_beyond_r_neg(
        qx in prop::collection::vec(0.0f64..500.0, 1..6),
        dx in prop::collection::vec(0.0f64..500.0, 2..25),
        seed in any::<u64>(),
    ) {
        let mut rng = Stream::new(seed);
        let qp: Vec<Option<GeoPose>> = qx.iter().map(|&x| Some(planar(x, 0.0))).collect();
        let mut dp: Vec<Option<GeoPose>> = dx.iter().map(|&x| Some(planar(x, 0.0))).collect();
        dp.push(Some(planar(10_000.0, 0.0)));
        let cache = DescriptorCache {
            query: qx.iter().map(|_| (0..3).map(|_| rng.uniform()).collect()).collect(),
            database: dp.iter().map(|_| (0..3).map(|_| rng.uniform()).collect()).collect(),
            staleness: 0,
            refreshes: 1,
        };
        let cfg = TrainConfig::default();
        let qs: Vec<usize> = (0..qx.len()).collect();
        let m = mine_triplets(&qs, &qp, &dp, &cache, &cfg, &mut rng).unwrap();
        for t in &m.triplets {
            let q = qp[t.query].as_ref().unwrap();
            prop_assert!(geo_distance(q, dp[t.positive].as_ref().unwrap()).unwrap() <= cfg.r_pos);
            prop_assert!(!t.negatives.is_empty() && t.negatives.len() <= cfg.negatives);
            for &n in &t.negatives {
                prop_assert!(geo_distance(q, dp[n].as_ref().unwrap()).unwrap() > cfg.r_neg);
            }
        }
        prop_assert_eq!(m.triplets.len() + m.skipped, qx.len());
    }

    #[test]
    fn retrieval_metrics_are_monotone(
        q in prop::collection::vec((0.0f64..300.0, prop::collection::vec(-1.0f64..1.0, 3)), 1..12),
        d in prop::collection::vec((0.0f64..300.0, prop::collection::vec(-1.0f64..1.0, 3)), 1..25),
    ) {
        let qp: Vec<_> = q.iter().map(|(x, _)| Some(planar(*x, 0.0))).collect();
        let dp: Vec<_> = d.iter().map(|(x, _)| Some(planar(*x, 0.0))).collect();
        let qd: Vec<_> = q.iter().map(|(_, v)| v.clone()).collect();
        let dd: Vec<_> = d.iter().map(|(_, v)| v.clone()).collect();
        let r = match_descriptors(&qd, &qp, &dd, &dp).unwrap();
        let phis = [5.0, 15.0, 30.0, 45.0, 60.0, 75.0, 150.0];
        for &phi in &phis {
            let mut prev = 0.0;
            for &n in &RECALL_NS {
                let v = recall_at_n(&r, n, phi);
                prop_assert!(v >= prev);
                prev = v;
            }
        }
        for &n in &RECALL_NS {
            let mut prev = 0.0;
            for &phi in &phis {
                let v = recall_at_n(&r, n, phi);
                prop_assert!(v >= prev);
                prev = v;
            }
        }
        let pr = pr_curve(&r, 75.0);
        let best = f1_max(&pr);
        let mut prev = 0.0;
        for p in &pr {
            prop_assert!((0.0..=1.0).contains(&p.precision));
            prop_assert!(p.recall >= prev);
            prev = p.recall;
            prop_assert!(best >= f1(p));
        }
    }

    #[test]
    fn measured_acs_grow_with_input_spikes(bits in prop::collection::vec(any::<bool>(), 2 * 2 * 5 * 5), extra in prop::collection::vec(any::<bool>(), 2 * 2 * 5 * 5)) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::filled(&[3, 2, 3, 3], 0.1), true).unwrap();
        let ops = |bits: &[bool]| {
            let x = Tensor::from_vec(&[2, 2, 5, 5], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let mut g = Graph::new(&store, Mode::EVAL);
            let xv = g.input(x);
            let w = g.param_named("w").unwrap();
            g.conv2d(xv, w, ConvGeom { stride: 2, pad: 1 }).unwrap();
            measure_ops(&g, 1).get("w").unwrap()
        };
        let denser: Vec<bool> = bits.iter().zip(&extra).map(|(a, b)| *a || *b).collect();
        prop_assert!(ops(&denser) >= ops(&bits));
    }
}

#[test]
fn synthesis_is_bit_deterministic() {
    let cfg = SynthConfig { n_places: 4, events_per_place: 16, ..SynthConfig::default() };
    assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
}
