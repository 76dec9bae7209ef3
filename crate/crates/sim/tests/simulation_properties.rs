use proptest::prelude::*;
use ztdim_sim::metrics::{self, prr, prr_within, MetricAccumulator, RunMetrics};
use ztdim_sim::mobility::{build_scenario, DensitySpec, ScenarioGeometry};
use ztdim_sim::radio::{
    dsrc_airtime_ns, run, run_to_log, DsrcConfig, EventLog, EventSink, FailReason, Mac, Resource, RunConfig,
};

fn mac_strategy() -> impl Strategy<Value = Mac> {
    prop_oneof![Just(Mac::Dsrc), Just(Mac::Cv2x)]
}

fn small_run(mac: Mac, bytes: u32, density: u32, length_m: f64, seed: u64) -> (ScenarioGeometry, RunConfig, EventLog) {
    let geometry = ScenarioGeometry::highway(length_m);
    let traces = build_scenario(&geometry, &DensitySpec { vehicles_per_km: density, duration_s: 1.5, seed }).unwrap();
    let mut config = RunConfig::new(mac, bytes, 1.0, seed);
    config.warmup_s = 0.5;
    let log = run_to_log(&geometry, &traces, &config).unwrap();
    (geometry, config, log)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn outcomes_follow_the_decode_rule(
        mac in mac_strategy(),
        big in any::<bool>(),
        density in 5u32..40,
        length in 300.0f64..800.0,
        seed in any::<u64>(),
    ) {
        let bytes = if big { 1670 } else { 90 };
        let (_, config, log) = small_run(mac, bytes, density, length, seed);
        prop_assert!(!log.txs.is_empty());
        for rec in &log.txs {
            prop_assert!(rec.tx.t_air_ns >= rec.tx.t_generated_ns);
            prop_assert!(rec.tx.t_generated_ns >= 500_000_000);
            prop_assert_eq!(rec.tx.size_bytes, bytes);
            match (mac, rec.tx.resource) {
                (Mac::Dsrc, Resource::Channel) => {
                    prop_assert_eq!(rec.tx.airtime_ns, dsrc_airtime_ns(bytes, &DsrcConfig::default()));
                }
                (Mac::Cv2x, Resource::Subchannels { first, count, .. }) => {
                    prop_assert!(first as u32 + count as u32 <= config.sps.subchannels as u32);
                }
                other => prop_assert!(false, "resource {:?} does not fit the MAC", other),
            }
            for o in &rec.outcomes {
                prop_assert_ne!(o.receiver, rec.tx.sender);
                prop_assert!(o.distance_m <= config.max_rx_distance_m);
                prop_assert_eq!(o.decoded, o.fail_reason.is_none());
                if o.decoded {
                    prop_assert!(o.rx_power_dbm >= config.phy.rx_sensitivity_dbm);
                    prop_assert!(o.sinr_db >= config.phy.sinr_threshold_db);
                }
                if o.fail_reason == Some(FailReason::BelowSense) {
                    prop_assert!(o.rx_power_dbm < config.phy.rx_sensitivity_dbm);
                }
            }
        }
        let m = RunMetrics::from_log(&log, &metrics::bin_edges(20.0, 500.0));
        prop_assert!(m.prr_bins.iter().all(|b| b.decoded <= b.attempts && b.attempts > 0));
        prop_assert!(m.cbr.is_some_and(|c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn streaming_metrics_equal_log_metrics(mac in mac_strategy(), density in 5u32..30, seed in any::<u64>()) {
        let geometry = ScenarioGeometry::highway(500.0);
        let traces = build_scenario(&geometry, &DensitySpec { vehicles_per_km: density, duration_s: 1.0, seed }).unwrap();
        let config = RunConfig::new(mac, 300, 1.0, seed);
        let edges = metrics::bin_edges(20.0, 500.0);
        let mut acc = MetricAccumulator::new(mac, edges.clone());
        let mut log = EventLog::new(mac);
        let mut both = ztdim_sim::radio::Tee(&mut acc, &mut log);
        run(&geometry, &traces, &config, &mut both).unwrap();
        log.sort();
        prop_assert_eq!(acc.finish(), RunMetrics::from_log(&log, &edges));
        // a second run with the same inputs yields the same log
        prop_assert_eq!(run_to_log(&geometry, &traces, &config).unwrap(), log.clone());
        let mut bytes = Vec::new();
        log.write_binary(&mut bytes).unwrap();
        prop_assert_eq!(EventLog::read_binary(&bytes[..]).unwrap(), log);
    }

    #[test]
    fn binned_prr_partitions_the_outcomes(
        distances in proptest::collection::vec((0.0f64..700.0, any::<bool>()), 0..100),
        width in prop_oneof![Just(10.0), Just(20.0), Just(50.0)],
    ) {
        use ztdim_sim::radio::{RxOutcome, TxEvent, TxRecord};
        let mut log = EventLog::new(Mac::Dsrc);
        let tx = TxEvent { id: 0, sender: 0, t_generated_ns: 0, t_air_ns: 0, airtime_ns: 1, size_bytes: 90, resource: Resource::Channel };
        let outcomes = distances
            .iter()
            .enumerate()
            .map(|(i, &(d, ok))| RxOutcome {
                tx: 0,
                receiver: i as u32 + 1,
                distance_m: d,
                rx_power_dbm: -70.0,
                sinr_db: 20.0,
                decoded: ok,
                fail_reason: (!ok).then_some(FailReason::LowSinr),
            })
            .collect();
        log.txs.push(TxRecord { tx, outcomes });
        let edges = metrics::bin_edges(width, 500.0);
        let bins = prr(&log, &edges);
        let in_range = distances.iter().filter(|(d, _)| *d > 0.0 && *d <= 500.0).count() as u64;
        prop_assert_eq!(bins.iter().map(|b| b.attempts).sum::<u64>(), in_range);
        for b in &bins {
            prop_assert!((0.0..=1.0).contains(&b.prr()));
        }
        let near: Vec<_> = distances.iter().filter(|(d, _)| *d <= 150.0).collect();
        let expect = (!near.is_empty()).then(|| near.iter().filter(|(_, ok)| *ok).count() as f64 / near.len() as f64);
        prop_assert_eq!(prr_within(&log, 150.0), expect);
        let mut acc = MetricAccumulator::new(Mac::Dsrc, edges.clone());
        acc.record_tx(&log.txs[0].tx, &log.txs[0].outcomes);
        prop_assert_eq!(acc.finish().prr_bins, bins);
    }
}

#[test]
fn denser_highway_is_busier() {
    let cbr = |density| {
        let (_, _, log) = small_run(Mac::Dsrc, 1670, density, 500.0, 9);
        metrics::cbr(&log).unwrap()
    };
    assert!(cbr(40) > cbr(10));
}
