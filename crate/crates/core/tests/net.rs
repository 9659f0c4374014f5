use edgeloop::des::RngStream;
use edgeloop::net::*;
use edgeloop::stats::BoxStats;

fn samples(link: &LinkProfile, n: usize, label: &str) -> Vec<f64> {
    let mut rng = RngStream::new(17, label);
    (0..n).map(|_| link.sample_rtt_ms(&mut rng)).collect()
}

#[test]
fn plant_links_reproduce_the_measured_boxes() {
    let table = ProfileTable::builtin();
    let net = NetModel::builtin(9_000);
    let plant = net.plant();
    for (name, tol) in [("edge", 0.02), ("erdc", 0.03), ("aws", 0.02)] {
        let target = table.box_of(&format!("rtt/{name}")).unwrap();
        let link = net.link(plant, net.node_id(name).unwrap());
        let s = BoxStats::from_values(&samples(link, 10_000, name)).unwrap();
        assert!((s.median / target.median - 1.0).abs() <= 0.05, "{name} median {}", s.median);
        let iqr = target.q3 - target.q1;
        assert!(((s.q3 - s.q1) / iqr - 1.0).abs() <= 0.05, "{name} IQR {}", s.q3 - s.q1);
        // The fit itself (before sampling) matches the quartiles.
        let fit = link.fit.unwrap();
        assert!((fit.median() / target.median - 1.0).abs() <= 1e-12);
        assert!((fit.q1() / target.q1 - 1.0).abs() <= tol && (fit.q3() / target.q3 - 1.0).abs() <= tol, "{name} quartile fit");
    }
}

#[test]
fn samples_respect_the_whiskers() {
    let net = NetModel::builtin(9_000);
    let mut rng = RngStream::new(2, "test.net.bounds");
    for a in 0..net.node_count() {
        for b in 0..net.node_count() {
            let (a, b) = (NodeId(a), NodeId(b));
            let link = net.link(a, b);
            let (lo, hi) = link.one_way_bounds_ms();
            for _ in 0..2_000 {
                let ms = net.sample_one_way(a, b, &mut rng).as_millis_f64();
                assert!(ms >= lo - 1e-6 && ms <= hi + 1e-6, "{a:?}->{b:?}: {ms} outside [{lo}, {hi}]");
            }
        }
    }
    let plant = net.plant();
    assert!(net.link(plant, plant).is_zero());
    assert_eq!(net.link(plant, net.node_id("plant").unwrap()).sample_rtt_ms(&mut rng), 0.0);
}

#[test]
fn compute_scales_follow_execution_medians() {
    let table = ProfileTable::builtin();
    let net = NetModel::builtin(9_000);
    let edge = table.get("exec/edge", "median").unwrap();
    for n in net.nodes() {
        let want = table.get(&format!("exec/{}", n.name), "median").unwrap() / edge;
        assert!((n.compute_scale / want - 1.0).abs() <= 0.01, "{}", n.name);
        assert!((n.iter_cost / (0.080 / 9_000.0 * want) - 1.0).abs() <= 1e-12);
    }
    let plant = net.node(net.node_id("plant").unwrap());
    assert!(plant.compute_scale > 4.0 && plant.compute_scale < 6.0);
    // Capped solve on AWS costs about half the edge figure.
    let aws = net.node(net.node_id("aws").unwrap());
    assert!((aws.iter_cost * 9_000.0 * 1e3 - 40.0).abs() / 40.0 <= 0.1);
}

#[test]
fn remote_hops_pay_two_legs_and_the_overhead() {
    let net = NetModel::builtin(9_000);
    let (plant, aws) = (net.plant(), net.node_id("aws").unwrap());
    let (lo, hi) = net.link(plant, aws).one_way_bounds_ms();
    let mut rng = RngStream::new(5, "test.net.hop");
    for _ in 0..1_000 {
        let (transit, over) = net.hop(plant, aws, &mut rng);
        let t = transit.as_millis_f64();
        assert!(t >= 2.0 * lo - 1e-6 && t <= 2.0 * hi + 1e-6);
        assert!(over.as_millis_f64() > 0.0);
        let (local_net, local_over) = net.hop(aws, aws, &mut rng);
        assert_eq!(local_net.as_nanos(), 0);
        assert!(local_over.as_millis_f64() < 5.0);
    }
}

#[test]
fn profile_table_round_trips_through_csv() {
    let table = ProfileTable::builtin();
    assert_eq!(ProfileTable::parse(&table.to_csv()).unwrap(), table);
}

#[test]
fn bad_profiles_are_rejected() {
    assert!(fit_lognormal(5.0, 6.0, 7.0).is_err());
    assert!(fit_lognormal(-1.0, -2.0, 1.0).is_err());
    let mut table = ProfileTable::builtin();
    table.set("rtt/aws", "hi", 1.0);
    assert!(NetModel::from_table(&table, 9_000, NetConfig::default()).is_err());
    assert!(NetModel::from_table(&ProfileTable::builtin(), 0, NetConfig::default()).is_err());
    assert!(NetModel::builtin(9_000).node_id("mars").is_err());
}
