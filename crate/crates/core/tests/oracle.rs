use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subsynth::models::{Classifier, ClassifierConfig};
use subsynth::oracle::{self, LocalOracle, Oracle, OracleError, OracleMode, OracleResponse, RemoteOracle};
use subsynth::{Real, Tensor};

const SHAPE: [usize; 3] = [1, 4, 4];

fn model(seed: u64) -> Classifier<Real> {
    Classifier::new(ClassifierConfig::Mlp { hidden: vec![12] }, SHAPE, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn batch(rng: &mut ChaCha8Rng, b: usize) -> Tensor<Real> {
    Tensor::new(&[b, 1, 4, 4], (0..b * 16).map(|_| rng.random::<Real>()).collect()).unwrap()
}

fn bits(r: &OracleResponse) -> Vec<u64> {
    match r {
        OracleResponse::Probabilities(p) => p.values().iter().map(|v| v.to_bits() as u64).collect(),
        OracleResponse::Labels(l) => l.iter().map(|&v| v as u64).collect(),
    }
}

#[test]
fn loopback_matches_in_process_bit_for_bit() {
    let local = LocalOracle::new(model(1));
    let server = oracle::serve(Arc::new(LocalOracle::new(model(1))), "127.0.0.1:0").unwrap();
    let remote = RemoteOracle::connect(&server.url()).unwrap();
    assert_eq!(remote.classes(), 5);
    assert_eq!(remote.image_shape(), SHAPE);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sent = 0;
    for i in 0..100 {
        let b = rng.random_range(1..=9);
        let x = batch(&mut rng, b);
        let mode = if i % 4 == 3 { OracleMode::Label } else { OracleMode::Probability };
        assert_eq!(bits(&local.query(&x, mode).unwrap()), bits(&remote.query(&x, mode).unwrap()), "batch {i}");
        sent += b as u64;
    }
    assert_eq!(remote.queries(), sent);
    assert_eq!(remote.info().unwrap().queries_served, sent);
}

#[test]
fn label_mode_is_the_argmax_of_probabilities() {
    let o = LocalOracle::new(model(3));
    let x = batch(&mut ChaCha8Rng::seed_from_u64(4), 64);
    let p = o.query(&x, OracleMode::Probability).unwrap();
    let OracleResponse::Labels(l) = o.query(&x, OracleMode::Label).unwrap() else {
        panic!("label mode returned probabilities");
    };
    assert_eq!(l, p.labels());
    assert_eq!(o.queries(), 128);
}

#[test]
fn concurrent_single_image_queries_are_all_counted() {
    let served = Arc::new(LocalOracle::new(model(5)));
    let server = oracle::serve(served.clone(), "127.0.0.1:0").unwrap();
    let url = server.url();
    let threads: Vec<_> = (0..100)
        .map(|i| {
            let url = url.clone();
            std::thread::spawn(move || {
                let remote = RemoteOracle::connect(&url).unwrap();
                let x = batch(&mut ChaCha8Rng::seed_from_u64(100 + i), 1);
                remote.query(&x, OracleMode::Probability).unwrap().len()
            })
        })
        .collect();
    let answered: usize = threads.into_iter().map(|t| t.join().unwrap()).sum();
    assert_eq!(answered, 100);
    assert_eq!(served.queries(), 100);
}

#[test]
fn malformed_requests_are_rejected_and_the_server_stays_up() {
    let served = Arc::new(LocalOracle::new(model(6)));
    let server = oracle::serve(served.clone(), "127.0.0.1:0").unwrap();
    let endpoint = format!("{}/v1/query", server.url());
    let bad = [
        "not json".to_string(),
        r#"{"mode":"probability","images":[[0.5]],"shape":[1,4,4]}"#.to_string(),
        r#"{"mode":"probability","images":[],"shape":[1,4,4]}"#.to_string(),
        r#"{"mode":"probability","images":[[0.5]],"shape":[1,1,1]}"#.to_string(),
        format!(r#"{{"mode":"probability","images":[[{}]],"shape":[1,4,4]}}"#, ["2.0"; 16].join(",")),
        r#"{"mode":"logits","images":[],"shape":[1,4,4]}"#.to_string(),
    ];
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    for body in &bad {
        let r = agent.post(&endpoint).header("content-type", "application/json").send(body.as_str()).unwrap();
        assert!(r.status().is_client_error(), "{body} -> {}", r.status());
    }
    assert_eq!(served.queries(), 0);

    let remote = RemoteOracle::connect(&server.url()).unwrap();
    let wrong = Tensor::new(&[1, 1, 2, 2], vec![0.5; 4]).unwrap();
    assert!(matches!(remote.query(&wrong, OracleMode::Label), Err(OracleError::Shape { .. })));
    let x = batch(&mut ChaCha8Rng::seed_from_u64(7), 3);
    assert_eq!(remote.query(&x, OracleMode::Label).unwrap().len(), 3);
    assert_eq!(served.queries(), 3);
}

#[test]
fn unreachable_server_is_reported() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let r = RemoteOracle::connect_with(
        &format!("http://{addr}"),
        oracle::RetryPolicy {
            attempts: 1,
            ..Default::default()
        },
    );
    assert!(matches!(r, Err(OracleError::Unreachable { .. })), "{:?}", r.err());
}
