use mmr_core::data::blobs;
use mmr_core::mmr::MmrUniversalConfig;
use mmr_core::seed;
use mmr_core::train::{radii, train, TrainConfig};
use mmr_core::ReluNet;
use ndarray::Array1;

fn median(v: &Array1<f64>) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn blob_net(seed_: u64) -> ReluNet {
    let mut rng = seed::rng(seed_, seed::purpose::INIT, 0);
    ReluNet::random(2, &[64], 2, &mut rng).unwrap()
}

#[test]
fn regularized_training_enlarges_median_radii() {
    let data = blobs(500, 2, 0.6, 0.03, 11).unwrap();
    let net0 = blob_net(11);
    let cfg = TrainConfig { epochs: 50, learning_rate: 2e-3, seed: 11, ..TrainConfig::default() };
    let mmr = MmrUniversalConfig { gamma1: 1.0, gamma_inf: 0.1, ..MmrUniversalConfig::default() };

    let (plain, _) = train(&net0, &data, None, None, &cfg).unwrap();
    let (robust, _) = train(&net0, &data, None, Some(&mmr), &cfg).unwrap();
    let (p1, pinf) = radii(&plain, &data).unwrap();
    let (r1, rinf) = radii(&robust, &data).unwrap();
    let (p1, pinf, r1, rinf) = (median(&p1), median(&pinf), median(&r1), median(&rinf));
    assert!(r1 > p1, "median rho1 {r1} vs plain {p1}");
    assert!(rinf > pinf, "median rho_inf {rinf} vs plain {pinf}");
}

#[test]
fn loss_falls_over_first_ten_epochs() {
    let mut falls = 0;
    for s in 0..10 {
        let data = blobs(400, 2, 0.35, 0.08, 50 + s).unwrap();
        let cfg = TrainConfig { epochs: 10, learning_rate: 1e-3, seed: s, ..TrainConfig::default() };
        let (_, history) = train(&blob_net(s), &data, None, None, &cfg).unwrap();
        let losses = history.losses();
        if losses[9] < losses[0] {
            falls += 1;
        }
    }
    assert!(falls >= 9, "loss fell in only {falls} of 10 seeds");
}
