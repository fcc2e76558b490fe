// scratch diagnostic — not part of the crate
use ijko::diffcore::Tensor;
use ijko::dynamics::prox_point_with;
use ijko::nets::{self, MapEnsemble, MlpSpec};
use ijko::trainer::*;
use ijko::energy::ComponentMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())
}

fn main() {
    let cfg = TrainConfig {
        v_hidden: vec![8],
        map_hidden: vec![32, 32],
        inner_iters: 50,
        batch_size: 256,
        map_opt: AdamConfig { lr: 1e-2, ..AdamConfig::map_default() },
        ..TrainConfig::default()
    };
    let model = EnergyModel::init(2, 1, &cfg);
    let spec = MlpSpec::new(2, vec![32, 32], nets::Activation::Selu, 2);
    let mut maps = MapEnsemble {
        params: vec![nets::init_params(&spec, 9)],
        spec,
        time_conditioned: false,
        normalize_time: false,
        n_steps: 1,
    };
    let mut state = TrainState::new(&model, &maps);
    let train_rows = vec![gaussian(256, 2, 11), gaussian(256, 2, 12)];
    let tau = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..60 {
        inner_map_step(&model, &mut maps, &mut state, &train_rows, None, tau, &cfg, &mut rng).unwrap();
    }
    for lr in [1e-3, 1e-4] {
        let fine = TrainConfig { map_opt: AdamConfig { lr, ..AdamConfig::map_default() }, ..cfg.clone() };
        for _ in 0..60 {
            inner_map_step(&model, &mut maps, &mut state, &train_rows, None, tau, &fine, &mut rng).unwrap();
        }
    }
    let value = |y: &[f64]| nets::forward_scalar(&model.potentials[0], &model.v_spec, &Tensor::vector(y.to_vec())).unwrap();
    let grad = |y: &[f64]| model.potential_gradient(0, y).unwrap();

    for (name, pts) in [("train", &train_rows[0]), ("test", &gaussian(64, 2, 14))] {
        let mapped = maps.apply(pts, 0).unwrap();
        let mut dev = 0.0; let mut disp = 0.0; let mut maxdev: f64 = 0.0;
        for i in 0..pts.rows() {
            let want = prox_point_with(&value, &grad, pts.row(i), tau).unwrap();
            let got = mapped.row(i);
            let d: f64 = want.iter().zip(got).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dev += d; maxdev = maxdev.max(d);
            disp += want.iter().zip(pts.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
        println!("{name}: mean dev {:.5} max dev {:.5} mean prox displacement {:.5}", dev / pts.rows() as f64, maxdev, disp / pts.rows() as f64);
    }
}
