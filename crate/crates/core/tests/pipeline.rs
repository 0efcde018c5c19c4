use fogcount::autodiff::{Tape, Tensor};
use fogcount::checkpoint::Checkpoint;
use fogcount::config::{ModelConfig, Variant};
use fogcount::fogbench::{density_from_points, synth_benchmark, BenchConfig, FogTier};
use fogcount::model::Model;
use fogcount::train::{evaluate, sample_loss, train, Benchmark, EvalItem, TrainData};

fn small_bench(dir: &std::path::Path) -> Benchmark {
    let cfg = BenchConfig {
        splits: vec![("train".into(), 4), ("val".into(), 2), ("test".into(), 2)],
        ..BenchConfig::default()
    };
    synth_benchmark(dir, &cfg, 11).unwrap();
    Benchmark::open(dir).unwrap()
}

#[test]
fn density_map_matches_direct_gaussian_sum() {
    let points = [(1.0, 2.0), (4.5, 0.0), (6.2, 4.9)];
    let (h, w, sigma) = (5, 7, 1.3);
    let map = density_from_points(&points, h, w, sigma).unwrap();
    let mut want = vec![0.0; h * w];
    for &(x, y) in &points {
        let g = |r: usize, c: usize| (-((c as f64 - x).powi(2) + (r as f64 - y).powi(2)) / (2.0 * sigma * sigma)).exp();
        let z: f64 = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| g(r, c)).sum();
        for r in 0..h {
            for c in 0..w {
                want[r * w + c] += g(r, c) / z;
            }
        }
    }
    for (a, b) in map.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert!((map.sum() - 3.0).abs() < 1e-12);
}

#[test]
fn no_physics_loss_ignores_fog_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let b = small_bench(tmp.path());
    let item = b.items("test", Some(FogTier::Moderate)).unwrap().remove(0);
    let cfg = ModelConfig {
        variant: Variant::NoPhysics,
        ..ModelConfig::default()
    };
    let model = Model::new(&cfg).unwrap();
    let loss = |it: &EvalItem| {
        let tape = Tape::no_grad();
        let l = sample_loss(&tape, &model, it).unwrap();
        assert!(l.physics.is_none());
        l.total.item()
    };
    let other = EvalItem {
        beta: 0.1,
        a: 0.6,
        t: Tensor::full(item.t.shape(), 0.3),
        ..item.clone()
    };
    assert_eq!(loss(&item), loss(&other));

    let full = Model::new(&ModelConfig::default()).unwrap();
    let tape = Tape::no_grad();
    let (a, b) = (sample_loss(&tape, &full, &item).unwrap(), sample_loss(&tape, &full, &other).unwrap());
    assert_ne!(a.total.item(), b.total.item());
}

#[test]
fn trained_checkpoint_reproduces_its_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let b = small_bench(&tmp.path().join("bench"));
    let cfg = ModelConfig {
        epochs: 2,
        batch: 2,
        ..ModelConfig::default()
    };
    let scenes = b.scenes("train").unwrap();
    let val = b.items("val", None).unwrap();
    let out = tmp.path().join("run");
    let r = train(&cfg, TrainData { train: &scenes, val: &val }, Some(&out)).unwrap();
    assert_eq!(r.epochs.len(), 2);
    assert!(r.epochs.iter().all(|e| e.train_loss.is_finite()));

    let test = b.items("test", None).unwrap();
    let direct = evaluate(&r.best, &test).unwrap();
    let loaded = Checkpoint::load(&out.join("best.fckp")).unwrap().to_model().unwrap();
    let again = evaluate(&loaded, &test).unwrap();
    assert_eq!(direct.table(), again.table());
    for tier in FogTier::ALL {
        assert_eq!(direct.tier(tier).unwrap().n, 2);
    }
}
