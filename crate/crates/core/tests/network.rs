use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seedet::nn::{Ablation, Network, NetworkConfig, SeResidualBlock};
use seedet::train::{read_checkpoint, write_checkpoint, RunConfig, Trainer};
use seedet::Tensor;

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
}

#[test]
fn tiny_parameter_count() {
    // stem 232, stages 3513 + 10641 + 14225, decoder 23473, head 544 + 495
    let full = Network::new(&NetworkConfig::tiny(), 0).unwrap();
    assert_eq!(full.num_parameters(), 53_123);
    // four SE gates of 25, 49, 49, 49 scalars
    let plain = Network::new(&NetworkConfig { use_se: false, ..NetworkConfig::tiny() }, 0).unwrap();
    assert_eq!(plain.num_parameters(), 53_123 - 172);
    assert!(plain.num_parameters() < full.num_parameters());
}

#[test]
fn gates_lie_strictly_inside_the_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let block = SeResidualBlock::new(4, 32, 1, true, 3);
    for scale in [0.1, 1.0, 10.0] {
        let x = Tensor::randn(&[2, 4, 6, 6, 6], scale, &mut rng);
        let g = block.gates(&x).unwrap().unwrap();
        assert_eq!(g.shape(), &[2, 32]);
        assert!(g.data().iter().all(|&s| s > 0.0 && s < 1.0));
    }
    assert!(SeResidualBlock::new(4, 8, 1, false, 3).gates(&Tensor::zeros(&[1, 4, 4, 4, 4])).unwrap().is_none());
}

#[test]
fn pinned_gates_reproduce_the_plain_network() {
    let mut full = Network::new(&NetworkConfig::tiny(), 5).unwrap();
    let names: Vec<String> = full.params().iter().map(|(n, _)| n.to_string()).filter(|n| n.contains(".se.")).collect();
    assert!(!names.is_empty());
    for n in &names {
        let t = full.params_mut().by_name_mut(n).unwrap();
        let v = if n.ends_with(".se.b2") { 50.0 } else if n.ends_with(".se.w2") { 0.0 } else { continue };
        t.data_mut().iter_mut().for_each(|x| *x = v);
    }
    let mut plain = Network::new(&NetworkConfig { use_se: false, ..NetworkConfig::tiny() }, 9).unwrap();
    plain.params_mut().copy_shared_from(full.params());
    let x = Tensor::randn(&[1, 1, 16, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    assert!(bits_equal(&full.forward(&x).unwrap(), &plain.forward(&x).unwrap()));
    assert!(bits_equal(&full.forward_train(&x).unwrap(), &plain.forward_train(&x).unwrap()));
}

#[test]
fn shifting_by_the_deepest_stride_shifts_the_grid() {
    // Squeeze-and-excitation pools over the whole input and is not
    // translation covariant, so the check runs on the plain variant.
    let cfg = NetworkConfig { use_se: false, ..NetworkConfig::tiny() };
    let net = Network::new(&cfg, 4).unwrap();
    let shift = cfg.deepest_stride();
    let cells = shift / cfg.output_stride;
    let (d, h, w) = (16, 16, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let wide = Tensor::randn(&[1, 1, d, h, w + shift], 1.0, &mut rng);
    let crop = |off: usize| Tensor::from_fn(&[1, 1, d, h, w], |i| {
        let (x, rest) = (i % w, i / w);
        wide.data()[rest * (w + shift) + x + off]
    });
    let (a, b) = (net.forward(&crop(0)).unwrap(), net.forward(&crop(shift)).unwrap());
    let s = a.shape().to_vec();
    let gx = s[4];
    // interior cells sit far from the x borders of both crops
    let margin = 10;
    let mut compared = 0;
    let mut worst = 0.0f64;
    for c in 0..s[1] {
        for z in 0..s[2] {
            for y in 0..s[3] {
                for x in margin..gx - margin - cells {
                    let row = ((c * s[2] + z) * s[3] + y) * gx;
                    let (p, q) = (a.data()[row + x + cells], b.data()[row + x]);
                    worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(1e-12));
                    compared += 1;
                }
            }
        }
    }
    assert!(compared > 0);
    assert!(worst < 1e-5, "max relative difference {worst:e}");
}

#[test]
fn ablation_flags_survive_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    for ab in [Ablation::Full, Ablation::NoSe, Ablation::NoFocal, Ablation::BaselineRpn] {
        let cfg = RunConfig { train_patch: 16, eval_patch: 16, overlap: 0, ..RunConfig::desk_scale() }.with_ablation(ab);
        let t = Trainer::new(cfg).unwrap();
        let path = dir.path().join("a.sdck");
        write_checkpoint(&path, &t.checkpoint()).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.config.ablation(), ab);
        assert_eq!(back.network().unwrap().config().use_se, ab.uses_se());
    }
}

#[test]
fn probabilities_in_open_unit_interval() {
    let net = Network::new(&NetworkConfig::tiny(), 1).unwrap();
    let x = Tensor::randn(&[2, 1, 16, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let p = net.forward(&x).unwrap();
    let cells = 4 * 4 * 4;
    for (i, chunk) in p.data().chunks(cells).enumerate() {
        if (i % 15) % 5 == 0 {
            assert!(chunk.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
