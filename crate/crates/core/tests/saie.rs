//! Montage I/O and spatial projection properties.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samba_core::gradcheck::check_gradients;
use samba_core::montage::{bundled, Montage, MontageError};
use samba_core::saie::{
    export_weight_map, import_weight_map, project, spatial_weights, spatial_weights_plain,
    SpatialMlpWeights, WeightCache,
};
use samba_core::{Graph, Tensor};

#[test]
fn bundled_montages_are_valid_and_unit_scale() {
    for name in ["16", "22", "64", "14"] {
        let m = bundled::by_name(name).unwrap();
        for i in 0..m.len() {
            let p = m.coord(i);
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((norm - 1.0).abs() < 0.05, "{name}[{i}] |P| = {norm}");
        }
    }
    assert_eq!(bundled::by_name("16").unwrap().len(), 16);
    assert_eq!(bundled::by_name("22").unwrap().len(), 22);
    assert_eq!(bundled::by_name("64").unwrap().len(), 64);
    assert_eq!(bundled::by_name("14").unwrap().len(), 14);
}

#[test]
fn montage_round_trip_is_bit_exact() {
    let m = bundled::by_name("22").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    m.save(&path).unwrap();
    let back = Montage::load(&path).unwrap();
    assert_eq!(m, back);
}

#[test]
fn montage_error_cases() {
    assert!(matches!(Montage::parse(""), Err(MontageError::Empty)));
    assert!(matches!(
        Montage::parse("name,x,y,z\n"),
        Err(MontageError::Empty)
    ));
    assert!(matches!(
        Montage::parse("name,x,y,z\nA,0,0,1\nA,0,1,0\n"),
        Err(MontageError::DuplicateName(_))
    ));
    assert!(matches!(
        Montage::parse("name,x,y,z\nA,0,0,1\nB,0,0,1\n"),
        Err(MontageError::TooClose(_, _))
    ));
    assert!(matches!(
        Montage::parse("name,x,y,z\nA,9,9,9\n"),
        Err(MontageError::Degenerate(_, _))
    ));
    assert!(matches!(
        Montage::parse("name,x,y,z\nA,zero,0,1\n"),
        Err(MontageError::Parse { .. })
    ));
    assert!(matches!(
        Montage::parse("name,x,y\nA,0,0\n"),
        Err(MontageError::Parse { line: 1, .. })
    ));
}

#[test]
fn normalize_header_flag_rescales() {
    let m = Montage::parse("name,x,y,z,normalize\nA,0,0,10\nB,3,4,0\n").unwrap();
    assert_eq!(m.coord(0), [0.0, 0.0, 1.0]);
    let b = m.coord(1);
    assert!((b[0] - 0.6).abs() < 1e-12 && (b[1] - 0.8).abs() < 1e-12);
}

#[test]
fn single_input_channel_gives_unit_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mlp = SpatialMlpWeights::init(8, &mut rng);
    let min = Montage::parse("name,x,y,z\nA,0,0,1\n").unwrap();
    let mout = bundled::by_name("16").unwrap();
    let w = spatial_weights_plain(&mlp, &min, &mout);
    assert_eq!(w.shape(), &[16, 1]);
    for v in w.data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_mlp_gives_uniform_weights() {
    let mlp = SpatialMlpWeights {
        w1: Tensor::zeros(&[3, 4]),
        b1: Tensor::zeros(&[4]),
        w2: Tensor::zeros(&[4, 1]),
        b2: Tensor::zeros(&[1]),
    };
    let min = bundled::by_name("22").unwrap();
    let mout = bundled::by_name("16").unwrap();
    let w = spatial_weights_plain(&mlp, &min, &mout);
    for v in w.data() {
        assert!((v - 1.0 / 22.0).abs() < 1e-12);
    }
}

/// Straight-line re-implementation with plain loops (independent oracle).
fn weights_reference(mlp: &SpatialMlpWeights, min: &Montage, mout: &Montage) -> Tensor {
    let h = mlp.hidden();
    let (ci, co) = (min.len(), mout.len());
    let mut w = Tensor::zeros(&[co, ci]);
    for i in 0..co {
        let mut logits = vec![0.0; ci];
        for j in 0..ci {
            let (pi, pj) = (mout.coord(i), min.coord(j));
            let dp = [pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]];
            let mut acc = mlp.b2.data()[0];
            for k in 0..h {
                let mut pre = mlp.b1.data()[k];
                for (c, &d) in dp.iter().enumerate() {
                    pre += mlp.w1.at(&[c, k]) * d;
                }
                acc += mlp.w2.at(&[k, 0]) * pre.max(0.0);
            }
            logits[j] = acc;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        for j in 0..ci {
            w.data_mut()[i * ci + j] = (logits[j] - m).exp() / z;
        }
    }
    w
}

#[test]
fn weights_match_reference_and_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mlp = SpatialMlpWeights::init(64, &mut rng);
    let min = bundled::by_name("22").unwrap();
    let mout = bundled::by_name("16").unwrap();
    let w = spatial_weights_plain(&mlp, &min, &mout);
    let want = weights_reference(&mlp, &min, &mout);
    assert!(w.max_abs_diff(&want) < 1e-12);
    for i in 0..16 {
        let row: f64 = (0..22).map(|j| w.at(&[i, j])).sum();
        assert!((row - 1.0).abs() < 1e-6);
        for j in 0..22 {
            assert!(w.at(&[i, j]) > 0.0);
        }
    }
}

#[test]
fn projection_preserves_constants_and_uniform_is_mean() {
    let min = bundled::by_name("14").unwrap();
    let mout = bundled::by_name("16").unwrap();
    let mlp = SpatialMlpWeights {
        w1: Tensor::zeros(&[3, 2]),
        b1: Tensor::zeros(&[2]),
        w2: Tensor::zeros(&[2, 1]),
        b2: Tensor::zeros(&[1]),
    };
    let w = spatial_weights_plain(&mlp, &min, &mout);
    // constant across channels
    let mut g = Graph::inference();
    let x = Tensor::full(&[2, 14, 5], 3.25);
    let (ix, iw) = (g.constant(x), g.constant(w.clone()));
    let y = project(&mut g, ix, iw);
    for v in g.value(y).data() {
        assert!((v - 3.25).abs() < 1e-12);
    }
    // uniform weights -> across-channel mean
    let x = Tensor::new(&[1, 14, 2], (0..28).map(|i| i as f64).collect());
    let (ix, iw) = (g.constant(x.clone()), g.constant(w));
    let y = project(&mut g, ix, iw);
    for t in 0..2 {
        let mean: f64 = (0..14).map(|c| x.at(&[0, c, t])).sum::<f64>() / 14.0;
        for i in 0..16 {
            assert!((g.value(y).at(&[0, i, t]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn input_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mlp = SpatialMlpWeights::init(16, &mut rng);
    let min = bundled::by_name("14").unwrap();
    let mout = bundled::by_name("16").unwrap();
    // permuted montage: reverse channel order (names + coordinate rows)
    let names: Vec<String> = min.names().iter().rev().cloned().collect();
    let mut coords = Vec::new();
    for i in (0..min.len()).rev() {
        coords.extend_from_slice(&min.coord(i));
    }
    let min_rev = Montage::new(names, Tensor::new(&[14, 3], coords)).unwrap();

    let x = Tensor::new(&[1, 14, 3], (0..42).map(|i| (i as f64).sin()).collect());
    let mut x_rev = Tensor::zeros(&[1, 14, 3]);
    for c in 0..14 {
        for t in 0..3 {
            x_rev.data_mut()[(13 - c) * 3 + t] = x.at(&[0, c, t]);
        }
    }
    let mut g = Graph::inference();
    let w = g.constant(spatial_weights_plain(&mlp, &min, &mout));
    let wr = g.constant(spatial_weights_plain(&mlp, &min_rev, &mout));
    let (ix, ixr) = (g.constant(x), g.constant(x_rev));
    let y = project(&mut g, ix, w);
    let yr = project(&mut g, ixr, wr);
    // permuting channels reassociates the softmax/projection sums, so the
    // results agree to rounding, not bit-for-bit
    assert!(g.value(y).max_abs_diff(g.value(yr)) < 1e-12);
}

#[test]
fn gradient_check_through_weights_and_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mlp = SpatialMlpWeights::init(4, &mut rng);
    let min = Montage::parse("name,x,y,z\nA,0,0,1\nB,1,0,0\nC,0,1,0\n").unwrap();
    let mout = Montage::parse("name,x,y,z\nP,0,0.6,0.8\nQ,-1,0,0\n").unwrap();
    let x = Tensor::new(&[1, 3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect());
    check_gradients(
        |g, ids| {
            let vars = samba_core::saie::SpatialMlpVars {
                w1: ids[0],
                b1: ids[1],
                w2: ids[2],
                b2: ids[3],
            };
            let w = spatial_weights(g, &vars, &min, &mout);
            let ix = g.leaf(x.clone(), false);
            let y = project(g, ix, w);
            let s = g.square(y);
            g.mean_all(s)
        },
        &[mlp.w1, mlp.b1, mlp.w2, mlp.b2],
        1e-5,
        1e-4,
        1e-8,
    );
}

#[test]
fn weight_map_export_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mlp = SpatialMlpWeights::init(32, &mut rng);
    let min = bundled::by_name("22").unwrap();
    let mout = bundled::by_name("16").unwrap();
    let w = spatial_weights_plain(&mlp, &min, &mout);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.csv");
    export_weight_map(&w, &mout, &min, &path).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 16 * 22, "header + C_out*C_in rows");

    let back = import_weight_map(&path, &mout, &min).unwrap();
    assert!(w.max_abs_diff(&back) < 1e-9);
    for i in 0..16 {
        let row: f64 = (0..22).map(|j| back.at(&[i, j])).sum();
        assert!((row - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cache_reuses_until_invalidated() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut mlp = SpatialMlpWeights::init(8, &mut rng);
    let min = bundled::by_name("14").unwrap();
    let mout = bundled::by_name("16").unwrap();
    let mut cache = WeightCache::new();
    let w1 = cache.get_or_compute(&mlp, &min, &mout).clone();
    // mutate parameters without invalidating: cached value is returned
    mlp.w1.data_mut()[0] += 1.0;
    let w2 = cache.get_or_compute(&mlp, &min, &mout).clone();
    assert_eq!(w1, w2);
    cache.invalidate();
    let w3 = cache.get_or_compute(&mlp, &min, &mout).clone();
    assert!(w1.max_abs_diff(&w3) > 0.0);
}
