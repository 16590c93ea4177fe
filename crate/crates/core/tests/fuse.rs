mod common;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segchange::backbone::FeaturePyramid;
use segchange::fuse::{difference, fpn_fuse, DiffParams, DiffPyramid, FpnParams};
use segchange::nn::ParamStore;

use common::*;

fn pyramid(widths: [usize; 4], side: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid {
    let levels = (0..4)
        .map(|i| rand_tensor(&[1, widths[i], side >> i, side >> i], rng))
        .collect();
    FeaturePyramid::new(levels, side * 4, side * 4).unwrap()
}

#[test]
fn difference_is_bit_symmetric() {
    let mut store = ParamStore::new(DType::F64);
    let widths = [2, 3, 3, 4];
    let dp = DiffParams::new(&mut store, "fuse.diff", widths, 5, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, b) = (pyramid(widths, 8, &mut rng), pyramid(widths, 8, &mut rng));
    let ab = difference(&a, &b, &dp).unwrap();
    let ba = difference(&b, &a, &dp).unwrap();
    for (x, y) in ab.levels().iter().zip(ba.levels()) {
        assert_eq!(to_vec(x), to_vec(y));
    }
}

#[test]
fn coarse_impulse_spreads_over_its_footprint() {
    let mut store = ParamStore::new(DType::F64);
    let fpn = FpnParams::new(&mut store, "fuse.fpn", 1, 1, 0).unwrap();
    let set = |t: &candle_core::Var, v: Tensor| t.set(&v.reshape(t.dims()).unwrap()).unwrap();
    let dev = Device::Cpu;
    for l in &fpn.laterals {
        set(&l.weight, Tensor::ones(1, DType::F64, &dev).unwrap());
        set(&l.bias, Tensor::zeros(1, DType::F64, &dev).unwrap());
    }
    let mut k = vec![0.0f64; 9];
    k[4] = 1.0;
    set(&fpn.smooth.weight, Tensor::from_vec(k, 9, &dev).unwrap());
    set(&fpn.smooth.bias, Tensor::zeros(1, DType::F64, &dev).unwrap());

    let side = 16;
    let mut levels: Vec<Tensor> = (0..4)
        .map(|i| Tensor::zeros((1, 1, side >> i, side >> i), DType::F64, &dev).unwrap())
        .collect();
    let mut coarse = vec![0.0; 4];
    coarse[1] = 1.0; // row 0, col 1 of the 2x2 coarsest level
    levels[3] = Tensor::from_vec(coarse, (1, 1, 2, 2), &dev).unwrap();
    let out = to_vec(&fpn_fuse(&DiffPyramid::new(levels).unwrap(), &fpn).unwrap().features);
    for r in 0..side {
        for c in 0..side {
            let want = if r < 8 && c >= 8 { 1.0 } else { 0.0 };
            assert_eq!(out[r * side + c], want, "({r}, {c})");
        }
    }
}

#[test]
fn difference_and_fpn_gradients() {
    let mut store = ParamStore::new(DType::F64);
    let widths = [2, 2, 3, 3];
    let dp = DiffParams::new(&mut store, "fuse.diff", widths, 3, 1).unwrap();
    let fp = FpnParams::new(&mut store, "fuse.fpn", 3, 2, 1).unwrap();
    randomize(&store, 1.0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (pyramid(widths, 8, &mut rng), pyramid(widths, 8, &mut rng));
    let f = || weighted_sum(&fpn_fuse(&difference(&a, &b, &dp).unwrap(), &fp).unwrap().features, 3);
    let r = gradcheck(&store_vars(&store), f, 10, 5);
    assert!(r.max_rel < GRAD_TOL, "{} ({})", r.max_rel, r.worst);
}

#[test]
fn rejects_mismatched_levels() {
    let mut store = ParamStore::new(DType::F64);
    let dp = DiffParams::new(&mut store, "d", [1, 1, 1, 1], 1, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = pyramid([1, 1, 1, 1], 8, &mut rng);
    let b = pyramid([1, 1, 1, 1], 16, &mut rng);
    assert!(difference(&a, &b, &dp).is_err());
    let dev = Device::Cpu;
    let z = |s| Tensor::zeros((1, 1, s, s), DType::F64, &dev).unwrap();
    assert!(DiffPyramid::new(vec![z(8), z(3)]).is_err());
}
