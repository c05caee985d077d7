use hpmixer::cycle::CycleBank;
use hpmixer::patching::{patch_coarse, patch_fine, unpatch_coarse, unpatch_fine, PatchSpec};
use hpmixer::tensor::{grad_check, ParamStore, Tape, Tensor, Var};
use hpmixer::wavelet::{init_filter_bank, iswt, swt, BaseWavelet};
use hpmixer::Result;
use proptest::prelude::*;

const GRAD_TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;

fn tensor(shape: &[usize]) -> impl Strategy<Value = Tensor<f64>> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

/// Weighted sum so ops with constant totals (softmax, layer norm) still get a
/// non-trivial gradient.
fn weighted<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = Tensor::from_fn(&y.shape(), |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0);
    Ok(y.mul(&y.tape().constant(w))?.sum())
}

macro_rules! assert_grads {
    ($f:expr, $inputs:expr) => {{
        let report = grad_check($f, $inputs, EPS, GRAD_TOL).unwrap();
        prop_assert!(report.passed(), "{:?}", report.entries);
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_and_bias_grads(a in tensor(&[3, 4]), b in tensor(&[4, 5]), bias in tensor(&[5])) {
        assert_grads!(|_, v| weighted(v[0].matmul(&v[1])?.add_bias(&v[2])?), &[a, b, bias]);
    }

    #[test]
    fn batched_matmul_grads(a in tensor(&[2, 3, 4]), b in tensor(&[2, 4, 2])) {
        assert_grads!(|_, v| weighted(v[0].matmul(&v[1])?), &[a, b]);
    }

    #[test]
    fn elementwise_grads(a in tensor(&[2, 6]), b in tensor(&[2, 6])) {
        assert_grads!(|_, v| weighted(v[0].mul(&v[1])?.sub(&v[0].scale(0.3))?.add(&v[1])?), &[a, b]);
    }

    #[test]
    fn softmax_and_gelu_grads(a in tensor(&[3, 5])) {
        assert_grads!(|_, v| weighted(v[0].gelu().softmax()), &[a]);
    }

    #[test]
    fn layer_norm_grads(x in tensor(&[3, 6]), g in tensor(&[6]), b in tensor(&[6])) {
        // keep rows away from zero variance, where the normalization is ill-conditioned
        let x = Tensor::from_fn(&[3, 6], |i| x.data()[i] + (i % 6) as f64);
        assert_grads!(|_, v| weighted(v[0].layer_norm(&v[1], &v[2])?), &[x, g, b]);
    }

    #[test]
    fn circular_filter_grads(x in tensor(&[2, 12]), h in tensor(&[4]), dilation in 1usize..4) {
        assert_grads!(
            move |_, v| weighted(v[0].conv1d_circular(&v[1], dilation)?.add(&v[0].corr1d_circular(&v[1], dilation)?)?),
            &[x, h]
        );
    }

    #[test]
    fn layout_grads(x in tensor(&[2, 3, 4])) {
        assert_grads!(
            |_, v| weighted(v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.transpose(0, 1)?.gather_rows(&[5, 0, 0, 3])?),
            &[x]
        );
    }

    #[test]
    fn mse_grads(a in tensor(&[4, 3]), b in tensor(&[4, 3])) {
        assert_grads!(|_, v| v[0].mse_loss(&v[1]), &[a, b]);
    }

    #[test]
    fn permute_round_trips(
        x in tensor(&[2, 3, 4, 5]),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let mut inv = vec![0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let y = x.permute(&perm).unwrap();
        let expect: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        prop_assert_eq!(y.shape(), &expect[..]);
        prop_assert_eq!(y.permute(&inv).unwrap(), x.clone());
        let flat = x.clone().reshape(&[6, 20]).unwrap().reshape(&[2, 3, 4, 5]).unwrap();
        prop_assert_eq!(flat, x);
    }

    #[test]
    fn patching_round_trips(
        b in 1usize..3,
        c in 1usize..4,
        n_co in 1usize..4,
        (coarse, fine) in prop::sample::select(vec![(4usize, 1usize), (4, 2), (6, 3), (8, 4), (12, 6), (12, 4)]),
        seed in 0u64..1000,
    ) {
        let len = n_co * coarse;
        let spec = PatchSpec::new(len, coarse, fine).unwrap();
        let x = Tensor::from_fn(&[b, c, len], |i| ((i as u64 * 31 + seed) % 97) as f64);
        let tape = Tape::eval();
        let v = tape.constant(x.clone());
        let co = patch_coarse(&v, &spec).unwrap();
        let fi = patch_fine(&v, &spec).unwrap();
        prop_assert_eq!(co.shape(), vec![b, c, n_co, coarse]);
        prop_assert_eq!(fi.shape(), vec![b, c, n_co, coarse / fine, fine]);
        // element (co, fi, p) of the fine view is time step co*P_co + fi*P_fi + p
        let fv = fi.value();
        for t in 0..len {
            let (k, r) = (t / coarse, t % coarse);
            let idx = ((k * (coarse / fine)) + r / fine) * fine + r % fine;
            prop_assert_eq!(fv.data()[idx], x.data()[t]);
        }
        prop_assert_eq!(unpatch_coarse(&co, &spec).unwrap().value(), x.clone());
        prop_assert_eq!(unpatch_fine(&fi, &spec).unwrap().value(), x);
    }

    #[test]
    fn cycle_gather_matches_direct_indexing(
        w in 1usize..30,
        c in 1usize..4,
        len in 1usize..50,
        starts in prop::collection::vec(0usize..10_000, 1..5),
    ) {
        let mut store = ParamStore::<f64>::new();
        let bank = CycleBank::new(&mut store, "cycle", w, c).unwrap();
        store.get_mut(bank.q).value = Tensor::from_fn(&[w, c], |i| i as f64 + 0.5);
        let tape = Tape::eval();
        let out = bank.slice(&tape, &store, &starts, len).unwrap().value();
        prop_assert_eq!(out.shape(), &[starts.len(), c, len][..]);
        for (b, &t0) in starts.iter().enumerate() {
            for ch in 0..c {
                for i in 0..len {
                    let q = store.value(bank.q).data()[((t0 + i) % w) * c + ch];
                    prop_assert_eq!(out.data()[(b * c + ch) * len + i], q);
                }
            }
        }
    }

    #[test]
    fn wavelet_reconstructs_and_commutes_with_shift(
        haar in any::<bool>(),
        levels in 1usize..4,
        x in tensor(&[2, 48]),
        shift in 0usize..48,
    ) {
        let base = if haar { BaseWavelet::Haar } else { BaseWavelet::Db2 };
        let mut store = ParamStore::<f64>::new();
        let bank = init_filter_bank(&mut store, "w", base, levels, true, true).unwrap();
        let tape = Tape::eval();
        let v = tape.constant(x.clone());
        let coeffs = swt(&tape, &store, &bank, &v).unwrap();
        let back = iswt(&tape, &store, &bank, &coeffs).unwrap().value();
        prop_assert!(back.max_abs_diff(&x) < 1e-9, "{}", back.max_abs_diff(&x));

        let roll = |t: &Tensor<f64>| {
            Tensor::from_fn(&[2, 48], |i| {
                let (r, k) = (i / 48, i % 48);
                t.data()[r * 48 + (k + 48 - shift) % 48]
            })
        };
        let shifted = swt(&tape, &store, &bank, &tape.constant(roll(&x))).unwrap();
        for (a, b) in coeffs.bands().iter().zip(shifted.bands()) {
            prop_assert!(roll(&a.value()).max_abs_diff(&b.value()) < 1e-9);
        }
    }
}
