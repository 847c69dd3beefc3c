mod common;

use common::{fill_param, randn, scramble, weighted_sum, H, SEEDS, TOL};
use moe_restore::gradcheck::{finite_diff_check, finite_diff_check_all_params};
use moe_restore::mst::{Msa, Mst, MstConfig};
use moe_restore::restormer::{Gdfn, GdfnConfig, Mdta, MdtaConfig};
use moe_restore::{Graph, ParamStore, Tensor};

fn input_and_params_check<B>(
    shape: &[usize],
    build: impl Fn(&mut ParamStore<f64>) -> B,
    run: impl Fn(&B, &mut Graph<f64>, &ParamStore<f64>, moe_restore::Var) -> moe_restore::Result<moe_restore::Var>,
) {
    for seed in SEEDS {
        let mut ps = ParamStore::new(seed);
        let block = build(&mut ps);
        scramble(&mut ps, seed + 100, 0.5);
        let x = randn(shape, seed);
        let err = finite_diff_check(
            |g, xv| {
                let y = run(&block, g, &ps, xv)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "input grad, seed {seed}: {err}");
        let err = finite_diff_check_all_params(
            |g, store| {
                let xv = g.constant(x.clone());
                let y = run(&block, g, store, xv)?;
                weighted_sum(g, y, seed)
            },
            &ps,
            H,
        )
        .unwrap();
        assert!(err < TOL, "param grad, seed {seed}: {err}");
    }
}

#[test]
fn mdta_shape_and_row_stochastic() {
    let mut ps = ParamStore::<f64>::new(0);
    let mdta = Mdta::new(&mut ps, "a", MdtaConfig::new(8, 2)).unwrap();
    scramble(&mut ps, 4, 0.5);
    let mut g = Graph::new();
    let x = g.constant(randn(&[1, 8, 8, 8], 1));
    let (y, attn) = mdta.forward_cross(&mut g, &ps, x, x).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 8, 8]);
    assert_eq!(g.shape(attn), &[1, 2, 4, 4]);
    for row in g.data(attn).chunks(4) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn mdta_rejects_bad_config_and_channels() {
    let mut ps = ParamStore::<f32>::new(0);
    assert!(Mdta::new(&mut ps, "a", MdtaConfig::new(6, 4)).is_err());
    let mdta = Mdta::new(&mut ps, "b", MdtaConfig::new(4, 2)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(mdta.forward(&mut g, &ps, x).is_err());
}

#[test]
fn mdta_gradients() {
    input_and_params_check(
        &[1, 4, 4, 4],
        |ps| Mdta::new(ps, "a", MdtaConfig::new(4, 1)).unwrap(),
        |b, g, ps, x| b.forward(g, ps, x),
    );
}

#[test]
fn mdta_temperature_gets_gradient() {
    let mut ps = ParamStore::<f64>::new(3);
    let mdta = Mdta::new(&mut ps, "a", MdtaConfig::new(8, 2)).unwrap();
    scramble(&mut ps, 5, 0.5);
    fill_param(&mut ps, "a.temperature", 1.0);
    let mut g = Graph::new();
    let x = g.constant(randn(&[1, 8, 4, 4], 2));
    let y = mdta.forward(&mut g, &ps, x).unwrap();
    let loss = weighted_sum(&mut g, y, 1).unwrap();
    let grads = g.backward(loss).unwrap();
    let gt = grads.param(mdta.temperature).unwrap();
    assert!(gt.iter().all(|&v| v != 0.0), "{gt:?}");
}

#[test]
fn gdfn_hidden_width() {
    assert_eq!(GdfnConfig::new(8).hidden(), 21);
    let mut ps = ParamStore::<f32>::new(0);
    let f = Gdfn::new(&mut ps, "f", GdfnConfig::new(8)).unwrap();
    assert_eq!(ps.tensor(f.in1.w).shape(), &[21, 8]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 8, 4, 4]));
    let y = f.forward(&mut g, &ps, x).unwrap();
    assert_eq!(g.shape(y), &[2, 8, 4, 4]);
}

#[test]
fn gdfn_zero_projection_is_zero() {
    let mut ps = ParamStore::<f64>::new(0);
    let f = Gdfn::new(&mut ps, "f", GdfnConfig::new(4)).unwrap();
    scramble(&mut ps, 1, 0.5);
    fill_param(&mut ps, "f.out.w", 0.0);
    fill_param(&mut ps, "f.out.b", 0.0);
    let mut g = Graph::new();
    let x = g.constant(randn(&[1, 4, 4, 4], 7));
    let y = f.forward(&mut g, &ps, x).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn gdfn_gradients() {
    input_and_params_check(
        &[1, 4, 4, 4],
        |ps| Gdfn::new(ps, "f", GdfnConfig::new(4)).unwrap(),
        |b, g, ps, x| b.forward(g, ps, x),
    );
}

#[test]
fn msa_saturated_gates_reduce_to_plain_attention() {
    let mut ps = ParamStore::<f64>::new(0);
    let msa = Msa::new(&mut ps, "m", 4, 2).unwrap();
    scramble(&mut ps, 2, 0.5);
    fill_param(&mut ps, "m.wd.w", 0.0);
    fill_param(&mut ps, "m.wd.b", 60.0);
    fill_param(&mut ps, "m.wl2.w", 0.0);
    fill_param(&mut ps, "m.wl2.b", 60.0);

    let x = randn(&[1, 4, 4, 4], 3);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gated = msa.forward(&mut g, &ps, xv).unwrap();
    let gated = g.value(gated).clone();

    let mut g = Graph::new();
    let xv = g.constant(x);
    let p = msa.wl1.forward(&mut g, &ps, xv).unwrap();
    let a = msa.mdta.forward(&mut g, &ps, p).unwrap();
    let plain = msa.wl3.forward(&mut g, &ps, a).unwrap();
    assert!(gated.max_abs_diff(g.value(plain)) < 1e-5);
}

#[test]
fn msa_closed_output_gate_annihilates() {
    let mut ps = ParamStore::<f64>::new(0);
    let msa = Msa::new(&mut ps, "m", 4, 1).unwrap();
    scramble(&mut ps, 2, 0.5);
    fill_param(&mut ps, "m.wl2.w", 0.0);
    fill_param(&mut ps, "m.wl2.b", -800.0);
    fill_param(&mut ps, "m.wl3.b", 0.0);
    for seed in SEEDS {
        let mut g = Graph::new();
        let x = g.constant(randn(&[1, 4, 4, 4], seed));
        let y = msa.forward(&mut g, &ps, x).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn msa_gradients() {
    input_and_params_check(&[1, 4, 4, 4], |ps| Msa::new(ps, "m", 4, 1).unwrap(), |b, g, ps, x| b.forward(g, ps, x));
}

#[test]
fn mst_zero_projections_are_identity() {
    let mut ps = ParamStore::<f32>::new(0);
    let mst = Mst::new(&mut ps, "b", MstConfig::new(8, 2)).unwrap();
    for name in ["b.msa.wl3.w", "b.msa.wl3.b", "b.gdfn.out.w", "b.gdfn.out.b"] {
        let id = ps.find(name).unwrap();
        ps.tensor_mut(id).data_mut().fill(0.0);
    }
    let x = common::randn32(&[1, 8, 8, 8], 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = mst.forward(&mut g, &ps, xv).unwrap();
    assert_eq!(g.data(y), x.data());
}

#[test]
fn mst_all_zero_parameters_are_identity() {
    let mut ps = ParamStore::<f32>::new(0);
    let mst = Mst::new(&mut ps, "b", MstConfig::new(4, 1)).unwrap();
    ps.iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
    let x = common::randn32(&[1, 4, 4, 4], 2);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = mst.forward(&mut g, &ps, xv).unwrap();
    assert_eq!(g.data(y), x.data());
}

#[test]
fn mst_preserves_shape() {
    for (c, h) in [(4, 1), (8, 2), (16, 4)] {
        let mut ps = ParamStore::<f32>::new(0);
        let mst = Mst::new(&mut ps, "b", MstConfig::new(c, h)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(common::randn32(&[2, c, 8, 4], 3));
        let y = mst.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.shape(y), &[2, c, 8, 4]);
    }
}

#[test]
fn mst_gradients() {
    input_and_params_check(
        &[1, 4, 4, 4],
        |ps| Mst::new(ps, "b", MstConfig::new(4, 1)).unwrap(),
        |b, g, ps, x| b.forward(g, ps, x),
    );
}

#[test]
fn gate_map_values() {
    let mut ps = ParamStore::<f32>::new(0);
    let mst = Mst::new(&mut ps, "b", MstConfig::new(8, 2)).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(common::randn32(&[2, 8, 4, 4], 1));
    let map = mst.gate_map(&mut g, &ps, x).unwrap();
    assert_eq!(map.shape(), &[2, 1, 4, 4]);
    assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));

    ps.iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
    let mut g = Graph::inference();
    let x = g.constant(common::randn32(&[2, 8, 4, 4], 1));
    let map = mst.gate_map(&mut g, &ps, x).unwrap();
    assert!(map.data().iter().all(|&v| v == 0.5));
}
