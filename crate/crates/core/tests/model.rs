mod common;

use common::{gradcheck_piecewise, random_tensor, rng};
use fedrecon_core::autodiff::BoundParams;
use fedrecon_core::model::{is_encoder_param, DomainIdentifier, UNet, UNetConfig};
use fedrecon_core::{seed, ParamSet, Tensor};
use rand::Rng;

/// `(cout, cin, kernel)` for every conv, read off the documented layer table.
fn layer_list(base: usize, depth: usize) -> Vec<(usize, usize, usize)> {
    let c = |i: usize| base * 2usize.pow(i as u32);
    let mut layers = Vec::new();
    let mut cin = 1;
    for i in 0..depth {
        layers.push((c(i), cin, 3));
        layers.push((c(i), c(i), 3));
        cin = c(i);
    }
    let cl = c(depth - 1);
    layers.push((cl, cl, 3));
    layers.push((cl, cl, 3));
    let mut below = cl;
    for i in (0..depth).rev() {
        layers.push((c(i), below, 3));
        layers.push((c(i), 2 * c(i), 3));
        layers.push((c(i), c(i), 3));
        below = c(i);
    }
    layers.push((1, c(0), 1));
    layers
}

#[test]
fn parameter_count_matches_layer_list() {
    let expected: usize = layer_list(8, 3).iter().map(|&(o, i, k)| o * i * k * k + o).sum();
    assert_eq!(expected, 87977);
    let net = UNet::new(UNetConfig::default()).unwrap();
    let p = net.init(&mut seed::rng(0, &[]));
    assert_eq!(p.numel(), expected);
    assert_eq!(p.len(), 2 * layer_list(8, 3).len());
    for depth in 2..5 {
        let cfg = UNetConfig { base_channels: 4, depth, ..Default::default() };
        let p = UNet::new(cfg).unwrap().init(&mut seed::rng(0, &[]));
        let n: usize = layer_list(4, depth).iter().map(|&(o, i, k)| o * i * k * k + o).sum();
        assert_eq!(p.numel(), n);
    }
}

#[test]
fn encoder_namespace_is_a_prefix_split() {
    let p = UNet::new(UNetConfig::default()).unwrap().init(&mut seed::rng(0, &[]));
    let enc: Vec<&str> = p.names().filter(|n| is_encoder_param(n)).collect();
    assert_eq!(enc.len(), 2 * (3 * 2 + 2));
    assert!(enc.iter().all(|n| n.starts_with("enc") || n.starts_with("bottleneck.")));
    assert!(p.names().filter(|n| n.starts_with("dec")).all(|n| !is_encoder_param(n)));
}

#[test]
fn params_round_trip_through_bytes() {
    let p = UNet::new(UNetConfig::default()).unwrap().init(&mut seed::rng(9, &[]));
    assert!(ParamSet::decode(&p.encode()).unwrap().bit_eq(&p));
}

fn names_and_values(p: &ParamSet) -> (Vec<String>, Vec<Tensor>) {
    p.iter().map(|(n, t)| (n.to_string(), t.detached())).unzip()
}

#[test]
fn reconstruction_loss_gradient_matches_finite_differences() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let (mut checked, mut skipped) = (0, 0);
    let mut per_tensor = vec![0; net.init(&mut seed::rng(0, &[])).len()];
    for s in 0..20 {
        let mut r = rng(1000 + s);
        let params = net.init(&mut seed::rng(s, &[]));
        let x = random_tensor(&mut r, &[1, 1, 32, 32], 1.0);
        let y = random_tensor(&mut r, &[1, 1, 32, 32], 1.0);
        let (names, values) = names_and_values(&params);
        let report = gradcheck_piecewise(&values, 2, 8, s, |tape, vars| {
            let bound = BoundParams::from_vars(names.clone(), vars.to_vec())?;
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let (pred, _) = net.forward(tape, &bound, xv)?;
            let l1 = tape.l1_loss(pred, yv)?;
            tape.scale(l1, 1.0 / 1024.0)
        });
        checked += report.checked;
        skipped += report.skipped;
        for (acc, v) in per_tensor.iter_mut().zip(&report.per_input) {
            *acc += v;
        }
    }
    println!("reconstruction FD: {checked} coordinates checked, {skipped} straddled a kink");
    assert!(per_tensor.iter().all(|&n| n > 0), "valid checks per tensor: {per_tensor:?}");
    assert!(checked > 20 * per_tensor.len());
}

#[test]
fn identifier_gradient_matches_finite_differences() {
    let ident = DomainIdentifier::for_unet(&UNetConfig::default(), 16).unwrap();
    for s in 0..20 {
        let mut r = rng(2000 + s);
        let params = ident.init(&mut seed::rng(s, &[]));
        let n = r.random_range(1..4);
        let z = random_tensor(&mut r, &[n, 32, 4, 4], 1.0);
        let (names, mut values) = names_and_values(&params);
        values.push(z);
        let report = gradcheck_piecewise(&values, 24, 24, s, |tape, vars| {
            let (pv, zv) = vars.split_at(vars.len() - 1);
            let bound = BoundParams::from_vars(names.clone(), pv.to_vec())?;
            let p = ident.forward(tape, &bound, zv[0])?;
            let terms = tape.bce_terms(p, 1.0)?;
            tape.mean(terms)
        });
        assert!(report.per_input.iter().all(|&n| n > 0));
    }
}
