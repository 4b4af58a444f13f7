//! Finite-difference checks of every differentiable op on the tape.

use endouda_nn::{Graph, NodeId, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds a graph from `inputs` (all variables) and returns the output node.
type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

fn projected(build: &Build, inputs: &[Tensor], probe: &Tensor) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids).unwrap();
    g.value(out)
        .data()
        .iter()
        .zip(probe.data())
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

fn check(build: &Build, inputs: Vec<Tensor>, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids).unwrap();
    let probe = Tensor::randn(g.value(out).shape(), 1.0, &mut rng);
    let grads = g.backward(vec![(out, probe.clone())]).unwrap();

    let h = 1e-2f32;
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("gradient reaches every input").clone();
        for idx in (0..inputs[which].len()).step_by(1 + inputs[which].len() / 23) {
            let mut plus = inputs.clone();
            plus[which].data_mut()[idx] += h;
            let mut minus = inputs.clone();
            minus[which].data_mut()[idx] -= h;
            let fd = (projected(build, &plus, &probe) - projected(build, &minus, &probe)) / (2.0 * h as f64);
            let an = analytic.data()[idx] as f64;
            let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
            assert!(err < tol, "input {which} idx {idx}: fd {fd} vs analytic {an}");
        }
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conv2d_strided_and_padded() {
    for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
        check(
            &move |g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad),
            vec![rand_t(&[2, 3, 6, 6], 1), rand_t(&[4, 3, k, k], 2), rand_t(&[4], 3)],
            2e-2,
        );
    }
}

#[test]
fn linear_layer() {
    check(
        &|g, ids| g.linear(ids[0], ids[1], Some(ids[2])),
        vec![rand_t(&[3, 5], 4), rand_t(&[7, 5], 5), rand_t(&[7], 6)],
        1e-2,
    );
}

#[test]
fn pointwise_activations() {
    check(&|g, ids| Ok(g.leaky_relu(ids[0], 0.2)), vec![rand_t(&[2, 9], 7)], 1e-2);
    check(&|g, ids| Ok(g.tanh(ids[0])), vec![rand_t(&[2, 9], 8)], 1e-2);
    check(&|g, ids| Ok(g.sigmoid(ids[0])), vec![rand_t(&[2, 9], 9)], 1e-2);
    check(&|g, ids| Ok(g.exp(ids[0])), vec![rand_t(&[2, 9], 10)], 1e-2);
    check(&|g, ids| Ok(g.scale(ids[0], -1.5)), vec![rand_t(&[2, 9], 11)], 1e-2);
}

#[test]
fn binary_and_shape_ops() {
    check(&|g, ids| g.add(ids[0], ids[1]), vec![rand_t(&[2, 4], 12), rand_t(&[2, 4], 13)], 1e-2);
    check(&|g, ids| g.mul(ids[0], ids[1]), vec![rand_t(&[2, 4], 14), rand_t(&[2, 4], 15)], 1e-2);
    check(&|g, ids| g.upsample2x(ids[0]), vec![rand_t(&[2, 2, 3, 3], 16)], 1e-2);
    check(
        &|g, ids| g.concat_channels(ids[0], ids[1]),
        vec![rand_t(&[2, 2, 3, 3], 17), rand_t(&[2, 1, 3, 3], 18)],
        1e-2,
    );
    check(&|g, ids| g.reshape(ids[0], &[2, 18]), vec![rand_t(&[2, 2, 3, 3], 19)], 1e-2);
}

#[test]
fn composite_network_path() {
    // conv -> leaky -> upsample -> concat -> conv -> tanh, the decoder pattern
    check(
        &|g, ids| {
            let h = g.conv2d(ids[0], ids[1], None, 2, 1)?;
            let h = g.leaky_relu(h, 0.2);
            let h = g.upsample2x(h)?;
            let h = g.concat_channels(h, ids[2])?;
            let h = g.conv2d(h, ids[3], None, 1, 1)?;
            Ok(g.tanh(h))
        },
        vec![
            rand_t(&[1, 2, 4, 4], 20),
            rand_t(&[3, 2, 3, 3], 21),
            rand_t(&[1, 1, 4, 4], 22),
            Tensor::randn(&[2, 4, 3, 3], 0.3, &mut ChaCha8Rng::seed_from_u64(23)),
        ],
        2e-2,
    );
}

#[test]
fn shared_parameter_accumulates_one_gradient() {
    let w = Tensor::new(&[1, 1], vec![2.0]).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let w1 = g.param("w", &w);
    let w2 = g.param("w", &w);
    assert_eq!(w1, w2);
    let a = g.linear(x, w1, None).unwrap();
    let b = g.linear(x, w2, None).unwrap();
    let y = g.add(a, b).unwrap();
    let grads = g.backward(vec![(y, Tensor::full(&[1, 1], 1.0))]).unwrap();
    let pg = grads.param_grads();
    assert_eq!(pg["w"].data(), &[6.0]);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut g = Graph::new();
    g.freeze("enc.");
    let x = g.variable(Tensor::full(&[1, 2], 1.0));
    let w = g.param("enc.w", &Tensor::full(&[2, 2], 0.5));
    let v = g.param("head.w", &Tensor::full(&[1, 2], 0.5));
    let h = g.linear(x, w, None).unwrap();
    let y = g.linear(h, v, None).unwrap();
    let grads = g.backward(vec![(y, Tensor::full(&[1, 1], 1.0))]).unwrap();
    assert!(grads.get(x).is_some());
    let pg = grads.param_grads();
    assert!(pg.contains_key("head.w"));
    assert!(!pg.contains_key("enc.w"));
}
