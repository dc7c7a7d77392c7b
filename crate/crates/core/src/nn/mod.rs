//! A compact reverse-mode CNN engine.
//!
//! Networks are plain Rust structs holding [`ParamId`]s into a
//! [`ParamStore`]; a forward pass records operations on a [`Graph`] tape and
//! [`Graph::backward`] returns node and parameter gradients. Convolutions
//! lower to im2col + GEMM and fan out over the batch through
//! [`crate::exec`].

mod adam;
mod graph;
pub mod kernels;
mod layers;
mod params;
mod tensor;

pub use adam::{apply_bn_updates, AdamConfig, AdamState};
pub use graph::{sigmoid, BnUpdate, Gradients, Graph, GraphMode, NodeId, BN_EPSILON};
pub use layers::{BatchNorm, BnReluConv, Builder, Conv, ConvBnRelu, Linear};
pub use params::{Param, ParamCounts, ParamGroup, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar objective `sum(c * f(x))` with fixed random weights `c`.
    fn objective(store: &ParamStore, x: &Tensor, c: &Tensor, f: &dyn Fn(&mut Graph, NodeId) -> NodeId) -> f64 {
        let mut g = Graph::new(
            store,
            GraphMode {
                training: true,
                track_all: true,
                param_grads: true,
            },
        );
        let xi = g.input(x.clone());
        let y = f(&mut g, xi);
        g.value(y).data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    }

    fn check_gradients(store: &mut ParamStore, x: Tensor, f: &dyn Fn(&mut Graph, NodeId) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (xi, y_shape, gx, gp) = {
            let mut g = Graph::new(
                store,
                GraphMode {
                    training: true,
                    track_all: true,
                    param_grads: true,
                },
            );
            let xi = g.input(x.clone());
            let y = f(&mut g, xi);
            let ys = g.value(y).shape();
            let c = random_tensor(ys, &mut rng);
            let grads = g.backward(vec![(y, c)], &[xi]);
            (xi, ys, grads.node(xi).cloned(), grads.params().clone())
        };
        let _ = xi;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c = random_tensor(y_shape, &mut rng);
        let h = 1e-6;
        let gx = gx.expect("input gradient");
        for i in (0..x.data().len()).step_by(3) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(store, &xp, &c, f) - objective(store, &xm, &c, f)) / (2.0 * h);
            let an = gx.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "dx[{i}]: fd {fd} vs analytic {an}");
        }
        for (pid, grad) in gp {
            for j in (0..grad.len()).step_by(2) {
                let orig = store.get(pid).data[j];
                store.get_mut(pid).data[j] = orig + h;
                let fp = objective(store, &x, &c, f);
                store.get_mut(pid).data[j] = orig - h;
                let fm = objective(store, &x, &c, f);
                store.get_mut(pid).data[j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{}[{j}]: fd {fd} vs analytic {}",
                    store.get(pid).name,
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn conv_bn_relu_pool_gradients() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 1);
        let c1 = b.conv(2, 3, 3, true);
        let bn = b.batch_norm(3);
        let c2 = b.conv(3, 2, 1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor([2, 2, 4, 6], &mut rng);
        check_gradients(&mut store, x, &|g, x| {
            let y = c1.apply(g, x);
            let y = bn.apply(g, y);
            let y = g.relu(y);
            let y = c2.apply(g, y);
            let p = g.max_pool2(y);
            let a = g.avg_pool2(y);
            let s = g.add(p, a);
            g.sigmoid(s)
        });
    }

    #[test]
    fn concat_upsample_mul_gradients() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 2);
        let c1 = b.conv(1, 2, 3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor([2, 1, 4, 4], &mut rng);
        check_gradients(&mut store, x, &|g, x| {
            let y = c1.apply(g, x);
            let d = g.avg_pool2(y);
            let u = g.upsample2(d);
            let cat = g.concat(&[y, u, x]);
            let sq = g.mul(cat, cat);
            g.scale(sq, 0.5)
        });
    }

    #[test]
    fn linear_head_gradients() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 3);
        let c1 = b.conv(1, 3, 3, true);
        let lin = b.linear(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor([3, 1, 4, 4], &mut rng);
        check_gradients(&mut store, x, &|g, x| {
            let y = c1.apply(g, x);
            let y = g.relu(y);
            let p = g.global_avg_pool(y);
            lin.apply(g, p)
        });
    }

    #[test]
    fn frozen_batch_norm_uses_running_stats_and_skips_updates() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 4);
        let bn = b.batch_norm(2);
        store.set_encoder_frozen(true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor([2, 2, 3, 3], &mut rng);
        let mut g = Graph::training(&store);
        let xi = g.input(x.clone());
        let y = bn.apply(&mut g, xi);
        assert!(g.bn_updates().is_empty());
        let expected: Vec<f64> = x.data().iter().map(|v| v / (1.0 + BN_EPSILON).sqrt()).collect();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn override_replaces_tagged_value() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        g.set_override("feat", Tensor::full([1, 1, 2, 2], 3.0));
        let x = g.input(Tensor::zeros([1, 1, 2, 2]));
        let t = g.tag("feat", x);
        let y = g.scale(t, 2.0);
        assert_eq!(g.value(y).data(), &[6.0; 4]);
        assert_eq!(g.tag_names(), vec!["feat".to_string()]);
    }

    #[test]
    fn counts_follow_frozen_flag() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 0);
        b.conv(1, 2, 3, true); // 18 + 2
        b.batch_norm(2); // 4 trainable, 4 running
        b.set_group(ParamGroup::Head);
        b.linear(2, 2); // 6
        assert_eq!(store.counts(), ParamCounts { trainable: 30, non_trainable: 4 });
        store.set_encoder_frozen(true);
        assert_eq!(store.counts(), ParamCounts { trainable: 6, non_trainable: 28 });
    }
}
