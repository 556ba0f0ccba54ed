//! Tensors, reverse-mode differentiation, and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{forward_backward, reflect_index, Gradients, Graph, GridTaps, Padding, Var};
pub use tensor::{gemm, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Finite-difference checking of graph gradients in double precision.
pub mod gradcheck {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    }

    /// Magnitudes are floored here before dividing, so near-zero gradients
    /// are judged on absolute error instead of amplified rounding noise.
    const SCALE_FLOOR: f64 = 1e-4;

    /// Central-difference check of every parameter entry. Returns the worst
    /// of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`.
    pub fn max_rel_error<F>(params: &[Tensor<f64>], h: f64, build: F) -> f64
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
    {
        let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
        check_entries(params, h, &all, build)
    }

    /// Like [`max_rel_error`] over at most `per_tensor` random entries of
    /// each parameter, for tensors too large to sweep.
    pub fn max_rel_error_sampled<F>(params: &[Tensor<f64>], h: f64, per_tensor: usize, seed: u64, build: F) -> f64
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
    {
        use rand::seq::index::sample;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<Vec<usize>> = params
            .iter()
            .map(|p| {
                let n = p.numel();
                if n <= per_tensor {
                    (0..n).collect()
                } else {
                    sample(&mut rng, n, per_tensor).into_vec()
                }
            })
            .collect();
        check_entries(params, h, &picks, build)
    }

    fn check_entries<F>(params: &[Tensor<f64>], h: f64, entries: &[Vec<usize>], build: F) -> f64
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
    {
        let (_, analytic) = forward_backward(params, &build).expect("forward/backward");
        let eval = |ps: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone()).unwrap()).collect();
            let out = build(&mut g, &vars).expect("forward");
            g.value(out).item()
        };
        let mut worst = 0.0f64;
        let mut work = params.to_vec();
        for (pi, p) in params.iter().enumerate() {
            for &k in &entries[pi] {
                let orig = p.data()[k];
                work[pi].data_mut()[k] = orig + h;
                let fp = eval(&work);
                work[pi].data_mut()[k] = orig - h;
                let fm = eval(&work);
                work[pi].data_mut()[k] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[pi].data()[k];
                let diff = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs()).max(SCALE_FLOOR);
                worst = worst.max(diff / scale);
            }
        }
        worst
    }

    /// Random linear functional of `out`, so every output entry matters.
    pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, NumericsError> {
        let w = random(g.shape(out), seed, -1.0, 1.0);
        let wv = g.constant(w)?;
        let prod = g.mul(out, wv)?;
        g.sum(prod)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::gradcheck::{max_rel_error, project, random};
    use super::*;

    const TOL: f64 = 1e-3;

    fn check1(shape: &[usize], lo: f64, hi: f64, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var, NumericsError>) {
        let x = random(shape, 7, lo, hi);
        let err = max_rel_error(&[x], 1e-5, |g, v| {
            let y = f(g, v[0])?;
            project(g, y, 99)
        });
        assert!(err <= TOL, "relative error {err}");
    }

    #[test]
    fn square_derivative_is_analytic() {
        let (v, grads) = forward_backward(&[Tensor::<f64>::scalar(3.0)], |g, p| g.mul(p[0], p[0])).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn constant_has_zero_derivative() {
        let (_, grads) = forward_backward(&[Tensor::<f64>::scalar(3.0)], |g, _| {
            g.constant(Tensor::scalar(5.0))
        })
        .unwrap();
        assert_eq!(grads[0].item(), 0.0);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let ps = [Tensor::<f64>::scalar(1.0), Tensor::<f64>::zeros([2, 2])];
        let (_, grads) = forward_backward(&ps, |g, p| g.scale(p[0], 2.0)).unwrap();
        assert_eq!(grads[0].item(), 2.0);
        assert_eq!(grads[1], Tensor::zeros([2, 2]));
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(-1.0)).unwrap();
        let err = g.log(x).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { node: 1, op: "log" }));
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        check1(&[3, 4], -2.0, 2.0, |g, x| g.exp(x));
        check1(&[3, 4], 0.5, 2.0, |g, x| g.log(x));
        check1(&[3, 4], 0.5, 2.0, |g, x| g.sqrt(x));
        check1(&[3, 4], -2.0, 2.0, |g, x| g.square(x));
        check1(&[3, 4], -2.0, 2.0, |g, x| g.relu(x));
        check1(&[3, 4], -2.0, 2.0, |g, x| g.leaky_relu(x, 0.2));
        check1(&[3, 4], -3.0, 3.0, |g, x| g.sigmoid(x));
        check1(&[3, 4], -3.0, 3.0, |g, x| g.softplus(x));
        check1(&[3, 4], -2.0, 2.0, |g, x| g.clamp(x, -1.0, 1.0));
        check1(&[3, 4], -2.0, 2.0, |g, x| g.scale(x, -0.7));
        check1(&[3, 4], -2.0, 2.0, |g, x| g.add_scalar(x, 0.3));
        check1(&[3, 4], -2.0, 2.0, |g, x| g.sum(x));
        check1(&[3, 4], -2.0, 2.0, |g, x| g.mean(x));
        check1(&[2, 3, 4], -2.0, 2.0, |g, x| g.sum_axis(x, 1));
        check1(&[3, 1], -2.0, 2.0, |g, x| g.broadcast_to(x, &[2, 3, 4]));
        check1(&[2, 3, 4], -2.0, 2.0, |g, x| g.reshape(x, &[6, 4]));
        check1(&[2, 5, 3], -2.0, 2.0, |g, x| g.narrow(x, 1, 1, 3));
        check1(&[4, 3], -2.0, 2.0, |g, x| g.gather_rows(x, Arc::from(vec![3, 0, 3, 1])));
    }

    #[test]
    fn binary_primitives_match_finite_differences() {
        let a = random(&[3, 4], 1, -2.0, 2.0);
        let b = random(&[3, 4], 2, 0.5, 2.0);
        type Bin = fn(&mut Graph<f64>, Var, Var) -> Result<Var, NumericsError>;
        let ops: [Bin; 4] = [
            |g, x, y| g.add(x, y),
            |g, x, y| g.sub(x, y),
            |g, x, y| g.mul(x, y),
            |g, x, y| g.div(x, y),
        ];
        for op in ops {
            let err = max_rel_error(&[a.clone(), b.clone()], 1e-5, |g, v| {
                let y = op(g, v[0], v[1])?;
                project(g, y, 5)
            });
            assert!(err <= TOL, "{err}");
        }
    }

    #[test]
    fn linear_algebra_primitives_match_finite_differences() {
        let a = random(&[3, 4], 1, -1.0, 1.0);
        let b = random(&[4, 5], 2, -1.0, 1.0);
        let bias = random(&[5], 3, -1.0, 1.0);
        let err = max_rel_error(&[a.clone(), b.clone()], 1e-5, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 5)
        });
        assert!(err <= TOL);
        let err = max_rel_error(&[a, b, bias], 1e-5, |g, v| {
            let y = g.affine(v[0], v[1], v[2])?;
            project(g, y, 5)
        });
        assert!(err <= TOL);
    }

    #[test]
    fn image_primitives_match_finite_differences() {
        let x = random(&[2, 5, 6], 11, -1.0, 1.0);
        let w = random(&[3, 2, 3, 3], 12, -1.0, 1.0);
        let b = random(&[3], 13, -1.0, 1.0);
        let err = max_rel_error(&[x.clone(), w, b], 1e-5, |g, v| {
            let p = g.reflect_pad(v[0], 1)?;
            let y = g.conv2d(p, v[1], v[2])?;
            project(g, y, 5)
        });
        assert!(err <= TOL, "conv {err}");
        check1(&[2, 5, 6], -1.0, 1.0, |g, x| g.resize_bilinear(x, 9, 4));
        check1(&[2, 8, 6], -1.0, 1.0, |g, x| g.resize_bilinear(x, 4, 3));
        check1(&[3, 4, 5], -1.0, 1.0, |g, x| g.channel_mean(x));
        check1(&[3, 4, 5], -1.0, 1.0, |g, x| g.channel_std(x));
        let k: Arc<[f64]> = Arc::from(vec![0.25, 0.5, 0.25, 0.1, 0.2]);
        for padding in [Padding::Reflect, Padding::Valid] {
            let kk = k.clone();
            check1(&[2, 6, 7], -1.0, 1.0, move |g, x| g.conv1d_axis(x, kk.clone(), 1, padding));
            let kk = k.clone();
            check1(&[2, 6, 7], -1.0, 1.0, move |g, x| g.conv1d_axis(x, kk.clone(), 2, padding));
        }
        let _ = x;
    }

    #[test]
    fn concat_gradient_splits_linearly() {
        let a = random(&[2, 3], 1, -1.0, 1.0);
        let b = random(&[2, 2], 2, -1.0, 1.0);
        let (_, grads) = forward_backward(&[a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            g.sum(c)
        })
        .unwrap();
        assert!(grads[0].data().iter().all(|&x| x == 1.0));
        assert!(grads[1].data().iter().all(|&x| x == 1.0));
        check1(&[2, 3], -1.0, 1.0, |g, x| {
            let y = g.square(x)?;
            g.concat(&[x, y, x], 1)
        });
    }

    #[test]
    fn ray_ops_match_finite_differences() {
        let alpha = random(&[9], 21, 0.05, 0.95);
        let offsets: Arc<[usize]> = Arc::from(vec![0, 4, 4, 9]);
        let o = offsets.clone();
        let err = max_rel_error(&[alpha.clone()], 1e-6, move |g, v| {
            let w = g.ray_weights(v[0], o.clone())?;
            project(g, w, 3)
        });
        assert!(err <= TOL, "weights {err}");
        let o = offsets.clone();
        let err = max_rel_error(&[alpha.clone()], 1e-6, move |g, v| {
            let t = g.ray_residual(v[0], o.clone())?;
            project(g, t, 4)
        });
        assert!(err <= TOL, "residual {err}");
        let x = random(&[9, 3], 22, -1.0, 1.0);
        let o = offsets.clone();
        let err = max_rel_error(&[x], 1e-6, move |g, v| {
            let s = g.segment_sum(v[0], o.clone())?;
            project(g, s, 4)
        });
        assert!(err <= TOL, "segment {err}");
    }

    #[test]
    fn ray_weights_survive_opaque_samples() {
        let alpha = Tensor::<f64>::new([3], vec![0.5, 1.0, 0.3]).unwrap();
        let offsets: Arc<[usize]> = Arc::from(vec![0, 3]);
        let (_, grads) = forward_backward(&[alpha], |g, v| {
            let w = g.ray_weights(v[0], offsets.clone())?;
            project(g, w, 1)
        })
        .unwrap();
        assert!(grads[0].all_finite());
    }

    #[test]
    fn grid_sample_matches_finite_differences() {
        let grid = random(&[2, 3, 3, 3], 5, -1.0, 1.0);
        let taps = GridTaps {
            spatial: [3, 3, 3],
            index: vec![[0, 1, 3, 4, 9, 10, 12, 13], [13, 14, 16, 17, 22, 23, 25, 26]],
            weight: vec![[0.1, 0.2, 0.05, 0.15, 0.1, 0.2, 0.1, 0.1], [0.125; 8]],
        };
        let taps = Arc::new(taps);
        let err = max_rel_error(&[grid], 1e-6, move |g, v| {
            let s = g.grid_sample(v[0], taps.clone())?;
            project(g, s, 8)
        });
        assert!(err <= TOL);
    }

    #[test]
    fn three_layer_chain_matches_finite_differences() {
        let x = random(&[4, 5], 31, -1.0, 1.0);
        let params = vec![
            random(&[5, 6], 32, -0.8, 0.8),
            random(&[6], 33, -0.3, 0.3),
            random(&[6, 6], 34, -0.8, 0.8),
            random(&[6], 35, -0.3, 0.3),
            random(&[6, 2], 36, -0.8, 0.8),
            random(&[2], 37, -0.3, 0.3),
        ];
        let err = max_rel_error(&params, 1e-3, |g, p| {
            let xi = g.constant(x.clone())?;
            let h = g.affine(xi, p[0], p[1])?;
            let h = g.relu(h)?;
            let h = g.affine(h, p[2], p[3])?;
            let h = g.relu(h)?;
            let y = g.affine(h, p[4], p[5])?;
            project(g, y, 38)
        });
        assert!(err <= TOL, "chain {err}");
    }

    #[test]
    fn backward_is_deterministic() {
        let params = vec![random(&[8, 8], 1, -1.0, 1.0), random(&[8], 2, -1.0, 1.0)];
        let run = || {
            forward_backward(&params, |g, p| {
                let x = g.constant(random(&[3, 8], 3, -1.0, 1.0))?;
                let y = g.affine(x, p[0], p[1])?;
                let y = g.sigmoid(y)?;
                g.mean(y)
            })
            .unwrap()
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }
}
