//! Style-conditioned weight prediction and the affine stack it drives.
//!
//! A style code feeds five independent branches; branch `k` emits the flat
//! weights and bias of layer `k` of a small ReLU network inserted in front
//! of the color head. Flat blocks store the `[in, out]` weight matrix
//! row-major followed by the bias.

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{embed_direction, Mlp, RgbNet, VoxelField};
use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};
use crate::render::ColorHead;

pub const STYLE_CODE_DIM: usize = 512;
pub const HYPERNET_HIDDEN: usize = 64;

/// Widths of the predicted layers for a color head taking `in_dim` inputs.
pub fn hyper_linear_dims(in_dim: usize) -> [usize; 6] {
    [in_dim, 128, 128, 128, 64, in_dim]
}

/// Flat output length of each branch.
pub fn branch_sizes(dims: &[usize]) -> Vec<usize> {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet<T: Real = f32> {
    pub branches: Vec<Mlp<T>>,
    /// Widths of the predicted network, input first.
    pub linear_dims: Vec<usize>,
}

impl<T: Real> HyperNet<T> {
    /// Default layout: 512-d code, 64-wide branches, predicted network for
    /// a 39-input color head. With `final_relu` the branch outputs pass
    /// through ReLU as well.
    pub fn uniform(in_dim: usize, final_relu: bool, rng: &mut impl Rng) -> Self {
        Self::with_dims(STYLE_CODE_DIM, HYPERNET_HIDDEN, &hyper_linear_dims(in_dim), final_relu, rng)
    }

    pub fn with_dims(code_dim: usize, hidden: usize, linear_dims: &[usize], final_relu: bool, rng: &mut impl Rng) -> Self {
        let branches = branch_sizes(linear_dims)
            .into_iter()
            .map(|n| Mlp::uniform(&[code_dim, hidden, hidden, n], final_relu, rng))
            .collect();
        Self {
            branches,
            linear_dims: linear_dims.to_vec(),
        }
    }

    pub fn zeros(in_dim: usize, final_relu: bool) -> Self {
        let dims = hyper_linear_dims(in_dim);
        Self {
            branches: branch_sizes(&dims)
                .into_iter()
                .map(|n| Mlp::zeros(&[STYLE_CODE_DIM, HYPERNET_HIDDEN, HYPERNET_HIDDEN, n], final_relu))
                .collect(),
            linear_dims: dims.to_vec(),
        }
    }

    pub fn code_dim(&self) -> usize {
        self.branches[0].layers[0].fan_in()
    }

    pub fn output_sizes(&self) -> Vec<usize> {
        self.branches.iter().map(|b| *b.dims().last().unwrap()).collect()
    }

    pub fn cast<U: Real>(&self) -> HyperNet<U> {
        HyperNet {
            branches: self.branches.iter().map(Mlp::cast).collect(),
            linear_dims: self.linear_dims.clone(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.branches.iter().flat_map(Mlp::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.branches.iter_mut().flat_map(Mlp::tensors_mut).collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Vec<(Var, Var)>>, NumericsError> {
        self.branches.iter().map(|b| b.bind(g, trainable)).collect()
    }

    /// Predicted layers on the graph from a `[1, code_dim]` code.
    pub fn predict_graph(&self, g: &mut Graph<T>, bound: &[Vec<(Var, Var)>], code: Var) -> Result<Vec<(Var, Var)>, NumericsError> {
        let mut layers = Vec::with_capacity(self.branches.len());
        for (k, (branch, b)) in self.branches.iter().zip(bound).enumerate() {
            let flat = Mlp::forward(g, b, branch.final_relu, code)?;
            let (fan_in, fan_out) = (self.linear_dims[k], self.linear_dims[k + 1]);
            let w = g.narrow(flat, 1, 0, fan_in * fan_out)?;
            let w = g.reshape(w, &[fan_in, fan_out])?;
            let bias = g.narrow(flat, 1, fan_in * fan_out, fan_out)?;
            let bias = g.reshape(bias, &[fan_out])?;
            layers.push((w, bias));
        }
        Ok(layers)
    }

    pub fn predict_weights(&self, code: &[T]) -> Result<HyperWeights<T>> {
        if code.len() != self.code_dim() {
            return Err(Error::invalid(format!(
                "style code has {} entries, expected {}",
                code.len(),
                self.code_dim()
            )));
        }
        let flats = self.branches.iter().map(|b| b.eval(code, 1)).collect();
        HyperWeights::from_flat(&self.linear_dims, flats)
    }
}

/// Graph form of the predicted stack: `[N, in] -> [N, in]`, ReLU after
/// every layer.
pub fn hyper_linear_graph<T: Real>(g: &mut Graph<T>, layers: &[(Var, Var)], x: Var) -> Result<Var, NumericsError> {
    Mlp::forward(g, layers, true, x)
}

/// Predicted layers for one style.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperWeights<T: Real = f32> {
    pub layers: Mlp<T>,
}

impl<T: Real> HyperWeights<T> {
    pub fn from_flat(dims: &[usize], flats: Vec<Vec<T>>) -> Result<Self> {
        let sizes = branch_sizes(dims);
        if flats.len() != sizes.len() || flats.iter().zip(&sizes).any(|(f, &n)| f.len() != n) {
            return Err(Error::invalid(format!(
                "flat blocks {:?} do not match sizes {sizes:?}",
                flats.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        let layers = flats
            .into_iter()
            .zip(dims.windows(2))
            .map(|(mut f, w)| {
                let bias = f.split_off(w[0] * w[1]);
                Ok(crate::field::Linear {
                    weight: Tensor::new([w[0], w[1]], f)?,
                    bias: Tensor::new([w[1]], bias)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers: Mlp {
                layers,
                final_relu: true,
            },
        })
    }

    pub fn flatten(&self) -> Vec<Vec<T>> {
        self.layers
            .layers
            .iter()
            .map(|l| l.weight.data().iter().chain(l.bias.data()).copied().collect())
            .collect()
    }

    pub fn apply(&self, feat: &[T]) -> Result<Vec<T>> {
        let want = self.layers.layers[0].fan_in();
        if feat.len() != want {
            return Err(Error::invalid(format!("expected {want} inputs, got {}", feat.len())));
        }
        Ok(self.layers.eval(feat, 1))
    }
}

/// Applies predicted weights to one shading input.
pub fn hyper_linear<T: Real>(feat: &[T], weights: &HyperWeights<T>) -> Result<Vec<T>> {
    weights.apply(feat)
}

/// Color head that passes shading inputs through the predicted stack first.
pub struct StyledHead<'a> {
    pub rgbnet: &'a RgbNet,
    pub weights: &'a HyperWeights,
}

impl ColorHead for StyledHead<'_> {
    fn in_dim(&self) -> usize {
        self.rgbnet.in_dim()
    }

    fn shade(&self, g: &mut Graph<f32>, x: Var) -> Result<Var, NumericsError> {
        let hl = self.weights.layers.bind(g, false)?;
        let h = hyper_linear_graph(g, &hl, x)?;
        let layers = self.rgbnet.mlp.bind(g, false)?;
        RgbNet::forward(g, &layers, h)
    }
}

/// Stylized color of the field at `x` seen along `d`.
pub fn stylized_query_color(
    x: [f32; 3],
    d: [f32; 3],
    code: &[f32],
    field: &VoxelField,
    hypernet: &HyperNet,
    rgbnet: &RgbNet,
    dir_freqs: usize,
) -> Result<[f32; 3]> {
    let weights = hypernet.predict_weights(code)?;
    let mut feat = field.interp_feature(x);
    feat.extend(embed_direction(d, dir_freqs)?);
    rgbnet.query_color(&weights.apply(&feat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn branch_and_layer_extents() {
        let net = HyperNet::<f32>::zeros(39, false);
        assert_eq!(net.output_sizes(), vec![5120, 16512, 16512, 8256, 2535]);
        assert_eq!(2535, 64 * 39 + 39);
        for b in &net.branches {
            assert_eq!(&b.dims()[..3], &[512, 64, 64]);
        }
        let w = net.predict_weights(&[0.7; 512]).unwrap();
        let dims: Vec<_> = w.layers.layers.iter().map(|l| (l.fan_in(), l.fan_out())).collect();
        assert_eq!(dims, vec![(39, 128), (128, 128), (128, 128), (128, 64), (64, 39)]);
        assert!(w.flatten().iter().all(|f| f.iter().all(|&v| v == 0.0)));
        assert!(net.predict_weights(&[0.0; 511]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let dims = [3, 4, 2];
        let flats: Vec<Vec<f32>> = branch_sizes(&dims)
            .iter()
            .map(|&n| (0..n).map(|i| i as f32 * 0.5).collect())
            .collect();
        let w = HyperWeights::from_flat(&dims, flats.clone()).unwrap();
        assert_eq!(w.flatten(), flats);
        assert_eq!(w.layers.layers[0].bias.data(), &[6.0, 6.5, 7.0, 7.5]);
        assert!(HyperWeights::<f32>::from_flat(&dims, vec![vec![0.0; 16]]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let w = HyperNet::<f32>::zeros(39, false).predict_weights(&[1.0; 512]).unwrap();
        assert_eq!(hyper_linear(&[0.3; 39], &w).unwrap(), vec![0.0; 39]);
        assert!(hyper_linear(&[0.3; 40], &w).is_err());
    }

    #[test]
    fn identity_blocks_reproduce_hand_chain() {
        // layer 0 copies the 39 inputs into the first 39 of 128 units, the
        // middle layers pass them through, layer 3 keeps the first 39 of 64
        // and adds 1, layer 4 doubles.
        let dims = hyper_linear_dims(39);
        let mut flats = Vec::new();
        for (k, w) in dims.windows(2).enumerate() {
            let (i, o) = (w[0], w[1]);
            let mut f = vec![0.0f32; i * o + o];
            for j in 0..39 {
                f[j * o + j] = if k == 4 { 2.0 } else { 1.0 };
            }
            if k == 3 {
                for j in 0..39 {
                    f[i * o + j] = 1.0;
                }
            }
            flats.push(f);
        }
        let w = HyperWeights::from_flat(&dims, flats).unwrap();
        let x: Vec<f32> = (0..39).map(|i| (i as f32 - 19.0) / 10.0).collect();
        let got = hyper_linear(&x, &w).unwrap();
        for (g, xi) in got.iter().zip(&x) {
            assert_eq!(*g, 2.0 * (xi.max(0.0) + 1.0));
        }
    }

    fn tiny_field(seed: u64) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Tensor::from_fn([1, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let f = Tensor::from_fn([12, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        VoxelField::from_parts([-0.5; 3], [0.5; 3], d, f, 0.0).unwrap()
    }

    #[test]
    fn zero_hypernet_gives_constant_color() {
        let field = tiny_field(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rgb = RgbNet::<f32>::uniform(39, &mut rng);
        let hn = HyperNet::zeros(39, false);
        let want = rgb.query_color(&[0.0; 39]).unwrap();
        for (x, d) in [([0.1, 0.2, -0.3], [0.0, 0.0, 1.0]), ([-0.4, 0.0, 0.4], [0.6, 0.8, 0.0])] {
            let c = stylized_query_color(x, d, &[0.5; 512], &field, &hn, &rgb, 4).unwrap();
            assert_eq!(c, want);
        }
    }

    #[test]
    fn different_codes_give_different_colors() {
        let field = tiny_field(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rgb = RgbNet::<f32>::uniform(39, &mut rng);
        let hn = HyperNet::uniform(39, false, &mut rng);
        for _ in 0..5 {
            let a: Vec<f32> = (0..512).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f32> = (0..512).map(|_| rng.random_range(0.0..1.0)).collect();
            let ca = stylized_query_color([0.1, 0.0, 0.2], [0.0, 1.0, 0.0], &a, &field, &hn, &rgb, 4).unwrap();
            let cb = stylized_query_color([0.1, 0.0, 0.2], [0.0, 1.0, 0.0], &b, &field, &hn, &rgb, 4).unwrap();
            assert_ne!(ca, cb);
            let again = stylized_query_color([0.1, 0.0, 0.2], [0.0, 1.0, 0.0], &a, &field, &hn, &rgb, 4).unwrap();
            assert_eq!(ca, again);
        }
    }

    #[test]
    fn graph_prediction_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hn = HyperNet::<f32>::uniform(39, false, &mut rng);
        let code: Vec<f32> = (0..512).map(|_| rng.random_range(0.0..1.0)).collect();
        let direct = hn.predict_weights(&code).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = hn.bind(&mut g, false).unwrap();
        let cv = g.constant(Tensor::new([1, 512], code).unwrap()).unwrap();
        let layers = hn.predict_graph(&mut g, &bound, cv).unwrap();
        for ((w, b), l) in layers.iter().zip(&direct.layers.layers) {
            assert!(g.value(*w).max_abs_diff(&l.weight) <= 1e-6);
            assert!(g.value(*b).max_abs_diff(&l.bias) <= 1e-6);
        }
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = [5, 4, 3, 5];
        let hn = HyperNet::<f64>::with_dims(6, 3, &dims, false, &mut rng);
        let rgb = Mlp::<f64>::uniform(&[5, 4, 3], false, &mut rng);
        let params: Vec<Tensor<f64>> = hn.tensors().into_iter().cloned().collect();
        let code = gradcheck::random(&[1, 6], 7, 0.0, 1.0);
        let x = gradcheck::random(&[3, 5], 8, -1.0, 1.0);
        let err = gradcheck::max_rel_error(&params, 1e-5, |g, v| {
            let bound: Vec<Vec<(Var, Var)>> = v.chunks(6).map(|c| c.chunks(2).map(|p| (p[0], p[1])).collect()).collect();
            let cv = g.constant(code.clone())?;
            let layers = hn.predict_graph(g, &bound, cv)?;
            let xv = g.constant(x.clone())?;
            let h = hyper_linear_graph(g, &layers, xv)?;
            let rl = rgb.bind(g, false)?;
            let y = RgbNet::forward(g, &rl, h)?;
            gradcheck::project(g, y, 9)
        });
        assert!(err <= 1e-3, "{err}");
    }
}
