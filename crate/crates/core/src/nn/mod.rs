//! Dense layers with exact reverse-mode gradients.
//!
//! Forward passes return a [`Tape`] of intermediates; the matching backward
//! pass consumes it. Parameters of every network in the crate are plain
//! lists of [`Layer`]s, so flattening, SGD updates, finite-difference checks
//! and the binary parameter format all work through the [`Parameters`]
//! trait.

mod gradcheck;
mod io;
mod matrix;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use gradcheck::{grad_check, sample_coordinates, GradCheckReport};
pub use io::{read_layers, write_layers, PARAM_MAGIC};
pub use matrix::{affine, affine_backward, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the pre-activation. ReLU uses 0 at 0.
    #[inline]
    pub fn derivative<T: Real>(self, pre: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (T::one() - s)
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Affine map followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `out x in`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
            activation,
        }
    }

    pub fn new(weight: Matrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch {
                context: "layer bias".into(),
                expected: weight.rows(),
                got: bias.len(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn identity(n: usize, activation: Activation) -> Self {
        Self {
            weight: Matrix::identity(n),
            bias: vec![T::zero(); n],
            activation,
        }
    }

    /// Fan-in scaled uniform weights in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`,
    /// zero biases. See [`uniform_unit`] for the exact draw.
    pub fn random(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / input.max(1) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| T::lit((2.0 * uniform_unit(rng) - 1.0) * bound))
            .collect();
        Self {
            weight: Matrix::from_vec(output, input, data).expect("sized"),
            bias: vec![T::zero(); output],
            activation,
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim(), self.activation)
    }

    pub fn num_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "layer input".into(),
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let pre = affine(x, &self.weight, &self.bias);
        let act = self.activation;
        let out = pre.map(|v| act.apply(v));
        Ok((pre, out))
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: &Matrix<T>,
        pre: &Matrix<T>,
        dout: &Matrix<T>,
        grad: &mut Layer<T>,
    ) -> Matrix<T> {
        let mut dpre = dout.clone();
        if self.activation != Activation::Identity {
            for (g, &p) in dpre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *g *= self.activation.derivative(p);
            }
        }
        let (dw, db, dx) = affine_backward(x, &self.weight, &dpre);
        grad.weight.add_assign(&dw);
        for (a, b) in grad.bias.iter_mut().zip(db) {
            *a += b;
        }
        dx
    }
}

/// Draws a uniform value in `[0, 1)` from the top 53 bits of one
/// `next_u64` call: `(u >> 11) * 2^-53`.
pub fn uniform_unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Anything whose trainable state is an ordered list of layers. Gradients
/// use the same type as the parameters.
pub trait Parameters<T: Real> {
    fn layers(&self) -> Vec<&Layer<T>>;
    fn layers_mut(&mut self) -> Vec<&mut Layer<T>>;

    fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    /// Weights (row-major) then bias, layer by layer.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn assign(&mut self, flat: &[T]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector".into(),
                expected: n,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weight.as_slice().len();
            l.weight
                .as_mut_slice()
                .copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers_mut().into_iter().zip(other.layers()) {
            a.weight.add_assign(&b.weight);
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| {
            l.weight.as_slice().iter().all(|v| v.is_finite())
                && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

/// Plain gradient descent: `p -= lr * g`.
pub fn sgd_step<T: Real, P: Parameters<T>>(params: &mut P, grads: &P, lr: T) {
    for (p, g) in params.layers_mut().into_iter().zip(grads.layers()) {
        for (w, &dw) in p.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
            *w -= lr * dw;
        }
        for (b, &db) in p.bias.iter_mut().zip(&g.bias) {
            *b -= lr * db;
        }
    }
}

/// A chain of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> DenseParams<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    context: format!("layer {} input", i + 1),
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_dim)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for DenseParams<T> {
    fn layers(&self) -> Vec<&Layer<T>> {
        self.layers.iter().collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        self.layers.iter_mut().collect()
    }
}

/// Builds a chain with widths `dims[0] -> dims[1] -> ...`; every layer but
/// the last uses ReLU. The generator is ChaCha8 seeded through
/// `SeedableRng::seed_from_u64(seed)`, consumed layer by layer in row-major
/// weight order with [`uniform_unit`].
pub fn init_params<T: Real>(dims: &[usize], last: Activation, seed: u64) -> Result<DenseParams<T>> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidInput(format!(
            "layer widths must list at least two positive sizes, got {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 1 == n { last } else { Activation::Relu };
            Layer::random(w[0], w[1], act, &mut rng)
        })
        .collect();
    DenseParams::new(layers)
}

#[derive(Debug)]
struct LayerRecord<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
}

/// Intermediates of one forward pass, consumed by exactly one backward.
#[derive(Debug)]
pub struct Tape<T> {
    records: Option<Vec<LayerRecord<T>>>,
}

impl<T> Tape<T> {
    pub fn is_consumed(&self) -> bool {
        self.records.is_none()
    }
}

pub fn mlp_forward<T: Real>(params: &DenseParams<T>, x: &Matrix<T>) -> Result<(Matrix<T>, Tape<T>)> {
    let mut records = Vec::with_capacity(params.layers.len());
    let mut cur = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let (pre, out) = layer.forward(&cur).map_err(|_| Error::DimensionMismatch {
            context: format!("layer {i} input"),
            expected: layer.input_dim(),
            got: cur.cols(),
        })?;
        records.push(LayerRecord { input: cur, pre });
        cur = out;
    }
    Ok((
        cur,
        Tape {
            records: Some(records),
        },
    ))
}

/// Returns `(dL/dparams, dL/dx)`.
pub fn mlp_backward<T: Real>(
    params: &DenseParams<T>,
    tape: &mut Tape<T>,
    dy: &Matrix<T>,
) -> Result<(DenseParams<T>, Matrix<T>)> {
    let records = tape.records.take().ok_or(Error::TapeConsumed)?;
    if records.len() != params.layers.len() {
        return Err(Error::DimensionMismatch {
            context: "tape layer count".into(),
            expected: params.layers.len(),
            got: records.len(),
        });
    }
    let mut grads = params.zeros_like();
    let mut d = dy.clone();
    for (i, (layer, rec)) in params.layers.iter().zip(&records).enumerate().rev() {
        if d.cols() != layer.output_dim() || d.rows() != rec.pre.rows() {
            return Err(Error::DimensionMismatch {
                context: format!("layer {i} output gradient"),
                expected: layer.output_dim(),
                got: d.cols(),
            });
        }
        d = layer.backward(&rec.input, &rec.pre, &d, &mut grads.layers[i]);
    }
    Ok((grads, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| 2.0 * uniform_unit(&mut rng) - 1.0).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_layer_passes_through() {
        let p = DenseParams::new(vec![Layer::<f64>::identity(3, Activation::Identity)]).unwrap();
        let x = rng_matrix(4, 3, 1);
        let (y, _) = mlp_forward(&p, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_layer_arithmetic() {
        let l = Layer::new(Matrix::from_vec(1, 1, vec![2.0]).unwrap(), vec![1.0], Activation::Identity).unwrap();
        let p = DenseParams::new(vec![l]).unwrap();
        let (y, _) = mlp_forward(&p, &Matrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
        assert_eq!(y[(0, 0)], 7.0);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let p = init_params::<f64>(&[3, 4, 2], Activation::Identity, 0).unwrap();
        let err = mlp_forward(&p, &Matrix::zeros(1, 5)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
        let bad = DenseParams::new(vec![
            Layer::<f64>::zeros(3, 4, Activation::Relu),
            Layer::zeros(5, 2, Activation::Identity),
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn linear_gradients_closed_form() {
        let l = Layer::new(
            Matrix::from_vec(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap(),
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        let p = DenseParams::new(vec![l]).unwrap();
        let x = Matrix::from_vec(1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        let (_, mut tape) = mlp_forward(&p, &x).unwrap();
        let (g, _) = mlp_backward(&p, &mut tape, &Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.layers[0].bias, vec![1.0, 1.0]);
        assert_eq!(g.layers[0].weight.row(0), x.row(0));
        assert_eq!(g.layers[0].weight.row(1), x.row(0));
    }

    #[test]
    fn relu_at_zero_blocks_gradient() {
        let l = Layer::new(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![0.0], Activation::Relu).unwrap();
        let p = DenseParams::new(vec![l]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let (_, mut tape) = mlp_forward(&p, &x).unwrap();
        let (g, dx) = mlp_backward(&p, &mut tape, &Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(dx[(0, 0)], 0.0);
        assert_eq!(g.layers[0].bias[0], 0.0);
    }

    #[test]
    fn tape_reuse_is_an_error() {
        let p = init_params::<f64>(&[2, 2], Activation::Identity, 3).unwrap();
        let (_, mut tape) = mlp_forward(&p, &Matrix::zeros(1, 2)).unwrap();
        let dy = Matrix::zeros(1, 2);
        mlp_backward(&p, &mut tape, &dy).unwrap();
        assert!(tape.is_consumed());
        assert!(matches!(mlp_backward(&p, &mut tape, &dy), Err(Error::TapeConsumed)));
    }

    // Straight-line evaluation with explicit loops, no shared helpers.
    fn reference_forward(p: &DenseParams<f64>, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &p.layers {
            let mut next = Vec::new();
            for o in 0..l.output_dim() {
                let mut s = l.bias[o];
                for i in 0..l.input_dim() {
                    s += l.weight[(o, i)] * cur[i];
                }
                next.push(match l.activation {
                    Activation::Identity => s,
                    Activation::Relu => if s > 0.0 { s } else { 0.0 },
                    Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                });
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn three_layer_matches_reference() {
        let p = init_params::<f64>(&[5, 7, 6, 3], Activation::Sigmoid, 11).unwrap();
        let x = rng_matrix(9, 5, 2);
        let (y, _) = mlp_forward(&p, &x).unwrap();
        for r in 0..9 {
            let want = reference_forward(&p, x.row(r));
            for (a, b) in y.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_net_passes_finite_differences() {
        let p = init_params::<f64>(&[4, 6, 5, 2], Activation::Identity, 5).unwrap();
        let x = rng_matrix(3, 4, 9);
        let dy = rng_matrix(3, 2, 10);
        let loss = |flat: &[f64]| {
            let mut q = p.clone();
            q.assign(flat).unwrap();
            let (y, _) = mlp_forward(&q, &x).unwrap();
            y.as_slice().iter().zip(dy.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, mut tape) = mlp_forward(&p, &x).unwrap();
        let (g, _) = mlp_backward(&p, &mut tape, &dy).unwrap();
        let flat = p.flatten();
        let coords: Vec<usize> = (0..flat.len()).collect();
        let report = grad_check(loss, &flat, &g.flatten(), &coords, 1e-6, 1e-5);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params::<f64>(&[16, 32, 8], Activation::Identity, 42).unwrap();
        let b = init_params::<f64>(&[16, 32, 8], Activation::Identity, 42).unwrap();
        assert_eq!(a, b);
        for l in &a.layers {
            let bound = (6.0 / l.input_dim() as f64).sqrt();
            assert!(l.weight.as_slice().iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
        let c = init_params::<f64>(&[16, 32, 8], Activation::Identity, 43).unwrap();
        let (wa, wc) = (a.flatten(), c.flatten());
        let weights = a.layers.iter().map(|l| l.weight.as_slice().len()).sum::<usize>();
        let differ = wa.iter().zip(&wc).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * weights as f64);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let p = init_params::<f64>(&[4, 3], Activation::Identity, 8).unwrap();
        let mut p = p;
        p.layers[0].bias = vec![0.3, -0.7, 1.1];
        let x = rng_matrix(1, 4, 1);
        let y = rng_matrix(1, 4, 2);
        let (a, b) = (1.7, -0.4);
        let combo = Matrix::from_vec(
            1,
            4,
            x.as_slice().iter().zip(y.as_slice()).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let f = |m: &Matrix<f64>| mlp_forward(&p, m).unwrap().0;
        let (fc, fx, fy) = (f(&combo), f(&x), f(&y));
        for o in 0..3 {
            let want = a * fx[(0, o)] + b * fy[(0, o)] - (a + b - 1.0) * p.layers[0].bias[o];
            assert!((fc[(0, o)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = init_params::<f64>(&[2, 2], Activation::Identity, 1).unwrap();
        let before = p.flatten();
        let mut g = p.zeros_like();
        g.layers[0].bias = vec![1.0, -2.0];
        sgd_step(&mut p, &g, 0.5);
        let after = p.flatten();
        assert_eq!(after[4], before[4] - 0.5);
        assert_eq!(after[5], before[5] + 1.0);
    }
}
