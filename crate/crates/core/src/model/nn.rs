//! Parameterized building blocks shared by the encoder, query generator and decoder.

use pcc_autograd::{BoundParams, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::NeighborIndex;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'t, T: Real>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Parameter registration helper: prefixes names and draws initial values from one stream.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| {
            T::from_f64_lossy(rng.random_range(-bound..bound))
        })?;
        Ok(self.store.add(name, t)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        Ok(self
            .store
            .add(name, Tensor::full(shape, T::from_f64_lossy(v))?)?)
    }
}

/// `y = x W + b` applied to the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: b.uniform(&format!("{name}.weight"), &[input, output], bound)?,
            bias: Some(b.uniform(&format!("{name}.bias"), &[output], bound)?),
            input,
            output,
        })
    }

    pub fn no_bias<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: b.uniform(&format!("{name}.weight"), &[input, output], bound)?,
            bias: None,
            input,
            output,
        })
    }

    /// Weights and bias start at zero.
    pub fn zeroed<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.constant(&format!("{name}.weight"), &[input, output], 0.0)?,
            bias: Some(b.constant(&format!("{name}.bias"), &[output], 0.0)?),
            input,
            output,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = x.matmul(p.var(self.weight))?;
        Ok(match self.bias {
            Some(b) => y.add(p.var(b))?,
            None => y,
        })
    }
}

/// Stack of linear layers with an activation between consecutive layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        dims: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(b, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        mut x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(p, x)?;
            if i < last {
                x = self.activation.apply(x);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant(&format!("{name}.gamma"), &[width], 1.0)?,
            beta: b.constant(&format!("{name}.beta"), &[width], 0.0)?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(x.layer_norm(
            p.var(self.gamma),
            p.var(self.beta),
            T::from_f64_lossy(Self::EPS),
        )?)
    }
}

/// Scaled dot-product attention with `heads` heads over `[N, C]` token matrices.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(b, &format!("{name}.q"), width, width)?,
            key: Linear::new(b, &format!("{name}.k"), width, width)?,
            value: Linear::new(b, &format!("{name}.v"), width, width)?,
            out: Linear::new(b, &format!("{name}.o"), width, width)?,
            heads,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        queries: Var<'t, T>,
        memory: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (nq, c) = dims2(&queries);
        let nk = memory.shape()[0];
        let h = self.heads;
        let d = c / h;
        let q = self
            .query
            .forward(p, queries)?
            .reshape(&[nq, h, d])?
            .permute(&[1, 0, 2])?;
        let k = self
            .key
            .forward(p, memory)?
            .reshape(&[nk, h, d])?
            .permute(&[1, 2, 0])?;
        let v = self
            .value
            .forward(p, memory)?
            .reshape(&[nk, h, d])?
            .permute(&[1, 0, 2])?;
        let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
        let weights = q.matmul(k)?.scale(scale).softmax(2)?;
        let mixed = weights.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[nq, c])?;
        self.out.forward(p, mixed)
    }
}

/// Shared edge function `act(W [x_i ; x_j - x_i] + b)` max-aggregated over each neighborhood.
///
/// Evaluated as `x_i (W_c - W_d) + x_j W_d + b`, which equals the concatenated
/// form but projects each point once instead of once per edge.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub center: Linear,
    pub diff: Linear,
    pub activation: Activation,
}

impl EdgeConv {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        // Same fan-in as a linear layer over the 2*input concatenation.
        let bound = 1.0 / ((2 * input) as f64).sqrt();
        let center = Linear {
            weight: b.uniform(&format!("{name}.center.weight"), &[input, output], bound)?,
            bias: Some(b.uniform(&format!("{name}.center.bias"), &[output], bound)?),
            input,
            output,
        };
        let diff = Linear {
            weight: b.uniform(&format!("{name}.diff.weight"), &[input, output], bound)?,
            bias: None,
            input,
            output,
        };
        Ok(Self {
            center,
            diff,
            activation,
        })
    }

    /// Pre-activation edge features, `[N * k, output]`, in neighbor-row order.
    pub fn edges<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
        nbrs: &NeighborIndex,
    ) -> Result<Var<'t, T>> {
        let own = self.center.forward(p, x)?;
        let other = self.diff.forward(p, x)?;
        let anchor = own.sub(other)?;
        Ok(anchor
            .gather(&nbrs.query_repeated(), 0)?
            .add(other.gather(nbrs.as_flat(), 0)?)?)
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
        nbrs: &NeighborIndex,
    ) -> Result<Var<'t, T>> {
        let n = nbrs.queries();
        let e = self.activation.apply(self.edges(p, x, nbrs)?);
        Ok(e.reshape(&[n, nbrs.k(), self.center.output])?
            .reduce_max(1)?)
    }
}

pub fn dims2<T: Real>(v: &Var<'_, T>) -> (usize, usize) {
    let s = v.shape();
    (s[0], s[1])
}

/// Repeats a `[C]` vector into `[n, C]` rows.
pub fn broadcast_rows<'t, T: Real>(v: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
    let c = v.shape()[0];
    Ok(v.reshape(&[1, c])?.gather(&vec![0; n], 0)?)
}

/// Repeats a `[N]` vector into `[N, width]` columns.
pub fn broadcast_cols<'t, T: Real>(v: Var<'t, T>, width: usize) -> Result<Var<'t, T>> {
    let n = v.shape()[0];
    Ok(v.reshape(&[n, 1])?.gather(&vec![0; width], 1)?)
}

/// Multiplies each `[N, 3]` row by `1 + s_i - stop_grad(s_i)`.
///
/// The factor is exactly one in value, so the rows are unchanged bit for bit,
/// while the scores receive the gradient `<row, d_row>`.
pub fn straight_through_gate<'t, T: Real>(
    rows: Var<'t, T>,
    scores: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let width = rows.shape()[1];
    let gate = scores.sub(scores.detach())?.add_scalar(T::one());
    Ok(rows.mul(broadcast_cols(gate, width)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{knn, PointCloud};
    use pcc_autograd::Tape;
    use rand::SeedableRng;

    #[test]
    fn edge_conv_matches_concatenated_linear() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ec = EdgeConv::new(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            "ec",
            3,
            4,
            Activation::Relu,
        )
        .unwrap();
        let pc = PointCloud::new(
            (0..6)
                .map(|i| [i as f32 * 0.3, (i * i) as f32 * 0.1, 1.0 - i as f32 * 0.2])
                .collect(),
        )
        .unwrap();
        let nb = knn(&pc, &pc, 3).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(pc.to_tensor());
        let got = ec.edges(&p, x, &nb).unwrap().value();
        let wc = store.get(ec.center.weight).data();
        let wd = store.get(ec.diff.weight).data();
        let bias = store.get(ec.center.bias.unwrap()).data();
        let xv = pc.to_tensor::<f64>();
        for (e, (&qi, &nj)) in nb.query_repeated().iter().zip(nb.as_flat()).enumerate() {
            for o in 0..4 {
                let mut acc = bias[o];
                for c in 0..3 {
                    let xi = xv.row(qi)[c];
                    let xj = xv.row(nj)[c];
                    acc += xi * wc[c * 4 + o] + (xj - xi) * wd[c * 4 + o];
                }
                assert!((got.row(e)[o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_is_identity_in_value() {
        let tape = Tape::<f32>::new();
        let rows =
            tape.leaf(Tensor::new(&[2, 3], vec![0.1, -7.25, 3.3e-5, 1e6, 0.0, -0.0]).unwrap());
        let s = tape.leaf(Tensor::new(&[2], vec![123.456, -9.0]).unwrap());
        let out = straight_through_gate(rows, s).unwrap();
        let a: Vec<u32> = out.value().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = rows.value().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a[..5], b[..5]);
        let g = tape.backward(out.sum()).unwrap();
        assert_eq!(g.get(s).unwrap(), &[0.1 - 7.25 + 3.3e-5, 1e6]);
    }
}
