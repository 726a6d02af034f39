//! Network layers built from tape primitives: affine, GRU cell, and small
//! fully-connected stacks.

use ndarray::Array2;
use rand::Rng;

use crate::params::{Graph, ParamStore};
use crate::tape::Id;

/// Uniform Xavier/Glorot init in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Elu,
    Linear,
}

fn activate(g: &mut Graph, x: Id, act: Activation) -> Id {
    match act {
        Activation::Tanh => g.tape.tanh(x),
        Activation::Elu => g.tape.elu(x),
        Activation::Linear => x,
    }
}

/// Affine layer `y = x W + b`, parameters held in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: usize,
    pub b: usize,
}

impl Affine {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store
            .add(&format!("{name}.w"), xavier(rng, fan_in, fan_out))
            .expect("unique layer name");
        let b = store
            .add(&format!("{name}.b"), Array2::zeros((1, fan_out)))
            .expect("unique layer name");
        Self { w, b }
    }

    /// Re-bind to parameters already present in `store` (checkpoint load).
    pub fn attach(store: &ParamStore, name: &str) -> Result<Self, crate::params::ParamError> {
        Ok(Self {
            w: store.idx(&format!("{name}.w"))?,
            b: store.idx(&format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Id) -> Id {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.tape.matmul(x, w);
        g.tape.add_row(xw, b)
    }
}

/// GRU cell with update/reset/candidate gates.
#[derive(Debug, Clone)]
pub struct GruCell {
    wz: Affine,
    uz: Affine,
    wr: Affine,
    ur: Affine,
    wc: Affine,
    uc: Affine,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        Self {
            wz: Affine::new(store, rng, &format!("{name}.wz"), input, hidden),
            uz: Affine::new(store, rng, &format!("{name}.uz"), hidden, hidden),
            wr: Affine::new(store, rng, &format!("{name}.wr"), input, hidden),
            ur: Affine::new(store, rng, &format!("{name}.ur"), hidden, hidden),
            wc: Affine::new(store, rng, &format!("{name}.wc"), input, hidden),
            uc: Affine::new(store, rng, &format!("{name}.uc"), hidden, hidden),
        }
    }

    /// Re-bind to parameters already present in `store` (checkpoint load).
    pub fn attach(store: &ParamStore, name: &str) -> Result<Self, crate::params::ParamError> {
        Ok(Self {
            wz: Affine::attach(store, &format!("{name}.wz"))?,
            uz: Affine::attach(store, &format!("{name}.uz"))?,
            wr: Affine::attach(store, &format!("{name}.wr"))?,
            ur: Affine::attach(store, &format!("{name}.ur"))?,
            wc: Affine::attach(store, &format!("{name}.wc"))?,
            uc: Affine::attach(store, &format!("{name}.uc"))?,
        })
    }

    /// One step: returns the next hidden state.
    pub fn forward(&self, g: &mut Graph, x: Id, h: Id) -> Id {
        let zx = self.wz.forward(g, x);
        let zh = self.uz.forward(g, h);
        let zs = g.tape.add(zx, zh);
        let z = g.tape.sigmoid(zs);

        let rx = self.wr.forward(g, x);
        let rh = self.ur.forward(g, h);
        let rs = g.tape.add(rx, rh);
        let r = g.tape.sigmoid(rs);

        let rh = g.tape.mul(r, h);
        let cx = self.wc.forward(g, x);
        let ch = self.uc.forward(g, rh);
        let cs = g.tape.add(cx, ch);
        let c = g.tape.tanh(cs);

        // h' = z*h + (1-z)*c
        let zh2 = g.tape.mul(z, h);
        let zc = g.tape.mul(z, c);
        let cmzc = g.tape.sub(c, zc);
        g.tape.add(zh2, cmzc)
    }
}

/// Fully-connected stack: hidden layers with one activation, linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Affine>,
    hidden_act: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        hidden_act: Activation,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = (0..dims.len() - 1)
            .map(|i| Affine::new(store, rng, &format!("{name}.{i}"), dims[i], dims[i + 1]))
            .collect();
        Self { layers, hidden_act }
    }

    /// Re-bind to parameters already present in `store` (checkpoint load);
    /// `n_layers` counts affine layers (`dims.len() - 1` at creation).
    pub fn attach(
        store: &ParamStore,
        name: &str,
        n_layers: usize,
        hidden_act: Activation,
    ) -> Result<Self, crate::params::ParamError> {
        let layers = (0..n_layers)
            .map(|i| Affine::attach(store, &format!("{name}.{i}")))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers, hidden_act })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Id) -> Id {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i + 1 < self.layers.len() {
                x = activate(g, x, self.hidden_act);
            }
        }
        x
    }
}

pub mod gradcheck {
    //! Finite-difference oracle: central differences on every parameter,
    //! compared against tape gradients.

    use super::*;

    /// Max relative error between backward gradients and central differences
    /// with step `h`, for a scalar loss defined by `f`.
    pub fn max_rel_err<F>(store: &mut ParamStore, f: F, h: f64) -> f64
    where
        F: Fn(&mut Graph) -> Id,
    {
        // Analytic gradients.
        let mut grads: Vec<Array2<f64>> = Vec::new();
        {
            let mut fresh = clone_values(store);
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward_into(loss, &mut fresh);
            for i in 0..fresh.len() {
                grads.push(fresh.grad(i).clone());
            }
        }
        let mut worst: f64 = 0.0;
        for (i, grad) in grads.iter().enumerate() {
            let dims = store.value(i).dim();
            for r in 0..dims.0 {
                for c in 0..dims.1 {
                    let orig = store.value(i)[(r, c)];
                    store.value_mut(i)[(r, c)] = orig + h;
                    let lp = eval(store, &f);
                    store.value_mut(i)[(r, c)] = orig - h;
                    let lm = eval(store, &f);
                    store.value_mut(i)[(r, c)] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grad[(r, c)];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    worst = worst.max((an - fd).abs() / denom);
                }
            }
        }
        worst
    }

    fn eval<F>(store: &ParamStore, f: &F) -> f64
    where
        F: Fn(&mut Graph) -> Id,
    {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.tape.scalar(loss)
    }

    fn clone_values(store: &ParamStore) -> ParamStore {
        let mut s = ParamStore::new();
        for i in 0..store.len() {
            s.add(store.name(i), store.value(i).clone()).unwrap();
        }
        s
    }
}
