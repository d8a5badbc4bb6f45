//! Parameterized building blocks composed from graph primitives.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var, LN_EPS};

/// Affine map over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    /// Weights and bias uniform in ±1/√cin.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (cin.max(1) as f64).sqrt();
        let data = (0..cin * cout).map(|_| rng.gen_range(-bound..bound)).collect();
        let w = store.register(format!("{name}.w"), Tensor::new(vec![cin, cout], data)?)?;
        let b = if bias {
            let data = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
            Some(store.register(format!("{name}.b"), Tensor::new(vec![cout], data)?)?)
        } else {
            None
        };
        Ok(Linear { w, b, cin, cout })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout + if self.b.is_some() { self.cout } else { 0 }
    }
}

/// Per-row normalization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta, dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::register(store, &format!("{name}.fc1"), cin, hidden, true, rng)?,
            fc2: Linear::register(store, &format!("{name}.fc2"), hidden, cout, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}
