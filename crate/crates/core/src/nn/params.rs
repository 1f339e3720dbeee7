use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array, Real, Tape, Var};

/// Index of a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `(-bound, bound)`.
    Uniform(f64),
    Zeros,
    Ones,
}

impl Init {
    /// Kaiming-style uniform bound `sqrt(1 / fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform((1.0 / fan_in as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Records the layout of every learnable tensor of a model. The layout is
/// all that parameter accounting needs; values are allocated by
/// [`ParamBuilder::init`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Samples initial values in declaration order from a seeded stream.
    pub fn init<F: Real>(&self, seed: u64) -> ParamStore<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays = self
            .specs
            .iter()
            .map(|s| {
                let data = (0..s.numel())
                    .map(|_| match s.init {
                        Init::Uniform(b) => F::from_f64_lossy(rng.random_range(-b..b)),
                        Init::Zeros => F::zero(),
                        Init::Ones => F::one(),
                    })
                    .collect();
                Array::new(&s.shape, data).expect("param spec shape")
            })
            .collect();
        ParamStore {
            specs: self.specs.clone(),
            arrays,
        }
    }
}

/// Values of every learnable tensor, addressed by [`ParamId`] or name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    specs: Vec<ParamSpec>,
    arrays: Vec<Array<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array<F> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<F> {
        &mut self.arrays[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Array<F>) -> Result<()> {
        if value.shape() != self.arrays[id.0].shape() {
            return Err(Error::dim(
                "param set",
                self.arrays[id.0].shape(),
                value.shape(),
            ));
        }
        self.arrays[id.0] = value;
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array<F>)> {
        self.specs
            .iter()
            .zip(&self.arrays)
            .enumerate()
            .map(|(i, (s, a))| (ParamId(i), s.name.as_str(), a))
    }

    pub fn arrays_mut(&mut self) -> &mut [Array<F>] {
        &mut self.arrays
    }

    /// Rebuilds a store from a layout and matching values (used when loading
    /// checkpoints).
    pub fn from_parts(specs: Vec<ParamSpec>, arrays: Vec<Array<F>>) -> Result<Self> {
        if specs.len() != arrays.len() {
            return Err(Error::dim("param store", &[specs.len()], &[arrays.len()]));
        }
        for (s, a) in specs.iter().zip(&arrays) {
            if s.shape != a.shape() {
                return Err(Error::dim("param store", &s.shape, a.shape()));
            }
        }
        Ok(ParamStore { specs, arrays })
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound {
            vars: self.arrays.iter().map(|a| tape.param(a.clone())).collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, F: Real> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Real> Index<ParamId> for Bound<'t, F> {
    type Output = Var<'t, F>;

    fn index(&self, id: ParamId) -> &Var<'t, F> {
        &self.vars[id.0]
    }
}

impl<'t, F: Real> Bound<'t, F> {
    /// Parameter leaves in declaration order.
    pub fn vars(&self) -> &[Var<'t, F>] {
        &self.vars
    }

    /// Gradients after backward, zero-filled for parameters the loss did not
    /// reach.
    pub fn grads(&self) -> Vec<Vec<F>> {
        self.vars
            .iter()
            .map(|v| match v.grad() {
                Some(g) => g.into_data(),
                None => vec![F::zero(); v.numel()],
            })
            .collect()
    }
}
