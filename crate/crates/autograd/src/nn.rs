//! Parameterised layers. Layers only hold [`ParamId`]s; the tensors live in
//! a [`ParamStore`] so a whole model can be bound, saved and cast at once.

use rand::Rng;

use crate::{Bound, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-uniform initialised convolution; `pad = k / 2` keeps the size at stride 1.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, cin, cout, k, stride, 1.0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[cout, cin, k, k], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(p.get(self.weight), Some(p.get(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain * (3.0 / fin as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[fout, fin], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { weight, bias }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(p.get(self.weight), Some(p.get(self.bias)))
    }
}
