//! Forward and reverse sweeps over the layer graph.

use std::collections::HashMap;

use super::arch::{ArchSpec, LayerKind, SkipTag};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::parallel::FlushDenormals;
use crate::ops::{
    concat_channels, conv2d_backward_opt, conv2d_forward, convtranspose2_backward,
    convtranspose2_forward, maxpool2_backward, maxpool2_forward, relu_in_place,
    relu_mask_in_place, sigmoid_backward, sigmoid_forward, split_channels_backward, Argmax,
    ConvGrads,
};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Activations recorded by a forward pass, consumed by [`TernausNet::backward`].
pub struct Tape<T: Scalar> {
    store_id: u64,
    version: u64,
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Tensor4<T>>,
    argmax: Vec<Option<Argmax>>,
}

impl<T: Scalar> Tape<T> {
    pub fn output(&self) -> &Tensor4<T> {
        self.acts.last().expect("a tape always holds the input")
    }
}

/// The segmentation network: an architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct TernausNet<T: Scalar> {
    arch: ArchSpec,
    params: ParamStore<T>,
}

fn weight_and_bias<'a, T: Scalar>(
    params: &'a ParamStore<T>,
    prefix: &str,
) -> Result<(&'a Tensor4<T>, &'a [T])> {
    Ok((
        params.value(&format!("{prefix}.weight"))?,
        params.value(&format!("{prefix}.bias"))?.data(),
    ))
}

impl<T: Scalar> TernausNet<T> {
    pub fn new(arch: ArchSpec, params: ParamStore<T>) -> Result<Self> {
        arch.validate()
            .map_err(|e| Error::InvalidArgument(format!("invalid architecture: {e}")))?;
        params.check_against(&arch)?;
        Ok(TernausNet { arch, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::shape(
                "forward",
                format!("expected a 3-channel image batch, got {s}"),
            ));
        }
        let divisor = self.arch.side_divisor();
        for (what, v) in [("input height", s.h), ("input width", s.w)] {
            if v % divisor != 0 {
                return Err(Error::Divisibility {
                    what: what.into(),
                    value: v,
                    divisor,
                });
            }
        }
        Ok(())
    }

    fn run(&self, x: &Tensor4<T>) -> Result<Tape<T>> {
        self.check_input(x)?;
        let layers = &self.arch.layers;
        let mut acts = Vec::with_capacity(layers.len() + 1);
        let mut argmax = Vec::with_capacity(layers.len());
        let mut skips: HashMap<SkipTag, usize> = HashMap::new();
        acts.push(x.clone());
        for (i, layer) in layers.iter().enumerate() {
            let cur = &acts[i];
            let prefix = layer.name.as_deref().unwrap_or("");
            let mut record = None;
            let y = match layer.kind {
                LayerKind::Conv { .. } => {
                    let (w, b) = weight_and_bias(&self.params, prefix)?;
                    let mut y = conv2d_forward(cur, w, b)?;
                    relu_in_place(&mut y);
                    y
                }
                LayerKind::UpConv { .. } => {
                    let (w, b) = weight_and_bias(&self.params, prefix)?;
                    let mut y = convtranspose2_forward(cur, w, b)?;
                    relu_in_place(&mut y);
                    y
                }
                LayerKind::Final { .. } => {
                    let (w, b) = weight_and_bias(&self.params, prefix)?;
                    sigmoid_forward(&conv2d_forward(cur, w, b)?)
                }
                LayerKind::Pool { skip } => {
                    skips.insert(skip, i);
                    let (y, am) = maxpool2_forward(cur)?;
                    record = Some(am);
                    y
                }
                LayerKind::Concat { skip, .. } => {
                    let src = skips.get(&skip).ok_or_else(|| {
                        Error::InvalidArgument(format!("skip {skip:?} used before it is produced"))
                    })?;
                    concat_channels(cur, &acts[*src])?
                }
            };
            argmax.push(record);
            acts.push(y);
        }
        Ok(Tape {
            store_id: self.params.id(),
            version: self.params.version(),
            acts,
            argmax,
        })
    }

    /// Probability map `n×1×H×W` with values in (0, 1).
    ///
    /// Height and width must be multiples of 32.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let _ftz = FlushDenormals::enable();
        let mut tape = self.run(x)?;
        Ok(tape.acts.pop().expect("tape holds the output"))
    }

    /// Like [`forward`](Self::forward), also recording what
    /// [`backward`](Self::backward) needs.
    pub fn forward_with_tape(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tape<T>)> {
        let _ftz = FlushDenormals::enable();
        let tape = self.run(x)?;
        Ok((tape.output().clone(), tape))
    }

    fn accumulate(&mut self, prefix: &str, g: &ConvGrads<T>) -> Result<()> {
        let missing = |n: String| Error::ParamMismatch {
            reason: "missing parameter".into(),
            names: vec![n],
        };
        let wname = format!("{prefix}.weight");
        let gw = self.params.grad_mut(&wname).ok_or_else(|| missing(wname.clone()))?;
        gw.add_assign(&g.w)?;
        let bname = format!("{prefix}.bias");
        let gb = self.params.grad_mut(&bname).ok_or_else(|| missing(bname.clone()))?;
        for (d, &s) in gb.data_mut().iter_mut().zip(&g.b) {
            *d = *d + s;
        }
        Ok(())
    }

    /// Adds `∂loss/∂param` to every parameter gradient, given
    /// `grad_out = ∂loss/∂output`. The input gradient is not computed.
    pub fn backward(&mut self, tape: &Tape<T>, grad_out: &Tensor4<T>) -> Result<()> {
        let _ftz = FlushDenormals::enable();
        if tape.store_id != self.params.id() {
            return Err(Error::StaleTape("recorded on a different parameter store".into()));
        }
        if tape.version != self.params.version() {
            return Err(Error::StaleTape("parameters changed since the forward pass".into()));
        }
        if tape.acts.len() != self.arch.layers.len() + 1 {
            return Err(Error::StaleTape("layer count differs from the network".into()));
        }
        grad_out.expect_shape("backward", tape.output().shape())?;

        let layers = self.arch.layers.clone();
        let mut grad = grad_out.clone();
        let mut skip_grads: HashMap<SkipTag, Tensor4<T>> = HashMap::new();
        for (i, layer) in layers.iter().enumerate().rev() {
            let (x, y) = (&tape.acts[i], &tape.acts[i + 1]);
            let prefix = layer.name.as_deref().unwrap_or("");
            let want_x = i > 0;
            let gx = match layer.kind {
                LayerKind::Conv { .. } => {
                    relu_mask_in_place(y, &mut grad);
                    let w = self.params.value(&format!("{prefix}.weight"))?;
                    let g = conv2d_backward_opt(x, w, &grad, want_x)?;
                    self.accumulate(prefix, &g)?;
                    g.x
                }
                LayerKind::UpConv { .. } => {
                    relu_mask_in_place(y, &mut grad);
                    let w = self.params.value(&format!("{prefix}.weight"))?;
                    let g = convtranspose2_backward(x, w, &grad)?;
                    self.accumulate(prefix, &g)?;
                    g.x
                }
                LayerKind::Final { .. } => {
                    let gz = sigmoid_backward(y, &grad)?;
                    let w = self.params.value(&format!("{prefix}.weight"))?;
                    let g = conv2d_backward_opt(x, w, &gz, want_x)?;
                    self.accumulate(prefix, &g)?;
                    g.x
                }
                LayerKind::Concat {
                    skip, up_c, skip_c, ..
                } => {
                    let (ga, gb) = split_channels_backward(&grad, up_c, skip_c)?;
                    skip_grads.insert(skip, gb);
                    Some(ga)
                }
                LayerKind::Pool { skip } => {
                    let am = tape.argmax[i]
                        .as_ref()
                        .ok_or_else(|| Error::StaleTape(format!("no pool record at layer {i}")))?;
                    let mut gx = maxpool2_backward(&grad, am, x.shape())?;
                    if let Some(gs) = skip_grads.remove(&skip) {
                        gx.add_assign(&gs)?;
                    }
                    Some(gx)
                }
            };
            match gx {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    /// Output shape for an input of shape `x`.
    pub fn output_shape(&self, x: Shape) -> Shape {
        Shape::new(x.n, 1, x.h, x.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ternausnet, init_params, InitScheme};
    use crate::rng::Rng;

    fn net<T: Scalar>(seed: u64) -> TernausNet<T> {
        let arch = build_ternausnet();
        let params = init_params(&arch, &InitScheme::Lecun, &mut Rng::new(seed)).unwrap();
        TernausNet::new(arch, params).unwrap()
    }

    fn image<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Tensor4<T> {
        let mut rng = Rng::new(seed);
        Tensor4::from_fn([n, 3, h, w], |_| T::of_f64(rng.uniform()))
    }

    #[test]
    fn output_shapes_and_range() {
        let net = net::<f32>(1);
        for (h, w) in [(64, 64), (96, 64), (32, 32)] {
            let p = net.forward(&image(1, h, w, 2)).unwrap();
            assert_eq!(p.shape(), Shape::new(1, 1, h, w));
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn indivisible_side_is_rejected() {
        let net = net::<f32>(1);
        let err = net.forward(&image(1, 50, 50, 2)).unwrap_err();
        assert!(matches!(err, Error::Divisibility { divisor: 32, .. }));
        assert!(err.to_string().contains("32"));
        assert!(net.forward(&Tensor4::zeros([1, 1, 32, 32])).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let mut net = net::<f32>(3);
        let (p, tape) = net.forward_with_tape(&image(1, 32, 32, 4)).unwrap();
        net.backward(&tape, &Tensor4::zeros(p.shape())).unwrap();
        assert!(net.params().iter().all(|t| t.grad.max_abs() == 0.0));
    }

    #[test]
    fn backward_accumulates() {
        let mut net = net::<f64>(3);
        let (p, tape) = net.forward_with_tape(&image(2, 32, 32, 4)).unwrap();
        let g = Tensor4::from_fn(p.shape(), |i| ((i % 7) as f64 - 3.0) * 0.1);
        net.backward(&tape, &g).unwrap();
        let once: Vec<Vec<f64>> = net.params().iter().map(|t| t.grad.data().to_vec()).collect();
        assert!(once.iter().any(|g| g.iter().any(|&v| v != 0.0)));
        net.backward(&tape, &g).unwrap();
        for (t, g1) in net.params().iter().zip(&once) {
            for (&a, &b) in t.grad.data().iter().zip(g1) {
                assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs().max(1e-30), "{}", t.name);
            }
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut a = net::<f32>(3);
        let b = net::<f32>(3);
        let x = image(1, 32, 32, 4);
        let (p, tape) = b.forward_with_tape(&x).unwrap();
        let g = Tensor4::zeros(p.shape());
        assert!(matches!(a.backward(&tape, &g), Err(Error::StaleTape(_))));

        let (_, tape) = a.forward_with_tape(&x).unwrap();
        a.params_mut().value_mut("final.bias").unwrap().fill(0.5);
        assert!(matches!(a.backward(&tape, &g), Err(Error::StaleTape(_))));
    }

    #[test]
    fn batch_rows_are_independent() {
        let net = net::<f32>(5);
        let x = image(2, 32, 32, 6);
        let both = net.forward(&x).unwrap();
        let first = net
            .forward(&Tensor4::from_vec([1, 3, 32, 32], x.sample(0).to_vec()).unwrap())
            .unwrap();
        assert_eq!(both.sample(0), first.data());
    }
}
