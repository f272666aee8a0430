//! Small fully-connected coordinate networks with hand-written reverse mode.
//!
//! An [`Mlp`] maps a raw input `x` (optionally positionally encoded) plus an
//! unencoded conditioning vector to an output vector. The conditioning enters
//! only the first layer, so callers that evaluate many points with the same
//! code (a frame's pose code, a ray's view direction) compute its contribution
//! once with [`Mlp::cond_preact`] and reuse it for every point.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::encoding::{encoded_width, positional_encode_backward, positional_encode_into};
use super::params::{Grads, Group, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Tanh,
    /// `ln(1 + exp(k·x)) / k`
    Softplus(f64),
}

impl Activation {
    pub fn name(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Tanh => "tanh".into(),
            Activation::Softplus(k) => format!("softplus:{k}"),
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus(1.0)),
            _ => {
                let k = s.strip_prefix("softplus:")?.parse::<f64>().ok()?;
                (k > 0.0).then_some(Activation::Softplus(k))
            }
        }
    }

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus(k) => {
                let z = k * x;
                if z > 30.0 {
                    x
                } else {
                    z.exp().ln_1p() / k
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation and the activation.
    #[inline]
    fn derivative(&self, pre: f64, post: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Softplus(k) => 1.0 / (1.0 + (-k * pre).exp()),
        }
    }
}

/// Architecture of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    /// Raw input width (before encoding).
    pub input: usize,
    /// Unencoded conditioning width appended after the encoded input.
    pub cond: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    /// Positional-encoding octaves applied to the raw input; 0 disables.
    pub freqs: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        MlpSpec {
            input,
            cond: 0,
            hidden: hidden.to_vec(),
            output,
            activation,
            freqs: 0,
        }
    }

    pub fn with_freqs(mut self, freqs: usize) -> Self {
        self.freqs = freqs;
        self
    }

    pub fn with_cond(mut self, cond: usize) -> Self {
        self.cond = cond;
        self
    }

    pub fn encoded_input(&self) -> usize {
        encoded_width(self.input, self.freqs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input + self.cond == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid mlp widths {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.encoded_input() + self.cond;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform, bound `sqrt(6 / fan_in)` for hidden layers and
    /// `sqrt(3 / fan_in)` for the output layer; zero biases.
    Kaiming,
    /// Kaiming hidden layers with an all-zero output layer.
    ZeroOutput,
    /// Approximates `|x| − radius` (geometric SDF initialisation). The
    /// encoded (sin/cos) columns of the first layer start at zero.
    Sphere { radius: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    // tape offsets
    enc_off: usize,
    act_offs: Vec<(usize, usize)>,
    out_off: usize,
    tape_len: usize,
}

/// Activation record of one forward evaluation.
#[derive(Clone, Debug)]
pub struct MlpTape {
    buf: Vec<f64>,
}

impl Mlp {
    /// Registers the network's tensors as `{name}.l{k}.w` / `{name}.l{k}.b`.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        spec: MlpSpec,
        group: Group,
        init: Init,
        rng: &mut R,
    ) -> Result<Mlp> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let n = dims.len();
        let enc = spec.encoded_input();
        let mut layers = Vec::with_capacity(n);
        for (k, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let last = k + 1 == n;
            let mut w = vec![0.0; fan_in * fan_out];
            let mut b = vec![0.0; fan_out];
            match init {
                Init::Kaiming | Init::ZeroOutput => {
                    if !(last && init == Init::ZeroOutput) {
                        let bound = if last { 3.0 } else { 6.0 };
                        let bound = (bound / fan_in as f64).sqrt();
                        w.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
                    }
                }
                Init::Sphere { radius } => {
                    if last {
                        let mean = (std::f64::consts::PI / fan_in as f64).sqrt();
                        let normal = Normal::new(mean, 1e-4).unwrap();
                        w.iter_mut().for_each(|x| *x = normal.sample(rng));
                        b[0] = -radius;
                    } else {
                        let std = (2.0f64).sqrt() / (fan_out as f64).sqrt();
                        let normal = Normal::new(0.0, std).unwrap();
                        for o in 0..fan_out {
                            for i in 0..fan_in {
                                let zeroed = k == 0 && i >= spec.input && i < enc;
                                if !zeroed {
                                    w[o * fan_in + i] = normal.sample(rng);
                                }
                            }
                        }
                    }
                }
            }
            let w = store.add(&format!("{name}.l{k}.w"), &[fan_out, fan_in], group, w)?;
            let b = store.add(&format!("{name}.l{k}.b"), &[fan_out], group, b)?;
            layers.push(Layer {
                w,
                b,
                fan_in,
                fan_out,
            });
        }
        Ok(Self::assemble(spec, layers))
    }

    /// Rebinds a network to tensors already present in `store`.
    pub fn attach(store: &ParamStore, name: &str, spec: MlpSpec) -> Result<Mlp> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (k, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let w = store.require(&format!("{name}.l{k}.w"))?;
            let b = store.require(&format!("{name}.l{k}.b"))?;
            if store.get(w).len() != fan_in * fan_out || store.get(b).len() != fan_out {
                return Err(Error::ShapeMismatch(format!(
                    "{name}.l{k} does not match spec"
                )));
            }
            layers.push(Layer {
                w,
                b,
                fan_in,
                fan_out,
            });
        }
        Ok(Self::assemble(spec, layers))
    }

    fn assemble(spec: MlpSpec, layers: Vec<Layer>) -> Mlp {
        let enc_off = spec.input;
        let mut off = enc_off + spec.encoded_input();
        let mut act_offs = Vec::new();
        for &h in &spec.hidden {
            act_offs.push((off, off + h));
            off += 2 * h;
        }
        let out_off = off;
        Mlp {
            tape_len: out_off + spec.output,
            spec,
            layers,
            enc_off,
            act_offs,
            out_off,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn output_layer(&self) -> (ParamId, ParamId) {
        let l = self.layers.last().unwrap();
        (l.w, l.b)
    }

    /// First-layer bias plus the conditioning contribution.
    pub fn cond_preact(&self, store: &ParamStore, cond: &[f64]) -> Vec<f64> {
        assert_eq!(cond.len(), self.spec.cond, "conditioning width");
        let l0 = self.layers[0];
        let w = store.get(l0.w);
        let mut pre = store.get(l0.b).to_vec();
        if !cond.is_empty() {
            let enc = self.spec.encoded_input();
            for (o, p) in pre.iter_mut().enumerate() {
                let row = &w[o * l0.fan_in + enc..(o + 1) * l0.fan_in];
                *p += dot(row, cond);
            }
        }
        pre
    }

    /// Forward pass given a precomputed first-layer bias from
    /// [`Mlp::cond_preact`].
    pub fn forward_pre(&self, store: &ParamStore, x: &[f64], pre0: &[f64]) -> MlpTape {
        assert_eq!(x.len(), self.spec.input, "input width");
        let mut buf = vec![0.0; self.tape_len];
        buf[..x.len()].copy_from_slice(x);
        let enc_w = self.spec.encoded_input();
        {
            let (head, tail) = buf.split_at_mut(self.enc_off);
            positional_encode_into(&head[..x.len()], self.spec.freqs, &mut tail[..enc_w]);
        }
        let act = self.spec.activation;
        let mut in_off = self.enc_off;
        let mut in_len = enc_w;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = store.get(layer.w);
            let last = k + 1 == self.layers.len();
            let out_off = if last {
                self.out_off
            } else {
                self.act_offs[k].0
            };
            let (src, dst) = buf.split_at_mut(out_off);
            let input = &src[in_off..in_off + in_len];
            let out = &mut dst[..layer.fan_out];
            if k == 0 {
                out.copy_from_slice(pre0);
            } else {
                out.copy_from_slice(store.get(layer.b));
            }
            for (o, y) in out.iter_mut().enumerate() {
                let row = &w[o * layer.fan_in..o * layer.fan_in + in_len];
                *y += dot(row, input);
            }
            if !last {
                let h = layer.fan_out;
                let (pre, post) = dst.split_at_mut(h);
                for (p, q) in pre.iter().zip(post[..h].iter_mut()) {
                    *q = act.apply(*p);
                }
                in_off = self.act_offs[k].1;
                in_len = h;
            }
        }
        MlpTape { buf }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], cond: &[f64]) -> (Vec<f64>, MlpTape) {
        let pre = self.cond_preact(store, cond);
        let tape = self.forward_pre(store, x, &pre);
        (self.output(&tape).to_vec(), tape)
    }

    /// Activations feeding the output layer (the encoded input when there are
    /// no hidden layers).
    pub fn last_hidden<'a>(&self, tape: &'a MlpTape) -> &'a [f64] {
        match self.act_offs.last() {
            Some(&(_, post)) => {
                &tape.buf[post..post + self.spec.hidden[self.spec.hidden.len() - 1]]
            }
            None => &tape.buf[self.enc_off..self.enc_off + self.spec.encoded_input()],
        }
    }

    pub fn output<'a>(&self, tape: &'a MlpTape) -> &'a [f64] {
        &tape.buf[self.out_off..self.out_off + self.spec.output]
    }

    /// Reverse pass. Accumulates weight gradients of every layer except the
    /// first-layer bias and conditioning columns, adds ∂L/∂x into `dx` when
    /// given, and returns ∂L/∂(first-layer pre-activation).
    pub fn backward_pre(
        &self,
        store: &ParamStore,
        tape: &MlpTape,
        d_out: &[f64],
        grads: &mut Grads,
        dx: Option<&mut [f64]>,
    ) -> Vec<f64> {
        assert_eq!(d_out.len(), self.spec.output, "output gradient width");
        let buf = &tape.buf;
        let act = self.spec.activation;
        let enc_w = self.spec.encoded_input();
        let mut delta = d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = self.layers[k];
            let (in_off, in_len) = if k == 0 {
                (self.enc_off, enc_w)
            } else {
                (self.act_offs[k - 1].1, layer.fan_in)
            };
            let input = &buf[in_off..in_off + in_len];
            {
                let gw = grads.slot(layer.w, layer.fan_in * layer.fan_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &mut gw[o * layer.fan_in..o * layer.fan_in + in_len];
                        axpy(d, input, row);
                    }
                }
            }
            if k == 0 {
                break;
            }
            {
                let gb = grads.slot(layer.b, layer.fan_out);
                axpy(1.0, &delta, gb);
            }
            let w = store.get(layer.w);
            let mut d_in = vec![0.0; layer.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &w[o * layer.fan_in..(o + 1) * layer.fan_in], &mut d_in);
                }
            }
            let (pre_off, post_off) = self.act_offs[k - 1];
            for (i, di) in d_in.iter_mut().enumerate() {
                *di *= act.derivative(buf[pre_off + i], buf[post_off + i]);
            }
            delta = d_in;
        }
        if let Some(dx) = dx {
            let l0 = self.layers[0];
            let w = store.get(l0.w);
            let mut d_enc = vec![0.0; enc_w];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &w[o * l0.fan_in..o * l0.fan_in + enc_w], &mut d_enc);
                }
            }
            positional_encode_backward(
                &buf[self.enc_off..self.enc_off + enc_w],
                &d_enc,
                self.spec.input,
                dx,
            );
        }
        delta
    }

    /// Completes a reverse pass for the first-layer bias and conditioning
    /// columns, given ∂L/∂pre0 (possibly summed over many points sharing
    /// `cond`). Returns ∂L/∂cond.
    pub fn cond_backward(
        &self,
        store: &ParamStore,
        cond: &[f64],
        d_pre0: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let l0 = self.layers[0];
        axpy(1.0, d_pre0, grads.slot(l0.b, l0.fan_out));
        let mut d_cond = vec![0.0; cond.len()];
        if cond.is_empty() {
            return d_cond;
        }
        let enc = self.spec.encoded_input();
        let w = store.get(l0.w);
        {
            let gw = grads.slot(l0.w, l0.fan_in * l0.fan_out);
            for (o, &d) in d_pre0.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, cond, &mut gw[o * l0.fan_in + enc..(o + 1) * l0.fan_in]);
                }
            }
        }
        for (o, &d) in d_pre0.iter().enumerate() {
            if d != 0.0 {
                axpy(d, &w[o * l0.fan_in + enc..(o + 1) * l0.fan_in], &mut d_cond);
            }
        }
        d_cond
    }

    /// Full reverse pass for a single [`Mlp::forward`] call. Returns
    /// `(∂L/∂x, ∂L/∂cond)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &MlpTape,
        cond: &[f64],
        d_out: &[f64],
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; self.spec.input];
        let d_pre = self.backward_pre(store, tape, d_out, grads, Some(&mut dx));
        let d_cond = self.cond_backward(store, cond, &d_pre, grads);
        (dx, d_cond)
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(spec: MlpSpec, init: Init, seed: u64) -> (ParamStore, Mlp) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::register(&mut store, "f", spec, Group::Network, init, &mut rng).unwrap();
        (store, mlp)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::new(3, &[8, 8], 2, Activation::Relu);
        let (mut store, mlp) = net(spec, Init::Kaiming, 1);
        for id in mlp.param_ids() {
            store.get_mut(id).iter_mut().for_each(|w| *w = 0.0);
        }
        let (y, _) = mlp.forward(&store, &[0.3, -1.0, 2.0], &[]);
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::new(3, &[], 3, Activation::Relu);
        let (mut store, mlp) = net(spec, Init::Kaiming, 1);
        let (w, b) = mlp.output_layer();
        let ident = [1., 0., 0., 0., 1., 0., 0., 0., 1.];
        store.get_mut(w).copy_from_slice(&ident);
        store.get_mut(b).iter_mut().for_each(|x| *x = 0.0);
        let (y, tape) = mlp.forward(&store, &[0.25, -4.0, 7.5], &[]);
        assert_eq!(y, vec![0.25, -4.0, 7.5]);
        // adjoint of y = Wx is Wᵀ g
        let mut grads = Grads::new(&store);
        let (dx, _) = mlp.backward(&store, &tape, &[], &[1.0, 2.0, 3.0], &mut grads);
        assert_eq!(dx, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_output_gradient_touches_nothing() {
        let spec = MlpSpec::new(2, &[5], 1, Activation::Tanh).with_cond(2);
        let (store, mlp) = net(spec, Init::Kaiming, 3);
        let (_, tape) = mlp.forward(&store, &[0.1, 0.2], &[0.5, -0.5]);
        let mut grads = Grads::new(&store);
        let (dx, dc) = mlp.backward(&store, &tape, &[0.5, -0.5], &[0.0], &mut grads);
        assert!(dx.iter().chain(&dc).all(|&g| g == 0.0));
        for id in mlp.param_ids() {
            if let Some(g) = grads.get(id) {
                assert!(g.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn sphere_init_is_roughly_distance() {
        let spec = MlpSpec::new(3, &[64, 64], 1, Activation::Softplus(100.0)).with_freqs(6);
        let (store, mlp) = net(spec, Init::Sphere { radius: 0.3 }, 9);
        let f = |p: [f64; 3]| mlp.forward(&store, &p, &[]).0[0];
        assert!(f([0.0, 0.0, 0.0]) < 0.0);
        assert!(f([2.0, 0.0, 0.0]) > 0.0);
        assert!(f([0.0, -2.0, 0.0]) > 0.0);
    }

    #[test]
    fn parse_activation_names() {
        for a in [
            Activation::Relu,
            Activation::Tanh,
            Activation::Softplus(100.0),
        ] {
            assert_eq!(Activation::parse(&a.name()), Some(a));
        }
        assert_eq!(Activation::parse("gelu"), None);
    }
}
