use std::f64::consts::PI;

/// Width of the encoding of a `dims`-vector with `freqs` octaves.
pub fn encoded_width(dims: usize, freqs: usize) -> usize {
    dims * (1 + 2 * freqs)
}

/// `[x, sin(2^0 πx), cos(2^0 πx), …, sin(2^{F-1} πx), cos(2^{F-1} πx)]`, each
/// sin/cos block spanning every input dimension.
pub fn positional_encode(x: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_width(x.len(), freqs)];
    positional_encode_into(x, freqs, &mut out);
    out
}

pub fn positional_encode_into(x: &[f64], freqs: usize, out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(out.len(), encoded_width(d, freqs));
    out[..d].copy_from_slice(x);
    let mut scale = PI;
    for k in 0..freqs {
        let base = d + 2 * k * d;
        for (i, &xi) in x.iter().enumerate() {
            let (s, c) = (scale * xi).sin_cos();
            out[base + i] = s;
            out[base + d + i] = c;
        }
        scale *= 2.0;
    }
}

/// Accumulates ∂L/∂x into `dx` given ∂L/∂(encoding) and the encoding itself.
pub fn positional_encode_backward(encoded: &[f64], d_encoded: &[f64], dims: usize, dx: &mut [f64]) {
    let freqs = (encoded.len() / dims - 1) / 2;
    for i in 0..dims {
        dx[i] += d_encoded[i];
    }
    let mut scale = PI;
    for k in 0..freqs {
        let base = dims + 2 * k * dims;
        for i in 0..dims {
            let s = encoded[base + i];
            let c = encoded[base + dims + i];
            dx[i] += scale * (d_encoded[base + i] * c - d_encoded[base + dims + i] * s);
        }
        scale *= 2.0;
    }
}
