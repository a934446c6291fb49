//! Arbitrary-length 1-D discrete Fourier transforms.
//!
//! Forward transform is unnormalized, `X_k = sum_n x_n e^{-2 pi i k n / L}`;
//! the inverse is scaled by `1/L` so that `ifft(fft(x)) == x`. Lengths with
//! small prime factors go through a recursive mixed-radix Cooley-Tukey
//! decomposition; large prime lengths fall back to Bluestein's chirp-z
//! algorithm on a power-of-two transform, so any length is O(L log L).

use std::f64::consts::PI;

/// In-place forward or inverse DFT of a complex signal given as split
/// real/imaginary slices of equal length.
pub fn dft_inplace(re: &mut [f64], im: &mut [f64], inverse: bool) {
    assert_eq!(re.len(), im.len());
    let n = re.len();
    if n <= 1 {
        return;
    }
    if inverse {
        // ifft(x) = conj(fft(conj(x))) / n
        for v in im.iter_mut() {
            *v = -*v;
        }
        forward(re, im);
        let scale = 1.0 / n as f64;
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            *r *= scale;
            *i = -*i * scale;
        }
    } else {
        forward(re, im);
    }
}

fn forward(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(re, im);
        return;
    }
    let p = smallest_prime_factor(n);
    if p == n {
        bluestein(re, im);
    } else {
        mixed_radix(re, im, p);
    }
}

fn smallest_prime_factor(n: usize) -> usize {
    if n.is_multiple_of(2) {
        return 2;
    }
    let mut d = 3;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return d;
        }
        d += 2;
    }
    n
}

/// Iterative radix-2 decimation-in-time FFT. `n` must be a power of two.
fn radix2(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut mask = n >> 1;
        while mask > 0 && j & mask != 0 {
            j ^= mask;
            mask >>= 1;
        }
        j |= mask;
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let mut cur_re = 1.0;
            let mut cur_im = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cur_re - im[b] * cur_im;
                let ti = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// One Cooley-Tukey split `n = p * m`: recurse on the `p` interleaved
/// subsequences of length `m`, then combine with an O(n p) butterfly.
fn mixed_radix(re: &mut [f64], im: &mut [f64], p: usize) {
    let n = re.len();
    let m = n / p;
    let mut sub_re = vec![0.0; n];
    let mut sub_im = vec![0.0; n];
    for b in 0..p {
        for a in 0..m {
            sub_re[b * m + a] = re[a * p + b];
            sub_im[b * m + a] = im[a * p + b];
        }
    }
    for b in 0..p {
        forward(
            &mut sub_re[b * m..(b + 1) * m],
            &mut sub_im[b * m..(b + 1) * m],
        );
    }
    // X[k] = sum_b w_n^{k b} Y_b[k mod m]
    let step = -2.0 * PI / n as f64;
    for k in 0..n {
        let mut acc_re = 0.0;
        let mut acc_im = 0.0;
        let km = k % m;
        for b in 0..p {
            let ang = step * ((k * b) % n) as f64;
            let (twr, twi) = (ang.cos(), ang.sin());
            let yr = sub_re[b * m + km];
            let yi = sub_im[b * m + km];
            acc_re += yr * twr - yi * twi;
            acc_im += yr * twi + yi * twr;
        }
        re[k] = acc_re;
        im[k] = acc_im;
    }
}

/// Bluestein chirp-z transform for prime (or any awkward) lengths.
fn bluestein(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let m = (2 * n - 1).next_power_of_two();
    // chirp[j] = e^{-i pi j^2 / n}; reduce j^2 mod 2n to keep angles accurate.
    let mut chirp_re = vec![0.0; n];
    let mut chirp_im = vec![0.0; n];
    for j in 0..n {
        let sq = (j * j) % (2 * n);
        let ang = -PI * sq as f64 / n as f64;
        chirp_re[j] = ang.cos();
        chirp_im[j] = ang.sin();
    }
    // a = x * chirp, zero-padded to m.
    let mut a_re = vec![0.0; m];
    let mut a_im = vec![0.0; m];
    for j in 0..n {
        a_re[j] = re[j] * chirp_re[j] - im[j] * chirp_im[j];
        a_im[j] = re[j] * chirp_im[j] + im[j] * chirp_re[j];
    }
    // b = conj(chirp), symmetric wrap-around.
    let mut b_re = vec![0.0; m];
    let mut b_im = vec![0.0; m];
    b_re[0] = chirp_re[0];
    b_im[0] = -chirp_im[0];
    for j in 1..n {
        b_re[j] = chirp_re[j];
        b_im[j] = -chirp_im[j];
        b_re[m - j] = b_re[j];
        b_im[m - j] = b_im[j];
    }
    radix2(&mut a_re, &mut a_im);
    radix2(&mut b_re, &mut b_im);
    for j in 0..m {
        let r = a_re[j] * b_re[j] - a_im[j] * b_im[j];
        let i = a_re[j] * b_im[j] + a_im[j] * b_re[j];
        a_re[j] = r;
        a_im[j] = i;
    }
    // Inverse power-of-two FFT via conjugation.
    for v in a_im.iter_mut() {
        *v = -*v;
    }
    radix2(&mut a_re, &mut a_im);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        let cr = a_re[k] * scale;
        let ci = -a_im[k] * scale;
        re[k] = cr * chirp_re[k] - ci * chirp_im[k];
        im[k] = cr * chirp_im[k] + ci * chirp_re[k];
    }
}

/// Transform every 1-D line along `axis` of a tensor with the given shape,
/// stored row-major as split re/im buffers.
pub fn transform_axis(re: &mut [f64], im: &mut [f64], shape: &[usize], axis: usize, inverse: bool) {
    assert!(axis < shape.len());
    assert_eq!(re.len(), shape.iter().product::<usize>());
    assert_eq!(re.len(), im.len());
    let len = shape[axis];
    if len <= 1 {
        return; // length-1 transform is the identity in both directions
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut line_re = vec![0.0; len];
    let mut line_im = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for l in 0..len {
                line_re[l] = re[base + l * inner];
                line_im[l] = im[base + l * inner];
            }
            dft_inplace(&mut line_re, &mut line_im, inverse);
            for l in 0..len {
                re[base + l * inner] = line_re[l];
                im[base + l * inner] = line_im[l];
            }
        }
    }
}
