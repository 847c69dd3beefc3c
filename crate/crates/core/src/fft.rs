//! Iterative radix-2 Cooley-Tukey transform on split real/imaginary buffers.

use crate::tensor::{lit, Real};

pub fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place forward DFT, `X_k = sum_n x_n exp(-2 pi i k n / N)`.
///
/// Panics if the length is not a power of two.
pub fn fft_inplace<T: Real>(re: &mut [T], im: &mut [T]) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(is_pow2(n), "fft length {n} is not a power of two");
    if n == 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * std::f64::consts::PI / len as f64;
        for k in 0..half {
            let (s, c) = (step * k as f64).sin_cos();
            let (wr, wi) = (lit::<T>(c), lit::<T>(s));
            let mut start = 0;
            while start < n {
                let a = start + k;
                let b = a + half;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] = re[a] + tr;
                im[a] = im[a] + ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// In-place 2-D forward DFT of an `h x w` row-major plane.
pub fn fft2_inplace<T: Real>(re: &mut [T], im: &mut [T], h: usize, w: usize) {
    assert_eq!(re.len(), h * w);
    for row in 0..h {
        let r = row * w..(row + 1) * w;
        fft_inplace(&mut re[r.clone()], &mut im[r]);
    }
    let mut cr = vec![T::zero(); h];
    let mut ci = vec![T::zero(); h];
    for col in 0..w {
        for row in 0..h {
            cr[row] = re[row * w + col];
            ci[row] = im[row * w + col];
        }
        fft_inplace(&mut cr, &mut ci);
        for row in 0..h {
            re[row * w + col] = cr[row];
            im[row * w + col] = ci[row];
        }
    }
}
