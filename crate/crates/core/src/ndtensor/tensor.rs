use crate::error::{shape_err, Result};
use crate::Scalar;

/// Dense row-major array of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(&[m, n], rows.iter().flatten().copied().collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err!("expected a 2-D tensor, got shape {:?}", s)),
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> S {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self { shape: vec![m, n], data: out })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("shapes differ: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type, e.g. for comparing an f32 run against f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| T::of(x.to_f64_lossy())).collect() }
    }
}

/// `out += a(m×k) · b(k×n)`, all row-major.
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a(m×k) · b(n×k)ᵀ`.
pub(crate) fn gemm_bt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += a(k×m)ᵀ · b(k×n)`.
pub(crate) fn gemm_at_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Bilinear resampling of a `[C, H, W]` (or `[H, W]`) tensor to `out_h × out_w`
/// using half-pixel centers. Forward-only: observations are never
/// differentiated through.
pub fn bilinear_downsample<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (c, h, w) = match input.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(shape_err!("bilinear_downsample expects [H,W] or [C,H,W], got {:?}", s)),
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear_downsample on empty extent"));
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let taps = |o: usize, scale: f64, extent: usize| -> (usize, usize, S) {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, S::of(src - i0 as f64))
    };
    let ytaps: Vec<_> = (0..out_h).map(|o| taps(o, sy, h)).collect();
    let xtaps: Vec<_> = (0..out_w).map(|o| taps(o, sx, w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &input.data()[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ytaps {
            for &(x0, x1, fx) in &xtaps {
                let top = plane[y0 * w + x0] * (S::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (S::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (S::one() - fy) + bot * fy);
            }
        }
    }
    let shape: Vec<usize> =
        if input.shape().len() == 2 { vec![out_h, out_w] } else { vec![c, out_h, out_w] };
    Tensor::new(&shape, out)
}
