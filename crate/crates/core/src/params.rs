use crate::tensor::Real;

/// Named traversal over every trainable tensor of a parameter group, in a
/// fixed order. Optimizers, checkpoints and gradient checks all rely on that
/// order being stable.
pub trait Params<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, p| n += p.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, p| out.extend_from_slice(p));
        out
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, p| p.fill(T::zero()));
        z
    }

    fn scale(&mut self, s: T) {
        self.visit_mut(&mut |_, _, p| p.iter_mut().for_each(|x| *x *= s));
    }

    /// `self += other`, tensor by tensor.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |_, _, p| {
            let n = p.len();
            for (x, y) in p.iter_mut().zip(&flat[off..off + n]) {
                *x += *y;
            }
            off += n;
        });
    }
}

/// Sum of squares, accumulated in f64.
pub fn sq_norm<T: Real, P: Params<T> + ?Sized>(p: &P) -> f64 {
    let mut s = 0.0;
    p.visit(&mut |_, _, xs| s += xs.iter().map(|x| x.f64() * x.f64()).sum::<f64>());
    s
}
