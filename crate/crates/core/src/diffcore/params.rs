/// A collection of named parameter tensors visited in a fixed order.
///
/// Gradients are represented by a value of the same type, so parameter and
/// gradient blocks line up one-to-one.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

pub fn param_count<P: ParamSet + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, data| n += data.len());
    n
}

pub fn flatten<P: ParamSet + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, data| out.extend_from_slice(data));
    out
}

/// Overwrites every parameter from `flat`, which must hold exactly
/// [`param_count`] values.
pub fn unflatten<P: ParamSet + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, _, data| {
        data.copy_from_slice(&flat[offset..offset + data.len()]);
        offset += data.len();
    });
    assert_eq!(offset, flat.len(), "flat parameter length mismatch");
}

/// `dst += scale * src`.
pub fn accumulate<P: ParamSet + ?Sized>(dst: &mut P, src: &P, scale: f64) {
    let flat = flatten(src);
    let mut offset = 0;
    dst.visit_mut("", &mut |_, _, data| {
        let len = data.len();
        for (d, s) in data.iter_mut().zip(&flat[offset..offset + len]) {
            *d += scale * s;
        }
        offset += len;
    });
}

/// Names and shapes of every block, in visiting order.
pub fn layout<P: ParamSet + ?Sized>(p: &P, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
    out
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, item) in self.iter().enumerate() {
            item.visit(&format!("{prefix}.{k}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (k, item) in self.iter_mut().enumerate() {
            item.visit_mut(&format!("{prefix}.{k}"), f);
        }
    }
}

/// A single trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalar(pub f64);

impl ParamSet for Scalar {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, &[1], std::slice::from_ref(&self.0));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        f(prefix, &[1], std::slice::from_mut(&mut self.0));
    }
}

impl<D: ndarray::Dimension> ParamSet for ndarray::Array<f64, D> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, self.shape(), self.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.shape().to_vec();
        f(prefix, &shape, self.as_slice_mut().expect("standard layout"));
    }
}
