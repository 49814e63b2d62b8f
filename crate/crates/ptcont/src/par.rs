//! Thin switch between rayon and plain loops.
//!
//! The library calls the `par_*` functions everywhere it is data-parallel
//! (per-interval Jacobian condensation, per-sample oracle sweeps). With the
//! default `parallel` feature these dispatch to rayon; without it they fall
//! through to the `seq_*` twins below, which are also exported so benchmarks
//! can compare both code paths inside one binary.

/// Map `f` over `items`, preserving order of the results.
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(|x| f(x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq_map(items, f)
    }
}

/// Apply `f` to every element of `items` in place, with its index.
pub fn par_for_each_indexed<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, x)| f(i, x));
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq_for_each_indexed(items, f)
    }
}

/// Sequential twin of [`par_map`].
pub fn seq_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Sequential twin of [`par_for_each_indexed`].
pub fn seq_for_each_indexed<T, F>(items: &mut [T], f: F)
where
    F: Fn(usize, &mut T),
{
    for (i, x) in items.iter_mut().enumerate() {
        f(i, x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_and_seq_agree() {
        let xs: Vec<f64> = (0..257).map(|i| i as f64 * 0.37).collect();
        let a = par_map(&xs, |x| x.sin() * x.cos());
        let b = seq_map(&xs, |x| x.sin() * x.cos());
        assert_eq!(a, b, "par_map must preserve order and values");

        let mut u: Vec<f64> = vec![0.0; 64];
        let mut v: Vec<f64> = vec![0.0; 64];
        par_for_each_indexed(&mut u, |i, x| *x = (i * i) as f64);
        seq_for_each_indexed(&mut v, |i, x| *x = (i * i) as f64);
        assert_eq!(u, v);
    }
}
