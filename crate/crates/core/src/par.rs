//! Execution policy for node-wise loops.
//!
//! With the `parallel` feature the `Par` policy dispatches to rayon; without
//! it every policy runs sequentially, so call sites never need `cfg` guards.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Seq,
    Par,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Par
        } else {
            Exec::Seq
        }
    }
}

/// Below this many items the parallel path is not worth the dispatch.
const MIN_PAR_LEN: usize = 64;

impl Exec {
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    fn parallel_for(self, len: usize) -> bool {
        cfg!(feature = "parallel") && self == Exec::Par && len >= MIN_PAR_LEN
    }

    /// Collects `f(i)` for `i in 0..len`, in index order.
    pub fn map<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.parallel_for(len) {
            return (0..len).into_par_iter().map(f).collect();
        }
        (0..len).map(f).collect()
    }

    /// Overwrites `out[i]` with `f(i)`.
    pub fn fill<F>(self, out: &mut [f64], f: F)
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.parallel_for(out.len()) {
            out.par_iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
            return;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = f(i);
        }
    }

    /// Applies `f(i, chunk)` to consecutive chunks of `width` elements.
    pub fn for_rows<F>(self, out: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.parallel_for(out.len() / width) {
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
        for (i, row) in out.chunks_mut(width).enumerate() {
            f(i, row);
        }
    }

    /// Maximum of `f(i)` over `0..len`; `-inf` when empty.
    pub fn max<F>(self, len: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.parallel_for(len) {
            return (0..len)
                .into_par_iter()
                .map(f)
                .reduce(|| f64::NEG_INFINITY, f64::max);
        }
        (0..len).map(f).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let f = |i: usize| (i as f64).sin();
        let a = Exec::Seq.map(1000, f);
        let b = Exec::Par.map(1000, f);
        assert_eq!(a, b);

        let mut x = vec![0.0; 500];
        let mut y = vec![0.0; 500];
        Exec::Seq.fill(&mut x, f);
        Exec::Par.fill(&mut y, f);
        assert_eq!(x, y);

        assert_eq!(Exec::Seq.max(1000, f), Exec::Par.max(1000, f));
        assert_eq!(Exec::Par.max(0, f), f64::NEG_INFINITY);
    }

    #[test]
    fn rows_are_visited_once() {
        let mut m = vec![0.0; 12 * 100];
        Exec::Par.for_rows(&mut m, 12, |i, row| {
            row.iter_mut().for_each(|v| *v += i as f64)
        });
        for (i, row) in m.chunks(12).enumerate() {
            assert!(row.iter().all(|&v| v == i as f64));
        }
    }
}
