//! Data-parallel execution with a sequential fallback.
//!
//! Batch operations across samples, images and feature columns take an
//! [`Exec`]. With the `parallel` feature (on by default) `Exec::Parallel`
//! runs on the rayon pool; without it every variant runs on the calling
//! thread. Results are always returned in input order, so outputs do not
//! depend on the chosen mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a batch operation distributes its work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// True when this mode actually runs on more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps a fallible function and returns the first error in input order.
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }

    /// Applies `f` to consecutive mutable chunks delimited by `offsets`
    /// (`offsets[k]..offsets[k + 1]`), passing the chunk index.
    pub fn for_each_segment<T, F>(self, data: &mut [T], offsets: &[usize], f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let mut segments = Vec::with_capacity(offsets.len().saturating_sub(1));
        let mut rest = data;
        let mut consumed = 0;
        for w in offsets.windows(2) {
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(w[1] - consumed);
            segments.push(&mut head[w[0] - consumed..]);
            consumed = w[1];
            rest = tail;
        }
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            segments
                .into_par_iter()
                .enumerate()
                .for_each(|(k, seg)| f(k, seg));
            return;
        }
        for (k, seg) in segments.into_iter().enumerate() {
            f(k, seg);
        }
    }

    /// Runs `f` over `items` with at most `workers` calls in flight.
    /// Sequential mode (or `workers <= 1`) runs everything inline.
    pub fn map_bounded<T, R, F>(self, items: &[T], workers: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        if !self.is_parallel() || workers <= 1 || items.len() <= 1 {
            return items.iter().map(f).collect();
        }
        #[cfg(feature = "parallel")]
        {
            match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                Err(err) => {
                    log::warn!("falling back to sequential execution: {err}");
                    items.iter().map(f).collect()
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            items.iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Exec::Sequential.map(&xs, |x| x * x);
        let b = Exec::Parallel.map(&xs, |x| x * x);
        assert_eq!(a, b);
        let c = Exec::Parallel.map_bounded(&xs, 4, |x| x * x);
        assert_eq!(a, c);
    }

    #[test]
    fn segments_cover_every_chunk() {
        let mut data = vec![0usize; 10];
        let offsets = [0, 3, 3, 7, 10];
        Exec::Parallel.for_each_segment(&mut data, &offsets, |k, seg| {
            for x in seg.iter_mut() {
                *x = k;
            }
        });
        assert_eq!(data, vec![0, 0, 0, 2, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs = [1, 2, 3, 4];
        let r: Result<Vec<i32>, i32> =
            Exec::Parallel.try_map(&xs, |&x| if x % 2 == 0 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(2));
    }
}
