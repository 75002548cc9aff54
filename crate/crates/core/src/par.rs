//! Data-parallel helpers with a sequential fallback.
//!
//! Without the `parallel` feature every [`Exec`] runs sequentially.

use std::sync::mpsc;

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
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Apply `f` to every item, keeping input order.
    pub fn map<T, R, F>(self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.into_par_iter().map(f).collect();
        }
        items.into_iter().map(f).collect()
    }

    /// Run `f` off the current thread when parallel, inline otherwise. The
    /// result arrives on the returned receiver either way.
    pub fn spawn<R, F>(self, f: F) -> mpsc::Receiver<R>
    where
        R: Send + 'static,
        F: FnOnce() -> R + Send + 'static,
    {
        let (tx, rx) = mpsc::sync_channel(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            rayon::spawn(move || {
                let _ = tx.send(f());
            });
            return rx;
        }
        let _ = tx.send(f());
        rx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_keeps_order_in_both_modes() {
        let items: Vec<u64> = (0..100).collect();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let out = exec.map(items.clone(), |x| x * x);
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }

    #[test]
    fn spawn_delivers() {
        for exec in [Exec::Sequential, Exec::Parallel] {
            assert_eq!(exec.spawn(|| 7).recv().unwrap(), 7);
        }
    }
}
