use rayon::prelude::*;

use crate::error::{Error, Result};

/// Optional worker pool. With one thread everything runs on the caller.
/// Results always come back in input order.
pub struct Workers(Option<rayon::ThreadPool>);

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self(None));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map(|p| Self(Some(p)))
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        match &self.0 {
            Some(pool) if items.len() > 1 => pool.install(|| items.par_iter().map(&f).collect()),
            _ => items.iter().map(f).collect(),
        }
    }
}
