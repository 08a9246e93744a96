use rayon::prelude::*;

use crate::error::Result;

/// Parallel map that keeps input order and reports the first error in that
/// order, so results do not depend on scheduling.
pub(crate) fn try_par_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    let results: Vec<Result<U>> = items.par_iter().map(f).collect();
    results.into_iter().collect()
}
