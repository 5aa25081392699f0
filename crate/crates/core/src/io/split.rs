use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Splits `ids` into `(train, val)` with `round(val_fraction * n)` validation
/// items chosen by a seeded shuffle. Both parts keep the input order.
pub fn split_train_val<T: Clone>(ids: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = (val_fraction * ids.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x5B17]));
    let mut is_val = vec![false; ids.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (id, v) in ids.iter().zip(is_val) {
        if v {
            val.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    Ok((train, val))
}
