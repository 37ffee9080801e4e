//! Parameter averaging.

use std::sync::Arc;

use crate::nn::{NnError, ParamVector};

/// Unweighted mean of the members' parameters. Members are summed in
/// ascending id order, so the result does not depend on how they are listed.
pub fn aggregate_simdeep(members: &[(usize, &ParamVector)]) -> Result<ParamVector, NnError> {
    let mut sorted: Vec<&(usize, &ParamVector)> = members.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let (_, first) = sorted
        .first()
        .ok_or_else(|| NnError::Invalid("aggregation needs at least one member".into()))?;
    if sorted.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc = vec![0.0; first.len()];
    for (_, p) in &sorted {
        first.check_layout(p)?;
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += v;
        }
    }
    let n = sorted.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    ParamVector::from_values(Arc::clone(first.layout()), acc)
}

/// Size-weighted mean `sum N_k w_k / sum N_k`. A single update is returned
/// verbatim.
pub fn aggregate_fedavg(updates: &[(&ParamVector, usize)]) -> Result<ParamVector, NnError> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| NnError::Invalid("aggregation needs at least one update".into()))?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(NnError::Invalid("aggregation weights sum to zero".into()));
    }
    if updates.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc = vec![0.0; first.len()];
    for (p, n) in updates {
        first.check_layout(p)?;
        let w = *n as f64;
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += w * v;
        }
    }
    let total = total as f64;
    acc.iter_mut().for_each(|a| *a /= total);
    ParamVector::from_values(Arc::clone(first.layout()), acc)
}
