use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// dataset id -> number of instances available.
pub type Inventory = BTreeMap<String, u64>;
/// dataset id -> number of instances to draw.
pub type Allocation = BTreeMap<String, u64>;

/// Split `budget` instances across datasets as evenly as inventory allows.
///
/// Each round the remaining budget is shared equally (floor) over the
/// datasets that still have room. A dataset that cannot fill its share gives
/// everything it has and drops out; otherwise every dataset takes the share
/// and the flooring remainder goes one apiece in ascending id order.
pub fn balanced_allocate(inv: &Inventory, budget: u64) -> Result<Allocation> {
    if budget == 0 {
        return Err(Error::invalid("allocation budget must be positive"));
    }
    let available: u64 = inv.values().sum();
    if available < budget {
        return Err(Error::InsufficientInventory { budget, available });
    }

    let mut alloc: Allocation = inv.keys().map(|d| (d.clone(), 0)).collect();
    let room = |alloc: &Allocation, d: &str| inv[d] - alloc[d];
    let mut remaining = budget;
    while remaining > 0 {
        let active: Vec<&String> = inv.keys().filter(|d| room(&alloc, d) > 0).collect();
        let share = remaining / active.len() as u64;
        let short: Vec<&String> = active
            .iter()
            .copied()
            .filter(|d| room(&alloc, d) < share)
            .collect();
        if !short.is_empty() {
            for d in short {
                let r = room(&alloc, d);
                *alloc.get_mut(d).unwrap() += r;
                remaining -= r;
            }
            continue;
        }
        for d in &active {
            *alloc.get_mut(*d).unwrap() += share;
        }
        remaining -= share * active.len() as u64;
        for d in &active {
            if remaining == 0 {
                break;
            }
            if room(&alloc, d) > 0 {
                *alloc.get_mut(*d).unwrap() += 1;
                remaining -= 1;
            }
        }
    }
    Ok(alloc)
}
