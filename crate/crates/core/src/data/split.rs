//! Scenario-stratified, label-balanced train/val/test split.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::IndexEntry;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn parts(&self) -> [&Vec<usize>; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Largest-remainder apportionment of `n` over `ratios`.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut out = exact.map(|x| x.floor() as usize);
    let mut left = n - out.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[k] += 1;
        left -= 1;
    }
    out
}

/// Split dataset indices into train/val/test.
///
/// Each scenario contributes to every part in proportion to `ratios` (within
/// one sample), the global sizes match largest-remainder targets, and inside
/// a scenario labels are spread evenly across the parts.
pub fn split_dataset(entries: &[IndexEntry], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6
    {
        return Err(Error::config(
            "split",
            format!("ratios {ratios:?} must be non-negative and sum to 1"),
        ));
    }
    let targets = apportion(entries.len(), &ratios);
    let mut by_scenario: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_scenario.entry(e.scenario_id).or_default().push(i);
    }

    // per-scenario quotas: floors first, leftovers to the part furthest
    // below its global target
    let mut quotas: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
    let mut assigned = [0usize; 3];
    for (&s, idx) in &by_scenario {
        let q = ratios.map(|r| (r * idx.len() as f64).floor() as usize);
        assigned.iter_mut().zip(q).for_each(|(a, b)| *a += b);
        quotas.insert(s, q);
    }
    for (&s, idx) in &by_scenario {
        let q = quotas.get_mut(&s).expect("scenario present");
        let mut left = idx.len() - q.iter().sum::<usize>();
        let mut used = [false; 3];
        while left > 0 {
            let k = (0..3)
                .filter(|&k| !used[k])
                .max_by_key(|&k| (targets[k] as i64 - assigned[k] as i64, std::cmp::Reverse(k)))
                .unwrap_or(0);
            used[k] = true;
            q[k] += 1;
            assigned[k] += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (s, idx) in by_scenario {
        let q = quotas[&s];
        let mut keyed: Vec<(usize, u64, usize)> = idx
            .iter()
            .map(|&i| (entries[i].label, rng.gen(), i))
            .collect();
        keyed.sort_unstable();
        let mut got = [0usize; 3];
        for (_, _, i) in keyed {
            // largest proportional deficit after counting this sample
            let k = (0..3)
                .filter(|&k| got[k] < q[k])
                .max_by(|&a, &b| {
                    let da = (q[a] - got[a]) as f64 / q[a] as f64;
                    let db = (q[b] - got[b]) as f64 / q[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("quotas cover the scenario");
            got[k] += 1;
            match k {
                0 => split.train.push(i),
                1 => split.val.push(i),
                _ => split.test.push(i),
            }
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
