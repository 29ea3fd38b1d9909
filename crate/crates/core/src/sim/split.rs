use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Stratified three-way split. Split sizes follow `ratios` over the whole
/// dataset (largest remainder) and every class lands in each split within one
/// sample of its proportional share.
pub fn split_dataset<T, F>(
    samples: Vec<T>,
    label_of: F,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit<T>>
where
    F: Fn(&T) -> usize,
{
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must all be positive"
        )));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must sum to 1"
        )));
    }
    let n = samples.len();
    let n_classes = samples.iter().map(&label_of).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<T>> = (0..n_classes).map(|_| Vec::new()).collect();
    for s in samples {
        let c = label_of(&s);
        by_class[c].push(s);
    }
    let present = by_class.iter().filter(|v| !v.is_empty()).count();

    let targets = largest_remainder(n, &ratios);
    if let Some(s) = targets.iter().position(|&t| t < present) {
        return Err(Error::invalid(format!(
            "split {s} would hold {} samples, fewer than the {present} classes present",
            targets[s]
        )));
    }

    // floor every (class, split) cell, then round up exactly the cells
    // needed so rows and columns both add up (a small max-flow problem)
    let exact: Vec<[f64; 3]> = by_class
        .iter()
        .map(|v| ratios.map(|r| snap(v.len() as f64 * r)))
        .collect();
    let mut alloc: Vec<[usize; 3]> = exact
        .iter()
        .map(|e| e.map(|x| x.floor() as usize))
        .collect();
    let row_need: Vec<usize> = by_class
        .iter()
        .zip(&alloc)
        .map(|(v, a)| v.len() - a.iter().sum::<usize>())
        .collect();
    let col_need: Vec<usize> = (0..3)
        .map(|s| targets[s] - alloc.iter().map(|a| a[s]).sum::<usize>())
        .collect();
    let fractional: Vec<[bool; 3]> = exact.iter().map(|e| e.map(|x| x.fract() > 0.0)).collect();
    for (c, s) in round_up_cells(&row_need, &col_need, &fractional)? {
        alloc[c][s] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplit {
        train: Vec::with_capacity(targets[0]),
        val: Vec::with_capacity(targets[1]),
        test: Vec::with_capacity(targets[2]),
    };
    for (mut items, a) in by_class.into_iter().zip(alloc) {
        items.shuffle(&mut rng);
        let mut it = items.into_iter();
        out.train.extend(it.by_ref().take(a[0]));
        out.val.extend(it.by_ref().take(a[1]));
        out.test.extend(it);
    }
    Ok(out)
}

/// Removes float noise from values that are integers in exact arithmetic.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Chooses cells to round up: row `c` needs `rows[c]` cells, column `s`
/// needs `cols[s]`, and only fractional cells are eligible.
fn round_up_cells(
    rows: &[usize],
    cols: &[usize],
    eligible: &[[bool; 3]],
) -> Result<Vec<(usize, usize)>> {
    // assignment[c][s] is true when cell (c, s) carries one unit of flow
    let mut assigned: Vec<[bool; 3]> = vec![[false; 3]; rows.len()];
    let mut col_load = [0usize; 3];

    fn augment(
        c: usize,
        eligible: &[[bool; 3]],
        assigned: &mut [[bool; 3]],
        col_load: &mut [usize; 3],
        cols: &[usize],
        seen: &mut [bool; 3],
    ) -> bool {
        for s in 0..3 {
            if !eligible[c][s] || assigned[c][s] || seen[s] {
                continue;
            }
            seen[s] = true;
            if col_load[s] < cols[s] {
                assigned[c][s] = true;
                col_load[s] += 1;
                return true;
            }
            // column full: try to move one of its units to another column
            for other in 0..assigned.len() {
                if assigned[other][s] && other != c {
                    assigned[other][s] = false;
                    if augment(other, eligible, assigned, col_load, cols, seen) {
                        assigned[c][s] = true;
                        return true;
                    }
                    assigned[other][s] = true;
                }
            }
        }
        false
    }

    for (c, &need) in rows.iter().enumerate() {
        for _ in 0..need {
            let mut seen = [false; 3];
            if !augment(c, eligible, &mut assigned, &mut col_load, cols, &mut seen) {
                return Err(Error::invalid(
                    "no stratified rounding exists for these ratios",
                ));
            }
        }
    }
    Ok(assigned
        .iter()
        .enumerate()
        .flat_map(|(c, a)| (0..3).filter(move |&s| a[s]).map(move |s| (c, s)))
        .collect())
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| n as f64 * r);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        exact[b]
            .fract()
            .partial_cmp(&exact[a].fract())
            .expect("finite")
            .then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[s] += 1;
        rest -= 1;
    }
    counts
}
