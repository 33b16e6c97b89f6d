use std::collections::HashSet;

/// Straightforward greedy reference over a dense similarity table.
pub fn cluster_reference(
    names: &[String],
    vecs: &[Vec<f32>],
    threshold: f64,
    min_size: usize,
) -> Vec<(String, Vec<String>, bool)> {
    let n = names.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| names[a].cmp(&names[b]));
    let sim = |a: usize, b: usize| -> f64 {
        vecs[a]
            .iter()
            .zip(&vecs[b])
            .map(|(x, y)| *x as f64 * *y as f64)
            .sum()
    };
    let hood: Vec<Vec<usize>> = idx
        .iter()
        .map(|&i| {
            idx.iter()
                .copied()
                .filter(|&j| j == i || sim(i, j) >= threshold)
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).filter(|&p| hood[p].len() >= min_size).collect();
    order.sort_by(|&p, &q| {
        hood[q]
            .len()
            .cmp(&hood[p].len())
            .then(names[idx[p]].cmp(&names[idx[q]]))
    });
    let mut taken: HashSet<usize> = HashSet::new();
    let mut out = Vec::new();
    for p in order {
        let seed = idx[p];
        if taken.contains(&seed) {
            continue;
        }
        let free: Vec<usize> = hood[p]
            .iter()
            .copied()
            .filter(|j| !taken.contains(j))
            .collect();
        if free.len() < min_size {
            continue;
        }
        taken.extend(free.iter().copied());
        let mut members: Vec<String> = free.iter().map(|&j| names[j].clone()).collect();
        members.sort();
        out.push((names[seed].clone(), members, false));
    }
    for &i in &idx {
        if !taken.contains(&i) {
            out.push((names[i].clone(), vec![names[i].clone()], true));
        }
    }
    out
}

/// 50 vectors scattered around four random centres; `case` picks the spread
/// and the minimum community size.
pub fn clustering_instance(
    rng: &mut neuronscope::rng::SplitMix64,
    case: usize,
) -> (
    neuronscope::descriptors::EmbeddingTable,
    neuronscope::descriptors::ClusterParams,
) {
    let dim = 6;
    let centres: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..dim).map(|_| rng.gaussian()).collect())
        .collect();
    let spread = [0.1, 0.4, 0.8][case % 3];
    let rows: Vec<(String, Vec<f32>)> = (0..50)
        .map(|i| {
            let c = &centres[rng.below(4) as usize];
            let v = c
                .iter()
                .map(|x| (x + spread * rng.gaussian()) as f32)
                .collect();
            (format!("surface {:02}", (i * 37) % 50), v)
        })
        .collect();
    let table = neuronscope::descriptors::EmbeddingTable::from_raw(dim as u32, rows).unwrap();
    let params = neuronscope::descriptors::ClusterParams {
        threshold: 0.75,
        min_community_size: 2 + case % 4,
    };
    (table, params)
}
