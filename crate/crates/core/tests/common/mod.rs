#![allow(dead_code)]

use fjsp_rl::fjsp::{Instance, Time};
use fjsp_rl::io::RngStream;

/// Optimal makespan by enumerating every machine assignment and every
/// processing order on each machine, timing each combination as a
/// semi-active schedule. Orders that deadlock against job precedence are
/// discarded.
pub fn brute_force_optimum(inst: &Instance) -> Time {
    let ops: Vec<(usize, usize)> =
        (0..inst.n_jobs()).flat_map(|j| (0..inst.job(j).len()).map(move |k| (j, k))).collect();
    let choices: Vec<Vec<(usize, Time)>> = ops.iter().map(|&(j, k)| inst.op(j, k).durations().to_vec()).collect();
    let mut best = Time::MAX;
    let mut pick = vec![0usize; ops.len()];
    loop {
        let mut per_machine: Vec<Vec<usize>> = vec![Vec::new(); inst.n_machines()];
        for (o, &c) in pick.iter().enumerate() {
            per_machine[choices[o][c].0].push(o);
        }
        let dur: Vec<Time> = pick.iter().enumerate().map(|(o, &c)| choices[o][c].1).collect();
        for_each_order(&mut per_machine, 0, &mut |orders| {
            if let Some(c) = time_orders(inst, &ops, &dur, orders) {
                best = best.min(c);
            }
        });
        // odometer over assignment choices
        let mut i = 0;
        loop {
            if i == pick.len() {
                return best;
            }
            pick[i] += 1;
            if pick[i] < choices[i].len() {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
    }
}

fn for_each_order(orders: &mut Vec<Vec<usize>>, machine: usize, f: &mut impl FnMut(&[Vec<usize>])) {
    if machine == orders.len() {
        f(orders);
        return;
    }
    let n = orders[machine].len();
    permute(orders, machine, 0, n, f);
}

fn permute(orders: &mut Vec<Vec<usize>>, machine: usize, k: usize, n: usize, f: &mut impl FnMut(&[Vec<usize>])) {
    if k == n {
        for_each_order(orders, machine + 1, f);
        return;
    }
    for i in k..n {
        orders[machine].swap(k, i);
        permute(orders, machine, k + 1, n, f);
        orders[machine].swap(k, i);
    }
}

/// Longest-path timing of fixed machine orders; `None` on a cycle.
fn time_orders(inst: &Instance, ops: &[(usize, usize)], dur: &[Time], orders: &[Vec<usize>]) -> Option<Time> {
    let n = ops.len();
    let mut end: Vec<Option<Time>> = vec![None; n];
    let mut machine_pos = vec![0usize; orders.len()];
    let mut job_pos = vec![0usize; inst.n_jobs()];
    let mut job_end = vec![0; inst.n_jobs()];
    let mut machine_end = vec![0; orders.len()];
    let mut done = 0;
    while done < n {
        let mut progressed = false;
        for (m, order) in orders.iter().enumerate() {
            while machine_pos[m] < order.len() {
                let o = order[machine_pos[m]];
                let (j, k) = ops[o];
                if job_pos[j] != k {
                    break;
                }
                let start = job_end[j].max(machine_end[m]);
                let e = start + dur[o];
                end[o] = Some(e);
                job_end[j] = e;
                machine_end[m] = e;
                job_pos[j] += 1;
                machine_pos[m] += 1;
                done += 1;
                progressed = true;
            }
        }
        if !progressed {
            return None;
        }
    }
    end.into_iter().map(|e| e.unwrap()).max()
}

/// Random instance with at most `max_ops` operations in total.
pub fn random_tiny_instance(rng: &mut RngStream, max_ops: usize) -> Instance {
    let m = rng.uniform(1, 3) as usize;
    let n_jobs = rng.uniform(1, 3) as usize;
    let mut budget = max_ops;
    let mut jobs = Vec::new();
    for j in 0..n_jobs {
        let left_jobs = n_jobs - j - 1;
        let cap = (budget - left_jobs).min(3);
        let n_ops = rng.uniform(1, cap as u64) as usize;
        budget -= n_ops;
        let job = (0..n_ops)
            .map(|_| {
                let mut ms: Vec<usize> = (0..m).filter(|_| rng.uniform(0, 1) == 1).collect();
                if ms.is_empty() {
                    ms.push(rng.uniform(0, m as u64 - 1) as usize);
                }
                ms.into_iter().map(|mm| (mm, rng.uniform(1, 9))).collect()
            })
            .collect();
        jobs.push(job);
    }
    Instance::new(m, jobs).unwrap()
}

/// J0: O00{m0:3, m1:5}, O01{m0:2, m1:1}; J1: O10{m0:2, m1:4}.
pub fn tiny_oracle_instance() -> Instance {
    Instance::new(2, vec![vec![vec![(0, 3), (1, 5)], vec![(0, 2), (1, 1)]], vec![vec![(0, 2), (1, 4)]]]).unwrap()
}
