//! Shared helpers for the integration suites: instance samplers and the
//! exhaustive vertex-candidate oracle used to certify the LP allocator.

use feddd_core::AllocInstance;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_instance(n: usize, delta: f64, seed: u64) -> AllocInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut k = Vec::new();
    let mut u = Vec::new();
    let mut w = Vec::new();
    for _ in 0..n {
        let kk: f64 = rng.gen_range(0.5..6.0);
        let cmp: f64 = rng.gen_range(0.01..0.4);
        a.push(kk + cmp);
        k.push(kk);
        u.push(rng.gen_range(2e4..2e5));
        w.push(rng.gen_range(0.0..1.0));
    }
    AllocInstance {
        a,
        k,
        u,
        w,
        delta,
        a_server: 0.6,
        d_max: 0.8,
    }
}

/// Exhaustive brute force over vertex candidates of the allocation polytope.
///
/// A vertex in (d, t) space activates the budget equality plus n more
/// constraints drawn from {d_i = 0, d_i = d_max, t = a_i - k_i d_i}. Per
/// client that means one of six states: a single active constraint (Zero,
/// Max, Kink), a bound with the kink simultaneously active (ZeroKink,
/// MaxKink), or nothing (Free). Doubly-active clients pin t directly and
/// free up one coordinate for the budget to determine, so patterns need
/// #Free <= #doubles. Enumerating all 6^n patterns and solving each linear
/// system reaches the exact optimum (to rounding), independently of the
/// simplex path.
pub fn vertex_oracle(inst: &AllocInstance) -> f64 {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Zero,
        Max,
        Kink,
        ZeroKink,
        MaxKink,
        Free,
    }
    use State::*;
    let n = inst.len();
    let total_u: f64 = inst.u.iter().sum();
    let budget = (1.0 - inst.a_server) * total_u;
    let d_tol = 1e-9 * inst.d_max.max(1.0);
    let budget_tol = 1e-9 * total_u;
    let t_tol = 1e-9 * inst.a.iter().fold(1.0f64, |m, &v| m.max(v.abs()));

    let mut best = f64::INFINITY;
    let mut states = vec![Zero; n];
    let patterns = 6usize.pow(n as u32);
    let mut d = vec![0.0; n];
    'patterns: for code in 0..patterns {
        let mut c = code;
        for s in states.iter_mut() {
            *s = match c % 6 {
                0 => Zero,
                1 => Max,
                2 => Kink,
                3 => ZeroKink,
                4 => MaxKink,
                _ => Free,
            };
            c /= 6;
        }
        let frees: Vec<usize> = (0..n).filter(|&i| states[i] == Free).collect();
        if frees.len() > 1 {
            continue;
        }

        // t pinned by doubly-active clients, if any; they must agree.
        let mut t_pinned: Option<f64> = None;
        for i in 0..n {
            let bound = match states[i] {
                ZeroKink => 0.0,
                MaxKink => inst.d_max,
                _ => continue,
            };
            let ti = inst.a[i] - inst.k[i] * bound;
            match t_pinned {
                None => t_pinned = Some(ti),
                Some(t0) if (ti - t0).abs() <= t_tol => {}
                Some(_) => continue 'patterns,
            }
        }
        if t_pinned.is_none() && !frees.is_empty() {
            // Underdetermined: not a vertex.
            continue;
        }

        let kinks: Vec<usize> = (0..n).filter(|&i| states[i] == Kink).collect();
        let fixed: f64 = (0..n)
            .map(|i| match states[i] {
                Max | MaxKink => inst.u[i] * inst.d_max,
                _ => 0.0,
            })
            .sum();
        let t = match t_pinned {
            Some(t) => t,
            None => {
                if kinks.is_empty() {
                    // Pure-bound pattern: the budget must already balance.
                    if (fixed - budget).abs() > budget_tol {
                        continue;
                    }
                    f64::NEG_INFINITY
                } else {
                    let mass: f64 = kinks.iter().map(|&i| inst.u[i] / inst.k[i]).sum();
                    let load: f64 = kinks
                        .iter()
                        .map(|&i| inst.u[i] * inst.a[i] / inst.k[i])
                        .sum();
                    (load + fixed - budget) / mass
                }
            }
        };

        let mut spent = fixed;
        for &i in &kinks {
            let di = (inst.a[i] - t) / inst.k[i];
            spent += inst.u[i] * di;
            d[i] = di;
        }
        for i in 0..n {
            match states[i] {
                Zero | ZeroKink => d[i] = 0.0,
                Max | MaxKink => d[i] = inst.d_max,
                _ => {}
            }
        }
        if let Some(&f) = frees.first() {
            d[f] = (budget - spent) / inst.u[f];
        } else if t_pinned.is_some() && (spent - budget).abs() > budget_tol {
            continue;
        }

        let feasible = d
            .iter()
            .all(|&di| (-d_tol..=inst.d_max + d_tol).contains(&di));
        if feasible {
            let clamped: Vec<f64> = d.iter().map(|&di| di.clamp(0.0, inst.d_max)).collect();
            best = best.min(inst.objective(&clamped));
        }
    }
    best
}
