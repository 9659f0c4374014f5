//! Independent reference computations used by several test targets.
#![allow(dead_code)]

use edgeloop::control::{Mpc, MpcConfig};
use edgeloop::des::{RngStream, SimTime};
use edgeloop::net::{NetConfig, NetModel, NodeId, ProfileTable};
use edgeloop::plant::{PlantParams, PlantProcess, PlantState};
use edgeloop::runtime::{ActorId, AppGraph, AppParams, OffBeamPolicy, Runtime, RuntimeConfig};
use nalgebra::{DMatrix, DVector};

/// Random symmetric positive definite matrix `MᵀM + shift·I`.
pub fn random_spd(rng: &mut RngStream, n: usize, shift: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
    let h = m.transpose() * &m + DMatrix::identity(n, n) * shift;
    (&h + h.transpose()) * 0.5
}

pub fn random_vec(rng: &mut RngStream, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.standard_normal())
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, ascending.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 =
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off.sqrt() <= 1e-14 * a.norm() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Free,
    Lower,
    Upper,
}

/// Minimiser of `½zᵀHz + gᵀz` over `lb ≤ z ≤ ub` by enumerating every
/// active set and keeping the one that satisfies the KKT conditions.
pub fn box_qp_oracle(h: &DMatrix<f64>, g: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> DVector<f64> {
    let n = g.len();
    let total = 3usize.pow(n as u32);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..total {
        let mut c = code;
        let sides: Vec<Side> = (0..n)
            .map(|_| {
                let s = [Side::Free, Side::Lower, Side::Upper][c % 3];
                c /= 3;
                s
            })
            .collect();
        let mut z = DVector::zeros(n);
        let mut ok = true;
        for i in 0..n {
            match sides[i] {
                Side::Lower if lb[i].is_finite() => z[i] = lb[i],
                Side::Upper if ub[i].is_finite() => z[i] = ub[i],
                Side::Free => {}
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let free: Vec<usize> = (0..n).filter(|&i| sides[i] == Side::Free).collect();
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |r, c| h[(free[r], free[c])]);
            let rhs = DVector::from_fn(free.len(), |r, _| {
                let i = free[r];
                -(g[i] + (0..n).filter(|j| sides[*j] != Side::Free).map(|j| h[(i, j)] * z[j]).sum::<f64>())
            });
            let Some(sol) = hff.lu().solve(&rhs) else { continue };
            for (r, &i) in free.iter().enumerate() {
                z[i] = sol[r];
            }
        }
        let grad = h * &z + g;
        let tol = 1e-9 * (1.0 + grad.amax());
        let kkt = (0..n).all(|i| match sides[i] {
            Side::Free => z[i] >= lb[i] - 1e-9 && z[i] <= ub[i] + 1e-9,
            Side::Lower => grad[i] >= -tol,
            Side::Upper => grad[i] <= tol,
        });
        if kkt {
            let f = 0.5 * z.dot(&(h * &z)) + g.dot(&z);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, z));
            }
        }
    }
    best.expect("a strictly convex box QP has a KKT point").1
}

/// Minimiser of `½zᵀHz + gᵀz + ρ/2·Σ(max(0, aᵢz − hiᵢ)² + max(0, loᵢ − aᵢz)²)`
/// over a box, by enumerating which side of each row the optimum sits on and
/// solving the resulting box QP exactly.
#[allow(clippy::too_many_arguments)]
pub fn soft_qp_oracle(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    a: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    let m = a.nrows();
    let objective = |z: &DVector<f64>| {
        let az = a * z;
        let pen: f64 = (0..m).map(|i| (az[i] - hi[i]).max(0.0).powi(2) + (lo[i] - az[i]).max(0.0).powi(2)).sum();
        0.5 * z.dot(&(h * z)) + g.dot(z) + 0.5 * rho * pen
    };
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(m as u32) {
        let mut c = code;
        let mut hp = h.clone();
        let mut gp = g.clone();
        let mut pattern = Vec::with_capacity(m);
        for i in 0..m {
            let side = c % 3;
            c /= 3;
            pattern.push(side);
            let row = a.row(i).transpose();
            let bound = match side {
                1 => hi[i],
                2 => lo[i],
                _ => continue,
            };
            hp += &row * row.transpose() * rho;
            gp -= &row * (rho * bound);
        }
        let z = box_qp_oracle(&hp, &gp, lb, ub);
        let az = a * &z;
        let consistent = (0..m).all(|i| match pattern[i] {
            1 => az[i] >= hi[i] - 1e-9,
            2 => az[i] <= lo[i] + 1e-9,
            _ => az[i] >= lo[i] - 1e-9 && az[i] <= hi[i] + 1e-9,
        });
        if consistent {
            let f = objective(&z);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, z));
            }
        }
    }
    best.expect("some activity pattern is consistent").1
}

/// `exp(M)` for nilpotent `M` by its finite power series.
pub fn expm_nilpotent(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=n {
        term = &term * m / k as f64;
        sum += &term;
    }
    sum
}

pub struct StressReport {
    pub migrations: usize,
    pub held_back: u64,
    pub forwarded: u64,
    pub ticks: u64,
}

/// Overheads with a heavy right tail, so tokens routinely overtake each other.
pub fn adversarial_net() -> NetModel {
    let mut t = ProfileTable::builtin();
    t.set("overhead/remote", "q1", 0.5);
    t.set("overhead/remote", "median", 20.0);
    t.set("overhead/remote", "q3", 400.0);
    NetModel::from_table(&t, MpcConfig::default().max_iter_cap, NetConfig::default()).unwrap()
}

/// Migrates the movable actors `count` times at random instants and to random
/// nodes over an adversarial network, checking conservation after each one.
pub fn migration_stress(count: usize, seed: u64) -> Result<StressReport, String> {
    let cfg = RuntimeConfig {
        app: AppParams {
            sample_period: SimTime::from_millis(50),
            stop_at: SimTime::from_secs(400),
            setpoint_low: 0.0,
            setpoint_high: 0.3,
            setpoint_period: SimTime::from_secs(5),
        },
        off_beam: OffBeamPolicy::Continue,
        record_firings: false,
        record_mpc_trace: false,
        run_id: seed,
    };
    let plant = PlantParams::default();
    let mpc = Mpc::new(MpcConfig::default(), &plant).unwrap();
    let graph = AppGraph::ball_and_beam("plant", "edge");
    let process = PlantProcess::new(plant, PlantState::default());
    let mut rt = Runtime::deploy(&graph, adversarial_net(), mpc, process, cfg, seed).map_err(|e| e.to_string())?;
    let nodes = rt.net().node_count();
    let movable: Vec<ActorId> = ["mpc", "setpoint", "clock"].iter().map(|n| rt.actor_id(n).unwrap()).collect();
    let mut rng = RngStream::new(seed, "test.stress");
    let mut started = 0;
    let mut t = SimTime::ZERO;
    while started < count {
        t += SimTime::from_micros(1_000 + rng.below(150_000) as u64);
        if t >= SimTime::from_secs(400) {
            return Err(format!("only {started} migrations fit in the run"));
        }
        rt.run_until(t).map_err(|e| e.to_string())?;
        let actor = movable[rng.below(movable.len())];
        if rt.is_migrating(actor) {
            continue;
        }
        let dest = NodeId(rng.below(nodes));
        let before = rt.state_bytes(actor).len();
        match rt.start_migration(actor, dest).map_err(|e| e.to_string())? {
            Some(rep) if rep.from != rep.to => return Err("a real migration completed synchronously".into()),
            Some(_) => {}
            None => started += 1,
        }
        if rt.state_bytes(actor).len() != before {
            return Err("state size changed while paused".into());
        }
        rt.check_conservation().map_err(|e| e.to_string())?;
    }
    rt.run_to_completion().map_err(|e| e.to_string())?;
    rt.check_conservation().map_err(|e| e.to_string())?;

    // Set-points that arrive after the last control firing stay queued on
    // the optional port; every other connection must be fully drained.
    let y_ref = graph.connections.iter().position(|c| c.to == "mpc.y_ref").expect("graph has a y_ref connection");
    let stats = rt.conn_stats();
    for s in &stats {
        let leftover_ok = s.id.0 == y_ref || s.queued == 0;
        if s.emitted != s.consumed + s.queued || s.in_flight != 0 || !leftover_ok {
            return Err(format!("unbalanced connection {s:?}"));
        }
    }
    let idx: Vec<u64> = rt.records().iter().map(|r| r.index).collect();
    if idx != (0..rt.ticks()).collect::<Vec<_>>() {
        return Err("control decisions lost, duplicated or reordered".into());
    }
    Ok(StressReport {
        migrations: rt.migration_reports().len(),
        held_back: stats.iter().map(|s| s.held_back).sum(),
        forwarded: rt.migration_reports().iter().map(|r| r.tokens_forwarded).sum(),
        ticks: rt.ticks(),
    })
}
