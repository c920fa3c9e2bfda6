//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the verdict lines always
//! reach the terminal. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tfps::data::{load_csv, synth_generate, CsvSchema, Regime, SplitRatios, SynthSpec};
use tfps::drift::{average_wasserstein, patch_distance_matrix, wasserstein_1d, Domain};
use tfps::encoder::{attention, fourier_sublayer, MultiHeadAttention};
use tfps::eval::{evaluate, purity, report_table, routing_report, ResultRow};
use tfps::model::{ForwardOutput, Router};
use tfps::mope::{gate, inverse_fourier_rows};
use tfps::nn::{flatten, softmax_in_place, zeros_like, Mode, Parameters};
use tfps::patching::{patch_count, patch_span};
use tfps::pattern::{
    affinity, init_bases, kl_loss, pi_backward, pi_loss, refine, reg_r1, reg_r2, KlReduction,
    PiWeights, SubspaceBases,
};
use tfps::train::{evaluate_mse, grid_search, prepare, total_loss, train, GridSpace, TrainConfig};
use tfps::{Model, ModelConfig, RouterKind};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// ---------------------------------------------------------------- oracles

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method).
fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Optimal transport between two uniform empirical laws with |x − y| cost.
/// Equal sizes: best permutation. Otherwise every sample of `u` is split into
/// `m` atoms and every sample of `v` into `n`, which makes the transport plan
/// an assignment over `n·m` equal-mass atoms.
fn ot_oracle(u: &[f64], v: &[f64]) -> f64 {
    let (n, m) = (u.len(), v.len());
    if n == m {
        return permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| (u[i] - v[j]).abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / n as f64;
    }
    let a: Vec<f64> = u.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect();
    let b: Vec<f64> = v.iter().flat_map(|&y| std::iter::repeat_n(y, n)).collect();
    let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| (x - y).abs()).collect()).collect();
    assignment_cost(&cost) / (n * m) as f64
}

fn naive_re_dft2(x: ArrayView2<'_, f64>, inverse: bool) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for a in 0..n {
        for b in 0..d {
            let mut acc = 0.0;
            for m in 0..n {
                for e in 0..d {
                    let ang = 2.0 * std::f64::consts::PI * ((a * m) as f64 / n as f64 + (b * e) as f64 / d as f64);
                    acc += x[[m, e]] * ang.cos();
                }
            }
            out[[a, b]] = if inverse { acc / (n * d) as f64 } else { acc };
        }
    }
    out
}

fn literal_attention(x: &Array2<f64>, p: &MultiHeadAttention) -> Array2<f64> {
    let (n, d) = x.dim();
    let dk = d / p.n_heads;
    let mm = |a: &Array2<f64>, b: &Array2<f64>| {
        let mut c = Array2::<f64>::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                c[[i, j]] = (0..a.ncols()).map(|k| a[[i, k]] * b[[k, j]]).sum();
            }
        }
        c
    };
    let (q, k, v) = (mm(x, &p.w_q), mm(x, &p.w_k), mm(x, &p.w_v));
    let mut heads = Array2::<f64>::zeros((n, d));
    for h in 0..p.n_heads {
        for i in 0..n {
            let mut w: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|c| q[[i, h * dk + c]] * k[[j, h * dk + c]]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = w.iter().map(|s| (s - top).exp()).sum();
            for s in w.iter_mut() {
                *s = (*s - top).exp() / total;
            }
            for c in 0..dk {
                heads[[i, h * dk + c]] = (0..n).map(|j| w[j] * v[[j, h * dk + c]]).sum();
            }
        }
    }
    mm(&heads, &p.w_o)
}

// ------------------------------------------------------------- criterion 1

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = Vec::new();
    let mut note = |ok: bool, what: &str| {
        if !ok && failures.len() < 5 {
            failures.push(what.to_string());
        }
    };
    for _ in 0..300 {
        let k = [1, 2, 4][rng.random_range(0..3)];
        let d = rng.random_range(1..4);
        let q = k * d;
        let m = rng.random_range(1..12);
        let bases = init_bases(&mut rng, q, k).unwrap();
        let z = gaussian(&mut rng, (m, q));
        let s = affinity(z.view(), &bases, d as f64).unwrap();
        note(s.values.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9 && r.iter().all(|v| *v > 0.0)), "affinity rows");
        let t = refine(&s).unwrap().refined.unwrap();
        note(t.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9), "refined rows");
        let one = affinity(z.slice(s![0..1, ..]), &bases, d as f64).unwrap();
        let one_t = refine(&one).unwrap().refined.unwrap();
        note(one_t.iter().zip(one.values.iter()).all(|(a, b)| (a - b).abs() < 1e-12), "single-token refinement");
        note(kl_loss(t.view(), s.values.view()).unwrap() >= -1e-12, "KL >= 0");
        note(kl_loss(s.values.view(), s.values.view()).unwrap().abs() < 1e-15, "KL(s, s) = 0");
        if k > 1 {
            let mut other = s.values.clone();
            other.row_mut(0).assign(&Array2::from_elem((1, k), 1.0 / k as f64).row(0));
            let differ = (0..k).any(|j| (other[[0, j]] - s.values[[0, j]]).abs() > 1e-6);
            if differ {
                note(kl_loss(other.view(), s.values.view()).unwrap() > 0.0, "KL > 0 when different");
            }
        }
        for top in 1..=k {
            let g = gate(s.values.view(), top).unwrap();
            note(
                g.weights.rows().into_iter().all(|r| {
                    r.iter().all(|w| *w >= 0.0) && (r.sum() - 1.0).abs() < 1e-6 && r.iter().filter(|w| **w > 0.0).count() <= top
                }),
                "gating rows",
            );
            if top == k {
                for (row, wrow) in s.values.rows().into_iter().zip(g.weights.rows()) {
                    let mut sm = row.to_vec();
                    softmax_in_place(&mut sm);
                    note(sm.iter().zip(wrow.iter()).all(|(a, b)| (a - b).abs() < 1e-9), "k = K is softmax");
                }
            }
        }
        let (na, nb, nc) = (rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..10));
        let (u, v, w) = (normal_vec(&mut rng, na), normal_vec(&mut rng, nb), normal_vec(&mut rng, nc));
        let duv = wasserstein_1d(&u, &v).unwrap();
        note(wasserstein_1d(&u, &u).unwrap() == 0.0, "W1 identity");
        note(duv > 0.0, "W1 separates distinct laws");
        note((duv - wasserstein_1d(&v, &u).unwrap()).abs() < 1e-12, "W1 symmetry");
        note(wasserstein_1d(&u, &w).unwrap() <= duv + wasserstein_1d(&v, &w).unwrap() + 1e-12, "W1 triangle");
        let delta: f64 = rng.random_range(-5.0..5.0);
        let shifted: Vec<f64> = u.iter().map(|x| x + delta).collect();
        note((wasserstein_1d(&u, &shifted).unwrap() - delta.abs()).abs() < 1e-9, "W1 shift");
    }

    // Constructed bases for the regularizer characterizations.
    let e = |i: usize| Array2::from_shape_fn((4, 1), |(r, _)| if r == i { 1.0 } else { 0.0 });
    let ortho = SubspaceBases::from_blocks(&[e(0), e(1)]).unwrap();
    note(reg_r1(&ortho) == 0.0 && reg_r2(&ortho) == 0.0, "orthonormal blocks give R1 = R2 = 0");
    let tilted = Array2::from_shape_fn((4, 1), |(r, _)| if r < 2 { 0.5f64.sqrt() } else { 0.0 });
    let overlap = SubspaceBases::from_blocks(&[e(0), tilted.clone()]).unwrap();
    note(reg_r1(&overlap).abs() < 1e-15 && (reg_r2(&overlap) - 0.5).abs() < 1e-12, "overlapping blocks give R2 = 0.5");
    let same_block = SubspaceBases::from_blocks(&[ndarray::concatenate![Axis(1), e(0), tilted], Array2::zeros((4, 2)) + &ndarray::concatenate![Axis(1), e(2), e(3)]]).unwrap();
    note(reg_r2(&same_block).abs() < 1e-15, "within-block correlation is not penalized");
    let scaled = SubspaceBases::from_blocks(&[e(0) * 2.0, e(1)]).unwrap();
    note((reg_r1(&scaled) - 4.5).abs() < 1e-12 && reg_r2(&scaled) == 0.0, "scaled column gives R1 = 4.5");
    // Random orthogonal matrix via Gram-Schmidt.
    let mut qm = gaussian(&mut rng, (6, 6));
    for j in 0..6 {
        for i in 0..j {
            let proj = qm.column(i).dot(&qm.column(j));
            let ci = qm.column(i).to_owned();
            qm.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = qm.column(j).dot(&qm.column(j)).sqrt();
        qm.column_mut(j).mapv_inplace(|x| x / norm);
    }
    let rot = SubspaceBases::from_matrix(qm, 3).unwrap();
    note(reg_r1(&rot) < 1e-24 && reg_r2(&rot) < 1e-24, "orthogonal matrix gives R1 = R2 = 0");

    verdict(failures.is_empty(), if failures.is_empty() { "300 random cases + constructed bases".into() } else { failures.join("; ") })
}

// ------------------------------------------------------------- criterion 2

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_ot: f64 = 0.0;
    for _ in 0..200 {
        let (n, m) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let u = normal_vec(&mut rng, n);
        let v: Vec<f64> = normal_vec(&mut rng, m).iter().map(|x| x * 1.5 + 0.3).collect();
        worst_ot = worst_ot.max((wasserstein_1d(&u, &v).unwrap() - ot_oracle(&u, &v)).abs());
    }
    let mut worst_dft: f64 = 0.0;
    for n in 1..=16 {
        for d in [1, 2, 3, 5, 8, 12, 16] {
            let x = gaussian(&mut rng, (n, d));
            let fwd = fourier_sublayer(x.view());
            let inv = inverse_fourier_rows(x.view().insert_axis(Axis(0))).index_axis_move(Axis(0), 0);
            for (got, want) in [(fwd, naive_re_dft2(x.view(), false)), (inv, naive_re_dft2(x.view(), true))] {
                worst_dft = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(worst_dft, f64::max);
            }
        }
    }
    let mut worst_attn: f64 = 0.0;
    for (d, heads, n) in [(8, 2, 5), (12, 3, 7), (16, 4, 12), (6, 1, 3)] {
        let p = MultiHeadAttention::new(&mut rng, d, heads, 0.5).unwrap();
        let x = gaussian(&mut rng, (n, d));
        let got = attention(x.view(), &p).unwrap();
        let want = literal_attention(&x, &p);
        worst_attn = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(worst_attn, f64::max);
    }
    verdict(
        worst_ot <= 1e-9 && worst_dft <= 1e-6 && worst_attn <= 1e-6,
        format!("max abs err: W1 vs OT {worst_ot:.1e} (200 pairs), Fourier vs naive DFT {worst_dft:.1e}, attention vs literal {worst_attn:.1e}"),
    )
}

// ------------------------------------------------------------- criterion 3

fn kl_factor(reduction: KlReduction, m: usize) -> f64 {
    match reduction {
        KlReduction::Sum => 1.0,
        KlReduction::Mean => 1.0 / m as f64,
    }
}

/// PI objective with the sharpened target held at `target`.
fn pi_frozen(z: &Array2<f64>, b: &SubspaceBases, w: &PiWeights, target: &Array2<f64>) -> f64 {
    let s = affinity(z.view(), b, w.eta).unwrap();
    w.alpha * (reg_r1(b) + reg_r2(b)) + w.beta * kl_factor(w.reduction, z.nrows()) * kl_loss(target.view(), s.values.view()).unwrap()
}

fn model_frozen(model: &Model, x: &Array3<f64>, y: &Array3<f64>, targets: &[Option<Array2<f64>>; 2]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(x.view(), Mode::Train, &mut rng).unwrap();
    let mut pis = [0.0, 0.0];
    for (i, (bo, br)) in [(&out.time, &model.time), (&out.freq, &model.freq)].into_iter().enumerate() {
        if let (Some(bo), Some(br), Some(t)) = (bo, br, &targets[i]) {
            if let (Some(pi), Router::Pattern(b)) = (&bo.pi, &br.router) {
                let w = model.pi_weights(b.n_subspaces);
                let s = &pi.affinity.values;
                pis[i] = w.alpha * (reg_r1(b) + reg_r2(b)) + w.beta * kl_factor(w.reduction, s.nrows()) * kl_loss(t.view(), s.view()).unwrap();
            }
        }
    }
    total_loss(out.forecast.view(), y.view(), pis[0], pis[1]).unwrap()
}

fn frozen_targets(out: &ForwardOutput) -> [Option<Array2<f64>>; 2] {
    let t = |b: &Option<tfps::model::BranchOutput>| b.as_ref().and_then(|b| b.pi.as_ref()).and_then(|p| p.affinity.refined.clone());
    [t(&out.time), t(&out.freq)]
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    // (a) pattern-identifier loss w.r.t. bases and tokens.
    let mut worst_pi: f64 = 0.0;
    for (alpha, beta, reduction) in [(1e-3, 0.1, KlReduction::Mean), (0.5, 0.7, KlReduction::Sum)] {
        let (q, k, m) = (8, 2, 6);
        let b = SubspaceBases::from_matrix(gaussian(&mut rng, (q, q)) * 0.6, k).unwrap();
        let z = gaussian(&mut rng, (m, q));
        let w = PiWeights { alpha, beta, eta: (q / k) as f64, reduction };
        let out = pi_loss(z.view(), &b, &w).unwrap();
        let target = out.affinity.refined.clone().unwrap();
        let mut gb = Array2::zeros((q, q));
        let gz = pi_backward(z.view(), &b, &w, &out, None, &mut gb);
        let eps = 1e-6;
        for idx in 0..q * q {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp.matrix.as_slice_mut().unwrap()[idx] += eps;
            bm.matrix.as_slice_mut().unwrap()[idx] -= eps;
            let num = (pi_frozen(&z, &bp, &w, &target) - pi_frozen(&z, &bm, &w, &target)) / (2.0 * eps);
            worst_pi = worst_pi.max(rel_err(gb.as_slice().unwrap()[idx], num));
        }
        for idx in 0..m * q {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.as_slice_mut().unwrap()[idx] += eps;
            zm.as_slice_mut().unwrap()[idx] -= eps;
            let num = (pi_frozen(&zp, &b, &w, &target) - pi_frozen(&zm, &b, &w, &target)) / (2.0 * eps);
            worst_pi = worst_pi.max(rel_err(gz.as_slice().unwrap()[idx], num));
        }
    }

    // (b) total loss of a miniature model w.r.t. 20 random parameters.
    let cfg = ModelConfig {
        lookback: 16,
        horizon: 4,
        patch_len: 4,
        stride: 2,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        k_time: 2,
        k_freq: 2,
        top_k: 1,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&mut rng, cfg).unwrap();
    model.visit_mut("", &mut |_, mut a| a.mapv_inplace(|v| v + rng.random_range(-0.4..0.4)));
    let x = Array3::from_shape_simple_fn((3, 16, 2), || StandardNormal.sample(&mut rng));
    let y = Array3::from_shape_simple_fn((3, 4, 2), || StandardNormal.sample(&mut rng));
    let mut frng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(x.view(), Mode::Train, &mut frng).unwrap();
    let g_forecast = (&out.forecast - &y) * (2.0 / y.len() as f64);
    let mut grad = zeros_like(&model);
    model.backward(&out, g_forecast.view(), &mut grad).unwrap();
    let targets = frozen_targets(&out);
    let analytic = flatten(&grad);
    let total: usize = analytic.iter().map(|(_, a)| a.len()).sum();
    let mut worst_model: f64 = 0.0;
    let mut probed = Vec::new();
    for _ in 0..20 {
        let mut flat = rng.random_range(0..total);
        let slot = analytic.iter().position(|(_, a)| {
            if flat < a.len() {
                true
            } else {
                flat -= a.len();
                false
            }
        }).unwrap();
        let eps = 1e-6;
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut seen = 0;
            m.visit_mut("", &mut |_, mut a| {
                if seen == slot {
                    *a.iter_mut().nth(flat).unwrap() += delta;
                }
                seen += 1;
            });
            model_frozen(&m, &x, &y, &targets)
        };
        let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let an = *analytic[slot].1.iter().nth(flat).unwrap();
        worst_model = worst_model.max(rel_err(an, num));
        probed.push(analytic[slot].0.clone());
    }
    probed.sort();
    probed.dedup();
    verdict(
        worst_pi <= 1e-3 && worst_model <= 1e-3,
        format!(
            "max rel err: PI loss {worst_pi:.1e} (bases + tokens), full model {worst_model:.1e} over 20 parameters in {} arrays",
            probed.len()
        ),
    )
}

// ------------------------------------------------------------- criterion 4

fn criterion_4() -> Verdict {
    let a = patch_count(96, 16, 8).unwrap();
    let b = patch_count(104, 16, 8).unwrap();
    // Twelve patches index 0..=11, the last one ending on the padded tail.
    let last = patch_span(a - 1, 16, 8);
    verdict(
        a == 12 && b == 13 && last == (88, 104),
        format!("(96,16,8) -> {a}, (104,16,8) -> {b}, patch {} spans {:?}", a - 1, last),
    )
}

// ------------------------------------------------------------- criterion 5

fn criterion_5() -> Verdict {
    let spec = SynthSpec {
        seed: 7,
        channels: 1,
        channel_phase_step: 0.0,
        regimes: vec![Regime::sine(200, 1.0 / 16.0), Regime::sine(200, 1.0 / 5.0)],
    };
    let synth = synth_generate(&spec).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            lookback: 32,
            horizon: 8,
            patch_len: 8,
            stride: 4,
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            k_time: 2,
            k_freq: 2,
            top_k: 1,
            ..ModelConfig::default()
        },
        learning_rate: 5e-3,
        max_epochs: 200,
        patience: 200,
        split: SplitRatios { train: 0.8, val: 0.1, test: 0.1 },
        ..TrainConfig::default()
    };
    let data = prepare(&synth.series, &cfg).unwrap();
    let out = train(&cfg, &data.train, &data.val).unwrap();
    let train_mse = evaluate_mse(&out.model, &data.train, 64).unwrap();
    let h = &out.history;
    let early: f64 = h[..5].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
    let later: f64 = h[15..20].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;

    let report = routing_report(&out.model, &data.train, 64).unwrap();
    let n = out.model.n_patches();
    let labels: Vec<usize> = data
        .train
        .iter()
        .flat_map(|w| (0..n).map(move |i| w.origin_index + (patch_span(i, 8, 4).0 + 4).min(31)))
        .map(|row| synth.labels[row])
        .collect();
    let pur_t = purity(&labels, &report.time.as_ref().unwrap().assignments).unwrap();
    let pur_f = purity(&labels, &report.freq.as_ref().unwrap().assignments).unwrap();
    let soft = if pur_t.max(pur_f) >= 0.8 { "met" } else { "not met" };
    verdict(
        train_mse < 0.05 && later < early,
        format!(
            "train MSE {train_mse:.4} after {} epochs (bar 0.05); loss MA {early:.3} -> {later:.3}; regime purity time {pur_t:.2} / freq {pur_f:.2} (soft target 0.8 {soft})",
            h.len()
        ),
    )
}

// --------------------------------------------------------- criteria 6 and 7

fn etth1_path() -> Option<PathBuf> {
    let dir = std::env::var_os("TFPS_DATA_DIR")?;
    let p = PathBuf::from(dir).join("ETTh1.csv");
    p.exists().then_some(p)
}

fn criterion_6() -> Verdict {
    let Some(path) = etth1_path() else {
        return Verdict::Skip("ETTh1.csv not found under TFPS_DATA_DIR".into());
    };
    let series = load_csv(&path, &CsvSchema::default()).unwrap();
    let full = std::env::var_os("TFPS_ACCEPTANCE_FULL").is_some();
    let (d_model, bound, lrs, ks): (usize, (f64, f64), Vec<f64>, Vec<usize>) = if full {
        (512, (0.38, 0.48), vec![1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2], vec![1, 2, 4])
    } else {
        (128, (0.38, 0.52), vec![5e-4, 1e-3], vec![2, 4])
    };
    let base = TrainConfig {
        model: ModelConfig { d_model, ..ModelConfig::default() },
        max_epochs: if full { 100 } else { 10 },
        patience: if full { 10 } else { 3 },
        window_stride: if full { 1 } else { 4 },
        ..TrainConfig::default()
    };
    let data = prepare(&series, &base).unwrap();
    let to_json = |v: &[f64]| v.iter().map(|x| serde_json::json!(x)).collect::<Vec<_>>();
    let kj: Vec<serde_json::Value> = ks.iter().map(|k| serde_json::json!(k)).collect();
    let space: GridSpace = [
        ("learning_rate".to_string(), to_json(&lrs)),
        ("model.k_time".to_string(), kj.clone()),
        ("model.k_freq".to_string(), kj),
    ]
    .into();
    let result = grid_search(&base, &space, None, &data).unwrap();
    let test = evaluate(&result.best.model, &data.test, 128, None).unwrap().normalized;
    verdict(
        (bound.0..=bound.1).contains(&test.mse),
        format!(
            "{} profile: test MSE {:.3} MAE {:.3} (bound [{}, {}], reference 0.398)",
            if full { "full" } else { "reduced" },
            test.mse,
            test.mae,
            bound.0,
            bound.1
        ),
    )
}

fn criterion_7() -> Verdict {
    let Some(path) = etth1_path() else {
        return Verdict::Skip("ETTh1.csv not found under TFPS_DATA_DIR".into());
    };
    let series = load_csv(&path, &CsvSchema::default()).unwrap();
    let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("etth1_drift");
    std::fs::create_dir_all(&out_dir).unwrap();
    let window = series.slice(0, 96);
    // The channel with the largest jump between adjacent patches is taken as the sudden-drift one.
    let mut sudden: Option<(usize, f64, usize)> = None;
    for domain in [Domain::Time, Domain::Frequency] {
        for (c, col) in window.values().axis_iter(Axis(1)).enumerate() {
            let m = patch_distance_matrix(col, 16, 8, domain).unwrap();
            assert_eq!(m.n_patches(), 12);
            let mut csv = String::new();
            for row in m.distances.rows() {
                csv.push_str(&row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
                csv.push('\n');
            }
            std::fs::write(out_dir.join(format!("{}_{}.csv", window.channel_names()[c], domain.name())), csv).unwrap();
            if domain == Domain::Time {
                let means = m.row_means();
                let (peak, _) = means.iter().enumerate().fold((0, f64::MIN), |b, (i, v)| if *v > b.1 { (i, *v) } else { b });
                let jump = (0..11).map(|i| m.distances[[i, i + 1]]).fold(0.0, f64::max) / m.upper_mean().max(1e-12);
                if sudden.is_none_or(|s| jump > s.1) {
                    sudden = Some((c, jump, peak));
                }
            }
        }
    }
    let (c, _, peak) = sudden.unwrap();
    let avg_t = average_wasserstein(&series, 16, 8, Domain::Time).unwrap();
    let avg_f = average_wasserstein(&series, 16, 8, Domain::Frequency).unwrap();
    verdict(
        peak == 9 || peak == 10,
        format!(
            "heatmaps in {}; sudden-drift channel {} peaks at patch {peak}; dataset averages time {avg_t:.3} (reference 9.268) / frequency {avg_f:.3} (reference 11.561)",
            out_dir.display(),
            window.channel_names()[c]
        ),
    )
}

// ------------------------------------------------------------- criterion 8

fn criterion_8() -> Verdict {
    let regimes = (0..8)
        .map(|i| {
            let (f, amp) = if i % 2 == 0 { (1.0 / 16.0, 1.0) } else { (1.0 / 5.0, 1.5) };
            Regime { noise: 0.05, amplitude: amp, ..Regime::sine(300, f) }
        })
        .collect();
    let spec = SynthSpec { seed: 11, channels: 2, channel_phase_step: 0.7, regimes };
    let synth = synth_generate(&spec).unwrap();
    let base = TrainConfig {
        model: ModelConfig {
            lookback: 32,
            horizon: 8,
            patch_len: 8,
            stride: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            k_time: 2,
            k_freq: 2,
            top_k: 1,
            ..ModelConfig::default()
        },
        learning_rate: 1e-3,
        max_epochs: 100,
        patience: 10,
        window_stride: 2,
        split: SplitRatios { train: 0.6, val: 0.2, test: 0.2 },
        ..TrainConfig::default()
    };
    let data = prepare(&synth.series, &base).unwrap();
    let variants = [
        ("full", base.model.clone()),
        ("linear-gate", ModelConfig { router: RouterKind::Linear, ..base.model.clone() }),
        ("no-experts", ModelConfig { router: RouterKind::None, ..base.model.clone() }),
        ("time-only", ModelConfig { freq_branch: false, ..base.model.clone() }),
        ("freq-only", ModelConfig { time_branch: false, ..base.model.clone() }),
    ];
    let mut rows = Vec::new();
    let mut schemas = Vec::new();
    let mut vals = Vec::new();
    for (name, model_cfg) in variants {
        let cfg: TrainConfig = serde_json::from_value(serde_json::json!({
            "model": serde_json::to_value(&model_cfg).unwrap(),
            "learning_rate": base.learning_rate,
            "max_epochs": base.max_epochs,
            "patience": base.patience,
            "window_stride": base.window_stride,
            "split": serde_json::to_value(base.split).unwrap(),
        }))
        .unwrap();
        let out = train(&cfg, &data.train, &data.val).unwrap();
        let report = evaluate(&out.model, &data.val, 128, None).unwrap();
        let keys: Vec<String> = serde_json::to_value(&report).unwrap().as_object().unwrap().keys().cloned().collect();
        schemas.push(keys);
        rows.push(ResultRow { dataset: format!("synthetic/{name}"), horizon: 8, mse: report.normalized.mse, mae: report.normalized.mae, imp: None });
        vals.push((name, out.best_val_mse));
    }
    let table = report_table(rows);
    print!("{}", table.to_text());
    let full = vals[0].1;
    let worst_ratio = vals[1..].iter().map(|(_, v)| full / v).fold(0.0, f64::max);
    let same_schema = schemas.windows(2).all(|w| w[0] == w[1]);
    let detail = vals.iter().map(|(n, v)| format!("{n} {v:.4}")).collect::<Vec<_>>().join(", ");
    verdict(
        same_schema && worst_ratio <= 1.1,
        format!("validation MSE: {detail}; full / best ablation = {worst_ratio:.3} (slack 1.10)"),
    )
}

// -------------------------------------------------------------------- main

fn main() {
    let criteria: [(u8, &str, fn() -> Verdict); 8] = [
        (1, "math-core property suite", criterion_1),
        (2, "oracle equivalence", criterion_2),
        (3, "gradient validation", criterion_3),
        (4, "patch formula", criterion_4),
        (5, "end-to-end overfit", criterion_5),
        (6, "ETTh1 benchmark accuracy", criterion_6),
        (7, "ETTh1 drift analysis", criterion_7),
        (8, "ablation harness", criterion_8),
    ];
    let limits = [(1, 60), (3, 120), (5, 300)];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, limits.iter().find(|(i, _)| *i == id)) {
            (Verdict::Pass(d), Some((_, secs))) if elapsed > Duration::from_secs(*secs) => {
                Verdict::Fail(format!("{d}; took {elapsed:.1?}, limit {secs} s"))
            }
            (o, _) => o,
        };
        let (tag, detail) = match outcome {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id} [{tag}] {name} ({elapsed:.1?}): {detail}");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
