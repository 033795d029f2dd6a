//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Each check pairs the library against an oracle written here from scalar
//! loops, so the two routes share no tensor code.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use lander_core::config::{resolve_config, ExperimentConfig};
use lander_core::data::{dirichlet_partition, mean_client_label_entropy};
use lander_core::federation::{aggregate, Experiment, RunDir};
use lander_core::generation::teacher_agreement;
use lander_core::losses::{
    adaptive_scale_factors, bounding_loss_projected, bounding_per_sample, client_loss_current, client_loss_previous,
    client_total, cross_entropy, disagreement_mask, feature_mse, gen_adv_loss, gen_bn_loss, gen_ltc_loss,
    gen_oh_loss, gen_total, kd_kl, one_hot, scalar, LossWeights,
};
use lander_core::metrics::{average_forgetting, last_incremental_accuracy, AccuracyHistory};
use lander_core::nn::{state_dict_bytes, BnTap, FrozenClassifier, StateDict};
use lander_core::report::{ablation_ordering, render_table, summarize, summarize_run, RunSummary};
use lander_core::rng;
use rand::seq::SliceRandom;
use rand::Rng as _;

type Rng = lander_core::rng::Rng;

const LOSS_TOLERANCE: f64 = 1e-6;
const INSTANCES: usize = 100;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    /// A failed soft criterion is reported but does not fail the harness.
    soft: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            soft: false,
            detail: detail.into(),
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn uniform_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), cols), &Device::Cpu).unwrap()
}

fn random_rows(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| uniform_vec(rng, cols, -scale, scale)).collect()
}

// ---------------------------------------------------------------------------
// Scalar-loop oracles
// ---------------------------------------------------------------------------

fn o_log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row {
        z += (v - m).exp();
    }
    let lse = m + z.ln();
    row.iter().map(|v| v - lse).collect()
}

fn o_ce(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut sum = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        sum -= o_log_softmax(row)[y];
    }
    sum / logits.len() as f64
}

fn o_kl_row(student: &[f64], teacher: &[f64], tau: f64) -> f64 {
    let s: Vec<f64> = student.iter().map(|v| v / tau).collect();
    let t: Vec<f64> = teacher.iter().map(|v| v / tau).collect();
    let (lq, lp) = (o_log_softmax(&s), o_log_softmax(&t));
    let mut kl = 0.0;
    for j in 0..lp.len() {
        kl += lp[j].exp() * (lp[j] - lq[j]);
    }
    kl
}

fn o_kl(student: &[Vec<f64>], teacher: &[Vec<f64>], tau: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..student.len() {
        sum += o_kl_row(&student[i], &teacher[i], tau);
    }
    sum / student.len() as f64
}

fn o_bounding_row(p: &[f64], e: &[f64], r: f64) -> f64 {
    let mut sq = 0.0;
    for j in 0..p.len() {
        sq += (e[j] - p[j]) * (e[j] - p[j]);
    }
    (sq - r).max(0.0)
}

fn o_bounding(p: &[Vec<f64>], e: &[Vec<f64>], r: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..p.len() {
        sum += o_bounding_row(&p[i], &e[i], r);
    }
    sum / p.len() as f64
}

fn o_mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            sum += (a[i][j] - b[i][j]).powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

fn o_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

fn o_adv(student: &[Vec<f64>], teacher: &[Vec<f64>], tau: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..student.len() {
        if o_argmax(&student[i]) != o_argmax(&teacher[i]) {
            sum += o_kl_row(&student[i], &teacher[i], tau);
        }
    }
    -sum / student.len() as f64
}

fn o_l2(a: &[f64], b: &[f64]) -> f64 {
    let mut sq = 0.0;
    for j in 0..a.len() {
        sq += (a[j] - b[j]).powi(2);
    }
    sq.sqrt()
}

/// `(batch mean, batch var, running mean, running var)` per layer.
type BnLayer = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn o_bn(layers: &[BnLayer]) -> f64 {
    let mut sum = 0.0;
    for (m, v, rm, rv) in layers {
        sum += o_l2(m, rm) + o_l2(v, rv);
    }
    sum
}

// ---------------------------------------------------------------------------
// Criterion 1: loss oracle suite
// ---------------------------------------------------------------------------

struct LossCase {
    student: Vec<Vec<f64>>,
    teacher: Vec<Vec<f64>>,
    labels: Vec<usize>,
    projected: Vec<Vec<f64>>,
    anchors: Vec<Vec<f64>>,
    feat_a: Vec<Vec<f64>>,
    feat_b: Vec<Vec<f64>>,
    radius: f64,
    tau: f64,
}

fn loss_case(rng: &mut Rng) -> LossCase {
    let batch = rng.random_range(2..9);
    let classes = rng.random_range(2..8);
    let dim = rng.random_range(2..10);
    let feat = rng.random_range(1..12);
    let mut teacher = random_rows(rng, batch, classes, 4.0);
    let student = random_rows(rng, batch, classes, 4.0);
    // Force some agreeing rows so both branches of the adversarial mask run.
    for i in 0..batch / 2 {
        let j = o_argmax(&student[i]);
        teacher[i][j] += 10.0;
    }
    LossCase {
        labels: (0..batch).map(|_| rng.random_range(0..classes)).collect(),
        projected: random_rows(rng, batch, dim, 1.0),
        anchors: random_rows(rng, batch, dim, 1.0),
        feat_a: random_rows(rng, batch, feat, 2.0),
        feat_b: random_rows(rng, batch, feat, 2.0),
        radius: rng.random_range(0.0..2.0 * dim as f64 / 3.0),
        tau: rng.random_range(0.5..4.0),
        student,
        teacher,
    }
}

fn hinge_flatness() -> (bool, String) {
    let mut rng = rng::stream(7, "acceptance/hinge");
    let mut worst = 0f64;
    let mut flat = true;
    const STEP: f64 = 1e-6;
    for _ in 0..20 {
        let dim = rng.random_range(2..8);
        let anchors = random_rows(&mut rng, 4, dim, 1.0);
        // Rows 0-1 sit inside the radius, rows 2-3 outside.
        let radius = 0.5;
        let projected: Vec<Vec<f64>> = anchors
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let offset = if i < 2 { 0.05 } else { 1.5 };
                e.iter().map(|v| v + rng.random_range(-offset..offset)).collect()
            })
            .collect();
        let mut projected = projected;
        for i in 2..4 {
            if o_bounding_row(&projected[i], &anchors[i], radius) == 0.0 {
                projected[i][0] += 2.0;
            }
        }
        let var = Var::from_tensor(&matrix(&projected)).unwrap();
        let e = matrix(&anchors);
        let grads = bounding_loss_projected(var.as_tensor(), &e, radius).unwrap().backward().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..4 {
            for j in 0..dim {
                let eval = |delta: f64| {
                    let mut moved = projected.clone();
                    moved[i][j] += delta;
                    o_bounding(&moved, &anchors, radius)
                };
                let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
                if i < 2 {
                    flat &= numeric == 0.0 && analytic[i][j] == 0.0;
                } else {
                    let denom = numeric.abs().max(analytic[i][j].abs()).max(1e-8);
                    worst = worst.max((numeric - analytic[i][j]).abs() / denom);
                }
            }
        }
    }
    (flat && worst <= 1e-3, format!("inside-radius gradient zero: {flat}, outside worst rel err {worst:.2e}"))
}

fn loss_oracle_suite() -> Outcome {
    let mut rng = rng::stream(1, "acceptance/losses");
    let mut worst = 0f64;
    let mut worst_op = "";
    let mut failures = 0usize;
    let mut record = |op: &'static str, ours: f64, oracle: f64| {
        let err = (ours - oracle).abs() / oracle.abs().max(1.0);
        if err > worst {
            worst = err;
            worst_op = op;
        }
        if !close(ours, oracle, LOSS_TOLERANCE) {
            failures += 1;
        }
    };
    let mut mask_mismatch = 0usize;
    let mut one_hot_mismatch = 0usize;
    for _ in 0..INSTANCES {
        let c = loss_case(&mut rng);
        let (s, t) = (matrix(&c.student), matrix(&c.teacher));
        let (p, e) = (matrix(&c.projected), matrix(&c.anchors));
        let (fa, fb) = (matrix(&c.feat_a), matrix(&c.feat_b));

        record("cross_entropy", scalar(&cross_entropy(&s, &c.labels).unwrap()).unwrap(), o_ce(&c.student, &c.labels));
        record("gen_oh_loss", scalar(&gen_oh_loss(&t, &c.labels).unwrap()).unwrap(), o_ce(&c.teacher, &c.labels));
        record("kd_kl", scalar(&kd_kl(&s, &t, c.tau).unwrap()).unwrap(), o_kl(&c.student, &c.teacher, c.tau));
        record("feature_mse", scalar(&feature_mse(&fa, &fb).unwrap()).unwrap(), o_mse(&c.feat_a, &c.feat_b));
        let per_sample = bounding_per_sample(&p, &e, c.radius).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..per_sample.len() {
            record("bounding_per_sample", per_sample[i], o_bounding_row(&c.projected[i], &c.anchors[i], c.radius));
        }
        let bound = o_bounding(&c.projected, &c.anchors, c.radius);
        record("bounding_loss", scalar(&bounding_loss_projected(&p, &e, c.radius).unwrap()).unwrap(), bound);
        record("gen_ltc_loss", scalar(&gen_ltc_loss(&p, &e, c.radius).unwrap()).unwrap(), bound);
        let adv = o_adv(&c.student, &c.teacher, c.tau);
        record("gen_adv_loss", scalar(&gen_adv_loss(&s, &t, c.tau).unwrap()).unwrap(), adv);

        let mask = disagreement_mask(&s, &t).unwrap();
        for i in 0..mask.len() {
            if mask[i] != (o_argmax(&c.student[i]) != o_argmax(&c.teacher[i])) {
                mask_mismatch += 1;
            }
        }
        let width = c.student[0].len();
        let oh = one_hot(&c.labels, width, DType::F64, &Device::Cpu).unwrap().to_vec2::<f64>().unwrap();
        for (i, row) in oh.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if *v != if j == c.labels[i] { 1.0 } else { 0.0 } {
                    one_hot_mismatch += 1;
                }
            }
        }

        let lambda = rng.random_range(0.0..10.0);
        let l_cur = client_loss_current(&s, &c.labels, &p, &e, c.radius, lambda).unwrap();
        let o_cur = o_ce(&c.student, &c.labels) + lambda * bound;
        record("client_loss_current", scalar(&l_cur).unwrap(), o_cur);

        // The server head covers a prefix of the client's columns.
        let server_width = rng.random_range(1..=width);
        let server: Vec<Vec<f64>> = c.teacher.iter().map(|r| r[..server_width].to_vec()).collect();
        let client_old: Vec<Vec<f64>> = c.student.iter().map(|r| r[..server_width].to_vec()).collect();
        let l_pre = client_loss_previous(&s, &matrix(&server), &fa, &fb, c.tau).unwrap();
        let o_pre = o_kl(&client_old, &server, c.tau) + o_mse(&c.feat_a, &c.feat_b);
        record("client_loss_previous", scalar(&l_pre).unwrap(), o_pre);

        let n_new = rng.random_range(1..20);
        let n_prev = rng.random_range(1..80);
        let (ac, ap) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let f = adaptive_scale_factors(n_new, n_prev, ac, ap).unwrap();
        let total = scalar(&client_total(&l_cur, &l_pre, &f).unwrap()).unwrap();
        let kappa = (n_new as f64 / 2.0 + 1.0).ln() / 2f64.ln();
        let delta = (n_prev as f64).sqrt() / (n_new as f64).sqrt();
        let o_total = (1.0 + 1.0 / kappa) / delta * ac * o_cur + kappa * delta * ap * o_pre;
        record("client_total", total, o_total);

        let layers: Vec<BnLayer> = (0..rng.random_range(1..4))
            .map(|_| {
                let ch = rng.random_range(1..6);
                (
                    uniform_vec(&mut rng, ch, -1.0, 1.0),
                    uniform_vec(&mut rng, ch, 0.0, 2.0),
                    uniform_vec(&mut rng, ch, -1.0, 1.0),
                    uniform_vec(&mut rng, ch, 0.0, 2.0),
                )
            })
            .collect();
        let vec1 = |v: &[f64]| Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap();
        let taps: Vec<BnTap> = layers
            .iter()
            .map(|(m, v, _, _)| BnTap {
                mean: vec1(m),
                var: vec1(v),
                count: 8,
            })
            .collect();
        let running: Vec<(Tensor, Tensor)> = layers.iter().map(|(_, _, rm, rv)| (vec1(rm), vec1(rv))).collect();
        let bn = gen_bn_loss(&taps, &running).unwrap();
        record("gen_bn_loss", scalar(&bn).unwrap(), o_bn(&layers));

        let weights = LossWeights {
            lambda_bn: rng.random_range(0.0..2.0),
            lambda_oh: rng.random_range(0.0..2.0),
            lambda_ltc: rng.random_range(0.0..10.0),
            radius: c.radius,
            kd_temperature: c.tau,
        };
        let adv_t = gen_adv_loss(&s, &t, c.tau).unwrap();
        let oh_t = gen_oh_loss(&t, &c.labels).unwrap();
        let ltc_t = gen_ltc_loss(&p, &e, c.radius).unwrap();
        let total = scalar(&gen_total(&adv_t, &bn, &oh_t, &ltc_t, &weights).unwrap()).unwrap();
        let o_gen = adv
            + weights.lambda_bn * o_bn(&layers)
            + weights.lambda_oh * o_ce(&c.teacher, &c.labels)
            + weights.lambda_ltc * bound;
        record("gen_total", total, o_gen);
    }
    let (hinge_ok, hinge_detail) = hinge_flatness();
    Outcome::new(
        failures == 0 && mask_mismatch == 0 && one_hot_mismatch == 0 && hinge_ok,
        format!(
            "{INSTANCES} instances x 14 ops, {failures} oracle failures, worst rel err {worst:.2e} ({worst_op}), \
             mask/one-hot mismatches {mask_mismatch}/{one_hot_mismatch}; {hinge_detail}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 2: adaptive scale factors in double-double arithmetic
// ---------------------------------------------------------------------------

/// Unevaluated sum `hi + lo` carrying about 106 significand bits.
#[derive(Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn from(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        Self {
            hi: s,
            lo: (a - (s - bb)) + (b - bb),
        }
    }

    fn normalize(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Self { hi: s, lo: lo - (s - hi) }
    }

    fn add(self, o: Dd) -> Dd {
        let s = Self::two_sum(self.hi, o.hi);
        Self::normalize(s.hi, s.lo + self.lo + o.lo)
    }

    fn neg(self) -> Dd {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let err = self.hi.mul_add(o.hi, -p);
        Self::normalize(p, err + self.hi * o.lo + self.lo * o.hi)
    }

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        Self::normalize(q1, q2).add(Dd::from(q3))
    }

    fn sqrt(self) -> Dd {
        let s = Dd::from(self.hi.sqrt());
        // One Newton step doubles the correct bits.
        s.add(self.sub(s.mul(s)).div(s.mul(Dd::from(2.0))))
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `ln(x)` for `x >= 1` as `k ln 2 + 2 atanh((m - 1) / (m + 1))`, `m in [1, 2)`.
fn dd_ln(x: f64) -> Dd {
    let ln2 = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };
    let mut k = 0i32;
    let mut m = x;
    while m >= 2.0 {
        m /= 2.0;
        k += 1;
    }
    let z = Dd::from(m - 1.0).div(Dd::from(m + 1.0));
    let z2 = z.mul(z);
    let mut term = z;
    let mut sum = Dd::from(0.0);
    for n in 0..60 {
        sum = sum.add(term.div(Dd::from((2 * n + 1) as f64)));
        term = term.mul(z2);
    }
    Dd::from(k as f64).mul(ln2).add(sum.mul(Dd::from(2.0)))
}

fn dd_log2(x: f64) -> Dd {
    dd_ln(x).div(dd_ln(2.0))
}

fn scale_factor_grid() -> Outcome {
    let start = Instant::now();
    let (ac, ap) = (0.2, 0.4);
    let mut worst = 0f64;
    let mut cells = 0usize;
    for n_new in 1..=60usize {
        for n_prev in 1..=120usize {
            let f = adaptive_scale_factors(n_new, n_prev, ac, ap).unwrap();
            let kappa = dd_log2(n_new as f64 / 2.0 + 1.0);
            let delta = Dd::from(n_prev as f64).div(Dd::from(n_new as f64)).sqrt();
            let one = Dd::from(1.0);
            let cur = one.add(one.div(kappa)).div(delta).mul(Dd::from(ac));
            let pre = kappa.mul(delta).mul(Dd::from(ap));
            for (ours, oracle) in [
                (f.kappa, kappa.value()),
                (f.delta, delta.value()),
                (f.alpha_cur_t, cur.value()),
                (f.alpha_pre_t, pre.value()),
            ] {
                worst = worst.max((ours - oracle).abs() / oracle.abs().max(1.0));
            }
            cells += 1;
        }
    }
    let kappa_two = adaptive_scale_factors(2, 7, ac, ap).unwrap().kappa;
    // delta^2 grows linearly in n_prev for fixed n_new.
    let mut ratio_worst = 0f64;
    for n_new in [1usize, 5, 10, 20] {
        let base = adaptive_scale_factors(n_new, 10, ac, ap).unwrap().delta.powi(2);
        for n_prev in [20usize, 30, 50, 90] {
            let d2 = adaptive_scale_factors(n_new, n_prev, ac, ap).unwrap().delta.powi(2);
            ratio_worst = ratio_worst.max((d2 / base - n_prev as f64 / 10.0).abs());
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-12 && kappa_two == 1.0 && ratio_worst <= 1e-12 && elapsed < Duration::from_secs(1),
        format!(
            "{cells} grid cells, worst rel err {worst:.2e}, kappa(n_new=2) = {kappa_two}, \
             delta^2 ratio err {ratio_worst:.2e}, {:.0} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 3: aggregation
// ---------------------------------------------------------------------------

fn random_state(rng: &mut Rng, shapes: &[(&str, Vec<usize>)]) -> StateDict {
    shapes
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let values: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            (name.to_string(), Tensor::from_vec(values, shape.as_slice(), &Device::Cpu).unwrap())
        })
        .collect()
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn states_equal(a: &StateDict, b: &StateDict) -> bool {
    state_dict_bytes(a).unwrap() == state_dict_bytes(b).unwrap()
}

fn aggregation() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::stream(3, "acceptance/aggregation");
    let shapes = [("conv.weight", vec![4, 3, 3, 3]), ("bn.running_var", vec![4]), ("head.weight", vec![5, 7])];
    let mut worst = 0f64;
    let (mut identity, mut permutation, mut single) = (true, true, true);
    for _ in 0..200 {
        let clients = rng.random_range(1..7);
        let states: Vec<StateDict> = (0..clients).map(|_| random_state(&mut rng, &shapes)).collect();
        let weights: Vec<f64> = (0..clients).map(|_| rng.random_range(1..500) as f64).collect();
        let merged = aggregate(&states, &weights).unwrap();
        let total: f64 = weights.iter().sum();
        for (name, _) in &shapes {
            let columns: Vec<Vec<f32>> = states.iter().map(|s| flat(&s[*name])).collect();
            let ours = flat(&merged[*name]);
            for i in 0..ours.len() {
                let mut oracle = 0.0;
                for k in 0..clients {
                    oracle += weights[k] * columns[k][i] as f64;
                }
                oracle /= total;
                worst = worst.max((ours[i] as f64 - oracle).abs());
            }
        }

        let copies = vec![states[0].clone(); clients];
        identity &= states_equal(&aggregate(&copies, &weights).unwrap(), &states[0]);

        let mut order: Vec<usize> = (0..clients).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<StateDict> = order.iter().map(|&k| states[k].clone()).collect();
        let shuffled_w: Vec<f64> = order.iter().map(|&k| weights[k]).collect();
        permutation &= states_equal(&aggregate(&shuffled, &shuffled_w).unwrap(), &merged);

        let pick = rng.random_range(0..clients);
        let one_hot: Vec<f64> = (0..clients).map(|k| if k == pick { weights[k] } else { 0.0 }).collect();
        single &= states_equal(&aggregate(&states, &one_hot).unwrap(), &states[pick]);
        single &= states_equal(&aggregate(&states[pick..=pick], &[weights[pick]]).unwrap(), &states[pick]);
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-6 && identity && permutation && single && elapsed < Duration::from_secs(60),
        format!(
            "200 instances, worst abs err {worst:.2e}, identity {identity}, permutation {permutation}, \
             single-client {single}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 4: metrics
// ---------------------------------------------------------------------------

fn metrics() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::stream(4, "acceptance/metrics");
    let mut mismatches = 0usize;
    for _ in 0..50 {
        let tasks = rng.random_range(2..8);
        let sizes: Vec<usize> = (0..tasks).map(|_| rng.random_range(1..300)).collect();
        let rows: Vec<Vec<f64>> = (0..tasks)
            .map(|e| (0..=e).map(|t| rng.random_range(0..=sizes[t]) as f64 * 100.0 / sizes[t] as f64).collect())
            .collect();
        let mut history = AccuracyHistory::new(sizes.clone());
        for row in &rows {
            history.push(row.clone()).unwrap();
        }
        let last = tasks - 1;
        let mut weighted = 0.0;
        let mut count = 0usize;
        for t in 0..tasks {
            weighted += rows[last][t] * sizes[t] as f64;
            count += sizes[t];
        }
        let acc = weighted / count as f64;
        let mut drop = 0.0;
        for t in 0..last {
            let mut peak = f64::NEG_INFINITY;
            for e in t..tasks {
                if rows[e][t] > peak {
                    peak = rows[e][t];
                }
            }
            drop += peak - rows[last][t];
        }
        let forgetting = drop / last as f64;
        if last_incremental_accuracy(&history, tasks).unwrap() != acc {
            mismatches += 1;
        }
        if average_forgetting(&history, tasks).unwrap() != forgetting {
            mismatches += 1;
        }
    }
    let mut h = AccuracyHistory::new(vec![100, 100]);
    h.push(vec![80.0]).unwrap();
    h.push(vec![60.0, 90.0]).unwrap();
    let f = average_forgetting(&h, 2).unwrap();
    let elapsed = start.elapsed();
    Outcome::new(
        mismatches == 0 && f == 20.0 && elapsed < Duration::from_secs(1),
        format!("50 histories, {mismatches} mismatches, a[1][1]=80 a[2][1]=60 gives F = {f}, {:.1} ms", elapsed.as_secs_f64() * 1e3),
    )
}

// ---------------------------------------------------------------------------
// Criterion 5: partition
// ---------------------------------------------------------------------------

fn partition() -> Outcome {
    let start = Instant::now();
    let labels: Vec<usize> = (0..10 * 60).map(|i| i % 10).collect();
    let mut complete = true;
    let mut monotone_seeds = 0usize;
    let mut entropies = Vec::new();
    for seed in 0..10u64 {
        let mut h = Vec::new();
        for beta in [1.0, 0.5, 0.1] {
            let clients = dirichlet_partition(&labels, 5, beta, seed).unwrap();
            let mut all: Vec<usize> = clients.concat();
            all.sort_unstable();
            complete &= all == (0..labels.len()).collect::<Vec<_>>();
            h.push(mean_client_label_entropy(&labels, &clients));
        }
        if h[0] >= h[1] && h[1] >= h[2] {
            monotone_seeds += 1;
        }
        entropies.push(h);
    }
    let mean = |j: usize| entropies.iter().map(|h| h[j]).sum::<f64>() / entropies.len() as f64;
    let elapsed = start.elapsed();
    Outcome::new(
        complete && monotone_seeds >= 9 && elapsed < Duration::from_secs(60),
        format!(
            "complete and disjoint: {complete}, monotone in {monotone_seeds}/10 seeds, mean entropy \
             {:.3}/{:.3}/{:.3} nats for beta 1.0/0.5/0.1",
            mean(0),
            mean(1),
            mean(2)
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 6: generation smoke
// ---------------------------------------------------------------------------

fn generation_smoke() -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig::desk();
    let g = &config.generation;
    assert_eq!((g.rounds, g.steps, g.batch_size), (4, 20, 64));
    let mut experiment = Experiment::prepare(config).unwrap();
    let task_one = experiment.schedule().task_classes(0).len();
    let mut server = experiment.initial_server().unwrap();
    let outcome = experiment.run_task(1, &mut server, None).unwrap();
    let teacher = FrozenClassifier::from_snapshot(&outcome.snapshot, experiment.dtype()).unwrap();
    let before = state_dict_bytes(&teacher.state().unwrap()).unwrap();
    let (memory, _) = experiment.generate_memory(&teacher, 2).unwrap();
    let after = state_dict_bytes(&teacher.state().unwrap()).unwrap();
    let snapshot_intact = state_dict_bytes(outcome.snapshot.state()).unwrap() == before;
    let agreement = 100.0 * teacher_agreement(&teacher, &memory, experiment.dtype()).unwrap();
    let chance = 100.0 / task_one as f64;
    let elapsed = start.elapsed();
    Outcome::new(
        task_one == 5
            && memory.len() == 4 * 64
            && agreement > 3.0 * chance
            && before == after
            && snapshot_intact
            && elapsed < Duration::from_secs(600),
        format!(
            "{task_one} classes, {} samples, teacher agreement {agreement:.1}% (threshold {:.0}%), teacher bitwise \
             frozen: {}, {:.0} s",
            memory.len(),
            3.0 * chance,
            before == after && snapshot_intact,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Criteria 7-9: desk benchmark, ablation ordering, determinism
// ---------------------------------------------------------------------------

fn desk_config(seed: u64, ablation: Option<&str>) -> ExperimentConfig {
    let mut overrides = vec![format!("runtime.seed={seed}")];
    if let Some(a) = ablation {
        overrides.push(format!("ablations=[\"{a}\"]"));
    }
    resolve_config("", &overrides).unwrap()
}

fn run_desk(config: ExperimentConfig, dir: &Path) -> RunSummary {
    let mut experiment = Experiment::prepare(config.clone()).unwrap();
    let outcome = experiment.run(Some(&RunDir::new(dir))).unwrap();
    summarize_run(&config, outcome.report)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_suite(root: &Path) -> (Outcome, Outcome, Outcome) {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in DESK_SEEDS {
        for variant in [None, Some("finetune")] {
            let label = variant.unwrap_or("lander");
            runs.push(run_desk(desk_config(seed, variant), &root.join(format!("{label}-{seed}"))));
        }
    }
    let bench_elapsed = start.elapsed();
    let of = |label: &str| -> Vec<&RunSummary> { runs.iter().filter(|r| r.label == label).collect() };
    let acc = |label: &str| mean(of(label).iter().map(|r| r.report.acc));
    let forgetting = |label: &str| mean(of(label).iter().map(|r| r.report.forgetting.unwrap()));
    let (acc_gap, f_gap) = (acc("lander") - acc("finetune"), forgetting("finetune") - forgetting("lander"));
    let benchmark = Outcome::new(
        acc_gap >= 10.0 && f_gap >= 10.0 && bench_elapsed < Duration::from_secs(30 * 60),
        format!(
            "3 seeds: lander acc {:.2} F {:.2}, finetune acc {:.2} F {:.2}; acc gap {acc_gap:.2}, forgetting gap \
             {f_gap:.2}, {:.0} s",
            acc("lander"),
            forgetting("lander"),
            acc("finetune"),
            forgetting("finetune"),
            bench_elapsed.as_secs_f64()
        ),
    );

    for seed in DESK_SEEDS {
        for variant in ["wo_ltg", "r0"] {
            runs.push(run_desk(desk_config(seed, Some(variant)), &root.join(format!("{variant}-{seed}"))));
        }
    }
    let rows = summarize(&runs);
    let table = render_table(&rows);
    let report_path = root.join("table.txt");
    fs::write(&report_path, &table).unwrap();
    println!("{}", table.trim_end().replace('\n', "\n    "));
    let checks = ablation_ordering(&rows);
    let flagged = checks.iter().all(|c| c.holds || table.contains(&format!("{} >= {}: FAILED", c.better, c.worse)));
    let detail: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.2} vs {} {:.2}", c.better, c.better_acc, c.worse, c.worse_acc))
        .collect();
    // The ordering itself is soft; a missing or unflagged report is not.
    let reported = checks.len() == 2 && flagged;
    let ordering = if reported {
        Outcome {
            soft: true,
            ..Outcome::new(
                checks.iter().all(|c| c.holds),
                format!("{}; report written with failures flagged", detail.join(", ")),
            )
        }
    } else {
        Outcome::new(false, format!("{}; report incomplete or failure not flagged", detail.join(", ")))
    };

    let again = root.join("lander-0-again");
    run_desk(desk_config(0, None), &again);
    let first = fs::read(RunDir::new(root.join("lander-0")).metrics()).unwrap();
    let second = fs::read(RunDir::new(&again).metrics()).unwrap();
    let determinism = Outcome::new(
        first == second,
        format!("two sequential seed-0 runs, metrics.json byte-identical: {}", first == second),
    );
    (benchmark, ordering, determinism)
}

// ---------------------------------------------------------------------------
// Criterion 10: memory arithmetic
// ---------------------------------------------------------------------------

fn memory_arithmetic() -> Outcome {
    let start = Instant::now();
    let config = resolve_config("", &["generation.rounds=40".into(), "generation.batch_size=256".into()]).unwrap();
    let plan = config.generation_config().plan();
    let elapsed = start.elapsed();
    Outcome::new(
        plan.memory_size == 10240 && elapsed < Duration::from_secs(1),
        format!("I=40, B=256 plans {} samples without gradient steps, {:.2} ms", plan.memory_size, elapsed.as_secs_f64() * 1e3),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters only need the binary to exit cleanly.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let root = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("loss oracle suite", loss_oracle_suite()),
        ("adaptive scale factor grid", scale_factor_grid()),
        ("aggregation", aggregation()),
        ("metrics", metrics()),
        ("partition properties", partition()),
        ("memory arithmetic", memory_arithmetic()),
        ("generation smoke", generation_smoke()),
    ];
    let (benchmark, ordering, determinism) = desk_suite(root.path());
    results.push(("desk benchmark", benchmark));
    results.push(("ablation ordering (soft)", ordering));
    results.push(("determinism", determinism));

    let (mut failed, mut hard_failed) = (0, 0);
    for (name, outcome) in &results {
        println!("{} {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
        failed += usize::from(!outcome.pass);
        hard_failed += usize::from(!outcome.pass && !outcome.soft);
    }
    println!(
        "{} of {} criteria passed ({} soft failure(s))",
        results.len() - failed,
        results.len(),
        failed - hard_failed
    );
    if hard_failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
