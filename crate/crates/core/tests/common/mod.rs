//! Finite-difference oracle shared by the gradient tests and the
//! acceptance suite: an independent straight-line evaluation of
//! `M_s + lambda (M_c - M_d)`.
#![allow(dead_code)]

use fkt::align::{AlignmentSwitches, PseudoLabels};
use fkt::augment::{AugmentedPool, Provenance};
use fkt::network::{
    init_params, supervised_loss, ClassifierParams, GeneratorParams, NetworkDims, ParamBlocks,
    LOG_CLAMP,
};
use fkt::trainer::objective;
use ndarray::Array2;
use rand::{Rng, SeedableRng};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CLASSES: usize = 3;

pub fn dense(x: &[f64], w: &Array2<f64>, b: &ndarray::Array1<f64>, relu: bool) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| {
            let mut s = b[j];
            for (i, xi) in x.iter().enumerate() {
                s += xi * w[[i, j]];
            }
            if relu {
                s.max(0.0)
            } else {
                s
            }
        })
        .collect()
}

pub fn features(g: &GeneratorParams, z: &[f64]) -> Vec<f64> {
    dense(&dense(z, &g.w1, &g.b1, true), &g.w2, &g.b2, false)
}

pub fn cross_entropy(c: &ClassifierParams, f: &[f64], y: usize) -> f64 {
    let logits = dense(&dense(f, &c.w1, &c.b1, true), &c.w2, &c.b2, false);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let p = (logits[y] - m).exp() / z;
    -p.max(LOG_CLAMP).ln()
}

pub fn means(rows: &[Vec<f64>], labels: &[usize]) -> Vec<Option<Vec<f64>>> {
    (0..CLASSES)
        .map(|c| {
            let members: Vec<&Vec<f64>> = rows
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == c)
                .map(|(r, _)| r)
                .collect();
            if members.is_empty() {
                return None;
            }
            let mut m = vec![0.0; members[0].len()];
            for r in &members {
                for (a, b) in m.iter_mut().zip(r.iter()) {
                    *a += b / members.len() as f64;
                }
            }
            Some(m)
        })
        .collect()
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub struct Instance {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
    target: Array2<f64>,
    pseudo: Vec<usize>,
}

/// `M_s + lambda (M_c - M_d)` evaluated sample by sample.
pub fn reference(inst: &Instance, g: &GeneratorParams, c: &ClassifierParams, lambda: f64) -> f64 {
    let src: Vec<Vec<f64>> = inst
        .z
        .rows()
        .into_iter()
        .map(|r| features(g, r.as_slice().unwrap()))
        .collect();
    let m_s = src
        .iter()
        .zip(&inst.labels)
        .map(|(f, &y)| cross_entropy(c, f, y))
        .sum::<f64>()
        / src.len() as f64;
    if lambda == 0.0 {
        return m_s;
    }
    let tgt: Vec<Vec<f64>> = inst
        .target
        .rows()
        .into_iter()
        .map(|r| features(g, r.as_slice().unwrap()))
        .collect();
    let (ms, mt) = (means(&src, &inst.labels), means(&tgt, &inst.pseudo));
    let common: Vec<usize> = (0..CLASSES)
        .filter(|&k| ms[k].is_some() && mt[k].is_some())
        .collect();
    let k = common.len() as f64;
    let m_c = common
        .iter()
        .map(|&a| sq(ms[a].as_ref().unwrap(), mt[a].as_ref().unwrap()))
        .sum::<f64>()
        / k;
    let mut m_d = 0.0;
    for &a in &common {
        for &b in &common {
            if a != b {
                m_d += sq(ms[a].as_ref().unwrap(), mt[b].as_ref().unwrap());
            }
        }
    }
    m_d /= k * (k - 1.0);
    m_s + lambda * (m_c - m_d)
}

pub fn instance(seed: u64) -> (Instance, GeneratorParams, ClassifierParams) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dims = NetworkDims {
        input: 5,
        hidden: 7,
        feature: 4,
        cls_hidden: 6,
        classes: CLASSES,
    };
    let (mut g, mut c) = init_params(&dims, seed).unwrap();
    // nonzero biases so every bias gradient is exercised
    for b in [&mut g.b1, &mut g.b2] {
        b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    for b in [&mut c.b1, &mut c.b2] {
        b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    let n = 20;
    let z = Array2::from_shape_simple_fn((n, 5), || rng.random_range(-1.5..1.5));
    let labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
    let provenance: Vec<Provenance> = (0..n)
        .map(|i| match i % 5 {
            0 => Provenance::EpSource,
            1 => Provenance::Mix,
            2 => Provenance::KpCross,
            _ => Provenance::Real,
        })
        .collect();
    let target = Array2::from_shape_simple_fn((12, 5), || rng.random_range(-1.5..1.5));
    let pseudo = (0..12).map(|i| (i * 2) % CLASSES).collect();
    (
        Instance {
            z,
            labels,
            provenance,
            target,
            pseudo,
        },
        g,
        c,
    )
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub struct FdCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl FdCheck {
    pub fn passes(&self) -> bool {
        self.max_rel < TOL
    }
}

/// Central differences over every entry of every block.
pub fn check_blocks<P: ParamBlocks + Clone>(
    params: &P,
    analytic: &P,
    value: impl Fn(&P) -> f64,
) -> FdCheck {
    let mut out = FdCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let grads = analytic.blocks();
    for (b, (name, block)) in params.blocks().iter().enumerate() {
        for i in 0..block.len() {
            let mut plus = params.clone();
            plus.blocks_mut()[b].1[i] += H;
            let mut minus = params.clone();
            minus.blocks_mut()[b].1[i] -= H;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * H);
            let a = grads[b].1[i];
            let e = rel_err(a, numeric);
            if e >= out.max_rel {
                out.max_rel = e;
                out.worst = format!("{name}[{i}]: analytic {a:e} numeric {numeric:e}");
            }
            out.checked += 1;
        }
    }
    out
}

/// Max relative error of `M_s` and full-objective gradients over all
/// parameters of both networks, for one seeded instance.
pub fn gradient_report(seed: u64, lambda: f64) -> (FdCheck, FdCheck, FdCheck, FdCheck) {
    let (inst, g, c) = instance(seed);
    let out = supervised_loss(inst.z.view(), &inst.labels, &g, &c).unwrap();
    assert_eq!(out.clamped, 0);
    let ms_f = check_blocks(&g, &out.grad_gen, |gp| reference(&inst, gp, &c, 0.0));
    let ms_c = check_blocks(&c, &out.grad_cls, |cp| reference(&inst, &g, cp, 0.0));

    let mut pool = AugmentedPool::real_only(inst.z.clone(), inst.labels.clone());
    pool.provenance = inst.provenance.clone();
    let pseudo = PseudoLabels {
        classes: inst.pseudo.clone(),
        confidence: vec![1.0; inst.pseudo.len()],
        accepted: vec![true; inst.pseudo.len()],
    };
    let both = AlignmentSwitches {
        intra: true,
        inter: true,
    };
    let eval = objective(&pool, inst.target.view(), &pseudo, &g, &c, lambda, both).unwrap();
    assert!(eval.terms.m_c.is_some() && eval.terms.m_d.is_some());
    assert!((eval.objective - reference(&inst, &g, &c, lambda)).abs() < 1e-9);
    let ob_f = check_blocks(&g, &eval.grad_gen, |gp| reference(&inst, gp, &c, lambda));
    let ob_c = check_blocks(&c, &eval.grad_cls, |cp| reference(&inst, &g, cp, lambda));
    (ms_f, ms_c, ob_f, ob_c)
}
