#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vpmel::heads::ProjectedFeatures;
use vpmel::interaction::{self, Pairs};
use vpmel::numerics::gradcheck::{check_inputs, check_params, GradCheckReport};
use vpmel::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};
use vpmel::objective::total_loss;
use vpmel::{HyperConfig, Model};

use oracle::{Affine, CmfiWeights, Matrix, Norm, TfiWeights, VfiWeights};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

/// Random mask of `groups × rows` bits with at least one live bit per group.
pub fn mask(r: &mut ChaCha8Rng, groups: usize, rows: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..groups * rows).map(|_| r.random_bool(0.7)).collect();
    for g in 0..groups {
        let k = r.random_range(0..rows);
        m[g * rows + k] = true;
    }
    m
}

pub fn to_rows(t: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(t).unwrap()
}

pub fn stack3(rows: &[Vec<f64>]) -> Tensor<f64> {
    let d = rows[0].len();
    Tensor::new(vec![1, rows.len(), d], rows.concat()).unwrap()
}

pub fn small_config(d: usize) -> HyperConfig {
    HyperConfig {
        d_c: d,
        d_v: d,
        d_t: d,
        ..HyperConfig::default()
    }
}

pub fn store(cfg: &HyperConfig, seed: u64) -> ParamStore<f64> {
    let cfg = HyperConfig { seed, ..cfg.clone() };
    Model::<f64>::init(&cfg).unwrap().params
}

/// Sets every weight reachable by the interaction units to the identity;
/// biases and layer-norm parameters keep their initial 0/1 values.
pub fn identity_units(store: &mut ParamStore<f64>, d: usize) {
    let names: Vec<String> = store
        .names()
        .filter(|n| (n.starts_with("vfi.") || n.starts_with("tfi.") || n.starts_with("cmfi.")) && n.ends_with(".weight"))
        .map(str::to_string)
        .collect();
    for n in names {
        store.set(&n, Tensor::identity(d)).unwrap();
    }
}

fn matrix(t: &Tensor<f64>) -> Matrix {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn affine(store: &ParamStore<f64>, prefix: &str) -> Affine {
    let w = matrix(store.get(&format!("{prefix}.weight")).unwrap());
    let b = match store.get(&format!("{prefix}.bias")) {
        Ok(b) => b.data().to_vec(),
        Err(_) => vec![0.0; w[0].len()],
    };
    Affine { w, b }
}

pub fn norm(store: &ParamStore<f64>, prefix: &str, eps: f64) -> Norm {
    Norm {
        gain: store.get(&format!("{prefix}.gain")).unwrap().data().to_vec(),
        bias: store.get(&format!("{prefix}.bias")).unwrap().data().to_vec(),
        eps,
    }
}

pub fn vfi_weights(store: &ParamStore<f64>, dir: &str, eps: f64) -> VfiWeights {
    VfiWeights {
        fc1: affine(store, &format!("{dir}.fc1")),
        fc2: affine(store, &format!("{dir}.fc2")),
        ln1: norm(store, &format!("{dir}.ln1"), eps),
        ln2: norm(store, &format!("{dir}.ln2"), eps),
    }
}

pub fn tfi_weights(store: &ParamStore<f64>, eps: f64) -> TfiWeights {
    TfiWeights {
        wq: affine(store, "tfi.wq"),
        wk: affine(store, "tfi.wk"),
        wv: affine(store, "tfi.wv"),
        ln: norm(store, "tfi.ln", eps),
        fc: affine(store, "tfi.fc"),
    }
}

pub fn cmfi_weights(store: &ParamStore<f64>, eps: f64) -> CmfiWeights {
    CmfiWeights {
        fc1: affine(store, "cmfi.fc1"),
        fc2: affine(store, "cmfi.fc2"),
        fc3: affine(store, "cmfi.fc3"),
        ln: norm(store, "cmfi.ln", eps),
    }
}

/// Projected features for hand-built unit inputs. Visual globals default
/// to the text globals when not needed.
pub fn features(
    g: &mut Graph<f64>,
    v_global: Var,
    v_local: Var,
    img_mask: Vec<bool>,
    t_global: Var,
    t_local: Var,
    txt_mask: Vec<bool>,
) -> ProjectedFeatures {
    let len = g.shape(v_local)[0];
    let img_rows = g.shape(v_local)[1];
    let txt_rows = g.shape(t_local)[1];
    ProjectedFeatures {
        v_global,
        v_local,
        t_global,
        t_local,
        img_mask,
        txt_mask,
        len,
        img_rows,
        txt_rows,
    }
}

/// Production single-pair VFI direction.
pub fn prod_vfi(cfg: &HyperConfig, s: &ParamStore<f64>, q: &[f64], tg: &[f64], tl: &[Vec<f64>], m: &[bool]) -> f64 {
    let mut g = Graph::new();
    let q = g.input(to_rows(&[q.to_vec()]));
    let tg = g.input(to_rows(&[tg.to_vec()]));
    let tl = g.input(stack3(tl));
    let y = interaction::vfi_directional(&mut g, s, cfg, "vfi.m2e", q, &[0], tg, tl, m, &[0]).unwrap();
    g.value(y).data()[0]
}

fn text_item(g: &mut Graph<f64>, global: &[f64], local: &[Vec<f64>], m: &[bool]) -> ProjectedFeatures {
    let tg = g.input(to_rows(&[global.to_vec()]));
    let tl = g.input(stack3(local));
    features(g, tg, tl, m.to_vec(), tg, tl, m.to_vec())
}

/// Production single-pair TFI G2L (`which = 0`) or full S_T (`which = 1`).
#[allow(clippy::too_many_arguments)]
pub fn prod_tfi(
    cfg: &HyperConfig,
    s: &ParamStore<f64>,
    m_global: &[f64],
    m_local: &[Vec<f64>],
    m_mask: &[bool],
    e_global: &[f64],
    e_local: &[Vec<f64>],
    e_mask: &[bool],
    full: bool,
) -> f64 {
    let mut g = Graph::new();
    let m = text_item(&mut g, m_global, m_local, m_mask);
    let e = text_item(&mut g, e_global, e_local, e_mask);
    let pairs = Pairs::grid(1, 1);
    let y = if full {
        interaction::tfi_score(&mut g, s, cfg, &m, &e, &pairs)
    } else {
        interaction::tfi_g2l(&mut g, s, cfg, &m, &e, &pairs)
    }
    .unwrap();
    g.value(y).data()[0]
}

pub fn prod_cmfi(cfg: &HyperConfig, s: &ParamStore<f64>, tg: &[f64], vl: &[Vec<f64>], m: &[bool]) -> Vec<f64> {
    let mut g = Graph::new();
    let tg = g.input(to_rows(&[tg.to_vec()]));
    let vl = g.input(stack3(vl));
    let h = interaction::cmfi_context(&mut g, s, cfg, tg, vl, m).unwrap();
    g.value(h).data().to_vec()
}

/// Hand-traced unit case: production value against the reference.
pub struct TraceCase {
    pub name: String,
    pub production: Vec<f64>,
    pub reference: Vec<f64>,
}

impl TraceCase {
    pub fn max_abs_diff(&self) -> f64 {
        assert_eq!(self.production.len(), self.reference.len(), "{}", self.name);
        self.production
            .iter()
            .zip(&self.reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// d = 2 fixtures with identity weights, then the same inputs under seeded
/// random weights.
pub fn trace_cases() -> Vec<TraceCase> {
    let cfg = small_config(2);
    let eps = cfg.layer_norm_eps;
    let mut out = Vec::new();
    for (label, seed) in [("identity", None), ("random weights", Some(17u64))] {
        let mut s = store(&cfg, seed.unwrap_or(0));
        if seed.is_none() {
            identity_units(&mut s, 2);
        } else {
            // Non-trivial biases and norm parameters as well.
            let mut r = rng(99);
            let names: Vec<String> = s.names().map(str::to_string).collect();
            for n in names.iter().filter(|n| !n.starts_with("heads")) {
                let shape = s.get(n).unwrap().shape().to_vec();
                let t = normal(&mut r, &shape);
                s.set(n, t).unwrap();
            }
        }
        let vw = vfi_weights(&s, "vfi.m2e", eps);
        let tw = tfi_weights(&s, eps);
        let cw = cmfi_weights(&s, eps);

        type VfiInput<'a> = (&'a [f64], &'a [f64], Vec<Vec<f64>>, Vec<bool>);
        let vfi_inputs: [VfiInput; 3] = [
            (&[0.6, -0.2], &[0.1, 0.4], vec![vec![1.0, 0.5], vec![-0.3, 0.8], vec![5.0, 5.0]], vec![true, true, false]),
            (&[1.5, 0.3], &[-0.7, 0.2], vec![vec![0.2, 0.2]], vec![true]),
            (&[-0.4, 0.9], &[0.3, 0.3], vec![vec![0.0, 1.0], vec![2.0, -1.0]], vec![true, true]),
        ];
        for (i, (q, tg, tl, m)) in vfi_inputs.iter().enumerate() {
            out.push(TraceCase {
                name: format!("vfi {label} #{i}"),
                production: vec![prod_vfi(&cfg, &s, q, tg, tl, m)],
                reference: vec![oracle::vfi(q, tg, tl, m, &vw)],
            });
        }

        let m_global = [0.8, -0.1];
        let m_local = vec![vec![1.0, 0.0], vec![0.3, -0.6], vec![0.0, 0.0]];
        let m_mask = [true, true, false];
        let e_global = [0.5, 1.0];
        let e_local = vec![vec![0.5, 1.0], vec![-1.0, 0.2]];
        let e_mask = [true, true];
        let g2l = oracle::g2l(&e_global, &m_local, &m_mask, &e_local, &e_mask, &tw);
        out.push(TraceCase {
            name: format!("tfi g2l {label}"),
            production: vec![prod_tfi(&cfg, &s, &m_global, &m_local, &m_mask, &e_global, &e_local, &e_mask, false)],
            reference: vec![g2l],
        });
        out.push(TraceCase {
            name: format!("tfi score {label}"),
            production: vec![prod_tfi(&cfg, &s, &m_global, &m_local, &m_mask, &e_global, &e_local, &e_mask, true)],
            reference: vec![(oracle::g2g(&m_global, &e_global) + g2l) / 2.0],
        });

        let t_global = [0.4, -0.9];
        let v_local = vec![vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.7, 0.7]];
        let v_mask = [true, true, true];
        out.push(TraceCase {
            name: format!("cmfi context {label}"),
            production: prod_cmfi(&cfg, &s, &t_global, &v_local, &v_mask),
            reference: oracle::cmfi(&t_global, &v_local, &v_mask, &cw).0,
        });
        let partial = [false, true, true];
        out.push(TraceCase {
            name: format!("cmfi context masked {label}"),
            production: prod_cmfi(&cfg, &s, &t_global, &v_local, &partial),
            reference: oracle::cmfi(&t_global, &v_local, &partial, &cw).0,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Finite-difference suite

fn probe_sum(g: &mut Graph<f64>, y: Var, probe: &Tensor<f64>) -> Result<Var, NumericsError> {
    if g.value(y).numel() == 1 && probe.numel() == 1 {
        return Ok(g.sum(y));
    }
    let w = g.input(probe.reshape(g.shape(y)).unwrap());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub type Case = Box<dyn Fn(u64) -> GradCheckReport>;

fn inputs_case(
    build: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>>)
        + 'static,
) -> Case {
    Box::new(move |seed| {
        let mut r = rng(seed);
        let (inputs, f) = build(&mut r);
        let shape = {
            let mut g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let y = f(&mut g, &v).unwrap();
            g.shape(y).to_vec()
        };
        let probe = normal(&mut r, &shape);
        check_inputs(&inputs, |g, v| {
            let y = f(g, v)?;
            probe_sum(g, y, &probe)
        })
        .unwrap()
    })
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// Primitive cases; each builds random inputs of dimension at most 8.
pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    let mut v: Vec<(&'static str, Case)> = Vec::new();
    v.push((
        "matmul",
        inputs_case(|r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            (vec![normal(r, &[m, k]), normal(r, &[k, n])], Box::new(|g, x| g.matmul(x[0], x[1])))
        }),
    ));
    v.push((
        "add_bias",
        inputs_case(|r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 1, 4));
            (vec![normal(r, &[m, n]), normal(r, &[n])], Box::new(|g, x| g.add_bias(x[0], x[1])))
        }),
    ));
    v.push((
        "linear",
        inputs_case(|r| {
            let (b, l, p, q) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            (
                vec![normal(r, &[b, l, p]), normal(r, &[p, q]), normal(r, &[q])],
                Box::new(|g, x| g.linear(x[0], x[1], Some(x[2]))),
            )
        }),
    ));
    for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        v.push((
            name,
            inputs_case(move |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 4)];
                (
                    vec![normal(r, &s), normal(r, &s)],
                    Box::new(move |g, x| match which {
                        0 => g.add(x[0], x[1]),
                        1 => g.sub(x[0], x[1]),
                        _ => g.mul(x[0], x[1]),
                    }),
                )
            }),
        ));
    }
    v.push((
        "scale",
        inputs_case(|r| {
            let s: f64 = r.sample(StandardNormal);
            let n = dim(r, 1, 8);
            (vec![normal(r, &[n])], Box::new(move |g, x| Ok(g.scale(x[0], s))))
        }),
    ));
    v.push((
        "tanh",
        inputs_case(|r| {
            let s = [dim(r, 1, 3), dim(r, 1, 4)];
            (vec![normal(r, &s)], Box::new(|g, x| Ok(g.tanh(x[0]))))
        }),
    ));
    v.push((
        "layer_norm",
        inputs_case(|r| {
            let (m, d) = (dim(r, 1, 3), dim(r, 2, 6));
            (
                vec![normal(r, &[m, d]), normal(r, &[d]), normal(r, &[d])],
                Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
            )
        }),
    ));
    v.push((
        "masked_softmax",
        inputs_case(|r| {
            let (m, k) = (dim(r, 1, 3), dim(r, 1, 6));
            let msk = mask(r, m, k);
            (vec![normal(r, &[m, k])], Box::new(move |g, x| g.softmax(x[0], Some(&msk))))
        }),
    ));
    v.push((
        "masked_mean_pool",
        inputs_case(|r| {
            let (b, l, d) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            let msk = mask(r, b, l);
            (vec![normal(r, &[b, l, d])], Box::new(move |g, x| g.mean_pool(x[0], &msk)))
        }),
    ));
    v.push((
        "row_dot",
        inputs_case(|r| {
            let s = [dim(r, 1, 4), dim(r, 1, 6)];
            (vec![normal(r, &s), normal(r, &s)], Box::new(|g, x| g.row_dot(x[0], x[1])))
        }),
    ));
    v.push((
        "l2_normalize",
        inputs_case(|r| {
            let s = [dim(r, 1, 3), dim(r, 1, 6)];
            (vec![normal(r, &s)], Box::new(|g, x| g.l2_normalize(x[0])))
        }),
    ));
    v.push((
        "gather",
        inputs_case(|r| {
            let (n, d) = (dim(r, 1, 4), dim(r, 1, 4));
            let idx: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.random_range(0..n)).collect();
            (vec![normal(r, &[n, d])], Box::new(move |g, x| g.gather(x[0], &idx)))
        }),
    ));
    v.push((
        "concat",
        inputs_case(|r| {
            let m = dim(r, 1, 3);
            (
                (0..3)
                    .map(|_| {
                        let w = dim(r, 1, 3);
                        normal(r, &[m, w])
                    })
                    .collect(),
                Box::new(|g, x| g.concat(x)),
            )
        }),
    ));
    for (name, tb) in [("batch_matmul", false), ("batch_matmul_bt", true)] {
        v.push((
            name,
            inputs_case(move |r| {
                let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                let bs = if tb { [b, n, k] } else { [b, k, n] };
                (vec![normal(r, &[b, m, k]), normal(r, &bs)], Box::new(move |g, x| g.batch_matmul(x[0], x[1], tb)))
            }),
        ));
    }
    v.push((
        "reshape",
        inputs_case(|r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            (vec![normal(r, &[a, b])], Box::new(move |g, x| g.reshape(x[0], &[b, a])))
        }),
    ));
    v.push((
        "mean",
        inputs_case(|r| {
            let n = dim(r, 1, 8);
            (vec![normal(r, &[n])], Box::new(|g, x| Ok(g.mean(x[0]))))
        }),
    ));
    v.push((
        "cross_entropy",
        inputs_case(|r| {
            let (m, c) = (dim(r, 1, 4), dim(r, 2, 6));
            let t: Vec<usize> = (0..m).map(|_| r.random_range(0..c)).collect();
            (vec![normal(r, &[m, c])], Box::new(move |g, x| g.cross_entropy(x[0], &t)))
        }),
    ));
    v
}

fn subset(store: &ParamStore<f64>, prefixes: &[&str]) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (n, p) in store.iter() {
        if prefixes.iter().any(|pre| n.starts_with(pre)) {
            out.insert(n, p.value.clone()).unwrap();
        }
    }
    out
}

fn merge(mut a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    if b.max_rel_error >= a.max_rel_error {
        a.max_rel_error = b.max_rel_error;
        a.worst = b.worst;
    }
    a.checked += b.checked;
    a
}

fn unit_config(r: &mut ChaCha8Rng) -> HyperConfig {
    HyperConfig {
        d_c: dim(r, 2, 4),
        d_v: dim(r, 2, 4),
        d_t: dim(r, 2, 4),
        cmfi_dim: Some(dim(r, 2, 4)),
        seed: r.random(),
        ..HyperConfig::default()
    }
}

/// VFI direction over a small pair list: parameters, then inputs.
fn vfi_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let cfg = unit_config(&mut r);
    let d = cfg.d_v;
    let (bq, bt, l) = (dim(&mut r, 1, 2), dim(&mut r, 1, 2), dim(&mut r, 1, 3));
    let msk = mask(&mut r, bt, l);
    let pairs = Pairs::grid(bq, bt);
    let inputs = vec![normal(&mut r, &[bq, d]), normal(&mut r, &[bt, d]), normal(&mut r, &[bt, l, d])];
    let probe = normal(&mut r, &[pairs.len()]);
    let params = subset(&Model::<f64>::init(&cfg).unwrap().params, &["vfi.m2e."]);
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
        let y = interaction::vfi_directional(g, s, &cfg, "vfi.m2e", x[0], &pairs.mention, x[1], x[2], &msk, &pairs.entity)?;
        probe_sum(g, y, &probe)
    };
    let by_params = check_params(&params, |g, s| {
        let x: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        build(g, s, &x)
    })
    .unwrap();
    let by_inputs = check_inputs(&inputs, |g, x| build(g, &params, x)).unwrap();
    merge(by_params, by_inputs)
}

fn tfi_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let cfg = unit_config(&mut r);
    let d = cfg.d_t;
    let (bm, be, lm, le) = (dim(&mut r, 1, 2), dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let mm = mask(&mut r, bm, lm);
    let em = mask(&mut r, be, le);
    let pairs = Pairs::grid(bm, be);
    let inputs = vec![
        normal(&mut r, &[bm, d]),
        normal(&mut r, &[bm, lm, d]),
        normal(&mut r, &[be, d]),
        normal(&mut r, &[be, le, d]),
    ];
    let probe = normal(&mut r, &[pairs.len()]);
    let params = subset(&Model::<f64>::init(&cfg).unwrap().params, &["tfi."]);
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
        let m = features(g, x[0], x[1], mm.clone(), x[0], x[1], mm.clone());
        let e = features(g, x[2], x[3], em.clone(), x[2], x[3], em.clone());
        let y = interaction::tfi_g2l(g, s, &cfg, &m, &e, &pairs)?;
        probe_sum(g, y, &probe)
    };
    let by_params = check_params(&params, |g, s| {
        let x: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        build(g, s, &x)
    })
    .unwrap();
    let by_inputs = check_inputs(&inputs, |g, x| build(g, &params, x)).unwrap();
    merge(by_params, by_inputs)
}

fn cmfi_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let cfg = unit_config(&mut r);
    let (b, l) = (dim(&mut r, 1, 3), dim(&mut r, 1, 4));
    let msk = mask(&mut r, b, l);
    let inputs = vec![normal(&mut r, &[b, cfg.d_t]), normal(&mut r, &[b, l, cfg.d_v])];
    let probe = normal(&mut r, &[b, cfg.cmfi_width()]);
    let params = subset(&Model::<f64>::init(&cfg).unwrap().params, &["cmfi."]);
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: &[Var]| {
        let h = interaction::cmfi_context(g, s, &cfg, x[0], x[1], &msk)?;
        probe_sum(g, h, &probe)
    };
    let by_params = check_params(&params, |g, s| {
        let x: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        build(g, s, &x)
    })
    .unwrap();
    let by_inputs = check_inputs(&inputs, |g, x| build(g, &params, x)).unwrap();
    merge(by_params, by_inputs)
}

/// Whole model on a 2 × 2 toy batch through `total_loss`, against every
/// parameter.
fn total_loss_case(seed: u64) -> GradCheckReport {
    use vpmel::data::{synth_dataset, FeatureBatch, FeatureDims, SynthSpec};
    let mut r = rng(seed);
    // Layer norm over two features is close to a step function; its
    // curvature defeats a 1e-4 central difference, so widths start at 3.
    let mut cfg = HyperConfig {
        d_c: dim(&mut r, 3, 5),
        d_v: dim(&mut r, 3, 5),
        d_t: dim(&mut r, 3, 5),
        cmfi_dim: Some(dim(&mut r, 3, 5)),
        seed: r.random(),
        ..HyperConfig::default()
    };
    cfg.lambda = r.random_range(0.0..2.0);
    cfg.tie_heads = r.random_bool(0.5);
    let dims = FeatureDims {
        d_c: cfg.d_c,
        d_t: cfg.d_t,
    };
    let mut spec = SynthSpec::new(seed, 2, 2, dims, 0.5);
    spec.img_rows = 3;
    spec.txt_rows = 4;
    let ds = synth_dataset(&spec).unwrap();
    let mf: Vec<_> = ds.mentions.iter().map(|m| &m.features).collect();
    let gold: Vec<usize> = ds.mentions.iter().map(|m| ds.kb.position(m.gold.as_ref().unwrap()).unwrap()).collect();
    let ef: Vec<_> = gold.iter().map(|&i| &ds.kb.get(i).features).collect();
    let mb = FeatureBatch::<f64>::assemble(&mf);
    let eb = FeatureBatch::<f64>::assemble(&ef);
    let model = Model::<f64>::init(&cfg).unwrap();
    let positives = [0usize, 1];
    check_params(&model.params, |g, s| {
        let m = Model {
            config: cfg.clone(),
            params: s.clone(),
        };
        let (_, _, sc) = m.forward(g, &mb, &eb, &Pairs::grid(2, 2))?;
        let sv = g.reshape(sc.s_v, &[2, 2])?;
        let st = g.reshape(sc.s_t, &[2, 2])?;
        let sc = g.reshape(sc.s_c, &[2, 2])?;
        Ok(total_loss(g, sv, st, sc, &positives, cfg.lambda, cfg.temperature)?.total)
    })
    .unwrap()
}

pub fn unit_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("vfi_directional", Box::new(vfi_case)),
        ("tfi_g2l", Box::new(tfi_case)),
        ("cmfi_context", Box::new(cmfi_case)),
        ("total_loss", Box::new(total_loss_case)),
    ]
}

/// Worst relative error of each case over `seeds` seeds.
pub fn run_gradient_suite(cases: Vec<(&'static str, Case)>, seeds: u64) -> Vec<(&'static str, GradCheckReport)> {
    cases
        .into_iter()
        .map(|(name, case)| {
            let mut worst: Option<GradCheckReport> = None;
            for seed in 0..seeds {
                let r = case(seed);
                worst = Some(match worst {
                    None => r,
                    Some(w) => merge(w, GradCheckReport { worst: format!("seed {seed}: {}", r.worst), ..r }),
                });
            }
            (name, worst.unwrap())
        })
        .collect()
}
