//! Attention-based multi-instance regression head with exact hand-derived
//! reverse-mode gradients.
//!
//! Forward graph per bag: instance layer norm (learned affine) + modality
//! embedding; 192->256->256 projector (ELU, dropout); attention scorer
//! 256->128(tanh)->1 with a bag-wise softmax; attention-weighted pooling;
//! regression head 256->128(ELU, dropout)->1.

mod train;

pub use train::{
    load_checkpoint, lr_at, predict, save_checkpoint, train, val_rmse, write_history_csv,
    EpochStats, TrainConfig, TrainOutcome,
};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::bags::Bag;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

pub const IN_DIM: usize = 192;
pub const PROJ_DIM: usize = 256;
pub const ATTN_HID: usize = 128;
pub const HEAD_HID: usize = 128;
pub const N_MODALITIES: usize = 3;
pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.15;

/// Parameter group layout: names and lengths, in flat-vector order.
pub const GROUPS: [(&str, usize); 15] = [
    ("modality_table", N_MODALITIES * IN_DIM),
    ("ln_gain", IN_DIM),
    ("ln_bias", IN_DIM),
    ("proj_w1", PROJ_DIM * IN_DIM),
    ("proj_b1", PROJ_DIM),
    ("proj_w2", PROJ_DIM * PROJ_DIM),
    ("proj_b2", PROJ_DIM),
    ("attn_w1", ATTN_HID * PROJ_DIM),
    ("attn_b1", ATTN_HID),
    ("attn_w2", ATTN_HID),
    ("attn_b2", 1),
    ("head_w1", HEAD_HID * PROJ_DIM),
    ("head_b1", HEAD_HID),
    ("head_w2", HEAD_HID),
    ("head_b2", 1),
];

/// All learnable weights in one seedable container. The same struct holds
/// gradients, so shapes always agree.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    pub modality_table: Array2<f64>, // 3 x 192
    pub ln_gain: Array1<f64>,        // 192
    pub ln_bias: Array1<f64>,        // 192
    pub proj_w1: Array2<f64>,        // 256 x 192
    pub proj_b1: Array1<f64>,
    pub proj_w2: Array2<f64>, // 256 x 256
    pub proj_b2: Array1<f64>,
    pub attn_w1: Array2<f64>, // 128 x 256
    pub attn_b1: Array1<f64>,
    pub attn_w2: Array1<f64>, // 128
    pub attn_b2: f64,
    pub head_w1: Array2<f64>, // 128 x 256
    pub head_b1: Array1<f64>,
    pub head_w2: Array1<f64>, // 128
    pub head_b2: f64,
}

impl MilParams {
    /// Seeded initialization: uniform Kaiming-style fan-in bounds for the
    /// linear layers (bound = 1/sqrt(fan_in), weights and biases alike),
    /// layer-norm gain 1 / bias 0, modality table zero so the untrained
    /// model is modality-agnostic.
    pub fn init(seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, &["init"]));
        let mut linear = |rows: usize, cols: usize| -> (Array2<f64>, Array1<f64>) {
            let bound = 1.0 / (cols as f64).sqrt();
            let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound));
            let b = Array1::from_shape_fn(rows, |_| rng.gen_range(-bound..=bound));
            (w, b)
        };
        let (proj_w1, proj_b1) = linear(PROJ_DIM, IN_DIM);
        let (proj_w2, proj_b2) = linear(PROJ_DIM, PROJ_DIM);
        let (attn_w1, attn_b1) = linear(ATTN_HID, PROJ_DIM);
        let (attn_w2_m, attn_b2_v) = linear(1, ATTN_HID);
        let (head_w1, head_b1) = linear(HEAD_HID, PROJ_DIM);
        let (head_w2_m, head_b2_v) = linear(1, HEAD_HID);
        MilParams {
            modality_table: Array2::zeros((N_MODALITIES, IN_DIM)),
            ln_gain: Array1::ones(IN_DIM),
            ln_bias: Array1::zeros(IN_DIM),
            proj_w1,
            proj_b1,
            proj_w2,
            proj_b2,
            attn_w1,
            attn_b1,
            attn_w2: attn_w2_m.row(0).to_owned(),
            attn_b2: attn_b2_v[0],
            head_w1,
            head_b1,
            head_w2: head_w2_m.row(0).to_owned(),
            head_b2: head_b2_v[0],
        }
    }

    pub fn zeros() -> Self {
        MilParams {
            modality_table: Array2::zeros((N_MODALITIES, IN_DIM)),
            ln_gain: Array1::zeros(IN_DIM),
            ln_bias: Array1::zeros(IN_DIM),
            proj_w1: Array2::zeros((PROJ_DIM, IN_DIM)),
            proj_b1: Array1::zeros(PROJ_DIM),
            proj_w2: Array2::zeros((PROJ_DIM, PROJ_DIM)),
            proj_b2: Array1::zeros(PROJ_DIM),
            attn_w1: Array2::zeros((ATTN_HID, PROJ_DIM)),
            attn_b1: Array1::zeros(ATTN_HID),
            attn_w2: Array1::zeros(ATTN_HID),
            attn_b2: 0.0,
            head_w1: Array2::zeros((HEAD_HID, PROJ_DIM)),
            head_b1: Array1::zeros(HEAD_HID),
            head_w2: Array1::zeros(HEAD_HID),
            head_b2: 0.0,
        }
    }

    /// Total learnable parameter count, a pure function of the shapes.
    pub fn param_count(&self) -> usize {
        self.modality_table.len()
            + self.ln_gain.len()
            + self.ln_bias.len()
            + self.proj_w1.len()
            + self.proj_b1.len()
            + self.proj_w2.len()
            + self.proj_b2.len()
            + self.attn_w1.len()
            + self.attn_b1.len()
            + self.attn_w2.len()
            + 1
            + self.head_w1.len()
            + self.head_b1.len()
            + self.head_w2.len()
            + 1
    }

    /// Flattens in GROUPS order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.modality_table.iter());
        out.extend(self.ln_gain.iter());
        out.extend(self.ln_bias.iter());
        out.extend(self.proj_w1.iter());
        out.extend(self.proj_b1.iter());
        out.extend(self.proj_w2.iter());
        out.extend(self.proj_b2.iter());
        out.extend(self.attn_w1.iter());
        out.extend(self.attn_b1.iter());
        out.extend(self.attn_w2.iter());
        out.push(self.attn_b2);
        out.extend(self.head_w1.iter());
        out.extend(self.head_b1.iter());
        out.extend(self.head_w2.iter());
        out.push(self.head_b2);
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let expected: usize = GROUPS.iter().map(|(_, n)| n).sum();
        if flat.len() != expected {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s.to_vec()
        };
        Ok(MilParams {
            modality_table: Array2::from_shape_vec(
                (N_MODALITIES, IN_DIM),
                take(N_MODALITIES * IN_DIM),
            )
            .unwrap(),
            ln_gain: Array1::from_vec(take(IN_DIM)),
            ln_bias: Array1::from_vec(take(IN_DIM)),
            proj_w1: Array2::from_shape_vec((PROJ_DIM, IN_DIM), take(PROJ_DIM * IN_DIM)).unwrap(),
            proj_b1: Array1::from_vec(take(PROJ_DIM)),
            proj_w2: Array2::from_shape_vec((PROJ_DIM, PROJ_DIM), take(PROJ_DIM * PROJ_DIM))
                .unwrap(),
            proj_b2: Array1::from_vec(take(PROJ_DIM)),
            attn_w1: Array2::from_shape_vec((ATTN_HID, PROJ_DIM), take(ATTN_HID * PROJ_DIM))
                .unwrap(),
            attn_b1: Array1::from_vec(take(ATTN_HID)),
            attn_w2: Array1::from_vec(take(ATTN_HID)),
            attn_b2: take(1)[0],
            head_w1: Array2::from_shape_vec((HEAD_HID, PROJ_DIM), take(HEAD_HID * PROJ_DIM))
                .unwrap(),
            head_b1: Array1::from_vec(take(HEAD_HID)),
            head_w2: Array1::from_vec(take(HEAD_HID)),
            head_b2: take(1)[0],
        })
    }

    /// Cheap structural fingerprint used to reject stale traces.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for arr in [
            &self.modality_table,
            &self.proj_w1,
            &self.proj_w2,
            &self.attn_w1,
            &self.head_w1,
        ] {
            if let Some(&first) = arr.iter().next() {
                mix(first);
            }
            if let Some(&last) = arr.iter().last() {
                mix(last);
            }
        }
        for arr in [
            &self.ln_gain,
            &self.ln_bias,
            &self.proj_b1,
            &self.proj_b2,
            &self.attn_b1,
            &self.attn_w2,
            &self.head_b1,
            &self.head_w2,
        ] {
            if let Some(&first) = arr.iter().next() {
                mix(first);
            }
        }
        mix(self.attn_b2);
        mix(self.head_b2);
        h
    }
}

/// Dropout behavior of a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Eval,
    /// Inverted dropout with the given keep-side scaling; the mask stream is
    /// fully determined by the seed.
    Train {
        dropout_seed: u64,
        dropout_p: f64,
    },
}

/// Everything backward needs for an exact reverse pass.
pub struct ForwardTrace {
    modality_ids: Vec<u8>,
    ln_raw: Array2<f64>,
    e_tilde: Array2<f64>,
    u1: Array2<f64>,
    d1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    u2: Array2<f64>,
    h: Array2<f64>,
    mask2: Option<Array2<f64>>,
    t1t: Array2<f64>,
    pooled: Array1<f64>,
    q1: Array1<f64>,
    hq: Array1<f64>,
    mask_q: Option<Array1<f64>>,
    fingerprint: u64,
    /// Bag-wise softmax weights, strictly positive, summing to 1.
    pub attention: Array1<f64>,
    pub prediction: f64,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            for (j, &bj) in b.iter().enumerate() {
                out[[i, j]] = ai * bj;
            }
        }
    }
    out
}

fn dropout_mask2(rng: &mut impl Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(
        (rows, cols),
        |_| if rng.gen::<f64>() >= p { keep } else { 0.0 },
    )
}

fn dropout_mask1(rng: &mut impl Rng, len: usize, p: f64) -> Array1<f64> {
    let keep = 1.0 / (1.0 - p);
    Array1::from_shape_fn(len, |_| if rng.gen::<f64>() >= p { keep } else { 0.0 })
}

/// Runs the full forward graph on one bag. Attention normalizes over this bag's
/// instances only; dropout is active only in train mode.
pub fn forward(bag: &Bag, params: &MilParams, mode: ForwardMode) -> Result<ForwardTrace> {
    let n = bag.len();
    if n == 0 {
        return Err(Error::invalid("forward on an empty bag"));
    }
    if let Some(&bad) = bag
        .modality_ids
        .iter()
        .find(|&&m| m as usize >= N_MODALITIES)
    {
        return Err(Error::invalid(format!("modality id {bad} out of range")));
    }

    // instance layer norm with learned affine, plus modality embedding
    let mut ln_raw = Array2::zeros((n, IN_DIM));
    for i in 0..n {
        let row = bag.embedding_row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / IN_DIM as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / IN_DIM as f64;
        let denom = (var + LN_EPS).sqrt();
        for j in 0..IN_DIM {
            ln_raw[[i, j]] = (row[j] as f64 - mean) / denom;
        }
    }
    let mut e_tilde = &ln_raw * &params.ln_gain + &params.ln_bias;
    for i in 0..n {
        let m = bag.modality_ids[i] as usize;
        let v = params.modality_table.row(m);
        e_tilde.row_mut(i).zip_mut_with(&v, |a, b| *a += b);
    }

    let (mask1, mask2, mask_q) = match mode {
        ForwardMode::Eval => (None, None, None),
        ForwardMode::Train {
            dropout_seed,
            dropout_p,
        } => {
            if !(0.0..1.0).contains(&dropout_p) {
                return Err(Error::invalid(format!("dropout {dropout_p} outside [0,1)")));
            }
            let mut rng = rng_from(dropout_seed);
            (
                Some(dropout_mask2(&mut rng, n, PROJ_DIM, dropout_p)),
                Some(dropout_mask2(&mut rng, n, PROJ_DIM, dropout_p)),
                Some(dropout_mask1(&mut rng, HEAD_HID, dropout_p)),
            )
        }
    };

    // projector: two ELU layers with dropout after each
    let u1 = e_tilde.dot(&params.proj_w1.t()) + &params.proj_b1;
    let a1 = u1.mapv(elu);
    let d1 = match &mask1 {
        Some(m) => &a1 * m,
        None => a1,
    };
    let u2 = d1.dot(&params.proj_w2.t()) + &params.proj_b2;
    let a2 = u2.mapv(elu);
    let h = match &mask2 {
        Some(m) => &a2 * m,
        None => a2,
    };

    // attention logits and the bag-wise softmax
    let t1 = h.dot(&params.attn_w1.t()) + &params.attn_b1;
    let t1t = t1.mapv(f64::tanh);
    let logits = t1t.dot(&params.attn_w2) + params.attn_b2;
    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|l| (l - max_logit).exp());
    let total = exps.sum();
    let attention = exps / total;

    let pooled = h.t().dot(&attention);

    // regression head
    let q1 = params.head_w1.dot(&pooled) + &params.head_b1;
    let aq = q1.mapv(elu);
    let hq = match &mask_q {
        Some(m) => &aq * m,
        None => aq,
    };
    let prediction = params.head_w2.dot(&hq) + params.head_b2;

    Ok(ForwardTrace {
        modality_ids: bag.modality_ids.clone(),
        ln_raw,
        e_tilde,
        u1,
        d1,
        mask1,
        u2,
        h,
        mask2,
        t1t,
        pooled,
        q1,
        hq,
        mask_q,
        fingerprint: params.fingerprint(),
        attention,
        prediction,
    })
}

/// Squared error; batch losses average this over the batch's bags.
pub fn loss(prediction: f64, target: f64) -> f64 {
    (prediction - target).powi(2)
}

/// Exact reverse pass. `upstream` is dL/dprediction (for a single bag under
/// squared error, 2*(prediction - target)). The trace must come from a
/// forward over the same parameter values.
pub fn backward(trace: &ForwardTrace, params: &MilParams, upstream: f64) -> Result<MilParams> {
    if trace.fingerprint != params.fingerprint() {
        return Err(Error::invalid(
            "stale trace: parameters changed since forward",
        ));
    }
    let mut g = MilParams::zeros();
    g.ln_gain = Array1::zeros(IN_DIM);
    g.ln_bias = Array1::zeros(IN_DIM);

    // head
    g.head_w2 = trace.hq.mapv(|v| v * upstream);
    g.head_b2 = upstream;
    let dhq = params.head_w2.mapv(|v| v * upstream);
    let daq = match &trace.mask_q {
        Some(m) => &dhq * m,
        None => dhq,
    };
    let dq1 = &daq * &trace.q1.mapv(elu_grad);
    g.head_w1 = outer(&dq1, &trace.pooled);
    g.head_b1 = dq1.clone();
    let dpooled = params.head_w1.t().dot(&dq1);

    // pooling and softmax
    let dalpha = trace.h.dot(&dpooled);
    let mut dh = outer(&trace.attention, &dpooled);
    let s = trace.attention.dot(&dalpha);
    let dlogits = &trace.attention * &dalpha.mapv(|v| v - s);

    // attention scorer
    g.attn_w2 = trace.t1t.t().dot(&dlogits);
    g.attn_b2 = dlogits.sum();
    let dt1t = outer(&dlogits, &params.attn_w2);
    let dt1 = &dt1t * &trace.t1t.mapv(|t| 1.0 - t * t);
    g.attn_w1 = dt1.t().dot(&trace.h);
    g.attn_b1 = dt1.sum_axis(Axis(0));
    dh = dh + dt1.dot(&params.attn_w1);

    // projector layer 2
    let da2 = match &trace.mask2 {
        Some(m) => &dh * m,
        None => dh,
    };
    let du2 = &da2 * &trace.u2.mapv(elu_grad);
    g.proj_w2 = du2.t().dot(&trace.d1);
    g.proj_b2 = du2.sum_axis(Axis(0));
    let dd1 = du2.dot(&params.proj_w2);

    // projector layer 1
    let da1 = match &trace.mask1 {
        Some(m) => &dd1 * m,
        None => dd1,
    };
    let du1 = &da1 * &trace.u1.mapv(elu_grad);
    g.proj_w1 = du1.t().dot(&trace.e_tilde);
    g.proj_b1 = du1.sum_axis(Axis(0));
    let de_tilde = du1.dot(&params.proj_w1);

    // modality table and the learned layer-norm affine
    for (i, &m) in trace.modality_ids.iter().enumerate() {
        let row = de_tilde.row(i);
        g.modality_table
            .row_mut(m as usize)
            .zip_mut_with(&row, |a, b| *a += b);
    }
    g.ln_gain = (&de_tilde * &trace.ln_raw).sum_axis(Axis(0));
    g.ln_bias = de_tilde.sum_axis(Axis(0));

    Ok(g)
}

/// Adds `other` into `self`-style accumulation for batch gradients.
pub fn accumulate(into: &mut MilParams, other: &MilParams) {
    into.modality_table += &other.modality_table;
    into.ln_gain += &other.ln_gain;
    into.ln_bias += &other.ln_bias;
    into.proj_w1 += &other.proj_w1;
    into.proj_b1 += &other.proj_b1;
    into.proj_w2 += &other.proj_w2;
    into.proj_b2 += &other.proj_b2;
    into.attn_w1 += &other.attn_w1;
    into.attn_b1 += &other.attn_b1;
    into.attn_w2 += &other.attn_w2;
    into.attn_b2 += other.attn_b2;
    into.head_w1 += &other.head_w1;
    into.head_b1 += &other.head_b1;
    into.head_w2 += &other.head_w2;
    into.head_b2 += other.head_b2;
}
