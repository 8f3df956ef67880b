//! Gated-attention MIL model and the slice-level classifier, with manual
//! forward/backward passes.
//!
//! The encoder is a small two-layer MLP (d_in → enc_hidden → d, ReLU) that
//! stands in for a pretrained backbone; the freeze and differential-LR
//! machinery of the training protocol operates on it. Attention pooling
//! follows the gated form: v_k = tanh(W_V h_k), u_k = σ(W_U h_k),
//! a = softmax(wᵀ(v_k ⊙ u_k)), z = Σ a_k h_k. The classifier head is
//! Linear(d,h) → ReLU → Dropout → Linear(h,2).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_raw, softmax_raw, Matrix, RngStream, Vector};

/// Layer dimensions shared by both model kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d_in: usize,
    pub enc_hidden: usize,
    /// Embedding dimension fed to attention (encoder output).
    pub d: usize,
    /// Attention dimension L.
    pub attn_dim: usize,
    /// Classifier hidden dimension h.
    pub head_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub w1: Matrix, // enc_hidden × d_in
    pub b1: Vector, // enc_hidden
    pub w2: Matrix, // d × enc_hidden
    pub b2: Vector, // d
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedAttention {
    pub w_v: Matrix, // L × d
    pub w_u: Matrix, // L × d
    pub w: Vector,   // L
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub w1: Matrix, // h × d
    pub b1: Vector, // h
    pub w2: Matrix, // 2 × h
    pub b2: Vector, // 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    pub dims: Dims,
    pub dropout: f64,
    pub encoder: Encoder,
    pub attention: GatedAttention,
    pub head: ClassifierHead,
}

/// Slice-level classifier: encoder → Dropout → Linear(d, 2).
#[derive(Clone, Debug, PartialEq)]
pub struct SliceModel {
    pub dims: Dims,
    pub dropout: f64,
    pub encoder: Encoder,
    pub w: Matrix, // 2 × d
    pub b: Vector, // 2
}

fn init_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

fn init_vector(n: usize, fan_in: usize, rng: &mut RngStream) -> Vector {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Vector((0..n).map(|_| rng.uniform_range(-bound, bound)).collect())
}

impl Encoder {
    pub fn init(dims: &Dims, rng: &mut RngStream) -> Self {
        Encoder {
            w1: init_matrix(dims.enc_hidden, dims.d_in, rng),
            b1: init_vector(dims.enc_hidden, dims.d_in, rng),
            w2: init_matrix(dims.d, dims.enc_hidden, rng),
            b2: init_vector(dims.d, dims.enc_hidden, rng),
        }
    }

    pub fn zeros(dims: &Dims) -> Self {
        Encoder {
            w1: Matrix::zeros(dims.enc_hidden, dims.d_in),
            b1: Vector::zeros(dims.enc_hidden),
            w2: Matrix::zeros(dims.d, dims.enc_hidden),
            b2: Vector::zeros(dims.d),
        }
    }

    /// Returns (pre-activation, hidden, output).
    pub fn forward(&self, x: &Vector) -> (Vector, Vector, Vector) {
        let mut pre = self.w1.matvec(x);
        pre.add_scaled(&self.b1, 1.0);
        let hid = Vector(pre.as_slice().iter().map(|&p| p.max(0.0)).collect());
        let mut h = self.w2.matvec(&hid);
        h.add_scaled(&self.b2, 1.0);
        (pre, hid, h)
    }
}

impl MilModel {
    pub fn init(dims: Dims, dropout: f64, rng: &mut RngStream) -> Self {
        MilModel {
            dims,
            dropout,
            encoder: Encoder::init(&dims, rng),
            attention: GatedAttention {
                w_v: init_matrix(dims.attn_dim, dims.d, rng),
                w_u: init_matrix(dims.attn_dim, dims.d, rng),
                w: init_vector(dims.attn_dim, dims.attn_dim, rng),
            },
            head: ClassifierHead {
                w1: init_matrix(dims.head_hidden, dims.d, rng),
                b1: init_vector(dims.head_hidden, dims.d, rng),
                w2: init_matrix(2, dims.head_hidden, rng),
                b2: init_vector(2, dims.head_hidden, rng),
            },
        }
    }

    pub fn zeros(dims: Dims, dropout: f64) -> Self {
        MilModel {
            dims,
            dropout,
            encoder: Encoder::zeros(&dims),
            attention: GatedAttention {
                w_v: Matrix::zeros(dims.attn_dim, dims.d),
                w_u: Matrix::zeros(dims.attn_dim, dims.d),
                w: Vector::zeros(dims.attn_dim),
            },
            head: ClassifierHead {
                w1: Matrix::zeros(dims.head_hidden, dims.d),
                b1: Vector::zeros(dims.head_hidden),
                w2: Matrix::zeros(2, dims.head_hidden),
                b2: Vector::zeros(2),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        MilModel::zeros(self.dims, self.dropout)
    }

    /// Named parameter tensors in declaration order (the checkpoint order).
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("encoder.w1", self.encoder.w1.as_slice()),
            ("encoder.b1", self.encoder.b1.as_slice()),
            ("encoder.w2", self.encoder.w2.as_slice()),
            ("encoder.b2", self.encoder.b2.as_slice()),
            ("attention.w_v", self.attention.w_v.as_slice()),
            ("attention.w_u", self.attention.w_u.as_slice()),
            ("attention.w", self.attention.w.as_slice()),
            ("head.w1", self.head.w1.as_slice()),
            ("head.b1", self.head.b1.as_slice()),
            ("head.w2", self.head.w2.as_slice()),
            ("head.b2", self.head.b2.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("encoder.w1", self.encoder.w1.as_mut_slice()),
            ("encoder.b1", self.encoder.b1.as_mut_slice()),
            ("encoder.w2", self.encoder.w2.as_mut_slice()),
            ("encoder.b2", self.encoder.b2.as_mut_slice()),
            ("attention.w_v", self.attention.w_v.as_mut_slice()),
            ("attention.w_u", self.attention.w_u.as_mut_slice()),
            ("attention.w", self.attention.w.as_mut_slice()),
            ("head.w1", self.head.w1.as_mut_slice()),
            ("head.b1", self.head.b1.as_mut_slice()),
            ("head.w2", self.head.w2.as_mut_slice()),
            ("head.b2", self.head.b2.as_mut_slice()),
        ]
    }

    /// self += s * other over every parameter tensor.
    pub fn axpy_from(&mut self, other: &MilModel, s: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn scale_all(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            for x in t {
                *x *= s;
            }
        }
    }

    /// Encode + pool a bag of raw slice embeddings, keeping everything the
    /// backward pass needs.
    pub fn pool_forward(&self, slices: &[Vector]) -> BagCache {
        assert!(!slices.is_empty(), "empty bag");
        let k = slices.len();
        let mut enc_pre = Vec::with_capacity(k);
        let mut enc_hid = Vec::with_capacity(k);
        let mut h = Vec::with_capacity(k);
        for x in slices {
            let (pre, hid, out) = self.encoder.forward(x);
            enc_pre.push(pre);
            enc_hid.push(hid);
            h.push(out);
        }
        let (v, u, attn, z) = self.attend(&h);
        BagCache {
            x: slices.to_vec(),
            enc_pre,
            enc_hid,
            h,
            v,
            u,
            attn,
            z,
        }
    }

    /// Gated attention over already-encoded embeddings: returns the pooled
    /// embedding z and the attention weights a.
    pub fn attention_pool(&self, h: &[Vector]) -> Result<(Vector, Vector)> {
        if h.is_empty() {
            return Err(Error::EmptyInput("attention over empty bag".into()));
        }
        if h.iter().any(|e| e.len() != self.dims.d) {
            return Err(Error::ShapeMismatch(format!(
                "attention expects embeddings of dim {}",
                self.dims.d
            )));
        }
        let (_, _, a, z) = self.attend(h);
        Ok((z, a))
    }

    fn attend(&self, h: &[Vector]) -> (Vec<Vector>, Vec<Vector>, Vector, Vector) {
        let k = h.len();
        let mut v = Vec::with_capacity(k);
        let mut u = Vec::with_capacity(k);
        let mut scores = Vec::with_capacity(k);
        for hk in h {
            let vk = Vector(
                self.attention
                    .w_v
                    .matvec(hk)
                    .as_slice()
                    .iter()
                    .map(|&x| x.tanh())
                    .collect(),
            );
            let uk = Vector(
                self.attention
                    .w_u
                    .matvec(hk)
                    .as_slice()
                    .iter()
                    .map(|&x| sigmoid_raw(x))
                    .collect(),
            );
            let gk: f64 = vk
                .as_slice()
                .iter()
                .zip(uk.as_slice())
                .zip(self.attention.w.as_slice())
                .map(|((a, b), w)| w * a * b)
                .sum();
            v.push(vk);
            u.push(uk);
            scores.push(gk);
        }
        let a = softmax_raw(&scores);
        let mut z = Vector::zeros(self.dims.d);
        for (ak, hk) in a.as_slice().iter().zip(h) {
            z.add_scaled(hk, *ak);
        }
        (v, u, a, z)
    }

    /// Classifier head on a pooled embedding. `mask` holds pre-scaled
    /// dropout factors (0 or 1/keep); None means dropout off.
    pub fn head_forward(&self, z: &Vector, mask: Option<&Vector>) -> HeadCache {
        let mut p1 = self.head.w1.matvec(z);
        p1.add_scaled(&self.head.b1, 1.0);
        let q = Vector(p1.as_slice().iter().map(|&x| x.max(0.0)).collect());
        let qd = match mask {
            Some(m) => {
                assert_eq!(m.len(), q.len(), "dropout mask length");
                Vector(
                    q.as_slice()
                        .iter()
                        .zip(m.as_slice())
                        .map(|(a, b)| a * b)
                        .collect(),
                )
            }
            None => q.clone(),
        };
        let mut logits = self.head.w2.matvec(&qd);
        logits.add_scaled(&self.head.b2, 1.0);
        HeadCache {
            z: z.clone(),
            p1,
            q,
            qd,
            mask: mask.cloned(),
            logits,
        }
    }

    /// Full forward pass on a (already subsampled) bag.
    pub fn forward(&self, slices: &[Vector], mode: Mode<'_>) -> (Vector, Vector) {
        let cache = self.pool_forward(slices);
        let mask = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => Some(dropout_mask(rng, self.dims.head_hidden, self.dropout)),
        };
        let head = self.head_forward(&cache.z, mask.as_ref());
        (head.logits, cache.attn)
    }

    /// Backprop through the head. Returns dL/dz.
    pub fn head_backward(&self, cache: &HeadCache, dlogits: &Vector, grads: &mut MilModel) -> Vector {
        grads.head.w2.add_outer(dlogits, &cache.qd, 1.0);
        grads.head.b2.add_scaled(dlogits, 1.0);
        let mut dqd = self.head.w2.t_matvec(dlogits);
        if let Some(m) = &cache.mask {
            for (g, f) in dqd.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *g *= f;
            }
        }
        // ReLU gate on the pre-activation.
        let dp1 = Vector(
            dqd.as_slice()
                .iter()
                .zip(cache.p1.as_slice())
                .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect(),
        );
        grads.head.w1.add_outer(&dp1, &cache.z, 1.0);
        grads.head.b1.add_scaled(&dp1, 1.0);
        self.head.w1.t_matvec(&dp1)
    }

    /// Backprop through attention pooling and (unless frozen) the encoder.
    pub fn pool_backward(
        &self,
        cache: &BagCache,
        dz: &Vector,
        freeze_encoder: bool,
        grads: &mut MilModel,
    ) {
        let k = cache.h.len();
        let a = cache.attn.as_slice();

        // z = Σ a_k h_k
        let mut dh: Vec<Vector> = (0..k).map(|i| {
            let mut d = dz.clone();
            d.scale(a[i]);
            d
        }).collect();
        let da: Vec<f64> = cache.h.iter().map(|hk| dz.dot(hk)).collect();

        // Softmax backward: de_k = a_k (da_k − Σ_j a_j da_j).
        let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        let de: Vec<f64> = a.iter().zip(&da).map(|(ak, dak)| ak * (dak - dot)).collect();

        for i in 0..k {
            let g = crate::numerics::hadamard(&cache.v[i], &cache.u[i]).expect("gate shapes");
            grads.attention.w.add_scaled(&g, de[i]);
            // dg = de_i * w
            let mut dg = self.attention.w.clone();
            dg.scale(de[i]);
            // v = tanh(W_V h), u = σ(W_U h)
            let dv = crate::numerics::hadamard(&dg, &cache.u[i]).expect("shapes");
            let du = crate::numerics::hadamard(&dg, &cache.v[i]).expect("shapes");
            let ds = Vector(
                dv.as_slice()
                    .iter()
                    .zip(cache.v[i].as_slice())
                    .map(|(&g, &v)| g * (1.0 - v * v))
                    .collect(),
            );
            let dt = Vector(
                du.as_slice()
                    .iter()
                    .zip(cache.u[i].as_slice())
                    .map(|(&g, &u)| g * u * (1.0 - u))
                    .collect(),
            );
            grads.attention.w_v.add_outer(&ds, &cache.h[i], 1.0);
            grads.attention.w_u.add_outer(&dt, &cache.h[i], 1.0);
            dh[i].add_scaled(&self.attention.w_v.t_matvec(&ds), 1.0);
            dh[i].add_scaled(&self.attention.w_u.t_matvec(&dt), 1.0);
        }

        if freeze_encoder {
            return;
        }
        for i in 0..k {
            encoder_backward(
                &self.encoder,
                &cache.x[i],
                &cache.enc_pre[i],
                &cache.enc_hid[i],
                &dh[i],
                &mut grads.encoder,
            );
        }
    }
}

fn encoder_backward(
    encoder: &Encoder,
    x: &Vector,
    pre: &Vector,
    hid: &Vector,
    dh: &Vector,
    grads: &mut Encoder,
) {
    grads.w2.add_outer(dh, hid, 1.0);
    grads.b2.add_scaled(dh, 1.0);
    let dhid = encoder.w2.t_matvec(dh);
    let dpre = Vector(
        dhid.as_slice()
            .iter()
            .zip(pre.as_slice())
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    );
    grads.w1.add_outer(&dpre, x, 1.0);
    grads.b1.add_scaled(&dpre, 1.0);
}

impl SliceModel {
    pub fn init(dims: Dims, dropout: f64, rng: &mut RngStream) -> Self {
        SliceModel {
            dims,
            dropout,
            encoder: Encoder::init(&dims, rng),
            w: init_matrix(2, dims.d, rng),
            b: init_vector(2, dims.d, rng),
        }
    }

    pub fn zeros(dims: Dims, dropout: f64) -> Self {
        SliceModel {
            dims,
            dropout,
            encoder: Encoder::zeros(&dims),
            w: Matrix::zeros(2, dims.d),
            b: Vector::zeros(2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SliceModel::zeros(self.dims, self.dropout)
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("encoder.w1", self.encoder.w1.as_slice()),
            ("encoder.b1", self.encoder.b1.as_slice()),
            ("encoder.w2", self.encoder.w2.as_slice()),
            ("encoder.b2", self.encoder.b2.as_slice()),
            ("head.w", self.w.as_slice()),
            ("head.b", self.b.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("encoder.w1", self.encoder.w1.as_mut_slice()),
            ("encoder.b1", self.encoder.b1.as_mut_slice()),
            ("encoder.w2", self.encoder.w2.as_mut_slice()),
            ("encoder.b2", self.encoder.b2.as_mut_slice()),
            ("head.w", self.w.as_mut_slice()),
            ("head.b", self.b.as_mut_slice()),
        ]
    }

    pub fn axpy_from(&mut self, other: &SliceModel, s: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn forward(&self, x: &Vector, mask: Option<&Vector>) -> SliceCache {
        let (pre, hid, h) = self.encoder.forward(x);
        let hd = match mask {
            Some(m) => {
                assert_eq!(m.len(), h.len(), "dropout mask length");
                Vector(
                    h.as_slice()
                        .iter()
                        .zip(m.as_slice())
                        .map(|(a, b)| a * b)
                        .collect(),
                )
            }
            None => h.clone(),
        };
        let mut logits = self.w.matvec(&hd);
        logits.add_scaled(&self.b, 1.0);
        SliceCache {
            x: x.clone(),
            pre,
            hid,
            h,
            hd,
            mask: mask.cloned(),
            logits,
        }
    }

    pub fn backward(&self, cache: &SliceCache, dlogits: &Vector, grads: &mut SliceModel) {
        grads.w.add_outer(dlogits, &cache.hd, 1.0);
        grads.b.add_scaled(dlogits, 1.0);
        let mut dhd = self.w.t_matvec(dlogits);
        if let Some(m) = &cache.mask {
            for (g, f) in dhd.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *g *= f;
            }
        }
        encoder_backward(
            &self.encoder,
            &cache.x,
            &cache.pre,
            &cache.hid,
            &dhd,
            &mut grads.encoder,
        );
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut RngStream),
}

#[derive(Clone, Debug)]
pub struct BagCache {
    pub x: Vec<Vector>,
    pub enc_pre: Vec<Vector>,
    pub enc_hid: Vec<Vector>,
    pub h: Vec<Vector>,
    pub v: Vec<Vector>,
    pub u: Vec<Vector>,
    pub attn: Vector,
    pub z: Vector,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    pub z: Vector,
    pub p1: Vector,
    pub q: Vector,
    pub qd: Vector,
    pub mask: Option<Vector>,
    pub logits: Vector,
}

#[derive(Clone, Debug)]
pub struct SliceCache {
    pub x: Vector,
    pub pre: Vector,
    pub hid: Vector,
    pub h: Vector,
    pub hd: Vector,
    pub mask: Option<Vector>,
    pub logits: Vector,
}

/// Inverted-scaling Bernoulli dropout mask: entries are 0 with probability
/// `rate`, otherwise 1/(1−rate).
pub fn dropout_mask(rng: &mut RngStream, n: usize, rate: f64) -> Vector {
    if rate <= 0.0 {
        return Vector(vec![1.0; n]);
    }
    let keep = 1.0 - rate;
    Vector(
        (0..n)
            .map(|_| if rng.next_f64() < rate { 0.0 } else { 1.0 / keep })
            .collect(),
    )
}
