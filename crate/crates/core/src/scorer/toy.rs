//! A one-block masked language model with hand-written backprop.
//!
//! Architecture (no normalisation layers):
//!
//! ```text
//! x   = tok_emb[ids] + pos_emb[0..T]
//! h1  = x + softmax(x Wq (x Wk)^T / sqrt(d)) (x Wv) Wo
//! h2  = h1 + tanh(h1 W1) W2
//! out = h2 Wout + b
//! ```
//!
//! Attention is bidirectional over the whole sequence. The hidden vector
//! reported for a mask position is its row of `h2`.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{tokenize, ScoreRequest, ScoreResponse, Scorer, MASK_TOKEN, UNK_TOKEN};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLTOYMLM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ToyDims {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl ToyDims {
    pub fn new(vocab: usize, d_model: usize, d_ff: usize, max_len: usize) -> Self {
        ToyDims {
            vocab,
            d_model,
            d_ff,
            max_len,
        }
    }

    /// d = 32, h = 64, L = 16.
    pub fn with_defaults(vocab: usize) -> Self {
        Self::new(vocab, 32, 64, 16)
    }
}

/// Parameter collection. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_ff1: Array2<f64>,
    pub w_ff2: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl ToyParams {
    pub const BLOCK_NAMES: [&'static str; 10] = [
        "tok_emb", "pos_emb", "w_q", "w_k", "w_v", "w_o", "w_ff1", "w_ff2", "w_out", "b_out",
    ];

    pub fn zeros(dims: ToyDims) -> Self {
        let ToyDims {
            vocab: v,
            d_model: d,
            d_ff: h,
            max_len: l,
        } = dims;
        ToyParams {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((l, d)),
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            w_ff1: Array2::zeros((d, h)),
            w_ff2: Array2::zeros((h, d)),
            w_out: Array2::zeros((d, v)),
            b_out: Array1::zeros(v),
        }
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)` per block
    /// (`1/sqrt(d)` for the embeddings); zero output bias.
    pub fn random(dims: ToyDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let d = dims.d_model as f64;
        let h = dims.d_ff as f64;
        let stds = [d, d, d, d, d, d, d, h, d];
        for ((_, block), fan_in) in p.blocks_mut().into_iter().zip(stds) {
            let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).unwrap();
            for x in block.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        }
        p
    }

    pub fn dims(&self) -> ToyDims {
        ToyDims {
            vocab: self.tok_emb.nrows(),
            d_model: self.tok_emb.ncols(),
            d_ff: self.w_ff1.ncols(),
            max_len: self.pos_emb.nrows(),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 10] {
        let n = Self::BLOCK_NAMES;
        [
            (n[0], self.tok_emb.as_slice().unwrap()),
            (n[1], self.pos_emb.as_slice().unwrap()),
            (n[2], self.w_q.as_slice().unwrap()),
            (n[3], self.w_k.as_slice().unwrap()),
            (n[4], self.w_v.as_slice().unwrap()),
            (n[5], self.w_o.as_slice().unwrap()),
            (n[6], self.w_ff1.as_slice().unwrap()),
            (n[7], self.w_ff2.as_slice().unwrap()),
            (n[8], self.w_out.as_slice().unwrap()),
            (n[9], self.b_out.as_slice().unwrap()),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 10] {
        let n = Self::BLOCK_NAMES;
        [
            (n[0], self.tok_emb.as_slice_mut().unwrap()),
            (n[1], self.pos_emb.as_slice_mut().unwrap()),
            (n[2], self.w_q.as_slice_mut().unwrap()),
            (n[3], self.w_k.as_slice_mut().unwrap()),
            (n[4], self.w_v.as_slice_mut().unwrap()),
            (n[5], self.w_o.as_slice_mut().unwrap()),
            (n[6], self.w_ff1.as_slice_mut().unwrap()),
            (n[7], self.w_ff2.as_slice_mut().unwrap()),
            (n[8], self.w_out.as_slice_mut().unwrap()),
            (n[9], self.b_out.as_slice_mut().unwrap()),
        ]
    }

    /// `self += alpha * other`, block by block.
    pub fn scaled_add(&mut self, alpha: f64, other: &ToyParams) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }

    /// Euclidean norm over every parameter.
    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub ids: Vec<usize>,
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    h1: Array2<f64>,
    z: Array2<f64>,
    pub h2: Array2<f64>,
    /// T × V logits for every position.
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMLM {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    mask_id: usize,
    unk_id: Option<usize>,
    pub params: ToyParams,
    model_id: String,
}

impl ToyMLM {
    pub fn new(vocab: Vec<String>, params: ToyParams) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        let mask_id = *index
            .get(MASK_TOKEN)
            .ok_or_else(|| Error::invalid(format!("vocabulary lacks {MASK_TOKEN}")))?;
        let dims = params.dims();
        if dims.vocab != vocab.len() {
            return Err(Error::invalid(format!(
                "parameter vocab size {} != vocabulary length {}",
                dims.vocab,
                vocab.len()
            )));
        }
        let p = &params;
        let (d, h) = (dims.d_model, dims.d_ff);
        let shapes_ok = p.w_q.dim() == (d, d)
            && p.w_k.dim() == (d, d)
            && p.w_v.dim() == (d, d)
            && p.w_o.dim() == (d, d)
            && p.w_ff1.dim() == (d, h)
            && p.w_ff2.dim() == (h, d)
            && p.w_out.dim() == (d, dims.vocab)
            && p.b_out.len() == dims.vocab
            && p.pos_emb.ncols() == d;
        if !shapes_ok {
            return Err(Error::invalid("inconsistent parameter shapes"));
        }
        let unk_id = index.get(UNK_TOKEN).copied();
        Ok(ToyMLM {
            vocab,
            index,
            mask_id,
            unk_id,
            params,
            model_id: "toy".into(),
        })
    }

    /// Randomly initialised model with default dimensions.
    pub fn init(vocab: Vec<String>, seed: u64) -> Result<Self> {
        let dims = ToyDims::with_defaults(vocab.len());
        Self::new(vocab, ToyParams::random(dims, seed))
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    pub fn dims(&self) -> ToyDims {
        self.params.dims()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    /// Maps words to ids, falling back to `[UNK]` when the vocabulary has it.
    pub fn ids_for(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.token_id(t)
                    .or(self.unk_id)
                    .ok_or_else(|| Error::OutOfVocabulary(t.clone()))
            })
            .collect()
    }

    /// Tokenizes a cloze and returns its ids and the single mask position.
    pub fn encode_cloze(&self, text: &str) -> Result<(Vec<usize>, usize)> {
        let ids = self.ids_for(&tokenize(text))?;
        let masks: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == self.mask_id)
            .map(|(i, _)| i)
            .collect();
        match masks.as_slice() {
            [pos] => Ok((ids, *pos)),
            other => Err(Error::MaskCount(other.len())),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardCache> {
        let p = &self.params;
        let dims = self.dims();
        let t = ids.len();
        if t == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if t > dims.max_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: dims.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= dims.vocab) {
            return Err(Error::invalid(format!("token id {bad} out of range")));
        }

        let x = p.tok_emb.select(Axis(0), ids) + p.pos_emb.slice(s![..t, ..]);
        let q = x.dot(&p.w_q);
        let k = x.dot(&p.w_k);
        let v = x.dot(&p.w_v);
        let scale = 1.0 / (dims.d_model as f64).sqrt();
        let mut attn = q.dot(&k.t()) * scale;
        for mut row in attn.rows_mut() {
            softmax_in_place(row.as_slice_mut().unwrap());
        }
        let ctx = attn.dot(&v);
        let h1 = &x + &ctx.dot(&p.w_o);
        let z = h1.dot(&p.w_ff1).mapv(f64::tanh);
        let h2 = &h1 + &z.dot(&p.w_ff2);
        let logits = h2.dot(&p.w_out) + &p.b_out;
        Ok(ForwardCache {
            ids: ids.to_vec(),
            x,
            q,
            k,
            v,
            attn,
            ctx,
            h1,
            z,
            h2,
            logits,
        })
    }

    /// Logits over the vocabulary and hidden vector at `mask_position`.
    pub fn toy_forward(&self, ids: &[usize], mask_position: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if mask_position >= ids.len() {
            return Err(Error::invalid(format!(
                "mask position {mask_position} outside sequence of length {}",
                ids.len()
            )));
        }
        let cache = self.forward(ids)?;
        Ok((
            cache.logits.row(mask_position).to_vec(),
            cache.h2.row(mask_position).to_vec(),
        ))
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the T × V logits.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Array2<f64>) -> ToyParams {
        let p = &self.params;
        let dims = self.dims();
        let t = cache.ids.len();
        assert_eq!(d_logits.dim(), (t, dims.vocab), "d_logits shape");
        let mut g = ToyParams::zeros(dims);

        g.w_out = cache.h2.t().dot(d_logits);
        g.b_out = d_logits.sum_axis(Axis(0));
        let d_h2 = d_logits.dot(&p.w_out.t());

        // h2 = h1 + tanh(h1 W1) W2
        g.w_ff2 = cache.z.t().dot(&d_h2);
        let d_z = d_h2.dot(&p.w_ff2.t());
        let d_u = &d_z * &cache.z.mapv(|z| 1.0 - z * z);
        g.w_ff1 = cache.h1.t().dot(&d_u);
        let d_h1 = &d_h2 + &d_u.dot(&p.w_ff1.t());

        // h1 = x + ctx Wo
        g.w_o = cache.ctx.t().dot(&d_h1);
        let d_ctx = d_h1.dot(&p.w_o.t());
        let mut d_x = d_h1;

        // ctx = attn v
        let d_attn = d_ctx.dot(&cache.v.t());
        let d_v = cache.attn.t().dot(&d_ctx);

        // row-wise softmax backward
        let mut d_scores = Array2::zeros((t, t));
        for i in 0..t {
            let a = cache.attn.row(i);
            let da = d_attn.row(i);
            let dot = a.dot(&da);
            for j in 0..t {
                d_scores[[i, j]] = a[j] * (da[j] - dot);
            }
        }
        let scale = 1.0 / (dims.d_model as f64).sqrt();
        d_scores *= scale;
        let d_q = d_scores.dot(&cache.k);
        let d_k = d_scores.t().dot(&cache.q);

        g.w_q = cache.x.t().dot(&d_q);
        g.w_k = cache.x.t().dot(&d_k);
        g.w_v = cache.x.t().dot(&d_v);
        d_x = d_x + d_q.dot(&p.w_q.t()) + d_k.dot(&p.w_k.t()) + d_v.dot(&p.w_v.t());

        for (pos, &id) in cache.ids.iter().enumerate() {
            let row = d_x.row(pos);
            g.tok_emb.row_mut(id).scaled_add(1.0, &row);
            g.pos_emb.row_mut(pos).scaled_add(1.0, &row);
        }
        g
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; the model id becomes `toy:<file name>`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::from_bytes(&bytes)?.with_model_id(format!("toy:{name}")))
    }

    /// Layout: magic, u32 version, u32 V/d/h/L, then V length-prefixed UTF-8
    /// tokens, then every parameter block in [`ToyParams::BLOCK_NAMES`]
    /// order as row-major little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(32 + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        for x in [
            FORMAT_VERSION,
            dims.vocab as u32,
            dims.d_model as u32,
            dims.d_ff as u32,
            dims.max_len as u32,
        ] {
            out.write_u32::<LittleEndian>(x).unwrap();
        }
        for tok in &self.vocab {
            out.write_u32::<LittleEndian>(tok.len() as u32).unwrap();
            out.write_all(tok.as_bytes()).unwrap();
        }
        for (_, block) in self.params.blocks() {
            for &x in block {
                out.write_f64::<LittleEndian>(x).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or corrupt: {e}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a toy MLM checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dim = || r.read_u32::<LittleEndian>().map(|x| x as usize);
        let dims = ToyDims::new(
            dim().map_err(bad)?,
            dim().map_err(bad)?,
            dim().map_err(bad)?,
            dim().map_err(bad)?,
        );
        let mut vocab = Vec::with_capacity(dims.vocab);
        for _ in 0..dims.vocab {
            let len = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(bad)?;
            vocab.push(
                String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
        }
        let mut params = ToyParams::zeros(dims);
        for (_, block) in params.blocks_mut() {
            for x in block.iter_mut() {
                *x = r.read_f64::<LittleEndian>().map_err(bad)?;
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Self::new(vocab, params)
    }

    fn candidate_ids(&self, candidates: &[String]) -> Result<Vec<usize>> {
        candidates
            .iter()
            .map(|c| {
                self.token_id(c)
                    .filter(|&id| id != self.mask_id && Some(id) != self.unk_id)
                    .ok_or_else(|| Error::OutOfVocabulary(c.clone()))
            })
            .collect()
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

impl Scorer for ToyMLM {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn mask_token(&self) -> &str {
        MASK_TOKEN
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        if request.candidates.is_empty() {
            return Err(Error::invalid("empty candidate list"));
        }
        let cand = self.candidate_ids(&request.candidates)?;
        let (ids, mask_pos) = self.encode_cloze(&request.text)?;
        let (logits, hidden) = self.toy_forward(&ids, mask_pos)?;
        Ok(ScoreResponse {
            log_scores: cand.iter().map(|&c| logits[c]).collect(),
            hidden: request.want_hidden.then_some(hidden),
            model_id: self.model_id.clone(),
        })
    }

    fn tokenize_check(&self, words: &[String]) -> Result<Vec<bool>> {
        Ok(words
            .iter()
            .map(|w| {
                let toks = tokenize(w);
                toks.len() == 1
                    && toks[0] == *w
                    && self.candidate_ids(std::slice::from_ref(w)).is_ok()
            })
            .collect())
    }

    fn supports_hidden(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn vocab(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let v = vocab(&["[MASK]", "a", "b", "c", "d"]);
        let m = ToyMLM::new(v.clone(), ToyParams::zeros(ToyDims::new(5, 4, 6, 8))).unwrap();
        let (logits, _) = m.toy_forward(&[1, 0, 2], 1).unwrap();
        assert!(logits.iter().all(|&x| x == logits[0]));
    }

    #[test]
    fn single_token_forward_matches_hand_computation() {
        // d = 2, h = 2, V = 3. With one token, attention weight is 1.
        let v = vocab(&["[MASK]", "a", "b"]);
        let mut p = ToyParams::zeros(ToyDims::new(3, 2, 2, 4));
        p.tok_emb = array![[0.5, -1.0], [1.0, 2.0], [0.0, 0.3]];
        p.pos_emb[[0, 0]] = 0.1;
        p.pos_emb[[0, 1]] = -0.2;
        p.w_q = array![[0.3, 0.0], [0.0, 0.3]];
        p.w_k = array![[0.7, 0.1], [-0.2, 0.4]];
        p.w_v = Array2::eye(2);
        p.w_o = array![[0.5, 0.0], [0.0, 0.5]];
        p.w_ff1 = array![[1.0, -1.0], [0.5, 0.25]];
        p.w_ff2 = array![[0.2, 0.0], [0.0, -0.4]];
        p.w_out = array![[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]];
        p.b_out = array![0.1, 0.0, -0.1];
        let m = ToyMLM::new(v, p).unwrap();
        let (logits, hidden) = m.toy_forward(&[0], 0).unwrap();

        // x = (0.6, -1.2); ctx = v = x; h1 = x + 0.5x = (0.9, -1.8)
        let h1: [f64; 2] = [0.9, -1.8];
        let u: [f64; 2] = [h1[0] * 1.0 + h1[1] * 0.5, h1[0] * -1.0 + h1[1] * 0.25];
        let z = [u[0].tanh(), u[1].tanh()];
        let h2 = [h1[0] + 0.2 * z[0], h1[1] - 0.4 * z[1]];
        let expect = [
            h2[0] + 0.5 * h2[1] + 0.1,
            2.0 * h2[1],
            -h2[0] - 0.1,
        ];
        for (a, b) in logits.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((hidden[0] - h2[0]).abs() < 1e-12 && (hidden[1] - h2[1]).abs() < 1e-12);
    }

    #[test]
    fn context_permutation_only_matters_through_positions() {
        let v = vocab(&["[MASK]", "a", "b", "c", "d", "e"]);
        let mut m = ToyMLM::new(v, ToyParams::random(ToyDims::new(6, 4, 8, 8), 3)).unwrap();
        // tokens at positions 0 and 2 are equidistant from the mask at 1
        let (l1, _) = m.toy_forward(&[2, 0, 4, 5], 1).unwrap();
        let (l2, _) = m.toy_forward(&[4, 0, 2, 5], 1).unwrap();
        assert!(l1.iter().zip(&l2).any(|(a, b)| (a - b).abs() > 1e-9));

        m.params.pos_emb.fill(0.0);
        let (l1, _) = m.toy_forward(&[2, 0, 4, 5], 1).unwrap();
        let (l2, _) = m.toy_forward(&[4, 0, 2, 5], 1).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_long_sequence_is_an_error() {
        let m = ToyMLM::init(vocab(&["[MASK]", "a"]), 0).unwrap();
        let ids = vec![1; 17];
        assert!(matches!(m.forward(&ids), Err(Error::SequenceTooLong { len: 17, max: 16 })));
    }

    #[test]
    fn score_validates_mask_and_candidates() {
        let m = ToyMLM::init(vocab(&["[MASK]", "[UNK]", "Wales", "Cardiff", "Paris"]), 1).unwrap();
        let req = ScoreRequest::new("The capital of Wales is [MASK].", vocab(&["Cardiff", "Paris"]));
        let resp = m.score(&req).unwrap();
        assert_eq!(resp.log_scores.len(), 2);
        assert!(resp.hidden.is_none());
        assert_eq!(m.score(&req.clone().with_hidden()).unwrap().hidden.unwrap().len(), 32);

        let bad = ScoreRequest::new("[MASK] and [MASK]", vocab(&["Paris"]));
        assert!(matches!(m.score(&bad), Err(Error::MaskCount(2))));
        let bad = ScoreRequest::new("no mask", vocab(&["Paris"]));
        assert!(matches!(m.score(&bad), Err(Error::MaskCount(0))));
        let bad = ScoreRequest::new("[MASK]", vocab(&["London"]));
        assert!(matches!(m.score(&bad), Err(Error::OutOfVocabulary(_))));
    }

    #[test]
    fn tokenize_check_is_single_token_membership() {
        let m = ToyMLM::init(vocab(&["[MASK]", "Cardiff", "Luxembourg", "City"]), 1).unwrap();
        let words = vocab(&["Cardiff", "Luxembourg City", "", "[MASK]", "Rome"]);
        assert_eq!(m.tokenize_check(&words).unwrap(), [true, false, false, false, false]);
    }

    #[test]
    fn bias_shift_preserves_candidate_argmax() {
        let mut m = ToyMLM::init(vocab(&["[MASK]", "a", "b", "c", "d"]), 5).unwrap();
        let req = ScoreRequest::new("a [MASK] b", vocab(&["b", "c", "d"]));
        let before = m.score(&req).unwrap().argmax();
        m.params.b_out += 3.7;
        assert_eq!(m.score(&req).unwrap().argmax(), before);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let m = ToyMLM::init(vocab(&["[MASK]", "ünï", "b"]), 9).unwrap();
        let bytes = m.to_bytes();
        let back = ToyMLM::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.vocab(), m.vocab());
        assert!(ToyMLM::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(ToyMLM::from_bytes(&wrong).is_err());
    }
}
