//! Small configurable encoder-decoder sequence model with token
//! embeddings, per-layer perturbation injection points, teacher-forced
//! distribution computation, and greedy decoding.
//!
//! Two architecture kinds share the same parameter-set and site
//! interface: a single-head-attention encoder-decoder (default) and a
//! recurrent gated (GRU) stack with dot-product cross-attention. The
//! output layer is tied to the input embedding table.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{concat_cols, concat_rows, Array, Graph, Tensor};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty {0} sequence")]
    EmptyInput(&'static str),
    #[error("sequence length {len} exceeds max positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid perturbation site {side} layer {layer} (side has {num_layers} layers)")]
    BadSite { side: Side, layer: usize, num_layers: usize },
    #[error("perturbation at {side} layer {layer} has shape {got:?}, expected {want:?}")]
    SiteShapeMismatch { side: Side, layer: usize, got: Vec<usize>, want: Vec<usize> },
    #[error("token id {0} out of vocabulary (size {1})")]
    BadToken(TokenId, usize),
}

/// Ordered sequence of vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token list with the four specials pinned at ids 0-3.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from content token strings; the specials are
    /// prepended automatically.
    pub fn from_content(content: &[String]) -> Self {
        let mut tokens: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        tokens.extend(content.iter().cloned());
        Self::from_full_list(tokens)
    }

    /// Builds from a full token list that already starts with the specials.
    pub fn from_full_list(tokens: Vec<String>) -> Self {
        assert!(tokens.len() >= NUM_SPECIALS, "vocab must include the 4 specials");
        assert_eq!(tokens[PAD], "<pad>");
        assert_eq!(tokens[BOS], "<bos>");
        assert_eq!(tokens[EOS], "<eos>");
        assert_eq!(tokens[UNK], "<unk>");
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            let prev = index.insert(t.clone(), i);
            assert!(prev.is_none(), "duplicate token {t:?}");
        }
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < NUM_SPECIALS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchKind {
    Attention,
    RecurrentGated,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchKind::Attention => write!(f, "attention"),
            ArchKind::RecurrentGated => write!(f, "recurrent"),
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "attention" => Ok(ArchKind::Attention),
            "recurrent" => Ok(ArchKind::RecurrentGated),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Encoder,
    Decoder,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Encoder => write!(f, "enc"),
            Side::Decoder => write!(f, "dec"),
        }
    }
}

impl std::str::FromStr for Side {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "enc" | "encoder" => Ok(Side::Encoder),
            "dec" | "decoder" => Ok(Side::Decoder),
            other => Err(format!("unknown side {other:?}")),
        }
    }
}

/// Where a perturbation is injected: layer 0 is the word-embedding
/// activation, layer L the output of layer L on that side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PerturbationSite {
    pub side: Side,
    pub layer_id: usize,
}

impl PerturbationSite {
    pub fn embedding(side: Side) -> Self {
        PerturbationSite { side, layer_id: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub arch: ArchKind,
    pub max_decode_len: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn toy_default(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            arch: ArchKind::Attention,
            max_decode_len: 24,
            max_positions: 64,
        }
    }

    pub fn num_layers(&self, side: Side) -> usize {
        match side {
            Side::Encoder => self.num_encoder_layers,
            Side::Decoder => self.num_decoder_layers,
        }
    }

    /// Activation width at a site: embeddings and attention layers run at
    /// embed_dim, recurrent hidden layers at hidden_dim.
    pub fn site_width(&self, site: PerturbationSite) -> usize {
        match self.arch {
            ArchKind::Attention => self.embed_dim,
            ArchKind::RecurrentGated => {
                if site.layer_id == 0 {
                    self.embed_dim
                } else {
                    self.hidden_dim
                }
            }
        }
    }
}

/// Named parameter arrays in a fixed, documented order.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub cfg: ModelConfig,
    entries: Vec<(String, Array)>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries: Vec<(String, Array)> = Vec::new();
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim;
        let v = cfg.vocab_size;
        let p = cfg.max_positions;

        let mut unif = |shape: Vec<usize>, limit: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
            Array::new(shape, data)
        };
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();

        entries.push(("emb".into(), unif(vec![v, d], 0.1)));
        match cfg.arch {
            ArchKind::Attention => {
                entries.push(("pos_enc".into(), unif(vec![p, d], 0.1)));
                entries.push(("pos_dec".into(), unif(vec![p, d], 0.1)));
                for l in 0..cfg.num_encoder_layers {
                    for w in ["wq", "wk", "wv", "wo"] {
                        entries.push((format!("enc{l}.{w}"), unif(vec![d, d], xavier(d, d))));
                    }
                    entries.push((format!("enc{l}.w1"), unif(vec![d, h], xavier(d, h))));
                    entries.push((format!("enc{l}.b1"), Array::zeros(vec![h])));
                    entries.push((format!("enc{l}.w2"), unif(vec![h, d], xavier(h, d))));
                    entries.push((format!("enc{l}.b2"), Array::zeros(vec![d])));
                }
                for l in 0..cfg.num_decoder_layers {
                    for w in ["sq", "sk", "sv", "so", "cq", "ck", "cv", "co"] {
                        entries.push((format!("dec{l}.{w}"), unif(vec![d, d], xavier(d, d))));
                    }
                    entries.push((format!("dec{l}.w1"), unif(vec![d, h], xavier(d, h))));
                    entries.push((format!("dec{l}.b1"), Array::zeros(vec![h])));
                    entries.push((format!("dec{l}.w2"), unif(vec![h, d], xavier(h, d))));
                    entries.push((format!("dec{l}.b2"), Array::zeros(vec![d])));
                }
            }
            ArchKind::RecurrentGated => {
                for (side, layers) in
                    [("enc", cfg.num_encoder_layers), ("dec", cfg.num_decoder_layers)]
                {
                    for l in 0..layers {
                        let input = if l == 0 { d } else { h };
                        for gate in ["z", "r", "h"] {
                            entries.push((
                                format!("{side}{l}.wx{gate}"),
                                unif(vec![input, h], xavier(input, h)),
                            ));
                            entries.push((
                                format!("{side}{l}.wh{gate}"),
                                unif(vec![h, h], xavier(h, h)),
                            ));
                            entries.push((format!("{side}{l}.b{gate}"), Array::zeros(vec![h])));
                        }
                    }
                }
                entries.push(("att.wq".into(), unif(vec![h, h], xavier(h, h))));
                entries.push(("out.wc".into(), unif(vec![2 * h, d], xavier(2 * h, d))));
            }
        }
        let by_name = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        ParamSet { cfg, entries, by_name }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Array)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> &Array {
        let idx = self.by_name[name];
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array {
        let idx = self.by_name[name];
        &mut self.entries[idx].1
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.numel()).sum()
    }

    /// Immutable copy for parallel read-only evaluation.
    pub fn snapshot(&self) -> ParamSet {
        self.clone()
    }

    /// Applies `f` to every (name, array) pair in order, mutably.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Array)) {
        for (name, arr) in &mut self.entries {
            f(name, arr);
        }
    }

    /// Rebuilds a parameter set from named arrays (checkpoint loading).
    /// The arrays must exactly match the layout `init` would produce for
    /// `cfg`, in name, order, and shape.
    pub fn from_entries(
        cfg: ModelConfig,
        entries: Vec<(String, Array)>,
    ) -> Result<Self, String> {
        let reference = ParamSet::init(cfg.clone(), 0);
        if entries.len() != reference.entries.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                reference.entries.len(),
                entries.len()
            ));
        }
        for ((name, arr), (want_name, want_arr)) in entries.iter().zip(&reference.entries) {
            if name != want_name {
                return Err(format!("expected parameter {want_name:?}, found {name:?}"));
            }
            if arr.shape != want_arr.shape {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    want_arr.shape, arr.shape
                ));
            }
        }
        let by_name = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(ParamSet { cfg, entries, by_name })
    }
}

/// Parameter leaves bound to one graph, created in the fixed order.
pub struct BoundParams {
    tensors: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(graph: &Graph, params: &ParamSet) -> Self {
        let mut tensors = Vec::with_capacity(params.entries.len());
        let mut by_name = HashMap::new();
        for (name, arr) in &params.entries {
            let t = graph.leaf(arr.clone());
            by_name.insert(name.clone(), tensors.len());
            tensors.push((name.clone(), t));
        }
        BoundParams { tensors, by_name }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.by_name[name]].1
    }

    /// Accumulated gradients per parameter, zeros where none was written.
    pub fn grads(&self) -> Vec<(String, Array)> {
        self.tensors
            .iter()
            .map(|(n, t)| {
                let g = t.grad().unwrap_or_else(|_| Array::zeros(t.shape()));
                (n.clone(), g)
            })
            .collect()
    }
}

/// One teacher-forced forward pass, with every site activation exposed.
pub struct Pass {
    /// site activations per layer id (post-injection), index 0..=L
    pub enc_sites: Vec<Tensor>,
    pub dec_sites: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
    pub log_probs: Tensor,
}

fn validate_tokens(cfg: &ModelConfig, seq: &TokenSeq) -> Result<(), ModelError> {
    for &id in &seq.ids {
        if id >= cfg.vocab_size {
            return Err(ModelError::BadToken(id, cfg.vocab_size));
        }
    }
    Ok(())
}

/// Validates a perturbation map against the config and sequence lengths.
pub fn validate_sites(
    cfg: &ModelConfig,
    x_len: usize,
    dec_len: usize,
    perturb: &[(PerturbationSite, Array)],
) -> Result<(), ModelError> {
    for (site, arr) in perturb {
        let num_layers = cfg.num_layers(site.side);
        if site.layer_id > num_layers {
            return Err(ModelError::BadSite {
                side: site.side,
                layer: site.layer_id,
                num_layers,
            });
        }
        let len = match site.side {
            Side::Encoder => x_len,
            Side::Decoder => dec_len,
        };
        let want = vec![len, cfg.site_width(*site)];
        if arr.shape != want {
            return Err(ModelError::SiteShapeMismatch {
                side: site.side,
                layer: site.layer_id,
                got: arr.shape.clone(),
                want,
            });
        }
    }
    Ok(())
}

/// Decoder input for teacher forcing: bos followed by all but nothing of y
/// shifted right (bos, y_0, ..., y_{T-2}); length equals |y|.
pub fn decoder_input(y: &TokenSeq) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(y.len());
    ids.push(BOS);
    ids.extend_from_slice(&y.ids[..y.len() - 1]);
    ids
}

fn inject<'a>(
    act: Tensor,
    side: Side,
    layer: usize,
    perturb: &[(PerturbationSite, &'a Tensor)],
) -> Tensor {
    let mut out = act;
    for (site, delta) in perturb {
        if site.side == side && site.layer_id == layer {
            out = out.add(delta);
        }
    }
    out
}

/// Core teacher-forced forward. `dec_ids` is the decoder input (already
/// bos-shifted); the returned distributions are rows over each target
/// position. Perturbation tensors must already live on `graph`.
pub fn forward(
    graph: &Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    x_ids: &[TokenId],
    dec_ids: &[TokenId],
    perturb: &[(PerturbationSite, &Tensor)],
) -> Pass {
    match cfg.arch {
        ArchKind::Attention => forward_attention(graph, bp, cfg, x_ids, dec_ids, perturb),
        ArchKind::RecurrentGated => forward_recurrent(graph, bp, cfg, x_ids, dec_ids, perturb),
    }
}

fn attention_block(
    x: &Tensor,
    q_src: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    kv_src: &Tensor,
    causal: bool,
    graph: &Graph,
    d: usize,
) -> Tensor {
    let q = q_src.matmul(wq);
    let k = kv_src.matmul(wk);
    let v = kv_src.matmul(wv);
    let mut scores = q.matmul_nt(&k).scale(1.0 / (d as f64).sqrt());
    if causal {
        let t = scores.shape()[0];
        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                mask[i * t + j] = MASK_NEG;
            }
        }
        let mask = graph.constant(Array::new(vec![t, t], mask));
        scores = scores.add(&mask);
    }
    let attn = scores.softmax_rows();
    let ctx = attn.matmul(&v).matmul(wo);
    x.add(&ctx)
}

fn ffn_block(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    let f = x.matmul(w1).add_row(b1).relu().matmul(w2).add_row(b2);
    x.add(&f)
}

fn forward_attention(
    graph: &Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    x_ids: &[TokenId],
    dec_ids: &[TokenId],
    perturb: &[(PerturbationSite, &Tensor)],
) -> Pass {
    let d = cfg.embed_dim;
    let emb = bp.get("emb");

    // encoder
    let mut enc_sites = Vec::with_capacity(cfg.num_encoder_layers + 1);
    let pos_e = bp.get("pos_enc").slice_rows(0, x_ids.len());
    let x0 = emb.embedding(x_ids).add(&pos_e);
    let mut x = inject(x0, Side::Encoder, 0, perturb);
    enc_sites.push(x.clone());
    for l in 0..cfg.num_encoder_layers {
        let h = attention_block(
            &x,
            &x,
            bp.get(&format!("enc{l}.wq")),
            bp.get(&format!("enc{l}.wk")),
            bp.get(&format!("enc{l}.wv")),
            bp.get(&format!("enc{l}.wo")),
            &x,
            false,
            graph,
            d,
        )
        .layer_norm_rows(LN_EPS);
        x = ffn_block(
            &h,
            bp.get(&format!("enc{l}.w1")),
            bp.get(&format!("enc{l}.b1")),
            bp.get(&format!("enc{l}.w2")),
            bp.get(&format!("enc{l}.b2")),
        )
        .layer_norm_rows(LN_EPS);
        x = inject(x, Side::Encoder, l + 1, perturb);
        enc_sites.push(x.clone());
    }
    let enc_out = x;

    // decoder
    let mut dec_sites = Vec::with_capacity(cfg.num_decoder_layers + 1);
    let pos_d = bp.get("pos_dec").slice_rows(0, dec_ids.len());
    let y0 = emb.embedding(dec_ids).add(&pos_d);
    let mut y = inject(y0, Side::Decoder, 0, perturb);
    dec_sites.push(y.clone());
    for l in 0..cfg.num_decoder_layers {
        let s = attention_block(
            &y,
            &y,
            bp.get(&format!("dec{l}.sq")),
            bp.get(&format!("dec{l}.sk")),
            bp.get(&format!("dec{l}.sv")),
            bp.get(&format!("dec{l}.so")),
            &y,
            true,
            graph,
            d,
        )
        .layer_norm_rows(LN_EPS);
        let c = attention_block(
            &s,
            &s,
            bp.get(&format!("dec{l}.cq")),
            bp.get(&format!("dec{l}.ck")),
            bp.get(&format!("dec{l}.cv")),
            bp.get(&format!("dec{l}.co")),
            &enc_out,
            false,
            graph,
            d,
        )
        .layer_norm_rows(LN_EPS);
        y = ffn_block(
            &c,
            bp.get(&format!("dec{l}.w1")),
            bp.get(&format!("dec{l}.b1")),
            bp.get(&format!("dec{l}.w2")),
            bp.get(&format!("dec{l}.b2")),
        )
        .layer_norm_rows(LN_EPS);
        y = inject(y, Side::Decoder, l + 1, perturb);
        dec_sites.push(y.clone());
    }

    let logits = y.matmul_nt(emb);
    let probs = logits.softmax_rows();
    let log_probs = logits.log_softmax_rows();
    Pass { enc_sites, dec_sites, logits, probs, log_probs }
}

fn gru_layer(graph: &Graph, bp: &BoundParams, prefix: &str, input: &Tensor, hidden: usize) -> Tensor {
    let t = input.shape()[0];
    let wxz = bp.get(&format!("{prefix}.wxz"));
    let whz = bp.get(&format!("{prefix}.whz"));
    let bz = bp.get(&format!("{prefix}.bz"));
    let wxr = bp.get(&format!("{prefix}.wxr"));
    let whr = bp.get(&format!("{prefix}.whr"));
    let br = bp.get(&format!("{prefix}.br"));
    let wxh = bp.get(&format!("{prefix}.wxh"));
    let whh = bp.get(&format!("{prefix}.whh"));
    let bh = bp.get(&format!("{prefix}.bh"));

    let mut h = graph.constant(Array::zeros(vec![1, hidden]));
    let mut rows = Vec::with_capacity(t);
    for step in 0..t {
        let xt = input.slice_rows(step, step + 1);
        let z = xt.matmul(wxz).add(&h.matmul(whz)).add_row(bz).sigmoid();
        let r = xt.matmul(wxr).add(&h.matmul(whr)).add_row(br).sigmoid();
        let hc = xt.matmul(wxh).add(&r.mul(&h).matmul(whh)).add_row(bh).tanh();
        // h' = z*h + (1-z)*hc
        let one_minus_z = z.neg().add_scalar(1.0);
        h = z.mul(&h).add(&one_minus_z.mul(&hc));
        rows.push(h.clone());
    }
    concat_rows(&rows)
}

fn forward_recurrent(
    graph: &Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    x_ids: &[TokenId],
    dec_ids: &[TokenId],
    perturb: &[(PerturbationSite, &Tensor)],
) -> Pass {
    let h = cfg.hidden_dim;
    let emb = bp.get("emb");

    let mut enc_sites = Vec::with_capacity(cfg.num_encoder_layers + 1);
    let mut x = inject(emb.embedding(x_ids), Side::Encoder, 0, perturb);
    enc_sites.push(x.clone());
    for l in 0..cfg.num_encoder_layers {
        x = gru_layer(graph, bp, &format!("enc{l}"), &x, h);
        x = inject(x, Side::Encoder, l + 1, perturb);
        enc_sites.push(x.clone());
    }
    let enc_out = x;

    let mut dec_sites = Vec::with_capacity(cfg.num_decoder_layers + 1);
    let mut y = inject(emb.embedding(dec_ids), Side::Decoder, 0, perturb);
    dec_sites.push(y.clone());
    for l in 0..cfg.num_decoder_layers {
        y = gru_layer(graph, bp, &format!("dec{l}"), &y, h);
        y = inject(y, Side::Decoder, l + 1, perturb);
        dec_sites.push(y.clone());
    }

    // single-head dot-product cross-attention over encoder states
    let q = y.matmul(bp.get("att.wq"));
    let attn = q.matmul_nt(&enc_out).scale(1.0 / (h as f64).sqrt()).softmax_rows();
    let ctx = attn.matmul(&enc_out);
    let o = concat_cols(&y, &ctx).matmul(bp.get("out.wc")).tanh();

    let logits = o.matmul_nt(emb);
    let probs = logits.softmax_rows();
    let log_probs = logits.log_softmax_rows();
    Pass { enc_sites, dec_sites, logits, probs, log_probs }
}

fn check_forward_inputs(
    cfg: &ModelConfig,
    x: &TokenSeq,
    y: &TokenSeq,
) -> Result<(), ModelError> {
    if x.is_empty() {
        return Err(ModelError::EmptyInput("source"));
    }
    if y.is_empty() {
        return Err(ModelError::EmptyInput("target"));
    }
    for (seq, len) in [(x, x.len()), (y, y.len())] {
        validate_tokens(cfg, seq)?;
        if len > cfg.max_positions {
            return Err(ModelError::TooLong { len, max: cfg.max_positions });
        }
    }
    Ok(())
}

/// Per-step model distributions over each `y_t` given the gold prefix and
/// `x`, optionally with perturbations added at their sites. Returns a
/// `|y| x vocab` probability matrix.
pub fn teacher_forced_dist(
    params: &ParamSet,
    x: &TokenSeq,
    y: &TokenSeq,
    perturb: &[(PerturbationSite, Array)],
) -> Result<Array, ModelError> {
    let cfg = &params.cfg;
    check_forward_inputs(cfg, x, y)?;
    validate_sites(cfg, x.len(), y.len(), perturb)?;

    let graph = Graph::new();
    let bp = BoundParams::bind(&graph, params);
    let tensors: Vec<(PerturbationSite, Tensor)> = perturb
        .iter()
        .map(|(s, a)| (*s, graph.constant(a.clone())))
        .collect();
    let refs: Vec<(PerturbationSite, &Tensor)> =
        tensors.iter().map(|(s, t)| (*s, t)).collect();
    let pass = forward(&graph, &bp, cfg, &x.ids, &decoder_input(y), &refs);
    Ok(pass.probs.value())
}

fn argmax_tie_smaller(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Deterministic argmax decoding from bos until eos or max length; ties
/// break toward the smaller token id. The trailing eos is stripped.
pub fn greedy_decode(params: &ParamSet, x: &TokenSeq) -> TokenSeq {
    assert!(!x.is_empty(), "greedy_decode: empty source");
    let cfg = &params.cfg;
    let mut out: Vec<TokenId> = Vec::new();
    while out.len() < cfg.max_decode_len {
        let mut dec_ids = vec![BOS];
        dec_ids.extend_from_slice(&out);
        let graph = Graph::new();
        let bp = BoundParams::bind(&graph, params);
        let pass = forward(&graph, &bp, cfg, &x.ids, &dec_ids, &[]);
        let logits = pass.logits.value();
        let last = logits.row(logits.shape[0] - 1);
        let next = argmax_tie_smaller(last);
        if next == EOS {
            break;
        }
        out.push(next);
    }
    TokenSeq::new(out)
}

/// Immutable snapshot of the `|vocab| x embed_dim` embedding table.
pub fn embedding_vectors(params: &ParamSet) -> Array {
    params.get("emb").clone()
}

/// Sum over t of log p(y_t | y_<t, x); always <= 0.
pub fn sequence_logprob(params: &ParamSet, x: &TokenSeq, y: &TokenSeq) -> f64 {
    let dist = teacher_forced_dist(params, x, y, &[]).expect("valid sequences");
    let v = dist.shape[1];
    y.ids
        .iter()
        .enumerate()
        .map(|(t, &id)| dist.data[t * v + id].max(1e-300).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(arch: ArchKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 8,
            hidden_dim: 10,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            arch,
            max_decode_len: 6,
            max_positions: 16,
        }
    }

    fn seqs() -> (TokenSeq, TokenSeq) {
        (TokenSeq::new(vec![4, 5, 6]), TokenSeq::new(vec![6, 5, 4, 7]))
    }

    #[test]
    fn rows_are_distributions_both_archs() {
        for arch in [ArchKind::Attention, ArchKind::RecurrentGated] {
            let params = ParamSet::init(tiny_cfg(arch), 1);
            let (x, y) = seqs();
            let dist = teacher_forced_dist(&params, &x, &y, &[]).unwrap();
            assert_eq!(dist.shape, vec![4, 12]);
            for t in 0..4 {
                let s: f64 = dist.row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "{arch}: row {t} sums to {s}");
                assert!(dist.row(t).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        for arch in [ArchKind::Attention, ArchKind::RecurrentGated] {
            let params = ParamSet::init(tiny_cfg(arch), 2);
            let (x, y) = seqs();
            let base = teacher_forced_dist(&params, &x, &y, &[]).unwrap();
            let width = params.cfg.site_width(PerturbationSite::embedding(Side::Encoder));
            let zeros = Array::zeros(vec![x.len(), width]);
            let pert = teacher_forced_dist(
                &params,
                &x,
                &y,
                &[(PerturbationSite::embedding(Side::Encoder), zeros)],
            )
            .unwrap();
            assert_eq!(base.data, pert.data);
        }
    }

    #[test]
    fn zero_embeddings_give_uniform_rows() {
        let mut params = ParamSet::init(tiny_cfg(ArchKind::Attention), 3);
        let emb = params.get_mut("emb");
        emb.data.iter_mut().for_each(|v| *v = 0.0);
        let (x, y) = seqs();
        let dist = teacher_forced_dist(&params, &x, &y, &[]).unwrap();
        // tied zero output layer -> zero logits -> uniform rows
        for t in 0..y.len() {
            for &p in dist.row(t) {
                assert!((p - 1.0 / 12.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn site_shape_mismatch_rejected() {
        let params = ParamSet::init(tiny_cfg(ArchKind::Attention), 4);
        let (x, y) = seqs();
        let bad = Array::zeros(vec![2, 8]);
        let err = teacher_forced_dist(
            &params,
            &x,
            &y,
            &[(PerturbationSite::embedding(Side::Encoder), bad)],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::SiteShapeMismatch { .. }));
    }

    #[test]
    fn bad_layer_rejected() {
        let params = ParamSet::init(tiny_cfg(ArchKind::Attention), 4);
        let (x, y) = seqs();
        let delta = Array::zeros(vec![3, 8]);
        let err = teacher_forced_dist(
            &params,
            &x,
            &y,
            &[(PerturbationSite { side: Side::Encoder, layer_id: 3 }, delta)],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::BadSite { .. }));
    }

    #[test]
    fn empty_inputs_rejected() {
        let params = ParamSet::init(tiny_cfg(ArchKind::Attention), 4);
        let empty = TokenSeq::new(vec![]);
        let ok = TokenSeq::new(vec![4]);
        assert!(teacher_forced_dist(&params, &empty, &ok, &[]).is_err());
        assert!(teacher_forced_dist(&params, &ok, &empty, &[]).is_err());
    }

    #[test]
    fn greedy_decode_deterministic_and_bounded() {
        for arch in [ArchKind::Attention, ArchKind::RecurrentGated] {
            let params = ParamSet::init(tiny_cfg(arch), 5);
            let x = TokenSeq::new(vec![4, 5, 6]);
            let a = greedy_decode(&params, &x);
            let b = greedy_decode(&params, &x);
            assert_eq!(a, b);
            assert!(a.len() <= params.cfg.max_decode_len);
        }
    }

    #[test]
    fn max_decode_len_one() {
        let mut cfg = tiny_cfg(ArchKind::Attention);
        cfg.max_decode_len = 1;
        let params = ParamSet::init(cfg, 6);
        let out = greedy_decode(&params, &TokenSeq::new(vec![4, 5]));
        assert!(out.len() <= 1);
    }

    #[test]
    fn sequence_logprob_matches_dist_and_is_monotone() {
        let params = ParamSet::init(tiny_cfg(ArchKind::Attention), 7);
        let x = TokenSeq::new(vec![4, 5, 6]);
        let y = TokenSeq::new(vec![7, 8]);
        let dist = teacher_forced_dist(&params, &x, &y, &[]).unwrap();
        let manual: f64 =
            y.ids.iter().enumerate().map(|(t, &id)| dist.row(t)[id].ln()).sum();
        let lp = sequence_logprob(&params, &x, &y);
        assert!((lp - manual).abs() < 1e-12);
        assert!(lp <= 0.0);

        let longer = TokenSeq::new(vec![7, 8, 9]);
        assert!(sequence_logprob(&params, &x, &longer) <= lp + 1e-12);
    }

    #[test]
    fn embedding_snapshot_is_immutable() {
        let mut params = ParamSet::init(tiny_cfg(ArchKind::Attention), 8);
        let snap = embedding_vectors(&params);
        assert_eq!(snap.shape, vec![12, 8]);
        params.get_mut("emb").data[0] += 1.0;
        let snap2 = embedding_vectors(&params);
        assert!((snap2.data[0] - snap.data[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer0_injection_equals_adding_to_embedding_output() {
        // perturbation-site linearity at layer 0, checked to 1e-12
        let params = ParamSet::init(tiny_cfg(ArchKind::Attention), 9);
        let (x, y) = seqs();
        let mut delta = Array::zeros(vec![x.len(), 8]);
        for (i, v) in delta.data.iter_mut().enumerate() {
            *v = 0.01 * ((i % 7) as f64 - 3.0);
        }
        let via_site = teacher_forced_dist(
            &params,
            &x,
            &y,
            &[(PerturbationSite::embedding(Side::Encoder), delta.clone())],
        )
        .unwrap();

        // manually: same params but embedding rows shifted per occurrence is
        // not expressible through the table, so instead verify against a
        // second site map that splits delta into two halves added twice
        let half = Array::new(
            delta.shape.clone(),
            delta.data.iter().map(|v| v / 2.0).collect(),
        );
        let via_two = teacher_forced_dist(
            &params,
            &x,
            &y,
            &[
                (PerturbationSite::embedding(Side::Encoder), half.clone()),
                (PerturbationSite::embedding(Side::Encoder), half),
            ],
        )
        .unwrap();
        for (a, b) in via_site.data.iter().zip(&via_two.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vocab_specials_pinned() {
        let v = Vocab::from_content(&["alpha".into(), "beta".into()]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("alpha"), Some(4));
        assert!(v.is_special(2));
        assert!(!v.is_special(4));
    }
}
