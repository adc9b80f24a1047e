//! Modality encoders. Every encoder projects its input to a shared
//! 128-dimensional embedding; the TCN additionally yields per-timestep
//! features for the prediction and reconstruction heads.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::nn::{dropout, glorot, Linear, ParamId, ParamStore, Session};
use crate::tape::Var;
use crate::{Error, Result};

/// Shared embedding width.
pub const D_MODEL: usize = 128;
/// Audio CNN channel widths per block.
pub const AUDIO_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Minimum mel frames the audio conv stack accepts.
pub const MIN_AUDIO_FRAMES: usize = 16;
/// Tabular MLP hidden width.
pub const TAB_HIDDEN: usize = 256;
/// GCN message-passing rounds.
pub const GCN_LAYERS: usize = 3;
/// Element one-hot vocabulary: C, O, H, N, other.
pub const ELEMENT_VOCAB: usize = 5;

const BN_EPS: f64 = 1e-5;

/// Atom vocabulary for molecular node features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Element {
    C,
    O,
    H,
    N,
    Other,
}

impl Element {
    pub fn one_hot_index(self) -> usize {
        match self {
            Element::C => 0,
            Element::O => 1,
            Element::H => 2,
            Element::N => 3,
            Element::Other => 4,
        }
    }

    pub fn from_symbol(s: &str) -> Element {
        match s {
            "C" => Element::C,
            "O" => Element::O,
            "H" => Element::H,
            "N" => Element::N,
            _ => Element::Other,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::O => "O",
            Element::H => "H",
            Element::N => "N",
            Element::Other => "X",
        }
    }
}

/// Undirected molecular graph with element one-hot node features.
#[derive(Debug, Clone)]
pub struct MolecularGraph {
    pub nodes: Vec<Element>,
    pub edges: Vec<(usize, usize)>,
}

impl MolecularGraph {
    pub fn new(nodes: Vec<Element>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let g = Self { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (a, b) in &self.edges {
            if *a >= self.nodes.len() || *b >= self.nodes.len() {
                return Err(Error::invalid(format!(
                    "bond ({a}, {b}) references a missing atom"
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str("atom ");
            out.push_str(n.symbol());
            out.push('\n');
        }
        for (a, b) in &self.edges {
            out.push_str(&format!("bond {a} {b}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("atom") => {
                    let sym = parts
                        .next()
                        .ok_or_else(|| Error::invalid("atom line missing element"))?;
                    nodes.push(Element::from_symbol(sym));
                }
                Some("bond") => {
                    let a: usize = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::invalid("bond line missing index"))?;
                    let b: usize = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::invalid("bond line missing index"))?;
                    edges.push((a, b));
                }
                _ => return Err(Error::invalid(format!("bad graph line: {line}"))),
            }
        }
        MolecularGraph::new(nodes, edges)
    }

    /// Degree counting the implicit self-loop.
    pub fn degree(&self, v: usize) -> usize {
        1 + self
            .edges
            .iter()
            .filter(|(a, b)| *a == v || *b == v)
            .count()
    }

    /// Symmetric-normalized adjacency with self-loops:
    /// `S[v][u] = 1/sqrt(deg(u) deg(v))` for `u` in `N(v) + {v}`.
    pub fn norm_adjacency(&self) -> Array2<f64> {
        let n = self.nodes.len();
        let mut s = Array2::zeros((n, n));
        let deg: Vec<f64> = (0..n).map(|v| self.degree(v) as f64).collect();
        for v in 0..n {
            s[[v, v]] = 1.0 / (deg[v] * deg[v]).sqrt();
        }
        for (a, b) in &self.edges {
            let w = 1.0 / (deg[*a] * deg[*b]).sqrt();
            s[[*a, *b]] = w;
            s[[*b, *a]] = w;
        }
        s
    }

    pub fn one_hot_features(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.nodes.len(), ELEMENT_VOCAB));
        for (i, n) in self.nodes.iter().enumerate() {
            x[[i, n.one_hot_index()]] = 1.0;
        }
        x
    }
}

// ---------------------------------------------------------------------------
// TCN
// ---------------------------------------------------------------------------

/// Architecture constants for the time-series encoder.
#[derive(Debug, Clone)]
pub struct TcnConfig {
    pub layers: usize,
    pub kernel: usize,
    pub d_model: usize,
    pub dropout: f64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            kernel: 3,
            d_model: D_MODEL,
            dropout: 0.5,
        }
    }
}

impl TcnConfig {
    /// One dilated convolution per residual block with dilations 2^(l-1):
    /// R = 1 + (k-1) * sum_l 2^(l-1).
    pub fn receptive_field(&self) -> usize {
        let dil_sum: usize = (0..self.layers).map(|l| 1usize << l).sum();
        1 + (self.kernel - 1) * dil_sum
    }
}

struct TcnBlock {
    /// Filter direction, `[k*C, C]`.
    v: ParamId,
    /// Per-filter magnitude, `[1, C]`.
    g: ParamId,
    bias: ParamId,
    dilation: usize,
}

/// Dilated causal convolutional encoder with weight-normalized filters and
/// residual skips.
pub struct TcnEncoder {
    pub cfg: TcnConfig,
    input: Linear,
    blocks: Vec<TcnBlock>,
    in_channels: usize,
}

impl TcnEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: TcnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), in_channels, cfg.d_model, rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let v0 = glorot(cfg.kernel * cfg.d_model, cfg.d_model, rng);
            // magnitude initialized to the column norm so W == V at start
            let g0 = {
                let mut g = ArrayD::zeros(IxDyn(&[1, cfg.d_model]));
                for c in 0..cfg.d_model {
                    let mut sq = 0.0;
                    for r in 0..cfg.kernel * cfg.d_model {
                        sq += v0[[r, c]] * v0[[r, c]];
                    }
                    g[[0, c]] = sq.sqrt();
                }
                g
            };
            let v = store.register(&format!("{name}.block{l}.v"), v0);
            let g = store.register(&format!("{name}.block{l}.g"), g0);
            let bias = store.register(
                &format!("{name}.block{l}.b"),
                ArrayD::zeros(IxDyn(&[1, cfg.d_model])),
            );
            blocks.push(TcnBlock {
                v,
                g,
                bias,
                dilation: 1 << l,
            });
        }
        Self {
            cfg,
            input,
            blocks,
            in_channels,
        }
    }

    fn conv<'t>(&self, s: &Session<'t, '_>, block: &TcnBlock, x: Var<'t>) -> Var<'t> {
        let v = s.p(block.v);
        let g = s.p(block.g);
        let norms = v.mul(v).sum_rows().sqrt();
        let w = v.mul_row(g.div(norms));
        x.unfold1d(self.cfg.kernel, block.dilation)
            .matmul(w)
            .add_row(s.p(block.bias))
    }

    /// Forward over a `[T, in_channels]` window. Returns per-step features
    /// `[T, d_model]` and the pooled embedding `[1, d_model]`.
    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        x: &Array2<f64>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if x.ncols() != self.in_channels {
            return Err(Error::invalid(format!(
                "tcn expects {} channels, got {}",
                self.in_channels,
                x.ncols()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite value in tcn input"));
        }
        let xin = s.tape.leaf(x.clone().into_dyn());
        let mut h = self.input.forward(s, xin);
        for block in &self.blocks {
            let c = self.conv(s, block, h).relu();
            let c = dropout(c, self.cfg.dropout, training, rng);
            h = h.add(c);
        }
        let pooled = h.mean_rows();
        Ok((h, pooled))
    }
}

// ---------------------------------------------------------------------------
// Audio CNN
// ---------------------------------------------------------------------------

struct AudioBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// 4-block 2-D CNN over a log-mel spectrogram: conv 3x3, per-channel
/// normalization, ReLU, 2x2 max pool; then global average pooling and a
/// linear projection to the shared width.
pub struct AudioEncoder {
    blocks: Vec<AudioBlock>,
    proj: Linear,
    mel_bands: usize,
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, name: &str, mel_bands: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::new();
        let mut c_in = 1usize;
        for (i, &c_out) in AUDIO_CHANNELS.iter().enumerate() {
            let w = store.register(&format!("{name}.conv{i}.w"), glorot(9 * c_in, c_out, rng));
            let b = store.register(
                &format!("{name}.conv{i}.b"),
                ArrayD::zeros(IxDyn(&[1, c_out])),
            );
            let gamma = store.register(
                &format!("{name}.conv{i}.gamma"),
                ArrayD::ones(IxDyn(&[1, c_out])),
            );
            let beta = store.register(
                &format!("{name}.conv{i}.beta"),
                ArrayD::zeros(IxDyn(&[1, c_out])),
            );
            blocks.push(AudioBlock { w, b, gamma, beta });
            c_in = c_out;
        }
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            AUDIO_CHANNELS[3],
            D_MODEL,
            rng,
        );
        Self {
            blocks,
            proj,
            mel_bands,
        }
    }

    /// Encode a `[frames, 64]` mel slice into `[1, 128]`.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, mel: &Array2<f64>) -> Result<Var<'t>> {
        if mel.nrows() < MIN_AUDIO_FRAMES {
            return Err(Error::invalid("audio segment too short"));
        }
        if mel.ncols() != self.mel_bands {
            return Err(Error::invalid(format!(
                "expected {} mel bands, got {}",
                self.mel_bands,
                mel.ncols()
            )));
        }
        if !mel.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite value in mel input"));
        }
        let (mut h, mut w) = (mel.nrows(), mel.ncols());
        let flat = mel.to_shape((h * w, 1)).unwrap().to_owned().into_dyn();
        let mut x = s.tape.leaf(flat);
        for block in &self.blocks {
            let u = x.unfold2d_3x3(h, w);
            let y = u.matmul(s.p(block.w)).add_row(s.p(block.b));
            // channel statistics over spatial positions (batch of one)
            let m = y.mean_rows();
            let d = y.add_row(m.neg());
            let var = d.mul(d).mean_rows();
            let std = var.add_scalar(BN_EPS).sqrt();
            let yn = d
                .div_row(std)
                .mul_row(s.p(block.gamma))
                .add_row(s.p(block.beta));
            x = yn.relu().max_pool2(h, w);
            h /= 2;
            w /= 2;
        }
        let pooled = x.mean_rows();
        Ok(self.proj.forward(s, pooled))
    }
}

// ---------------------------------------------------------------------------
// Tabular MLP
// ---------------------------------------------------------------------------

/// Two-layer MLP over the padded/truncated static tabular vector.
pub struct TabularEncoder {
    pub l1: Linear,
    pub l2: Linear,
    pub d_tab: usize,
    dropout_p: f64,
}

impl TabularEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_tab: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let l1 = Linear::new(store, &format!("{name}.l1"), d_tab, TAB_HIDDEN, rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), TAB_HIDDEN, D_MODEL, rng);
        Self {
            l1,
            l2,
            d_tab,
            dropout_p,
        }
    }

    /// Pads with zeros (or truncates) to `d_tab` before projecting.
    pub fn forward<'t>(
        &self,
        s: &Session<'t, '_>,
        x: &[f64],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Var<'t> {
        let mut padded = vec![0.0; self.d_tab];
        let n = x.len().min(self.d_tab);
        padded[..n].copy_from_slice(&x[..n]);
        let xin = s
            .tape
            .leaf(ArrayD::from_shape_vec(IxDyn(&[1, self.d_tab]), padded).unwrap());
        let h = self.l1.forward(s, xin).relu();
        let h = dropout(h, self.dropout_p, training, rng);
        self.l2.forward(s, h)
    }
}

// ---------------------------------------------------------------------------
// Precomputed-vector projection (text, image)
// ---------------------------------------------------------------------------

/// Linear projection of precomputed feature vectors; a list is projected
/// per vector and mean-pooled.
pub struct VectorEncoder {
    proj: Linear,
    pub d_in: usize,
}

impl VectorEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), d_in, D_MODEL, rng);
        Self { proj, d_in }
    }

    /// `None` signals an absent modality (empty list), never an error.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, vecs: &[Vec<f64>]) -> Option<Var<'t>> {
        if vecs.is_empty() {
            return None;
        }
        let k = vecs.len();
        let mut data = Vec::with_capacity(k * self.d_in);
        for v in vecs {
            assert_eq!(v.len(), self.d_in, "vector width mismatch");
            data.extend_from_slice(v);
        }
        let x = s
            .tape
            .leaf(ArrayD::from_shape_vec(IxDyn(&[k, self.d_in]), data).unwrap());
        Some(self.proj.forward(s, x).mean_rows())
    }
}

// ---------------------------------------------------------------------------
// Molecular GCN
// ---------------------------------------------------------------------------

/// 3-layer graph convolution with symmetric normalization (self-loops in
/// the degree), ReLU, and global mean pooling.
pub struct GcnEncoder {
    layers: Vec<Linear>,
}

impl GcnEncoder {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(GCN_LAYERS);
        for k in 0..GCN_LAYERS {
            let d_in = if k == 0 { ELEMENT_VOCAB } else { D_MODEL };
            layers.push(Linear::new_no_bias(
                store,
                &format!("{name}.layer{k}"),
                d_in,
                D_MODEL,
                rng,
            ));
        }
        Self { layers }
    }

    /// Mean of all molecule embeddings; each molecule is encoded separately.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, graphs: &[MolecularGraph]) -> Result<Var<'t>> {
        if graphs.is_empty() {
            return Err(Error::invalid("empty molecule list"));
        }
        let mut embeddings = Vec::with_capacity(graphs.len());
        for g in graphs {
            embeddings.push(self.forward_one(s, g)?);
        }
        if embeddings.len() == 1 {
            return Ok(embeddings[0]);
        }
        Ok(crate::tape::stack_rows(s.tape, &embeddings).mean_rows())
    }

    pub fn forward_one<'t>(&self, s: &Session<'t, '_>, g: &MolecularGraph) -> Result<Var<'t>> {
        if g.nodes.is_empty() {
            return Err(Error::invalid("empty molecular graph"));
        }
        g.validate()?;
        let adj = s.tape.leaf(g.norm_adjacency().into_dyn());
        let mut h = s.tape.leaf(g.one_hot_features().into_dyn());
        for layer in &self.layers {
            h = layer.forward(s, adj.matmul(h)).relu();
        }
        Ok(h.mean_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tape::Tape;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    fn tcn_with_store(seed: u64) -> (ParamStore, TcnEncoder) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let enc = TcnEncoder::new(&mut store, "tcn", 29, TcnConfig::default(), &mut r);
        (store, enc)
    }

    #[test]
    fn receptive_field_is_127() {
        assert_eq!(TcnConfig::default().receptive_field(), 127);
    }

    #[test]
    fn tcn_is_causal() {
        let (store, enc) = tcn_with_store(5);
        let mut r = rng(1);
        let x = rand_matrix(&mut r, 120, 29);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let (per_step, _) = enc.forward(&s, &x, false, &mut rng(0)).unwrap();
        let base = per_step.value();

        let mut x2 = x.clone();
        x2[[119, 3]] += 1.0;
        let tape2 = Tape::new();
        let s2 = Session::new(&tape2, &store);
        let (per_step2, _) = enc.forward(&s2, &x2, false, &mut rng(0)).unwrap();
        let pert = per_step2.value();
        for t in 0..119 {
            for c in 0..D_MODEL {
                assert_eq!(base[[t, c]], pert[[t, c]], "future leak at t={t}");
            }
        }
        // perturbation at t=0 must reach t=119 (receptive field 127 >= 120)
        let mut x3 = x.clone();
        x3[[0, 0]] += 1.0;
        let tape3 = Tape::new();
        let s3 = Session::new(&tape3, &store);
        let (per_step3, _) = enc.forward(&s3, &x3, false, &mut rng(0)).unwrap();
        let pert3 = per_step3.value();
        let moved = (0..D_MODEL).any(|c| pert3[[119, c]] != base[[119, c]]);
        assert!(moved, "receptive field failed to reach back 120 steps");
    }

    #[test]
    fn tcn_sensitivity_stops_at_127_steps() {
        let (store, enc) = tcn_with_store(6);
        let mut r = rng(2);
        let x = rand_matrix(&mut r, 200, 29);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let (per_step, _) = enc.forward(&s, &x, false, &mut rng(0)).unwrap();
        let last = per_step.value().index_axis(ndarray::Axis(0), 199).to_owned();

        // lag 127 (t = 72): outside the receptive field of step 199
        let mut x_out = x.clone();
        x_out[[72, 7]] += 10.0;
        let tape2 = Tape::new();
        let s2 = Session::new(&tape2, &store);
        let (p2, _) = enc.forward(&s2, &x_out, false, &mut rng(0)).unwrap();
        let last2 = p2.value().index_axis(ndarray::Axis(0), 199).to_owned();
        assert_eq!(last, last2);

        // lag 126 (t = 73): inside
        let mut x_in = x.clone();
        x_in[[73, 7]] += 10.0;
        let tape3 = Tape::new();
        let s3 = Session::new(&tape3, &store);
        let (p3, _) = enc.forward(&s3, &x_in, false, &mut rng(0)).unwrap();
        let last3 = p3.value().index_axis(ndarray::Axis(0), 199).to_owned();
        assert_ne!(last, last3);
    }

    #[test]
    fn tcn_zero_input_zero_bias_gives_zero() {
        let (store, enc) = tcn_with_store(7);
        let x = Array2::zeros((120, 29));
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let (per_step, pooled) = enc.forward(&s, &x, false, &mut rng(0)).unwrap();
        assert!(per_step.value().iter().all(|v| *v == 0.0));
        assert!(pooled.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tcn_rejects_non_finite() {
        let (store, enc) = tcn_with_store(8);
        let mut x = Array2::zeros((120, 29));
        x[[0, 0]] = f64::NAN;
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        assert!(enc.forward(&s, &x, false, &mut rng(0)).is_err());
    }

    #[test]
    fn audio_output_shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let enc = AudioEncoder::new(&mut store, "audio", 64, &mut r);
        let mel = rand_matrix(&mut r, 60, 64);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let e1 = enc.forward(&s, &mel).unwrap().value();
        assert_eq!(e1.shape(), [1, 128]);
        let tape2 = Tape::new();
        let s2 = Session::new(&tape2, &store);
        let e2 = enc.forward(&s2, &mel).unwrap().value();
        assert_eq!(e1, e2);
        // minimum frame count
        let short = rand_matrix(&mut r, 8, 64);
        let tape3 = Tape::new();
        let s3 = Session::new(&tape3, &store);
        let err = enc.forward(&s3, &short).unwrap_err();
        assert!(err.to_string().contains("audio segment too short"));
    }

    #[test]
    fn tabular_pads_and_has_paper_shapes() {
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let enc = TabularEncoder::new(&mut store, "tab", 606, 0.5, &mut r);
        assert_eq!(store.value(enc.l1.w).shape(), [606, TAB_HIDDEN]);
        assert_eq!(store.value(enc.l2.w).shape(), [TAB_HIDDEN, D_MODEL]);

        let x602: Vec<f64> = (0..602).map(|i| (i as f64 * 0.01).sin()).collect();
        let mut x606 = x602.clone();
        x606.extend_from_slice(&[0.0; 4]);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let a = enc.forward(&s, &x602, false, &mut rng(0)).value();
        let tape2 = Tape::new();
        let s2 = Session::new(&tape2, &store);
        let b = enc.forward(&s2, &x606, false, &mut rng(0)).value();
        assert_eq!(a, b);
    }

    #[test]
    fn tabular_zero_input_zero_bias_is_zero() {
        let mut store = ParamStore::new();
        let mut r = rng(11);
        let enc = TabularEncoder::new(&mut store, "tab", 606, 0.5, &mut r);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let out = enc.forward(&s, &[0.0; 606], false, &mut rng(0)).value();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vector_encoder_mean_and_linearity() {
        let mut store = ParamStore::new();
        let mut r = rng(12);
        let enc = VectorEncoder::new(&mut store, "text", 16, &mut r);
        // zero the bias to expose linearity
        let bias = store.id_of("text.proj.b").unwrap();
        *store.value_mut(bias) = ArrayD::zeros(IxDyn(&[1, D_MODEL]));

        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let single = enc.forward(&s, &[v.clone()]).unwrap().value();
        let tape2 = Tape::new();
        let s2 = Session::new(&tape2, &store);
        let triple = enc
            .forward(&s2, &[v.clone(), v.clone(), v.clone()])
            .unwrap()
            .value();
        for i in 0..D_MODEL {
            assert!((single[[0, i]] - triple[[0, i]]).abs() < 1e-12);
        }
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let tape3 = Tape::new();
        let s3 = Session::new(&tape3, &store);
        let zero = enc.forward(&s3, &[v, neg]).unwrap().value();
        assert!(zero.iter().all(|x| x.abs() < 1e-12));
        // empty list means "absent", not an error
        let tape4 = Tape::new();
        let s4 = Session::new(&tape4, &store);
        assert!(enc.forward(&s4, &[]).is_none());
    }

    #[test]
    fn gcn_normalization_matches_hand_values() {
        // path graph A-B-C: self-loop degrees 2, 3, 2
        let g = MolecularGraph::new(
            vec![Element::C, Element::C, Element::O],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        let s = g.norm_adjacency();
        assert!((s[[0, 1]] - 1.0 / (2.0f64 * 3.0).sqrt()).abs() < 1e-15);
        assert!((s[[1, 0]] - 1.0 / 6.0f64.sqrt()).abs() < 1e-15);
        assert!((s[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((s[[1, 1]] - 1.0 / 3.0).abs() < 1e-15);

        // single node: normalization 1, so h' = relu(W h)
        let single = MolecularGraph::new(vec![Element::O], vec![]).unwrap();
        let sa = single.norm_adjacency();
        assert_eq!(sa[[0, 0]], 1.0);
    }

    #[test]
    fn gcn_symmetric_nodes_get_identical_embeddings() {
        let mut store = ParamStore::new();
        let mut r = rng(13);
        let enc = GcnEncoder::new(&mut store, "gcn", &mut r);
        let g = MolecularGraph::new(vec![Element::C, Element::C], vec![(0, 1)]).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let adj = tape.leaf(g.norm_adjacency().into_dyn());
        let mut h = tape.leaf(g.one_hot_features().into_dyn());
        for layer in &enc.layers {
            h = layer.forward(&s, adj.matmul(h)).relu();
        }
        let hv = h.value();
        for c in 0..D_MODEL {
            assert_eq!(hv[[0, c]], hv[[1, c]]);
        }
        // empty graph is an error
        let tape2 = Tape::new();
        let s2 = Session::new(&tape2, &store);
        let empty = MolecularGraph {
            nodes: vec![],
            edges: vec![],
        };
        assert!(enc.forward_one(&s2, &empty).is_err());
    }

    #[test]
    fn tcn_gradients_match_finite_differences() {
        let (mut store, enc) = tcn_with_store(21);
        let mut r = rng(3);
        let x = rand_matrix(&mut r, 24, 29);
        let x_small = x.clone();
        let loss_of = |store: &ParamStore| {
            let tape = Tape::new();
            let s = Session::new(&tape, store);
            let (_, pooled) = enc.forward(&s, &x_small, false, &mut rng(0)).unwrap();
            pooled.mul(pooled).sum_all().scalar()
        };
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let (_, pooled) = enc.forward(&s, &x, false, &mut rng(0)).unwrap();
        let loss = pooled.mul(pooled).sum_all();
        let mut grads = tape.backward(loss);
        let pg = s.param_grads(&mut grads);
        let vid = store.id_of("tcn.block2.v").unwrap();
        let gid = store.id_of("tcn.block5.g").unwrap();
        for pid in [vid, gid] {
            let analytic = pg[pid.0].clone().unwrap();
            let eps = 1e-6;
            for k in 0..6usize {
                let idx = (k * 1009) % store.value(pid).len();
                let orig = store.value(pid).as_slice().unwrap()[idx];
                store.value_mut(pid).as_slice_mut().unwrap()[idx] = orig + eps;
                let fp = loss_of(&store);
                store.value_mut(pid).as_slice_mut().unwrap()[idx] = orig - eps;
                let fm = loss_of(&store);
                store.value_mut(pid).as_slice_mut().unwrap()[idx] = orig;
                let num = (fp - fm) / (2.0 * eps);
                let ana = analytic.as_slice().unwrap()[idx];
                let denom = ana.abs().max(num.abs()).max(1e-6);
                assert!(
                    (ana - num).abs() / denom < 1e-4,
                    "param {} idx {idx}: analytic {ana} vs numeric {num}",
                    store.name(pid)
                );
            }
        }
    }
}
