//! Encoder–decoder attention regressor shared by the base predictor and the
//! residual modules.
//!
//! The encoder reads a short token sequence per item (device, mode tokens).
//! Every queried time point becomes its own one-token decoder sequence that
//! cross-attends to its item's encoder memory, so predictions at different
//! times never interact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{NodeId, Tape, Tensor};

/// Number of device classes.
pub const DEVICES: usize = 2;
/// Order-index classes `0..=10`.
pub const INDICES: usize = 11;
/// Token kinds: device, current mode, previous mode.
pub const TOKEN_KINDS: usize = 3;
/// Per-token numeric features `(p̃, Ã, q)`.
pub const MODE_FEATURES: usize = 3;
pub const TOKEN_FEATURES: usize = DEVICES + INDICES + TOKEN_KINDS + MODE_FEATURES;

/// Rows per forward pass during batched inference.
pub const INFERENCE_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Sinusoid pairs in the time-token features.
    pub time_frequencies: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 3,
            decoder_layers: 3,
            width: 64,
            heads: 4,
            ffn_width: 128,
            time_frequencies: 6,
        }
    }
}

impl ModelConfig {
    pub fn small() -> Self {
        ModelConfig {
            width: 8,
            heads: 2,
            ffn_width: 16,
            time_frequencies: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.ffn_width == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err("layer counts and ffn_width must be positive".into());
        }
        Ok(())
    }

    fn time_features(&self) -> usize {
        1 + 2 * self.time_frequencies
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Param {
    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape[0], self.shape[1], self.data.clone())
    }

    /// Weight matrices decay; biases and norm gains do not.
    pub fn decays(&self) -> bool {
        self.name.ends_with(".w")
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// One trainable network: parameters in a fixed construction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Module {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..rows * cols)
            .map(|_| match init {
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
                Init::Normal => loop {
                    let x: f64 = normal.sample(self.rng);
                    if x.abs() <= 0.04 {
                        break x;
                    }
                },
            })
            .collect();
        self.params.push(Param {
            name,
            shape: [rows, cols],
            data,
        });
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) {
        self.add(format!("{name}.w"), rows, cols, Init::Normal);
        self.add(format!("{name}.b"), 1, cols, Init::Zeros);
    }

    fn norm(&mut self, name: &str, width: usize) {
        self.add(format!("{name}.g"), 1, width, Init::Ones);
        self.add(format!("{name}.b"), 1, width, Init::Zeros);
    }
}

/// Cursor over parameter leaves in construction order.
struct Leaves {
    ids: Vec<NodeId>,
    next: usize,
}

impl Leaves {
    fn take(&mut self) -> NodeId {
        self.next += 1;
        self.ids[self.next - 1]
    }

    fn linear(&mut self) -> (NodeId, NodeId) {
        (self.take(), self.take())
    }
}

fn linear(tape: &mut Tape, x: NodeId, (w, b): (NodeId, NodeId)) -> NodeId {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Sinusoidal encoding of sequence position `pos`.
pub fn positional_encoding(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|c| {
            let freq = 1.0 / 10000f64.powf((c / 2 * 2) as f64 / width as f64);
            let angle = pos as f64 * freq;
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl Module {
    /// Fresh module: truncated-normal weights, zero biases, zero output head.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        b.linear("enc.embed", TOKEN_FEATURES, d);
        for l in 0..config.encoder_layers {
            let p = format!("enc.{l}");
            b.norm(&format!("{p}.ln1"), d);
            for proj in ["q", "k", "v", "o"] {
                b.linear(&format!("{p}.attn.{proj}"), d, d);
            }
            b.norm(&format!("{p}.ln2"), d);
            b.linear(&format!("{p}.ffn.up"), d, config.ffn_width);
            b.linear(&format!("{p}.ffn.down"), config.ffn_width, d);
        }
        b.norm("enc.ln", d);
        b.linear("dec.embed", config.time_features(), d);
        for l in 0..config.decoder_layers {
            let p = format!("dec.{l}");
            b.norm(&format!("{p}.ln1"), d);
            b.linear(&format!("{p}.self.v"), d, d);
            b.linear(&format!("{p}.self.o"), d, d);
            b.norm(&format!("{p}.ln2"), d);
            for proj in ["q", "k", "v", "o"] {
                b.linear(&format!("{p}.cross.{proj}"), d, d);
            }
            b.norm(&format!("{p}.ln3"), d);
            b.linear(&format!("{p}.ffn.up"), d, config.ffn_width);
            b.linear(&format!("{p}.ffn.down"), config.ffn_width, d);
        }
        b.norm("dec.ln", d);
        b.add("head.w".into(), d, 1, Init::Zeros);
        b.add("head.b".into(), 1, 1, Init::Zeros);
        let params = b.params;
        Module { config, params }
    }

    /// Adds `N(0, std²)` noise to every parameter, output head included.
    pub fn jitter(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        for p in &mut self.params {
            for v in &mut p.data {
                *v += normal.sample(&mut rng);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Time-token features `[t', sin(ω_k t'), cos(ω_k t')]`, `ω_k = 2^(k-2)`.
    pub fn time_features(&self, t: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.config.time_features());
        f.push(t);
        for k in 0..self.config.time_frequencies {
            let w = 2f64.powi(k as i32 - 2);
            f.push((w * t).sin());
            f.push((w * t).cos());
        }
        f
    }

    /// Records a forward pass. `tokens` holds `items × seq` rows of
    /// [`TOKEN_FEATURES`]; `times` holds `items × per_item` normalized times.
    /// Returns the `(items·per_item) × 1` output node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &Tensor,
        seq: usize,
        times: &[f64],
        per_item: usize,
    ) -> NodeId {
        let cfg = &self.config;
        let d = cfg.width;
        assert_eq!(tokens.cols, TOKEN_FEATURES, "token feature width");
        assert_eq!(tokens.rows % seq, 0, "token rows not a multiple of seq");
        let items = tokens.rows / seq;
        assert_eq!(times.len(), items * per_item, "time count");

        let mut leaves = Leaves {
            ids: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, &p.tensor()))
                .collect(),
            next: 0,
        };

        // Encoder.
        let x = tape.input(tokens.clone());
        let mut h = linear(tape, x, leaves.linear());
        let mut pe = Vec::with_capacity(tokens.rows * d);
        for _ in 0..items {
            for pos in 0..seq {
                pe.extend(positional_encoding(pos, d));
            }
        }
        let pe = tape.input(Tensor::from_vec(tokens.rows, d, pe));
        h = tape.add(h, pe);
        for _ in 0..cfg.encoder_layers {
            let (g, b) = leaves.linear();
            let n = tape.layer_norm(h, g, b);
            let q = linear(tape, n, leaves.linear());
            let k = linear(tape, n, leaves.linear());
            let v = linear(tape, n, leaves.linear());
            let a = tape.attention(q, k, v, cfg.heads, seq, seq);
            let a = linear(tape, a, leaves.linear());
            h = tape.add(h, a);
            h = self.ffn(tape, h, &mut leaves);
        }
        let (g, b) = leaves.linear();
        let memory = tape.layer_norm(h, g, b);

        // Decoder: one token per queried time.
        let mut tf = Vec::with_capacity(times.len() * cfg.time_features());
        for &t in times {
            tf.extend(self.time_features(t));
        }
        let tf = tape.input(Tensor::from_vec(times.len(), cfg.time_features(), tf));
        let mut y = linear(tape, tf, leaves.linear());
        let pe0 = positional_encoding(0, d);
        let pe0 = tape.input(Tensor::from_vec(
            times.len(),
            d,
            pe0.iter().copied().cycle().take(times.len() * d).collect(),
        ));
        y = tape.add(y, pe0);
        for _ in 0..cfg.decoder_layers {
            // Self-attention over a single token reduces to its value path.
            let (g, b) = leaves.linear();
            let n = tape.layer_norm(y, g, b);
            let v = linear(tape, n, leaves.linear());
            let s = linear(tape, v, leaves.linear());
            y = tape.add(y, s);

            let (g, b) = leaves.linear();
            let n = tape.layer_norm(y, g, b);
            let q = linear(tape, n, leaves.linear());
            let k = linear(tape, memory, leaves.linear());
            let v = linear(tape, memory, leaves.linear());
            let a = tape.attention(q, k, v, cfg.heads, per_item, seq);
            let a = linear(tape, a, leaves.linear());
            y = tape.add(y, a);
            y = self.ffn(tape, y, &mut leaves);
        }
        let (g, b) = leaves.linear();
        let y = tape.layer_norm(y, g, b);
        let out = linear(tape, y, leaves.linear());
        debug_assert_eq!(leaves.next, self.params.len());
        out
    }

    fn ffn(&self, tape: &mut Tape, h: NodeId, leaves: &mut Leaves) -> NodeId {
        let (g, b) = leaves.linear();
        let n = tape.layer_norm(h, g, b);
        let u = linear(tape, n, leaves.linear());
        let u = tape.gelu(u);
        let u = linear(tape, u, leaves.linear());
        tape.add(h, u)
    }

    /// Forward pass without gradients, chunked over time points. Item `i` is
    /// queried at `times - shifts[i]`; returns `items × times.len()` values.
    pub fn predict(
        &self,
        tokens: &Tensor,
        seq: usize,
        times: &[f64],
        shifts: &[f64],
    ) -> Vec<Vec<f64>> {
        let items = tokens.rows / seq;
        assert_eq!(shifts.len(), items, "one shift per item");
        let mut out = vec![Vec::with_capacity(times.len()); items];
        if items == 0 || times.is_empty() {
            return out;
        }
        let chunk = (INFERENCE_ROWS / items).max(1);
        for part in times.chunks(chunk) {
            let mut tape = Tape::new();
            let all: Vec<f64> = shifts
                .iter()
                .flat_map(|&d| part.iter().map(move |t| t - d))
                .collect();
            let node = self.forward(&mut tape, tokens, seq, &all, part.len());
            let values = &tape.value(node).data;
            for (i, o) in out.iter_mut().enumerate() {
                o.extend_from_slice(&values[i * part.len()..(i + 1) * part.len()]);
            }
        }
        out
    }
}
