//! Architecture strings such as `Cs256s128h8` and the full layer-size config.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Each embedding block keeps only its FPS centers.
    Classification,
    /// Each embedding block keeps every input point as a center.
    Segmentation,
    /// No embedding blocks; the stem feeds attention directly.
    NoEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionNorm {
    /// Softmax over keys, then L1 normalization over queries.
    OffsetL1,
    /// Softmax over keys of `QKᵀ / √d`.
    ScaledSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tail {
    /// Concatenate all pooled rows, in FPS pick order, into one vector.
    Flatten,
    /// Max over rows.
    MaxPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub mode: Mode,
    pub fps_samples: Vec<usize>,
    pub k: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub action_count: usize,
    pub point_cap: usize,
    pub attention_norm: AttentionNorm,
    pub tail: Tail,
}

impl NetworkConfig {
    /// Parses `N(sXXX){0,2}(hX)?` with `N` in `{C, S}`. A missing head count
    /// means one head. Zero sample counts select [`Mode::NoEmbedding`].
    pub fn parse(spec: &str) -> Result<Self> {
        let err = |token: &str, reason: &str| Error::Parse {
            input: spec.to_string(),
            token: token.to_string(),
            reason: reason.to_string(),
        };
        let mut chars = spec.char_indices().peekable();
        let mode = match chars.next() {
            Some((_, 'C')) => Mode::Classification,
            Some((_, 'S')) => Mode::Segmentation,
            Some((_, c)) => return Err(err(&c.to_string(), "expected mode letter C or S")),
            None => return Err(err("", "empty architecture string")),
        };
        let mut samples = Vec::new();
        let mut heads = None;
        while let Some((start, tag)) = chars.next() {
            let mut end = start + tag.len_utf8();
            while let Some(&(i, c)) = chars.peek() {
                if !c.is_ascii_digit() {
                    break;
                }
                end = i + 1;
                chars.next();
            }
            let token = &spec[start..end];
            let digits = &token[tag.len_utf8()..];
            if digits.is_empty() {
                return Err(err(token, "expected a number after the tag"));
            }
            let value: usize = digits.parse().map_err(|_| err(token, "number out of range"))?;
            match tag {
                's' if heads.is_some() => return Err(err(token, "sample counts must precede the head count")),
                's' if samples.len() == 2 => return Err(err(token, "at most two embedding blocks")),
                's' => samples.push(value),
                'h' if heads.is_some() => return Err(err(token, "duplicate head count")),
                'h' if value == 0 => return Err(err(token, "head count must be at least 1")),
                'h' => heads = Some(value),
                _ => return Err(err(token, "expected an sXXX or hX token")),
            }
        }
        let zeros = samples.iter().filter(|&&s| s == 0).count();
        if zeros > 0 && zeros < samples.len() {
            return Err(err(spec, "sample counts must be all zero or all positive"));
        }
        let mode = if zeros == samples.len() { Mode::NoEmbedding } else { mode };
        Ok(Self {
            mode,
            fps_samples: if mode == Mode::NoEmbedding { Vec::new() } else { samples },
            heads: heads.unwrap_or(1),
            ..Self::default()
        })
    }

    /// Inverse of [`NetworkConfig::parse`] for the architecture part.
    pub fn arch_string(&self) -> String {
        let mut s = String::from(match self.mode {
            Mode::Classification => "C",
            Mode::Segmentation | Mode::NoEmbedding => "S",
        });
        if self.mode == Mode::NoEmbedding {
            s.push_str("s0s0");
        }
        for n in &self.fps_samples {
            s.push_str(&format!("s{n}"));
        }
        s.push_str(&format!("h{}", self.heads));
        s
    }

    pub fn block_count(&self) -> usize {
        self.fps_samples.len()
    }

    /// Input and output widths of the stem layers.
    pub fn stem_widths(&self) -> [(usize, usize); 2] {
        let f = self.feature_dim;
        let last = if self.block_count() > 0 { f / 2 } else { f };
        [(6, f / 4), (f / 4, last)]
    }

    /// Input and output widths of each embedding block.
    pub fn block_widths(&self) -> Vec<(usize, usize)> {
        let f = self.feature_dim;
        match self.block_count() {
            0 => vec![],
            1 => vec![(f / 2, f)],
            _ => vec![(f / 2, f / 2), (f / 2, f)],
        }
    }

    /// Query and key width of each attention head.
    pub fn qk_dim(&self) -> usize {
        (self.feature_dim / 4).max(1)
    }

    /// Number of centers each block emits for an input of `point_cap` rows.
    pub fn block_points(&self) -> Vec<usize> {
        match self.mode {
            Mode::Segmentation => vec![self.point_cap; self.block_count()],
            _ => self.fps_samples.clone(),
        }
    }

    /// Rows reaching the pooling stage.
    pub fn pooled_rows(&self) -> usize {
        self.block_points().last().copied().unwrap_or(self.point_cap)
    }

    /// Width of the vector entering the dueling streams.
    pub fn tail_width(&self) -> usize {
        match self.tail {
            Tail::Flatten => self.pooled_rows() * 2 * self.feature_dim,
            Tail::MaxPool => 2 * self.feature_dim,
        }
    }

    /// Uniformly spaced return atoms on `[v_min, v_max]`.
    pub fn support(&self) -> Vec<f64> {
        support(self.v_min, self.v_max, self.atoms)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim < 4 {
            return bad(format!("feature_dim {} is below 4", self.feature_dim));
        }
        if self.heads == 0 || self.hidden_dim == 0 || self.k == 0 || self.point_cap == 0 {
            return bad("heads, hidden_dim, k and point_cap must be positive".into());
        }
        if self.atoms < 2 || !(self.v_min < self.v_max) {
            return bad(format!("need atoms >= 2 and v_min < v_max, got {} on [{}, {}]", self.atoms, self.v_min, self.v_max));
        }
        if self.action_count == 0 {
            return bad("action_count must be positive".into());
        }
        if self.fps_samples.len() > 2 {
            return bad("at most two embedding blocks".into());
        }
        let mut available = self.point_cap;
        for (i, &n) in self.block_points().iter().enumerate() {
            if n == 0 || n > available {
                return bad(format!("block {i} samples {n} centers from {available} points"));
            }
            if self.k > available {
                return bad(format!("block {i} needs k = {} neighbors from {available} points", self.k));
            }
            available = n;
        }
        Ok(())
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Classification,
            fps_samples: vec![256, 128],
            k: 32,
            heads: 1,
            feature_dim: 256,
            hidden_dim: 256,
            atoms: 51,
            v_min: 0.0,
            v_max: 415.0,
            action_count: 6,
            point_cap: 512,
            attention_norm: AttentionNorm::OffsetL1,
            tail: Tail::Flatten,
        }
    }
}

pub fn support(v_min: f64, v_max: f64, atoms: usize) -> Vec<f64> {
    let span = v_max - v_min;
    (0..atoms).map(|i| v_min + span * i as f64 / (atoms - 1) as f64).collect()
}
