use crate::error::{Error, Result};

/// The seven projection matrices of a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    pub fn key(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
            Proj::Gate => "w_gate",
            Proj::Up => "w_up",
            Proj::Down => "w_down",
        }
    }

    pub fn from_key(key: &str) -> Option<Proj> {
        Proj::ALL.into_iter().find(|p| p.key() == key)
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, Proj::Gate | Proj::Up | Proj::Down)
    }
}

/// Parameter name of projection `proj` in layer `layer`.
pub fn proj_name(layer: usize, proj: Proj) -> String {
    format!("layers.{layer}.{}", proj.key())
}

/// Splits `layers.<i>.<proj>` back into its parts.
pub fn parse_proj_name(name: &str) -> Option<(usize, Proj)> {
    let rest = name.strip_prefix("layers.")?;
    let (layer, key) = rest.split_once('.')?;
    Some((layer.parse().ok()?, Proj::from_key(key)?))
}

pub const EMBED: &str = "embed";
pub const FINAL_NORM: &str = "final_norm";

/// Architecture hyperparameters of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub head_dim: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub ffn_hidden_dim: usize,
    pub rope_base: f64,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

/// Analytic parameter totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub embedding: usize,
    pub non_embedding: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embedding + self.non_embedding
    }
}

impl ModelConfig {
    /// The 3B-class on-device configuration; FFN width 8/3 of `model_dim`
    /// and a 49k vocabulary.
    pub fn reference() -> Self {
        Self {
            model_dim: 3072,
            head_dim: 128,
            n_query_heads: 24,
            n_kv_heads: 8,
            n_layers: 26,
            vocab_size: 49_152,
            ffn_hidden_dim: 8192,
            rope_base: 500_000.0,
            max_seq_len: 4096,
            norm_eps: 1e-5,
        }
    }

    /// Small byte-level configuration used by tests and toy experiments.
    pub fn toy() -> Self {
        Self {
            model_dim: 64,
            head_dim: 16,
            n_query_heads: 4,
            n_kv_heads: 2,
            n_layers: 2,
            vocab_size: crate::data::VOCAB_SIZE,
            ffn_hidden_dim: 128,
            rope_base: 500_000.0,
            max_seq_len: 512,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("n_query_heads", self.n_query_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !self.n_query_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_query_heads {} not divisible by n_kv_heads {}",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {} must be even for rotary embedding", self.head_dim)));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::Config(format!("rope_base {} must be positive", self.rope_base)));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config(format!("norm_eps {} must be non-negative", self.norm_eps)));
        }
        Ok(())
    }

    pub fn q_width(&self) -> usize {
        self.n_query_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    /// (input, output) extents of a projection stored as `[in, out]`.
    pub fn proj_shape(&self, proj: Proj) -> [usize; 2] {
        let (d, f) = (self.model_dim, self.ffn_hidden_dim);
        match proj {
            Proj::Q => [d, self.q_width()],
            Proj::K | Proj::V => [d, self.kv_width()],
            Proj::O => [self.q_width(), d],
            Proj::Gate | Proj::Up => [d, f],
            Proj::Down => [f, d],
        }
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(EMBED.to_string(), vec![self.vocab_size, self.model_dim])];
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.attn_norm"), vec![self.model_dim]));
            for p in [Proj::Q, Proj::K, Proj::V] {
                out.push((proj_name(l, p), self.proj_shape(p).to_vec()));
            }
            out.push((format!("layers.{l}.q_norm"), vec![self.n_query_heads, self.head_dim]));
            out.push((format!("layers.{l}.k_norm"), vec![self.n_kv_heads, self.head_dim]));
            out.push((proj_name(l, Proj::O), self.proj_shape(Proj::O).to_vec()));
            out.push((format!("layers.{l}.ffn_norm"), vec![self.model_dim]));
            for p in [Proj::Gate, Proj::Up, Proj::Down] {
                out.push((proj_name(l, p), self.proj_shape(p).to_vec()));
            }
        }
        out.push((FINAL_NORM.to_string(), vec![self.model_dim]));
        out
    }

    /// Parameter totals from shapes alone; nothing is allocated.
    pub fn param_counts(&self) -> ParamCounts {
        let mut counts = ParamCounts {
            embedding: 0,
            non_embedding: 0,
        };
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            if name == EMBED {
                counts.embedding += n;
            } else {
                counts.non_embedding += n;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_split_matches_published_table() {
        let c = ModelConfig::reference().param_counts();
        let non_emb = c.non_embedding as f64 / 1e9;
        let emb = c.embedding as f64 / 1e9;
        assert!((non_emb - 2.58).abs() / 2.58 < 0.02, "non-embedding {non_emb}");
        assert!((emb - 0.15).abs() / 0.15 < 0.02, "embedding {emb}");
    }

    #[test]
    fn rejects_bad_grouping() {
        let mut c = ModelConfig::toy();
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.head_dim = 15;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.rope_base = 0.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::toy().validate().is_ok());
    }

    #[test]
    fn proj_names_round_trip() {
        for p in Proj::ALL {
            assert_eq!(parse_proj_name(&proj_name(3, p)), Some((3, p)));
        }
        assert_eq!(parse_proj_name("layers.0.attn_norm"), None);
    }
}
