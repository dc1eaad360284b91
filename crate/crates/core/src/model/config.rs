use crate::error::{Error, Result};
use crate::gaussian_graph::AdjacencyNorm;

/// Every hyper-parameter of the graph module and its training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of the incoming token embeddings.
    pub input_width: usize,
    /// Node width `d` inside the graph module.
    pub width: usize,
    /// Gaussian width `g`.
    pub gaussian_width: usize,
    /// Number of views `N`.
    pub views: usize,
    /// Dense sub-layers `M` per convolution block.
    pub sublayers: usize,
    /// Pooling stages `D`. Zero skips pooling (one convolution, max over all nodes).
    pub pool_stages: usize,
    /// Per-view pooling ratio lower bound `r`.
    pub ratio: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub classes: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adjacency_norm: AdjacencyNorm,
    /// Run a fresh Gaussian generator on every stage instead of slicing the
    /// first stage's adjacency.
    pub regenerate_edges: bool,
    /// Use `(A + I) / 2` in convolution and pooling scores.
    pub self_loops: bool,
    /// Replace the Gaussian generator by row-softmaxed bilinear scores.
    pub attention_edges: bool,
    /// One pooling projector per stage instead of a shared one.
    pub per_stage_pool: bool,
    /// Use a learned start vector for `h0` instead of the CLS row.
    pub trainable_cls: bool,
}

impl ModelConfig {
    fn base() -> Self {
        Self {
            input_width: 768,
            width: 300,
            gaussian_width: 64,
            views: 3,
            sublayers: 2,
            pool_stages: 3,
            ratio: 0.7,
            gamma: 1.0,
            lambda: 1e-6,
            classes: 2,
            dropout: 0.5,
            learning_rate: 3e-5,
            batch_size: 24,
            epochs: 20,
            seed: 1,
            adjacency_norm: AdjacencyNorm::RowSum,
            regenerate_edges: false,
            self_loops: true,
            attention_edges: false,
            per_stage_pool: false,
            trainable_cls: false,
        }
    }

    /// Dialogue-level defaults.
    pub fn dialogre() -> Self {
        Self {
            classes: 36,
            ..Self::base()
        }
    }

    /// Sentence-level defaults.
    pub fn tacred() -> Self {
        Self {
            classes: 42,
            ratio: 0.8,
            lambda: 2e-4,
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 10,
            ..Self::base()
        }
    }

    /// Small enough for finite differences over every parameter:
    /// `T=8`-scale inputs, `d=16`, `g=8`, `N=2`, `M=2`, `D=2`, `r=0.5`.
    pub fn tiny() -> Self {
        Self {
            input_width: 16,
            width: 16,
            gaussian_width: 8,
            views: 2,
            sublayers: 2,
            pool_stages: 2,
            ratio: 0.5,
            gamma: 1.0,
            lambda: 1e-3,
            classes: 4,
            dropout: 0.0,
            ..Self::dialogre()
        }
    }

    /// Dialogue defaults scaled down to `d=64` for the planted-trigger task.
    /// Synthetic sequences carry no encoder CLS row, so the start vector is
    /// learned.
    pub fn planted() -> Self {
        Self {
            input_width: 32,
            width: 64,
            classes: 5,
            learning_rate: 1e-3,
            epochs: 30,
            trainable_cls: true,
            ..Self::dialogre()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "dialogre" => Ok(Self::dialogre()),
            "tacred" => Ok(Self::tacred()),
            "tiny" => Ok(Self::tiny()),
            "planted" => Ok(Self::planted()),
            other => Err(Error::config(
                "profile",
                format!("unknown profile `{other}` (dialogre, tacred, tiny, planted)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.input_width == 0 {
            return fail("input_width", "must be positive".into());
        }
        if self.width == 0 || self.sublayers == 0 || !self.width.is_multiple_of(self.sublayers) {
            return fail(
                "width",
                format!("width {} must be a positive multiple of sublayers {}", self.width, self.sublayers),
            );
        }
        if self.gaussian_width == 0 {
            return fail("gaussian_width", "must be positive".into());
        }
        if self.views == 0 {
            return fail("views", "need at least one view".into());
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return fail("ratio", format!("{} outside (0, 1]", self.ratio));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail("gamma", format!("{} must be positive", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda", format!("{} must be non-negative", self.lambda));
        }
        if self.classes == 0 {
            return fail("classes", "need at least one class".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", format!("{} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        Ok(())
    }

    /// Convolution blocks in the network: one per pooling stage, at least one.
    pub fn conv_stages(&self) -> usize {
        self.pool_stages.max(1)
    }

    /// Width of the stacked survivor features fed to the readout.
    pub fn readout_width(&self) -> usize {
        self.width * self.pool_stages.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::dialogre().validate().unwrap();
        ModelConfig::tacred().validate().unwrap();
        assert!(ModelConfig::profile("squad").is_err());
    }

    #[test]
    fn invalid_fields_name_their_key() {
        let cases: Vec<(&str, ModelConfig)> = vec![
            ("width", ModelConfig { sublayers: 7, ..ModelConfig::dialogre() }),
            ("views", ModelConfig { views: 0, ..ModelConfig::dialogre() }),
            ("ratio", ModelConfig { ratio: 0.0, ..ModelConfig::dialogre() }),
            ("ratio", ModelConfig { ratio: 1.5, ..ModelConfig::dialogre() }),
            ("gamma", ModelConfig { gamma: 0.0, ..ModelConfig::dialogre() }),
            ("lambda", ModelConfig { lambda: -1.0, ..ModelConfig::dialogre() }),
            ("dropout", ModelConfig { dropout: 1.0, ..ModelConfig::dialogre() }),
        ];
        for (key, cfg) in cases {
            match cfg.validate() {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }
}
