use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropouts {
    pub embedding: f64,
    pub dense: f64,
    pub attention: f64,
    pub lstm: f64,
}

impl Default for Dropouts {
    fn default() -> Self {
        Dropouts { embedding: 0.4, dense: 0.4, attention: 0.6, lstm: 0.5 }
    }
}

impl Dropouts {
    pub fn none() -> Self {
        Dropouts { embedding: 0.0, dense: 0.0, attention: 0.0, lstm: 0.0 }
    }
}

/// Model dimensions and training hyper-parameters.
///
/// `c` and `w` bound the clauses per window and tokens per clause; `d` is the
/// token-embedding size, `p` the projected size, `h` the attention LSTM size,
/// `d2` the dense layer size and `hidden` the per-direction BiLSTM size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggerConfig {
    pub c: usize,
    pub w: usize,
    pub d: usize,
    pub p: usize,
    pub h: usize,
    pub d2: usize,
    pub hidden: usize,
    pub lr: f64,
    pub dropouts: Dropouts,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_ratio: f64,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            c: 40,
            w: 60,
            d: 768,
            p: 200,
            h: 75,
            d2: 300,
            hidden: 350,
            lr: 1e-3,
            dropouts: Dropouts::default(),
            batch_size: 10,
            max_epochs: 20,
            patience: 2,
            validation_ratio: 0.1,
            seed: 0,
        }
    }
}

impl TaggerConfig {
    /// Small dimensions for desk-scale runs over synthetic embeddings. The
    /// learning rate is raised and every dropout rate halved: at these widths
    /// the full-size rates leave too few active units to fit the data.
    pub fn scaled_down() -> Self {
        let full = Dropouts::default();
        TaggerConfig {
            d: 16,
            p: 12,
            h: 8,
            d2: 16,
            hidden: 12,
            lr: 1e-2,
            dropouts: Dropouts {
                embedding: full.embedding / 2.0,
                dense: full.dense / 2.0,
                attention: full.attention / 2.0,
                lstm: full.lstm / 2.0,
            },
            ..TaggerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("c", self.c),
            ("w", self.w),
            ("d", self.d),
            ("p", self.p),
            ("h", self.h),
            ("d2", self.d2),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        let d = &self.dropouts;
        for (name, rate) in [("embedding", d.embedding), ("dense", d.dense), ("attention", d.attention), ("lstm", d.lstm)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} dropout {rate} outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_ratio) {
            return Err(Error::Config(format!("validation ratio {} outside [0, 1)", self.validation_ratio)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyper_parameters() {
        let c = TaggerConfig::default();
        assert_eq!((c.d, c.c, c.w, c.d2, c.p, c.h, c.hidden), (768, 40, 60, 300, 200, 75, 350));
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.dropouts, Dropouts { embedding: 0.4, dense: 0.4, attention: 0.6, lstm: 0.5 });
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (10, 20, 2));
        assert_eq!(c.validation_ratio, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TaggerConfig = serde_json::from_str(r#"{"d": 16, "dropouts": {"embedding":0,"dense":0,"attention":0,"lstm":0}}"#).unwrap();
        assert_eq!(c.d, 16);
        assert_eq!(c.hidden, 350);
        assert!(serde_json::from_str::<TaggerConfig>(r#"{"depth": 3}"#).is_err());
    }

    #[test]
    fn validation() {
        let mut c = TaggerConfig { lr: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.lr = 1e-3;
        c.dropouts.attention = 1.0;
        assert!(c.validate().is_err());
        c.dropouts.attention = 0.5;
        c.p = 0;
        assert!(c.validate().is_err());
    }
}
