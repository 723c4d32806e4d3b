use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::AggregatorKind;

/// Alignment network widths. The network maps a `d`-dimensional set to a
/// `d×d` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TNetSpec {
    pub input_dim: usize,
    pub mlp_widths: Vec<usize>,
    pub fc_widths: Vec<usize>,
}

impl TNetSpec {
    pub fn new(input_dim: usize) -> Self {
        TNetSpec {
            input_dim,
            mlp_widths: vec![64, 128, 1024],
            fc_widths: vec![512, 256],
        }
    }
}

/// Task-specific part of the network.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadSpec {
    /// Global feature → FC stack → dropout → class scores.
    Classify {
        num_classes: usize,
        fc_widths: Vec<usize>,
        dropout_keep: f64,
    },
    /// Per-point feature ++ global feature → per-point MLP → part scores.
    /// `categories` enables the one-hot category vector and skip links.
    Segment {
        num_parts: usize,
        head_widths: Vec<usize>,
        categories: Option<usize>,
    },
    /// Segmentation backbone regressing a 3-vector per point.
    Normals { head_widths: Vec<usize> },
}

/// Complete architecture description. Everything else (parameter layout,
/// counts, checkpoints) is a pure function of this value.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub use_input_transform: bool,
    pub use_feature_transform: bool,
    /// Per-point widths before the feature transform.
    pub pre_widths: Vec<usize>,
    /// Per-point widths after the feature transform, excluding the bottleneck.
    pub post_widths: Vec<usize>,
    /// Width `K` of the aggregated layer.
    pub bottleneck: usize,
    pub aggregator: AggregatorKind,
    pub tnet_mlp_widths: Vec<usize>,
    pub tnet_fc_widths: Vec<usize>,
    pub head: HeadSpec,
    pub reg_weight: f64,
}

pub type ClassifierSpec = ModelSpec;
pub type SegmenterSpec = ModelSpec;

impl ModelSpec {
    fn backbone(head: HeadSpec) -> Self {
        let t = TNetSpec::new(3);
        ModelSpec {
            input_dim: 3,
            use_input_transform: true,
            use_feature_transform: true,
            pre_widths: vec![64, 64],
            post_widths: vec![64, 128],
            bottleneck: 1024,
            aggregator: AggregatorKind::Max,
            tnet_mlp_widths: t.mlp_widths,
            tnet_fc_widths: t.fc_widths,
            head,
            reg_weight: 0.001,
        }
    }

    /// Full classification network with both alignment networks.
    pub fn classifier(num_classes: usize) -> Self {
        Self::backbone(HeadSpec::Classify {
            num_classes,
            fc_widths: vec![512, 256],
            dropout_keep: 0.7,
        })
    }

    pub fn segmenter(num_parts: usize) -> Self {
        Self::backbone(HeadSpec::Segment {
            num_parts,
            head_widths: vec![512, 256, 128, 128],
            categories: None,
        })
    }

    pub fn normals() -> Self {
        Self::backbone(HeadSpec::Normals {
            head_widths: vec![512, 256, 128, 128],
        })
    }

    pub fn with_transforms(mut self, input: bool, feature: bool) -> Self {
        self.use_input_transform = input;
        self.use_feature_transform = feature;
        self
    }

    /// No alignment networks.
    pub fn vanilla(self) -> Self {
        self.with_transforms(false, false)
    }

    pub fn with_bottleneck(mut self, k: usize) -> Self {
        self.bottleneck = k;
        self
    }

    pub fn with_input_dim(mut self, d: usize) -> Self {
        self.input_dim = d;
        self
    }

    pub fn with_aggregator(mut self, kind: AggregatorKind) -> Self {
        self.aggregator = kind;
        self
    }

    pub fn with_reg_weight(mut self, w: f64) -> Self {
        self.reg_weight = w;
        self
    }

    pub fn with_categories(mut self, count: usize) -> Self {
        if let HeadSpec::Segment { categories, .. } = &mut self.head {
            *categories = Some(count);
        }
        self
    }

    /// Width of the per-point features fed to the feature transform and
    /// concatenated into the segmentation head.
    pub fn local_width(&self) -> usize {
        *self.pre_widths.last().unwrap_or(&self.input_dim)
    }

    pub fn input_tnet(&self) -> TNetSpec {
        TNetSpec {
            input_dim: self.input_dim,
            mlp_widths: self.tnet_mlp_widths.clone(),
            fc_widths: self.tnet_fc_widths.clone(),
        }
    }

    pub fn feature_tnet(&self) -> TNetSpec {
        TNetSpec {
            input_dim: self.local_width(),
            ..self.input_tnet()
        }
    }

    /// Input width of the per-point segmentation head.
    pub fn seg_head_input_width(&self) -> usize {
        match &self.head {
            HeadSpec::Segment {
                categories: Some(c), ..
            } => {
                let skips: usize = self.pre_widths.iter().sum::<usize>() + self.post_widths.iter().sum::<usize>();
                skips + self.bottleneck + c
            }
            _ => self.local_width() + self.bottleneck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 || self.bottleneck == 0 {
            return bad("input_dim and bottleneck must be positive");
        }
        if self.pre_widths.is_empty() {
            return bad("pre_widths must not be empty");
        }
        let widths = [
            &self.pre_widths,
            &self.post_widths,
            &self.tnet_mlp_widths,
            &self.tnet_fc_widths,
        ];
        if widths.iter().any(|w| w.contains(&0)) {
            return bad("layer widths must be positive");
        }
        if (self.use_input_transform || self.use_feature_transform) && self.tnet_mlp_widths.is_empty() {
            return bad("alignment networks need at least one per-point layer");
        }
        if !(self.reg_weight >= 0.0) {
            return bad("reg_weight must be non-negative");
        }
        match &self.head {
            HeadSpec::Classify {
                num_classes,
                dropout_keep,
                ..
            } => {
                if *num_classes < 2 {
                    return bad("a classifier needs at least two classes");
                }
                if !(*dropout_keep > 0.0 && *dropout_keep <= 1.0) {
                    return bad("dropout keep ratio must be in (0, 1]");
                }
            }
            HeadSpec::Segment { num_parts, categories, .. } => {
                if *num_parts < 1 || *categories == Some(0) {
                    return bad("segmenter needs parts (and categories when conditioned)");
                }
            }
            HeadSpec::Normals { .. } => {}
        }
        Ok(())
    }

    /// Flat `key = value` description, the same keys as the `model.*`
    /// section of an experiment config.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |w: &[usize]| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = vec![
            ("model.input_dim", self.input_dim.to_string()),
            ("model.input_transform", self.use_input_transform.to_string()),
            ("model.feature_transform", self.use_feature_transform.to_string()),
            ("model.pre_widths", list(&self.pre_widths)),
            ("model.post_widths", list(&self.post_widths)),
            ("model.k", self.bottleneck.to_string()),
            ("model.aggregator", self.aggregator.to_string()),
            ("model.tnet_mlp", list(&self.tnet_mlp_widths)),
            ("model.tnet_fc", list(&self.tnet_fc_widths)),
            ("model.reg_weight", fmt_f64(self.reg_weight)),
        ];
        match &self.head {
            HeadSpec::Classify {
                num_classes,
                fc_widths,
                dropout_keep,
            } => {
                kv.push(("model.head", "classify".into()));
                kv.push(("model.classes", num_classes.to_string()));
                kv.push(("model.fc_widths", list(fc_widths)));
                kv.push(("model.dropout_keep", fmt_f64(*dropout_keep)));
            }
            HeadSpec::Segment {
                num_parts,
                head_widths,
                categories,
            } => {
                kv.push(("model.head", "segment".into()));
                kv.push(("model.parts", num_parts.to_string()));
                kv.push(("model.head_widths", list(head_widths)));
                kv.push(("model.categories", categories.unwrap_or(0).to_string()));
            }
            HeadSpec::Normals { head_widths } => {
                kv.push(("model.head", "normals".into()));
                kv.push(("model.head_widths", list(head_widths)));
            }
        }
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies one `model.*` key. Returns `Ok(false)` for keys outside the
    /// model section.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model.input_dim" => self.input_dim = parse(key, value)?,
            "model.input_transform" => self.use_input_transform = parse(key, value)?,
            "model.feature_transform" => self.use_feature_transform = parse(key, value)?,
            "model.pre_widths" => self.pre_widths = parse_list(key, value)?,
            "model.post_widths" => self.post_widths = parse_list(key, value)?,
            "model.k" => self.bottleneck = parse(key, value)?,
            "model.aggregator" => self.aggregator = value.parse()?,
            "model.tnet_mlp" => self.tnet_mlp_widths = parse_list(key, value)?,
            "model.tnet_fc" => self.tnet_fc_widths = parse_list(key, value)?,
            "model.reg_weight" => self.reg_weight = parse(key, value)?,
            "model.head" => {
                let same = matches!(
                    (&self.head, value),
                    (HeadSpec::Classify { .. }, "classify")
                        | (HeadSpec::Segment { .. }, "segment")
                        | (HeadSpec::Normals { .. }, "normals")
                );
                if !same {
                    self.head = match value {
                        "classify" => Self::classifier(2).head,
                        "segment" => Self::segmenter(1).head,
                        "normals" => Self::normals().head,
                        other => return Err(Error::Config(format!("unknown head `{other}`"))),
                    };
                }
            }
            "model.classes" | "model.fc_widths" | "model.dropout_keep" => match &mut self.head {
                HeadSpec::Classify {
                    num_classes,
                    fc_widths,
                    dropout_keep,
                } => match key {
                    "model.classes" => *num_classes = parse(key, value)?,
                    "model.fc_widths" => *fc_widths = parse_list(key, value)?,
                    _ => *dropout_keep = parse(key, value)?,
                },
                _ => return Err(Error::Config(format!("`{key}` only applies to the classify head"))),
            },
            "model.parts" | "model.categories" => match &mut self.head {
                HeadSpec::Segment {
                    num_parts, categories, ..
                } => {
                    if key == "model.parts" {
                        *num_parts = parse(key, value)?;
                    } else {
                        let c: usize = parse(key, value)?;
                        *categories = (c > 0).then_some(c);
                    }
                }
                _ => return Err(Error::Config(format!("`{key}` only applies to the segment head"))),
            },
            "model.head_widths" => match &mut self.head {
                HeadSpec::Segment { head_widths, .. } | HeadSpec::Normals { head_widths } => {
                    *head_widths = parse_list(key, value)?
                }
                _ => return Err(Error::Config(format!("`{key}` does not apply to the classify head"))),
            },
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses the output of [`ModelSpec::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::classifier(2);
        // the head key must be applied first so head-specific keys land
        let pairs: Vec<(&str, &str)> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::Format(format!("bad spec line `{l}`")))
            })
            .collect::<Result<_>>()?;
        if let Some((k, v)) = pairs.iter().find(|(k, _)| *k == "model.head") {
            spec.apply_kv(k, v)?;
        }
        for (k, v) in pairs {
            if !spec.apply_kv(k, v)? {
                return Err(Error::Format(format!("unknown spec key `{k}`")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}
