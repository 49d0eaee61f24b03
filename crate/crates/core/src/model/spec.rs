use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One module: `convs` conv layers with `channels` outputs each, the first
/// one stride 2 when `downsample` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
    pub downsample: bool,
}

/// Architecture of a plain CNN.
///
/// Text form: `input=CxHxW stages=16x2,32x2/2 classes=4`, where each stage
/// token is `channels x convs`, suffixed with `/2` to downsample on entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

impl ModelSpec {
    /// Conventional layout: first stage at full resolution, every later
    /// stage downsamples.
    pub fn plain(input_shape: [usize; 3], stages: &[(usize, usize)], num_classes: usize) -> Self {
        Self {
            stages: stages
                .iter()
                .enumerate()
                .map(|(i, &(channels, convs))| StageSpec {
                    channels,
                    convs,
                    downsample: i > 0,
                })
                .collect(),
            num_classes,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Spec("a model needs at least one stage".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Spec("classes must be positive".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        for (m, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.convs == 0 {
                return Err(Error::Spec(format!("stage {m} needs positive channels and conv count")));
            }
        }
        self.spatial_sizes().map(|_| ())
    }

    /// Output spatial size `k_m` of every stage (square inputs assumed per
    /// axis; height and width are tracked separately and must agree).
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let [_, mut h, mut w] = self.input_shape;
        let mut sizes = Vec::with_capacity(self.stages.len());
        for (m, s) in self.stages.iter().enumerate() {
            if s.downsample {
                if h < 2 || w < 2 {
                    return Err(Error::Spec(format!(
                        "input too small: stage {m} would downsample a {h}x{w} map"
                    )));
                }
                h = (h - 1) / 2 + 1;
                w = (w - 1) / 2 + 1;
            }
            if h != w {
                return Err(Error::Spec(format!("stage {m} map is {h}x{w}; only square maps are supported")));
            }
            sizes.push(h);
        }
        Ok(sizes)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}x{}{}", s.channels, s.convs, if s.downsample { "/2" } else { "" }))
            .collect();
        write!(f, "input={c}x{h}x{w} stages={} classes={}", stages.join(","), self.num_classes)
    }
}

fn parse_num(tok: &str, what: &str) -> Result<usize> {
    tok.trim()
        .parse()
        .map_err(|_| Error::Spec(format!("bad {what} `{tok}`")))
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut input, mut stages, mut classes) = (None, None, None);
        for field in s.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("expected key=value, got `{field}`")))?;
            match key {
                "input" => {
                    let dims: Vec<usize> = value
                        .split('x')
                        .map(|d| parse_num(d, "input extent"))
                        .collect::<Result<_>>()?;
                    let dims: [usize; 3] = dims
                        .try_into()
                        .map_err(|_| Error::Spec(format!("input must be CxHxW, got `{value}`")))?;
                    input = Some(dims);
                }
                "stages" => {
                    let parsed = value
                        .split(',')
                        .map(|tok| {
                            let (body, downsample) = match tok.strip_suffix("/2") {
                                Some(b) => (b, true),
                                None => (tok, false),
                            };
                            let (ch, n) = body
                                .split_once('x')
                                .ok_or_else(|| Error::Spec(format!("stage must be CxN, got `{tok}`")))?;
                            Ok(StageSpec {
                                channels: parse_num(ch, "stage channels")?,
                                convs: parse_num(n, "stage conv count")?,
                                downsample,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    stages = Some(parsed);
                }
                "classes" => classes = Some(parse_num(value, "class count")?),
                other => return Err(Error::Spec(format!("unknown model spec key `{other}`"))),
            }
        }
        let spec = ModelSpec {
            stages: stages.ok_or_else(|| Error::Spec("model spec lacks stages=".into()))?,
            num_classes: classes.ok_or_else(|| Error::Spec("model spec lacks classes=".into()))?,
            input_shape: input.ok_or_else(|| Error::Spec("model spec lacks input=".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}
